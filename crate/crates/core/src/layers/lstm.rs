//! LSTM recurrence as a single tape op with hand-written backpropagation
//! through time, plus the bidirectional wrapper.
//!
//! Gate layout inside the `4H` axis is `[input, forget, cell, output]`:
//!
//! ```text
//! a_t = W·(x_t⊙m_x) + U·(h_{t−1}⊙m_h) + b
//! c_t = σ(a_f)⊙c_{t−1} + σ(a_i)⊙φ(a_g)
//! h_t = σ(a_o)⊙φ(c_t)
//! ```
//!
//! `φ` is tanh or relu; `m_x`, `m_h` are optional dropout masks held fixed
//! across time steps.

use rand_chacha::ChaCha8Rng;

use super::init::{glorot_uniform, orthogonal};
use super::Ctx;
use crate::autodiff::{Activation, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub hidden: usize,
    pub activation: Activation,
    /// Process the sequence last step first. Outputs stay aligned with inputs.
    pub reverse: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LstmMasks<T> {
    pub input: Option<Vec<T>>,
    pub recurrent: Option<Vec<T>>,
}

fn sigmoid<T: Real>(x: T) -> T {
    crate::autodiff::sigmoid(x)
}

impl<T: Real> Graph<T> {
    /// Runs one LSTM layer over `x: [S × F]` from zero state; returns `[S × H]`.
    pub fn lstm(&self, x: Var, w: Var, u: Var, b: Var, cell: LstmCell, masks: LstmMasks<T>) -> Result<Var> {
        let (xv, wv, uv, bv) = (self.value(x), self.value(w), self.value(u), self.value(b));
        let (s, f) = xv.dims2()?;
        let h = cell.hidden;
        let g4 = 4 * h;
        if wv.shape() != [g4, f] || uv.shape() != [g4, h] || bv.shape() != [g4] {
            return Err(Error::shape(format!(
                "lstm: input [{s} × {f}], hidden {h}; got W {:?}, U {:?}, b {:?}",
                wv.shape(),
                uv.shape(),
                bv.shape()
            )));
        }
        if masks.input.as_ref().is_some_and(|m| m.len() != f) || masks.recurrent.as_ref().is_some_and(|m| m.len() != h) {
            return Err(Error::shape("lstm: dropout mask length mismatch"));
        }
        let act = cell.activation;
        let order: Vec<usize> = if cell.reverse { (0..s).rev().collect() } else { (0..s).collect() };

        // per processing step k: post-activation gates, cell state, φ(c)
        let mut gates = vec![T::zero(); s * g4];
        let mut cs = vec![T::zero(); s * h];
        let mut phis = vec![T::zero(); s * h];
        let mut hs = vec![T::zero(); s * h];
        let mut xin = vec![T::zero(); f];
        let mut hin = vec![T::zero(); h];
        let mut a = vec![T::zero(); g4];
        for (k, &t) in order.iter().enumerate() {
            for (j, v) in xin.iter_mut().enumerate() {
                let m = masks.input.as_ref().map_or(T::one(), |m| m[j]);
                *v = xv.data()[t * f + j] * m;
            }
            for (j, v) in hin.iter_mut().enumerate() {
                let prev = if k == 0 { T::zero() } else { hs[(k - 1) * h + j] };
                let m = masks.recurrent.as_ref().map_or(T::one(), |m| m[j]);
                *v = prev * m;
            }
            for r in 0..g4 {
                let wr = &wv.data()[r * f..(r + 1) * f];
                let ur = &uv.data()[r * h..(r + 1) * h];
                let sx: T = wr.iter().zip(&xin).map(|(&p, &q)| p * q).sum();
                let sh: T = ur.iter().zip(&hin).map(|(&p, &q)| p * q).sum();
                a[r] = sx + sh + bv.data()[r];
            }
            let gk = &mut gates[k * g4..(k + 1) * g4];
            for j in 0..h {
                let i_g = sigmoid(a[j]);
                let f_g = sigmoid(a[h + j]);
                let c_g = act.apply(a[2 * h + j]);
                let o_g = sigmoid(a[3 * h + j]);
                gk[j] = i_g;
                gk[h + j] = f_g;
                gk[2 * h + j] = c_g;
                gk[3 * h + j] = o_g;
                let c_prev = if k == 0 { T::zero() } else { cs[(k - 1) * h + j] };
                let c = f_g * c_prev + i_g * c_g;
                let phi = act.apply(c);
                cs[k * h + j] = c;
                phis[k * h + j] = phi;
                hs[k * h + j] = o_g * phi;
            }
        }
        let mut out = vec![T::zero(); s * h];
        for (k, &t) in order.iter().enumerate() {
            out[t * h..(t + 1) * h].copy_from_slice(&hs[k * h..(k + 1) * h]);
        }
        let out = Tensor::new(&[s, h], out)?;

        Ok(self.push_op("lstm", out, &[x, w, u, b], move |g, sink| {
            let mut dw = vec![T::zero(); g4 * f];
            let mut du = vec![T::zero(); g4 * h];
            let mut db = vec![T::zero(); g4];
            let mut dx = vec![T::zero(); s * f];
            let mut dh_next = vec![T::zero(); h];
            let mut dc_next = vec![T::zero(); h];
            let mut da = vec![T::zero(); g4];
            let mut xin = vec![T::zero(); f];
            let mut hin = vec![T::zero(); h];
            let mx = |j: usize| masks.input.as_ref().map_or(T::one(), |m| m[j]);
            let mh = |j: usize| masks.recurrent.as_ref().map_or(T::one(), |m| m[j]);
            for k in (0..s).rev() {
                let t = order[k];
                let gk = &gates[k * g4..(k + 1) * g4];
                for j in 0..h {
                    let dh = g[t * h + j] + dh_next[j];
                    let (i_g, f_g, c_g, o_g) = (gk[j], gk[h + j], gk[2 * h + j], gk[3 * h + j]);
                    let c = cs[k * h + j];
                    let phi = phis[k * h + j];
                    let c_prev = if k == 0 { T::zero() } else { cs[(k - 1) * h + j] };
                    let dc = dc_next[j] + dh * o_g * act.derivative(c, phi);
                    let one = T::one();
                    da[j] = dc * c_g * i_g * (one - i_g);
                    da[h + j] = dc * c_prev * f_g * (one - f_g);
                    // φ′ of the cell candidate, expressed through its output
                    let pre_sign = if c_g > T::zero() { one } else { T::zero() };
                    let dcand = match act {
                        Activation::Relu => pre_sign,
                        _ => act.derivative(T::zero(), c_g),
                    };
                    da[2 * h + j] = dc * i_g * dcand;
                    da[3 * h + j] = dh * phi * o_g * (one - o_g);
                    dc_next[j] = dc * f_g;
                }
                for j in 0..f {
                    xin[j] = xv.data()[t * f + j] * mx(j);
                }
                for j in 0..h {
                    hin[j] = if k == 0 { T::zero() } else { hs[(k - 1) * h + j] * mh(j) };
                }
                dh_next.iter_mut().for_each(|v| *v = T::zero());
                for r in 0..g4 {
                    let d = da[r];
                    if d == T::zero() {
                        continue;
                    }
                    db[r] = db[r] + d;
                    let wr = &wv.data()[r * f..(r + 1) * f];
                    let ur = &uv.data()[r * h..(r + 1) * h];
                    for j in 0..f {
                        dw[r * f + j] = dw[r * f + j] + d * xin[j];
                        dx[t * f + j] = dx[t * f + j] + d * wr[j];
                    }
                    for j in 0..h {
                        du[r * h + j] = du[r * h + j] + d * hin[j];
                        dh_next[j] = dh_next[j] + d * ur[j];
                    }
                }
                for j in 0..f {
                    dx[t * f + j] = dx[t * f + j] * mx(j);
                }
                for (j, v) in dh_next.iter_mut().enumerate() {
                    *v = *v * mh(j);
                }
            }
            sink.add(x, &dx);
            sink.add(w, &dw);
            sink.add(u, &du);
            sink.add(b, &db);
        }))
    }
}

/// One unidirectional LSTM layer.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub cell: LstmCell,
    pub input: usize,
}

impl Lstm {
    /// Glorot input weights, orthogonal recurrent weights, zero bias except
    /// the forget gate, which starts at 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        activation: Activation,
        reverse: bool,
    ) -> Self {
        let g4 = 4 * hidden;
        let w = store.add(format!("{name}.w"), group, glorot_uniform(rng, &[g4, input], input, g4));
        let u = store.add(format!("{name}.u"), group, orthogonal(rng, g4, hidden));
        let bias = Tensor::from_fn(&[g4], |i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() });
        let b = store.add(format!("{name}.b"), group, bias);
        Lstm { w, u, b, cell: LstmCell { hidden, activation, reverse }, input }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let masks = LstmMasks {
            input: ctx.dropout_mask(self.input, dropout),
            recurrent: ctx.dropout_mask(self.cell.hidden, dropout),
        };
        ctx.g.lstm(x, ctx.p(self.w), ctx.p(self.u), ctx.p(self.b), self.cell, masks)
    }
}

/// Forward and backward LSTMs with outputs concatenated: `[S × 2H]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, group: ParamGroup, input: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), group, input, hidden, Activation::Tanh, false),
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), group, input, hidden, Activation::Tanh, true),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.fwd.cell.hidden
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let a = self.fwd.forward(ctx, x, dropout)?;
        let b = self.bwd.forward(ctx, x, dropout)?;
        ctx.g.concat(&[a, b], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::{RngExt, SeedableRng};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], s: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-s..s))
    }

    /// The same recurrence spelled out with primitive tape ops.
    fn step_oracle(g: &Graph<f64>, x: Var, w: Var, u: Var, b: Var, h: usize, reverse: bool, act: Activation) -> Var {
        let s = g.shape(x)[0];
        let wt = g.transpose(w).unwrap();
        let ut = g.transpose(u).unwrap();
        let b2 = g.reshape(b, &[1, 4 * h]).unwrap();
        let mut hprev = g.constant(Tensor::zeros(&[1, h]));
        let mut cprev = g.constant(Tensor::zeros(&[1, h]));
        let mut outs = vec![None; s];
        let order: Vec<usize> = if reverse { (0..s).rev().collect() } else { (0..s).collect() };
        for t in order {
            let xt = g.slice_rows(x, t, t + 1).unwrap();
            let a = g.add(g.add(g.matmul(xt, wt).unwrap(), g.matmul(hprev, ut).unwrap()).unwrap(), b2).unwrap();
            let at = g.transpose(a).unwrap();
            let part = |k: usize| g.transpose(g.slice_rows(at, k * h, (k + 1) * h).unwrap()).unwrap();
            let i = g.sigmoid(part(0));
            let f = g.sigmoid(part(1));
            let c = g.activation(part(2), act);
            let o = g.sigmoid(part(3));
            cprev = g.add(g.mul(f, cprev).unwrap(), g.mul(i, c).unwrap()).unwrap();
            hprev = g.mul(o, g.activation(cprev, act)).unwrap();
            outs[t] = Some(hprev);
        }
        let outs: Vec<Var> = outs.into_iter().map(Option::unwrap).collect();
        g.concat(&outs, 0).unwrap()
    }

    #[test]
    fn matches_stepwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s, f, h) = (3, 4, 5);
        for (reverse, act) in [(false, Activation::Tanh), (true, Activation::Tanh), (false, Activation::Relu)] {
            let x = rand_t(&mut rng, &[s, f], 1.0);
            let w = rand_t(&mut rng, &[4 * h, f], 0.5);
            let u = rand_t(&mut rng, &[4 * h, h], 0.5);
            let b = rand_t(&mut rng, &[4 * h], 0.5);
            let g = Graph::<f64>::new();
            let vs: Vec<Var> = [&x, &w, &u, &b].iter().map(|t| g.constant((*t).clone())).collect();
            let fused = g.lstm(vs[0], vs[1], vs[2], vs[3], LstmCell { hidden: h, activation: act, reverse }, LstmMasks::default()).unwrap();
            let oracle = step_oracle(&g, vs[0], vs[1], vs[2], vs[3], h, reverse, act);
            assert!(g.value(fused).max_abs_diff(&g.value(oracle)) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (s, f, h) = (4, 3, 2);
        for (reverse, act) in [(false, Activation::Tanh), (true, Activation::Tanh), (false, Activation::Relu)] {
            for _ in 0..5 {
                let pts = vec![
                    rand_t(&mut rng, &[s, f], 1.0),
                    rand_t(&mut rng, &[4 * h, f], 0.7),
                    rand_t(&mut rng, &[4 * h, h], 0.7),
                    rand_t(&mut rng, &[4 * h], 0.7),
                ];
                let wout = rand_t(&mut rng, &[s, h], 1.0);
                let mx: Vec<f64> = vec![1.0, 0.0, 1.25];
                let mh: Vec<f64> = vec![1.25, 1.0];
                let report = check_gradients(
                    |g, v| {
                        let masks = LstmMasks { input: Some(mx.clone()), recurrent: Some(mh.clone()) };
                        let y = g.lstm(v[0], v[1], v[2], v[3], LstmCell { hidden: h, activation: act, reverse }, masks)?;
                        Ok(g.sum(g.mul(y, g.constant(wout.clone()))?))
                    },
                    &pts,
                    1e-6,
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{act:?} reverse={reverse}: {report:?}");
            }
        }
    }

    #[test]
    fn zero_input_zero_weights_stays_zero() {
        let g = Graph::<f64>::new();
        let (s, f, h) = (6, 3, 4);
        let x = g.constant(Tensor::zeros(&[s, f]));
        let w = g.constant(Tensor::zeros(&[4 * h, f]));
        let u = g.constant(Tensor::zeros(&[4 * h, h]));
        let b = g.constant(Tensor::zeros(&[4 * h]));
        let y = g.lstm(x, w, u, b, LstmCell { hidden: h, activation: Activation::Tanh, reverse: false }, LstmMasks::default()).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_is_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Lstm::new(&mut store, &mut rng, "l", ParamGroup::Latent, 3, 4, Activation::Tanh, false);
        let b = store.value(l.b).data();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert!(b[..4].iter().chain(&b[8..]).all(|&v| v == 0.0));
    }
}
