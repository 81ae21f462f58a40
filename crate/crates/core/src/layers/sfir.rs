//! Sparse FIR filters: one coefficient per `Ts`-sample interval.
//!
//! Two fully connected maps turn each band's conditioning vector into
//! coefficient values (tanh, so `|v| ≤ 1`) and positions `u ∈ (0, 1)`. The
//! slot inside interval `i` is `floor(u·Ts)`, clamped to `Ts − 1`; the tap
//! therefore sits at lag `i·Ts + slot`.
//!
//! `floor` has no useful derivative. The slot op passes the upstream
//! gradient to `u` unchanged (straight-through), and the filter op supplies
//! that upstream gradient by treating the slot as a continuous delay:
//! `∂/∂s [v·r(t − lag)] = −v·r′(t − lag)`, with `r′` a central difference.

use rand_chacha::ChaCha8Rng;

use super::init::glorot_uniform;
use super::Ctx;
use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// `min(floor(u·ts), ts − 1)` for `u ∈ [0, 1]`.
pub fn slot_of<T: Real>(u: T, ts: usize) -> usize {
    let s = (u * T::lit(ts as f64)).floor().to_usize().unwrap_or(0);
    s.min(ts - 1)
}

/// Materialized sparse filters of `bands` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFirSet<T> {
    /// `[bands × units]`
    pub values: Tensor<T>,
    /// `[bands × units]`, each in `0..ts`.
    pub slots: Vec<usize>,
    pub ts: usize,
}

impl<T: Real> SparseFirSet<T> {
    pub fn bands(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn filter_len(&self) -> usize {
        self.units() * self.ts
    }

    /// `[bands × units·ts]` filters with `values[b][i]` at `i·ts + slots[b][i]`.
    pub fn dense(&self) -> Tensor<T> {
        let (b, u, ts) = (self.bands(), self.units(), self.ts);
        let len = u * ts;
        let mut out = Tensor::zeros(&[b, len]);
        for band in 0..b {
            for i in 0..u {
                let k = band * u + i;
                out.data_mut()[band * len + i * ts + self.slots[k]] = self.values.data()[k];
            }
        }
        out
    }

    /// Coefficients per second at `sample_rate`.
    pub fn density(&self, sample_rate: u32) -> f64 {
        self.units() as f64 / (self.filter_len() as f64 / sample_rate as f64)
    }
}

/// Per band, causal convolution of `r[b]` with `dense[b]`, truncated to the
/// length of `r`.
pub fn sfir_apply_dense<T: Real>(r: &Tensor<T>, dense: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l) = r.dims2()?;
    let (b2, m) = dense.dims2()?;
    if b != b2 {
        return Err(Error::shape(format!("sfir: {b} bands in R, {b2} filters")));
    }
    let mut out = Tensor::zeros(&[b, l]);
    for band in 0..b {
        let (x, h) = (r.row(band), dense.row(band));
        let o = &mut out.data_mut()[band * l..(band + 1) * l];
        for (lag, &hv) in h.iter().enumerate().take(l.min(m)) {
            if hv == T::zero() {
                continue;
            }
            for t in lag..l {
                o[t] = o[t] + hv * x[t - lag];
            }
        }
    }
    Ok(out)
}

impl<T: Real> Graph<T> {
    /// Slot index `floor(u·ts)` clamped to `ts − 1`, returned as reals. The
    /// backward pass is the identity.
    pub fn ste_slots(&self, u: Var, ts: usize) -> Var {
        let out = self.value(u).map(|v| T::lit(slot_of(v, ts) as f64));
        self.push_op("ste_slots", out, &[u], move |g, sink| sink.add(u, g))
    }

    /// Sparse filtering `[B × L]` → `[B × L]`; taps past the frame are dropped.
    pub fn sfir_apply(&self, r: Var, values: Var, slots: Var, ts: usize) -> Result<Var> {
        let (rv, vv, sv) = (self.value(r), self.value(values), self.value(slots));
        let (b, l) = rv.dims2()?;
        let (b2, units) = vv.dims2()?;
        if b != b2 || sv.shape() != vv.shape() {
            return Err(Error::shape(format!(
                "sfir_apply: R {:?}, values {:?}, slots {:?}",
                rv.shape(),
                vv.shape(),
                sv.shape()
            )));
        }
        // only units whose interval starts inside the frame can reach it
        let live = units.min(l.div_ceil(ts));
        let lag = move |k: usize, i: usize| i * ts + sv.data()[k].to_usize().unwrap_or(0).min(ts - 1);
        let mut out = vec![T::zero(); b * l];
        for band in 0..b {
            let x = rv.row(band);
            let o = &mut out[band * l..(band + 1) * l];
            for i in 0..live {
                let k = band * units + i;
                let d = lag(k, i);
                let v = vv.data()[k];
                if d >= l || v == T::zero() {
                    continue;
                }
                for (ov, &xv) in o[d..].iter_mut().zip(x) {
                    *ov = *ov + v * xv;
                }
            }
        }
        let out = Tensor::new(&[b, l], out)?;
        Ok(self.push_op("sfir_apply", out, &[r, values, slots], move |g, sink| {
            if let Some(dr) = sink.slot(r) {
                for band in 0..b {
                    let gb = &g[band * l..(band + 1) * l];
                    let drb = &mut dr[band * l..(band + 1) * l];
                    for i in 0..live {
                        let k = band * units + i;
                        let d = lag(k, i);
                        let v = vv.data()[k];
                        if d >= l || v == T::zero() {
                            continue;
                        }
                        for (dv, &gv) in drb.iter_mut().zip(&gb[d..]) {
                            *dv = *dv + v * gv;
                        }
                    }
                }
            }
            if let Some(dv) = sink.slot(values) {
                for band in 0..b {
                    let x = rv.row(band);
                    let gb = &g[band * l..(band + 1) * l];
                    for i in 0..live {
                        let k = band * units + i;
                        let d = lag(k, i);
                        if d >= l {
                            continue;
                        }
                        let s: T = gb[d..].iter().zip(x).map(|(&p, &q)| p * q).sum();
                        dv[k] = dv[k] + s;
                    }
                }
            }
            if let Some(ds) = sink.slot(slots) {
                let half = T::lit(0.5);
                for band in 0..b {
                    let x = rv.row(band);
                    let deriv: Vec<T> = (0..l)
                        .map(|t| {
                            let next = if t + 1 < l { x[t + 1] } else { T::zero() };
                            let prev = if t > 0 { x[t - 1] } else { T::zero() };
                            (next - prev) * half
                        })
                        .collect();
                    let gb = &g[band * l..(band + 1) * l];
                    for i in 0..live {
                        let k = band * units + i;
                        let d = lag(k, i);
                        if d >= l {
                            continue;
                        }
                        let s: T = gb[d..].iter().zip(&deriv).map(|(&p, &q)| p * q).sum();
                        ds[k] = ds[k] - vv.data()[k] * s;
                    }
                }
            }
        }))
    }
}

/// The two shared fully connected maps producing values and positions.
#[derive(Clone, Debug)]
pub struct SfirLayer {
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub w_pos: ParamId,
    pub b_pos: ParamId,
    pub units: usize,
    pub ts: usize,
}

impl SfirLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, input: usize, units: usize, ts: usize) -> Self {
        let g = ParamGroup::Backend;
        SfirLayer {
            w_value: store.add("sfir.value.w", g, glorot_uniform(rng, &[units, input], input, units)),
            b_value: store.add("sfir.value.b", g, Tensor::zeros(&[units])),
            w_pos: store.add("sfir.pos.w", g, glorot_uniform(rng, &[units, input], input, units)),
            b_pos: store.add("sfir.pos.b", g, Tensor::zeros(&[units])),
            units,
            ts,
        }
    }

    /// `z2: [B × n]` → `(values, u, slots)`, each `[B × units]`.
    pub fn build<T: Real>(&self, ctx: &Ctx<'_, T>, z2: Var) -> Result<(Var, Var, Var)> {
        let g = ctx.g;
        let values = g.tanh(g.linear(z2, ctx.p(self.w_value), ctx.p(self.b_value))?);
        let u = g.sigmoid(g.linear(z2, ctx.p(self.w_pos), ctx.p(self.b_pos))?);
        let slots = g.ste_slots(u, self.ts);
        Ok((values, u, slots))
    }

    pub fn materialize<T: Real>(g: &Graph<T>, values: Var, slots: Var, ts: usize) -> SparseFirSet<T> {
        let values = (*g.value(values)).clone();
        let slots = g.value(slots).data().iter().map(|s| s.to_usize().unwrap_or(0)).collect();
        SparseFirSet { values, slots, ts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::{RngExt, SeedableRng};

    #[test]
    fn slot_rule() {
        assert_eq!(slot_of(0.5f64, 8), 4);
        assert_eq!(slot_of(0.9999f64, 8), 7);
        assert_eq!(slot_of(1.0f64, 8), 7);
        assert_eq!(slot_of(0.0f64, 8), 0);
    }

    #[test]
    fn ste_passes_gradient_unchanged() {
        let g = Graph::<f64>::new();
        let u = g.leaf(Tensor::new(&[1, 3], vec![0.1, 0.5, 0.99]).unwrap());
        let s = g.ste_slots(u, 8);
        assert_eq!(g.value(s).data(), &[0.0, 4.0, 7.0]);
        let up = g.constant(Tensor::new(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap());
        let loss = g.sum(g.mul(s, up).unwrap());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(u).unwrap().data(), &[0.3, -2.0, 5.0]);
    }

    fn random_set(rng: &mut ChaCha8Rng, b: usize, u: usize) -> SparseFirSet<f64> {
        SparseFirSet {
            values: Tensor::from_fn(&[b, u], |_| rng.random_range(-1.0..1.0)),
            slots: (0..b * u).map(|_| rng.random_range(0..8)).collect(),
            ts: 8,
        }
    }

    #[test]
    fn dense_has_one_tap_per_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 4, 16);
        let d = set.dense();
        assert_eq!(d.shape(), &[4, 128]);
        for band in 0..4 {
            for i in 0..16 {
                let nz = d.row(band)[i * 8..(i + 1) * 8].iter().filter(|v| **v != 0.0).count();
                assert_eq!(nz, 1);
            }
        }
        assert_eq!(set.density(16000), 2000.0);
    }

    #[test]
    fn sparse_matches_dense_and_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 3, 12);
        let r = Tensor::from_fn(&[3, 40], |_| rng.random_range(-1.0..1.0));
        let g = Graph::<f64>::new();
        let slots = Tensor::new(&[3, 12], set.slots.iter().map(|&s| s as f64).collect()).unwrap();
        let y = g.sfir_apply(g.constant(r.clone()), g.constant(set.values.clone()), g.constant(slots), 8).unwrap();
        let dense = set.dense();
        let expect = sfir_apply_dense(&r, &dense).unwrap();
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        for band in 0..3 {
            for t in 0..40 {
                let direct: f64 = (0..=t).map(|k| dense.row(band)[k] * r.row(band)[t - k]).sum();
                assert!((expect.row(band)[t] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_filters() {
        let r = Tensor::from_fn(&[2, 16], |i| i as f64 + 1.0);
        let mut h = Tensor::zeros(&[2, 32]);
        h.data_mut()[0] = 1.0;
        h.data_mut()[32] = 1.0;
        assert_eq!(sfir_apply_dense(&r, &h).unwrap(), r);
        let mut h = Tensor::zeros(&[2, 32]);
        h.data_mut()[5] = 1.0;
        h.data_mut()[32 + 5] = 1.0;
        let y = sfir_apply_dense(&r, &h).unwrap();
        for band in 0..2 {
            assert!(y.row(band)[..5].iter().all(|&v| v == 0.0));
            assert_eq!(&y.row(band)[5..], &r.row(band)[..11]);
        }
    }

    #[test]
    fn gradients_wrt_signal_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let set = random_set(&mut rng, 2, 6);
            let slots = Tensor::new(&[2, 6], set.slots.iter().map(|&s| s as f64).collect()).unwrap();
            let r = Tensor::from_fn(&[2, 30], |_| rng.random_range(-1.0..1.0));
            let w = Tensor::from_fn(&[2, 30], |_| rng.random_range(-1.0..1.0));
            let report = check_gradients(
                |g, v| {
                    let y = g.sfir_apply(v[0], v[1], g.constant(slots.clone()), 8)?;
                    Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
                },
                &[r, set.values.clone()],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn slot_gradient_is_a_delay_derivative() {
        // a smooth ramp delayed by one more sample shifts the output down by the slope
        let g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_fn(&[1, 32], |i| 0.1 * i as f64));
        let v = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let s = g.leaf(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let y = g.sfir_apply(r, v, s, 8).unwrap();
        let window = g.constant(Tensor::from_fn(&[1, 32], |t| if (10..20).contains(&t) { 1.0 } else { 0.0 }));
        let loss = g.sum(g.mul(y, window).unwrap());
        let grads = g.backward(loss).unwrap();
        assert!((grads.wrt(s).unwrap().item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn taps_beyond_frame_are_ignored() {
        let g = Graph::<f64>::new();
        let r = g.constant(Tensor::full(&[1, 16], 1.0));
        let v = g.constant(Tensor::full(&[1, 4], 1.0));
        let s = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.sfir_apply(r, v, s, 8).unwrap();
        let expect: Vec<f64> = (0..16).map(|t| if t < 8 { 1.0 } else { 2.0 }).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }
}
