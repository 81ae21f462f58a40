//! Smooth adaptive activation: a learnable C¹ piecewise-quadratic map.
//!
//! With `n` uniform intervals on `[−1, 1]` (width `w = 2/n`, left ends
//! `a_j = −1 + j·w`), each channel computes
//!
//! ```text
//! f(x) = bias + slope·x + Σ_j c_j · Q_j(x)
//! Q_j(x) = 0                       x ≤ a_j
//!        = (x − a_j)² / 2          a_j < x ≤ a_j + w
//!        = w²/2 + w·(x − a_j − w)  otherwise
//! ```
//!
//! so `f′(x) = slope + Σ_j c_j · clamp(x − a_j, 0, w)` is continuous and
//! piecewise linear. Outside `[−1, 1]` the map continues linearly.
//! Parameters of one layer are stored as a `[C × (n+2)]` tensor with rows
//! `[bias, slope, c_0, …, c_{n−1}]`.

use rand_chacha::ChaCha8Rng;

use super::Ctx;
use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaafShape {
    pub intervals: usize,
}

impl SaafShape {
    pub fn width(self) -> f64 {
        2.0 / self.intervals as f64
    }

    /// `a_j = −1 + j·w` for `j = 0..=n`.
    pub fn breakpoint(self, j: usize) -> f64 {
        -1.0 + j as f64 * self.width()
    }

    pub fn row_len(self) -> usize {
        self.intervals + 2
    }
}

/// Value and derivative of one channel at `x`. `row` is `[bias, slope, c…]`.
pub fn saaf_eval<T: Real>(row: &[T], x: T, shape: SaafShape) -> (T, T) {
    let mut f = row[0] + row[1] * x;
    let mut df = row[1];
    for_each_basis(x, shape, |j, q, dq| {
        f = f + row[2 + j] * q;
        df = df + row[2 + j] * dq;
    });
    (f, df)
}

/// Evaluates the quadratic of segment `seg` (extended beyond its interval)
/// at `x`. Used to check continuity across breakpoints.
pub fn saaf_segment<T: Real>(row: &[T], seg: usize, x: T, shape: SaafShape) -> (T, T) {
    let w = T::lit(shape.width());
    let half = T::lit(0.5);
    let mut f = row[0] + row[1] * x;
    let mut df = row[1];
    for j in 0..seg {
        let a_next = T::lit(shape.breakpoint(j + 1));
        f = f + row[2 + j] * (half * w * w + w * (x - a_next));
        df = df + row[2 + j] * w;
    }
    let d = x - T::lit(shape.breakpoint(seg));
    f = f + row[2 + seg] * half * d * d;
    df = df + row[2 + seg] * d;
    (f, df)
}

/// Calls `visit(j, Q_j(x), Q_j′(x))` for every basis term that is nonzero at `x`.
fn for_each_basis<T: Real>(x: T, shape: SaafShape, mut visit: impl FnMut(usize, T, T)) {
    let n = shape.intervals;
    let w = T::lit(shape.width());
    let half = T::lit(0.5);
    let u = (x + T::one()) / w;
    if u <= T::zero() {
        return;
    }
    let full = u.floor().to_usize().unwrap_or(n).min(n);
    for j in 0..full {
        let a_next = T::lit(shape.breakpoint(j + 1));
        visit(j, half * w * w + w * (x - a_next), w);
    }
    if full < n {
        let d = (x - T::lit(shape.breakpoint(full))).max(T::zero()).min(w);
        visit(full, half * d * d, d);
    }
}

fn check_params(shape: SaafShape, p: &[usize], channels: usize) -> Result<()> {
    if p != [channels, shape.row_len()] {
        return Err(Error::shape(format!(
            "saaf: expected parameters [{channels} × {}], got {p:?}",
            shape.row_len()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// Per-channel SAAF over the columns of `x: [N × C]`.
    pub fn saaf(&self, x: Var, params: Var, shape: SaafShape) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(params));
        let (n, c) = xv.dims2()?;
        check_params(shape, pv.shape(), c)?;
        let rl = shape.row_len();
        let mut out = Vec::with_capacity(n * c);
        let mut deriv = Vec::with_capacity(n * c);
        for (i, &xi) in xv.data().iter().enumerate() {
            let row = &pv.data()[(i % c) * rl..(i % c + 1) * rl];
            let (f, df) = saaf_eval(row, xi, shape);
            out.push(f);
            deriv.push(df);
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push_op("saaf", out, &[x, params], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for ((d, &g), &df) in d.iter_mut().zip(g).zip(&deriv) {
                    *d = *d + g * df;
                }
            }
            if let Some(d) = sink.slot(params) {
                for (i, (&gi, &xi)) in g.iter().zip(xv.data()).enumerate() {
                    if gi == T::zero() {
                        continue;
                    }
                    let row = &mut d[(i % c) * rl..(i % c + 1) * rl];
                    row[0] = row[0] + gi;
                    row[1] = row[1] + gi * xi;
                    for_each_basis(xi, shape, |j, q, _| row[2 + j] = row[2 + j] + gi * q);
                }
            }
        }))
    }

    /// `Σ_channels Σ_breakpoints max(|f′(a_k)| − L, 0)²`. Because `f′` is
    /// piecewise linear with kinks only at breakpoints and constant outside
    /// `[−1, 1]`, the penalty is zero exactly when every channel is
    /// `L`-Lipschitz.
    pub fn saaf_lipschitz_penalty(&self, params: Var, shape: SaafShape, lipschitz: T) -> Result<Var> {
        let pv = self.value(params);
        let (c, rl) = pv.dims2()?;
        check_params(shape, pv.shape(), c)?;
        let n = shape.intervals;
        let w = T::lit(shape.width());
        // excess[ch][k] with the sign of f′ folded in
        let mut dexcess = vec![T::zero(); c * (n + 1)];
        let mut total = T::zero();
        for ch in 0..c {
            let row = &pv.data()[ch * rl..(ch + 1) * rl];
            let mut slope = row[1];
            for k in 0..=n {
                if k > 0 {
                    slope = slope + row[1 + k] * w;
                }
                let e = slope.abs() - lipschitz;
                if e > T::zero() {
                    total = total + e * e;
                    dexcess[ch * (n + 1) + k] = T::lit(2.0) * e * slope.signum();
                }
            }
        }
        let out = Tensor::scalar(total);
        Ok(self.push_op("saaf_lipschitz", out, &[params], move |g, sink| {
            if let Some(d) = sink.slot(params) {
                for ch in 0..c {
                    let row = &mut d[ch * rl..(ch + 1) * rl];
                    // f′(a_k) = slope + w·Σ_{j<k} c_j
                    let mut suffix = T::zero();
                    for k in (0..=n).rev() {
                        let dk = g[0] * dexcess[ch * (n + 1) + k];
                        row[1] = row[1] + dk;
                        if k < n {
                            row[2 + k] = row[2 + k] + w * suffix;
                        }
                        suffix = suffix + dk;
                    }
                }
            }
        }))
    }
}

/// One SAAF instance with independent parameters per channel.
#[derive(Clone, Debug)]
pub struct Saaf {
    pub params: ParamId,
    pub shape: SaafShape,
    pub channels: usize,
}

impl Saaf {
    /// Identity initialization: bias 0, slope 1, curvatures 0.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize, intervals: usize) -> Self {
        let shape = SaafShape { intervals };
        let rl = shape.row_len();
        let init = Tensor::from_fn(&[channels, rl], |i| if i % rl == 1 { T::one() } else { T::zero() });
        let params = store.add(name, group, init);
        Saaf { params, shape, channels }
    }

    /// Random curvatures for tests; keeps the map far from the identity.
    pub fn randomize<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
        use rand::RngExt;
        let v = store.value_mut(self.params);
        for x in v.data_mut() {
            *x = *x + T::lit(rng.random_range(-scale..scale));
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.g.saaf(x, ctx.p(self.params), self.shape)
    }

    pub fn penalty<T: Real>(&self, ctx: &Ctx<'_, T>, lipschitz: f64) -> Result<Var> {
        ctx.g.saaf_lipschitz_penalty(ctx.p(self.params), self.shape, T::lit(lipschitz))
    }
}
