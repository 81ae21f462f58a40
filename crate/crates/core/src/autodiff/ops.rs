//! Primitive differentiable ops. Each op computes its forward value eagerly
//! and records an exact vector-Jacobian product for the reverse sweep.

use std::rc::Rc;

use rustfft::num_complex::Complex;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::dsp;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Abs => x.abs(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the input `x` and output `y`. `abs` and `relu` use
    /// subgradient 0 at the kink.
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Zero-padding convention for the 1-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output has the input length; tap `(K-1)/2` sits on the current sample.
    Same,
    /// Output length `L - K + 1`, no padding.
    Valid,
}

impl Padding {
    fn offset(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    fn out_len(self, l: usize, k: usize) -> usize {
        match self {
            Padding::Same => l,
            Padding::Valid => (l + 1).saturating_sub(k),
        }
    }
}

/// `out[t] += Σ_j k[j]·x[t + j − pad]`, out-of-range input treated as zero.
pub(crate) fn xcorr_acc<T: Real>(out: &mut [T], x: &[T], k: &[T], pad: usize) {
    let lx = x.len() as isize;
    let lo = out.len() as isize;
    for (j, &kj) in k.iter().enumerate() {
        if kj == T::zero() {
            continue;
        }
        let shift = j as isize - pad as isize;
        let t0 = (-shift).max(0);
        let t1 = (lx - shift).min(lo);
        if t1 <= t0 {
            continue;
        }
        let xs = &x[(t0 + shift) as usize..(t1 + shift) as usize];
        for (o, &xv) in out[t0 as usize..t1 as usize].iter_mut().zip(xs) {
            *o = *o + kj * xv;
        }
    }
}

/// Adjoint of [`xcorr_acc`] with respect to `x`: `dx[s] += Σ_j k[j]·g[s − j + pad]`.
pub(crate) fn xcorr_adjoint_acc<T: Real>(dx: &mut [T], g: &[T], k: &[T], pad: usize) {
    let lx = dx.len() as isize;
    let lo = g.len() as isize;
    for (j, &kj) in k.iter().enumerate() {
        if kj == T::zero() {
            continue;
        }
        let shift = j as isize - pad as isize;
        let t0 = (-shift).max(0);
        let t1 = (lx - shift).min(lo);
        if t1 <= t0 {
            continue;
        }
        let gs = &g[t0 as usize..t1 as usize];
        for (d, &gv) in dx[(t0 + shift) as usize..(t1 + shift) as usize].iter_mut().zip(gs) {
            *d = *d + kj * gv;
        }
    }
}

/// Kernel gradient of [`xcorr_acc`]: `dk[j] += Σ_t g[t]·x[t + j − pad]`.
pub(crate) fn xcorr_kernel_grad_acc<T: Real>(dk: &mut [T], g: &[T], x: &[T], pad: usize) {
    let lx = x.len() as isize;
    let lo = g.len() as isize;
    for (j, d) in dk.iter_mut().enumerate() {
        let shift = j as isize - pad as isize;
        let t0 = (-shift).max(0);
        let t1 = (lx - shift).min(lo);
        if t1 <= t0 {
            continue;
        }
        let xs = &x[(t0 + shift) as usize..(t1 + shift) as usize];
        let acc: T = g[t0 as usize..t1 as usize].iter().zip(xs).map(|(&a, &b)| a * b).sum();
        *d = *d + acc;
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn dims2(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("{op}: expected a 2-D tensor, got {shape:?}"))),
    }
}

fn dims1(op: &str, shape: &[usize]) -> Result<usize> {
    match *shape {
        [n] => Ok(n),
        _ => Err(Error::shape(format!("{op}: expected a 1-D tensor, got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape())?;
        let out = Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect())?;
        Ok(self.push_op("add", out, &[a, b], move |g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av.shape(), bv.shape())?;
        let out = Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect())?;
        Ok(self.push_op("sub", out, &[a, b], move |g, sink| {
            sink.add(a, g);
            if let Some(d) = sink.slot(b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av.shape(), bv.shape())?;
        let out = Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect())?;
        Ok(self.push_op("mul", out, &[a, b], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d = *d + g * y;
                }
            }
            if let Some(d) = sink.slot(b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d = *d + g * x;
                }
            }
        }))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op("scale", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * c);
            }
        })
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x * x);
        self.push_op("square", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d = *d + T::lit(2.0) * g * x;
                }
            }
        })
    }

    pub fn activation(&self, a: Var, act: Activation) -> Var {
        let av = self.value(a);
        let out = av.map(|x| act.apply(x));
        let outv = Rc::new(out.clone());
        self.push_op("activation", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(av.data()).zip(outv.data()) {
                    *d = *d + g * act.derivative(x, y);
                }
            }
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.activation(a, Activation::Abs)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push_op("sum", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean along the last axis of a 2-D tensor: `[R×C] → [R]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("mean_rows", av.shape())?;
        let inv = T::one() / T::lit(c as f64);
        let out = Tensor::from_fn(&[r], |i| av.row(i).iter().copied().sum::<T>() * inv);
        Ok(self.push_op("mean_rows", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for i in 0..r {
                    let gi = g[i] * inv;
                    d[i * c..(i + 1) * c].iter_mut().for_each(|d| *d = *d + gi);
                }
            }
        }))
    }

    /// Maximum over all elements, with its flat index.
    pub fn max_with_index(&self, a: Var) -> (Var, usize) {
        let av = self.value(a);
        let mut best = 0;
        for (i, &v) in av.data().iter().enumerate() {
            if v > av.data()[best] {
                best = i;
            }
        }
        let out = Tensor::scalar(av.data()[best]);
        let var = self.push_op("max", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                d[best] = d[best] + g[0];
            }
        });
        (var, best)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = (*av).clone().reshaped(shape)?;
        Ok(self.push_op("reshape", out, &[a], move |g, sink| sink.add(a, g)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("transpose", av.shape())?;
        let src = av.data();
        let out = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        Ok(self.push_op("transpose", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + g[j * r + i];
                    }
                }
            }
        }))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape(format!("slice_rows {start}..{end} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let out = Tensor::new(&out_shape, av.data()[start * inner..end * inner].to_vec())?;
        Ok(self.push_op("slice_rows", out, &[a], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                for (d, &g) in d[start * inner..end * inner].iter_mut().zip(g) {
                    *d = *d + g;
                }
            }
        }))
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat needs at least one part and axis 0 or 1"));
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let dims: Vec<(usize, usize)> = vals.iter().map(|v| dims2("concat", v.shape())).collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let ok = dims.iter().all(|&(r, c)| if axis == 0 { c == c0 } else { r == r0 });
        if !ok {
            return Err(Error::shape(format!("concat along axis {axis}: incompatible shapes {dims:?}")));
        }
        let parts = parts.to_vec();
        if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            let out = Tensor::new(&[rows, c0], data)?;
            Ok(self.push_op("concat", out, &parts.clone(), move |g, sink| {
                let mut off = 0;
                for (p, (r, c)) in parts.iter().zip(&dims) {
                    sink.add(*p, &g[off..off + r * c]);
                    off += r * c;
                }
            }))
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            let out = Tensor::new(&[r0, cols], data)?;
            Ok(self.push_op("concat", out, &parts.clone(), move |g, sink| {
                let mut col = 0;
                for (p, &(_, c)) in parts.iter().zip(&dims) {
                    if let Some(d) = sink.slot(*p) {
                        for i in 0..r0 {
                            let src = &g[i * cols + col..i * cols + col + c];
                            for (d, &s) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    col += c;
                }
            }))
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av.shape())?;
        let (k2, n) = dims2("matmul", bv.shape())?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: [{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&mut out, av.data(), bv.data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push_op("matmul", out, &[a, b], move |g, sink| {
            if let Some(d) = sink.slot(a) {
                // dA = G · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        let s: T = g[i * n..(i + 1) * n].iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        d[i * k + p] = d[i * k + p] + s;
                    }
                }
            }
            if let Some(d) = sink.slot(b) {
                // dB = Aᵀ · G
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        for (d, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d = *d + aip * gv;
                        }
                    }
                }
            }
        }))
    }

    /// Fully connected map applied to every row: `[N×in]·Wᵀ + b` with `W: [out×in]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin) = dims2("linear", xv.shape())?;
        let (fout, fin2) = dims2("linear", wv.shape())?;
        if fin != fin2 || bv.shape() != [fout] {
            return Err(Error::shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); n * fout];
        linear_forward(&mut out, xv.data(), wv.data(), bv.data(), n, fin, fout);
        let out = Tensor::new(&[n, fout], out)?;
        Ok(self.push_op("linear", out, &[x, w, b], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for i in 0..n {
                    let di = &mut d[i * fin..(i + 1) * fin];
                    for o in 0..fout {
                        let go = g[i * fout + o];
                        if go == T::zero() {
                            continue;
                        }
                        for (dd, &wv) in di.iter_mut().zip(&wv.data()[o * fin..(o + 1) * fin]) {
                            *dd = *dd + go * wv;
                        }
                    }
                }
            }
            if let Some(d) = sink.slot(w) {
                for i in 0..n {
                    let xi = &xv.data()[i * fin..(i + 1) * fin];
                    for o in 0..fout {
                        let go = g[i * fout + o];
                        if go == T::zero() {
                            continue;
                        }
                        for (dd, &xv) in d[o * fin..(o + 1) * fin].iter_mut().zip(xi) {
                            *dd = *dd + go * xv;
                        }
                    }
                }
            }
            if let Some(d) = sink.slot(b) {
                for i in 0..n {
                    for (dd, &gv) in d.iter_mut().zip(&g[i * fout..(i + 1) * fout]) {
                        *dd = *dd + gv;
                    }
                }
            }
        }))
    }

    /// Channel gain broadcast: `out[c,t] = x[c,t]·gain[c]`.
    pub fn mul_rows(&self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (c, t) = dims2("mul_rows", xv.shape())?;
        if gv.len() != c {
            return Err(Error::shape(format!("mul_rows: {c} rows but {} gains", gv.len())));
        }
        let out = Tensor::from_fn(&[c, t], |i| xv.data()[i] * gv.data()[i / t]);
        Ok(self.push_op("mul_rows", out, &[x, gain], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for i in 0..c * t {
                    d[i] = d[i] + g[i] * gv.data()[i / t];
                }
            }
            if let Some(d) = sink.slot(gain) {
                for ch in 0..c {
                    let s: T = g[ch * t..(ch + 1) * t].iter().zip(xv.row(ch)).map(|(&a, &b)| a * b).sum();
                    d[ch] = d[ch] + s;
                }
            }
        }))
    }

    /// Single-channel input through a bank of `C` kernels: `[L] ⊛ [C×K] → [C×L']`.
    pub fn conv1d(&self, x: Var, kernels: Var, padding: Padding) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernels));
        let l = dims1("conv1d input", xv.shape())?;
        let (c, k) = dims2("conv1d kernels", kv.shape())?;
        if padding == Padding::Valid && k > l {
            return Err(Error::shape(format!("conv1d: kernel {k} longer than input {l}")));
        }
        let pad = padding.offset(k);
        let lo = padding.out_len(l, k);
        let mut out = vec![T::zero(); c * lo];
        for ch in 0..c {
            xcorr_acc(&mut out[ch * lo..(ch + 1) * lo], xv.data(), kv.row(ch), pad);
        }
        let out = Tensor::new(&[c, lo], out)?;
        Ok(self.push_op("conv1d", out, &[x, kernels], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for ch in 0..c {
                    xcorr_adjoint_acc(d, &g[ch * lo..(ch + 1) * lo], kv.row(ch), pad);
                }
            }
            if let Some(d) = sink.slot(kernels) {
                for ch in 0..c {
                    xcorr_kernel_grad_acc(&mut d[ch * k..(ch + 1) * k], &g[ch * lo..(ch + 1) * lo], xv.data(), pad);
                }
            }
        }))
    }

    /// Locally connected convolution: row `c` of `x` filtered only by kernel
    /// `c`, plus a per-row bias. Same padding.
    pub fn conv1d_local(&self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernels), self.value(bias));
        let (c, l) = dims2("conv1d_local input", xv.shape())?;
        let (c2, k) = dims2("conv1d_local kernels", kv.shape())?;
        if c != c2 || bv.len() != c {
            return Err(Error::shape(format!(
                "conv1d_local: input {:?}, kernels {:?}, bias {:?}",
                xv.shape(),
                kv.shape(),
                bv.shape()
            )));
        }
        let pad = Padding::Same.offset(k);
        let mut out = vec![T::zero(); c * l];
        for ch in 0..c {
            let row = &mut out[ch * l..(ch + 1) * l];
            row.iter_mut().for_each(|v| *v = bv.data()[ch]);
            xcorr_acc(row, xv.row(ch), kv.row(ch), pad);
        }
        let out = Tensor::new(&[c, l], out)?;
        Ok(self.push_op("conv1d_local", out, &[x, kernels, bias], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for ch in 0..c {
                    xcorr_adjoint_acc(&mut d[ch * l..(ch + 1) * l], &g[ch * l..(ch + 1) * l], kv.row(ch), pad);
                }
            }
            if let Some(d) = sink.slot(kernels) {
                for ch in 0..c {
                    xcorr_kernel_grad_acc(&mut d[ch * k..(ch + 1) * k], &g[ch * l..(ch + 1) * l], xv.row(ch), pad);
                }
            }
            if let Some(d) = sink.slot(bias) {
                for ch in 0..c {
                    d[ch] = d[ch] + g[ch * l..(ch + 1) * l].iter().copied().sum();
                }
            }
        }))
    }

    /// Adjoint of [`Graph::conv1d`] with same padding: `[C×L] → [L]`, summed
    /// over channels.
    pub fn conv1d_transpose(&self, y: Var, kernels: Var) -> Result<Var> {
        let (yv, kv) = (self.value(y), self.value(kernels));
        let (c, l) = dims2("conv1d_transpose input", yv.shape())?;
        let (c2, k) = dims2("conv1d_transpose kernels", kv.shape())?;
        if c != c2 {
            return Err(Error::shape(format!("conv1d_transpose: {c} channels vs {c2} kernels")));
        }
        let pad = Padding::Same.offset(k);
        let mut out = vec![T::zero(); l];
        for ch in 0..c {
            xcorr_adjoint_acc(&mut out, yv.row(ch), kv.row(ch), pad);
        }
        let out = Tensor::new(&[l], out)?;
        Ok(self.push_op("conv1d_transpose", out, &[y, kernels], move |g, sink| {
            if let Some(d) = sink.slot(y) {
                for ch in 0..c {
                    xcorr_acc(&mut d[ch * l..(ch + 1) * l], g, kv.row(ch), pad);
                }
            }
            if let Some(d) = sink.slot(kernels) {
                for ch in 0..c {
                    xcorr_kernel_grad_acc(&mut d[ch * k..(ch + 1) * k], yv.row(ch), g, pad);
                }
            }
        }))
    }

    /// Non-overlapping max-pool along the last axis. Returns the absolute
    /// argmax position of every window; ties go to the lowest index.
    pub fn maxpool(&self, x: Var, window: usize) -> Result<(Var, Rc<Vec<usize>>)> {
        let xv = self.value(x);
        let (c, t) = dims2("maxpool", xv.shape())?;
        let (pooled, idx) = maxpool_with_indices(&xv, window)?;
        let idx = Rc::new(idx);
        let idx2 = Rc::clone(&idx);
        let n = t / window;
        let var = self.push_op("maxpool", pooled, &[x], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for ch in 0..c {
                    for j in 0..n {
                        let pos = idx2[ch * n + j];
                        d[ch * t + pos] = d[ch * t + pos] + g[ch * n + j];
                    }
                }
            }
        });
        Ok((var, idx))
    }

    /// Places pooled values back at their recorded positions; zeros elsewhere.
    pub fn unpool(&self, pooled: Var, indices: &[usize], len: usize) -> Result<Var> {
        let pv = self.value(pooled);
        let (c, n) = dims2("unpool", pv.shape())?;
        if indices.len() != c * n {
            return Err(Error::State(format!("unpool: {} indices for {} pooled values", indices.len(), c * n)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::State(format!("unpool index {bad} out of range for length {len}")));
        }
        let mut out = vec![T::zero(); c * len];
        for ch in 0..c {
            for j in 0..n {
                out[ch * len + indices[ch * n + j]] = pv.data()[ch * n + j];
            }
        }
        let idx = indices.to_vec();
        let out = Tensor::new(&[c, len], out)?;
        Ok(self.push_op("unpool", out, &[pooled], move |g, sink| {
            if let Some(d) = sink.slot(pooled) {
                for ch in 0..c {
                    for j in 0..n {
                        d[ch * n + j] = d[ch * n + j] + g[ch * len + idx[ch * n + j]];
                    }
                }
            }
        }))
    }

    /// First-order pre-emphasis `y[n] = x[n] − coeff·x[n−1]`, `y[0] = x[0]`.
    pub fn pre_emphasis(&self, x: Var, coeff: T) -> Result<Var> {
        let xv = self.value(x);
        dims1("pre_emphasis", xv.shape())?;
        let out = Tensor::from_vec(dsp::pre_emphasis(xv.data(), coeff)?);
        Ok(self.push_op("pre_emphasis", out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                let n = g.len();
                for i in 0..n {
                    let next = if i + 1 < n { g[i + 1] } else { T::zero() };
                    d[i] = d[i] + g[i] - coeff * next;
                }
            }
        }))
    }

    /// `log(|FFT(x)|² + ε)` over the `n/2 + 1` non-redundant bins.
    pub fn log_power_spectrum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = dims1("log_power_spectrum", xv.shape())?;
        let spec = dsp::rfft(xv.data())?;
        let eps = T::lit(dsp::SPECTRAL_FLOOR);
        let out = Tensor::from_vec(spec.iter().map(|z| (z.norm_sqr() + eps).ln()).collect());
        Ok(self.push_op("log_power_spectrum", out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                // ∂/∂x[m] = Σ_k g_k/(P_k+ε) · 2·Re(X_k·e^{+2πikm/n})
                let mut full = vec![Complex::new(T::zero(), T::zero()); n];
                for (k, z) in spec.iter().enumerate() {
                    let w = g[k] / (z.norm_sqr() + eps);
                    full[k] = *z * w;
                }
                dsp::ifft_unnormalized(&mut full);
                for (dd, z) in d.iter_mut().zip(&full) {
                    *dd = *dd + T::lit(2.0) * z.re;
                }
            }
        }))
    }

    /// Linear interpolation by an integer factor along the last axis. Knot
    /// `j` lands on sample `j·factor`; samples past the last knot hold its value.
    pub fn upsample_linear(&self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, l) = dims2("upsample_linear", xv.shape())?;
        let out = Tensor::new(&[c, l * factor], upsample_linear(xv.data(), c, l, factor))?;
        Ok(self.push_op("upsample_linear", out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                let t_out = l * factor;
                for ch in 0..c {
                    for t in 0..t_out {
                        let gv = g[ch * t_out + t];
                        let j = t / factor;
                        if j + 1 >= l {
                            d[ch * l + l - 1] = d[ch * l + l - 1] + gv;
                        } else {
                            let a = T::lit((t - j * factor) as f64 / factor as f64);
                            d[ch * l + j] = d[ch * l + j] + gv * (T::one() - a);
                            d[ch * l + j + 1] = d[ch * l + j + 1] + gv * a;
                        }
                    }
                }
            }
        }))
    }
}

pub(crate) fn matmul_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub(crate) fn linear_forward<T: Real>(out: &mut [T], x: &[T], w: &[T], b: &[T], n: usize, fin: usize, fout: usize) {
    for i in 0..n {
        let xi = &x[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let s: T = xi.iter().zip(&w[o * fin..(o + 1) * fin]).map(|(&a, &b)| a * b).sum();
            out[i * fout + o] = s + b[o];
        }
    }
}

/// Pure max-pool used by [`Graph::maxpool`] and its tests.
pub fn maxpool_with_indices<T: Real>(x: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, t) = dims2("maxpool", x.shape())?;
    if window == 0 || t % window != 0 {
        return Err(Error::shape(format!("maxpool: length {t} not divisible by window {window}")));
    }
    let n = t / window;
    let mut vals = Vec::with_capacity(c * n);
    let mut idx = Vec::with_capacity(c * n);
    for ch in 0..c {
        let row = x.row(ch);
        for j in 0..n {
            let mut best = j * window;
            for p in j * window + 1..(j + 1) * window {
                if row[p] > row[best] {
                    best = p;
                }
            }
            vals.push(row[best]);
            idx.push(best);
        }
    }
    Ok((Tensor::new(&[c, n], vals)?, idx))
}

pub(crate) fn upsample_linear<T: Real>(x: &[T], c: usize, l: usize, factor: usize) -> Vec<T> {
    let t_out = l * factor;
    let mut out = vec![T::zero(); c * t_out];
    for ch in 0..c {
        let row = &x[ch * l..(ch + 1) * l];
        for t in 0..t_out {
            let j = t / factor;
            out[ch * t_out + t] = if j + 1 >= l {
                row[l - 1]
            } else {
                let a = T::lit((t - j * factor) as f64 / factor as f64);
                row[j] * (T::one() - a) + row[j + 1] * a
            };
        }
    }
    out
}
