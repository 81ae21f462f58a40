//! Synthesis back-end blocks.

use rand_chacha::ChaCha8Rng;

use super::init::glorot_uniform;
use super::lstm::Lstm;
use super::saaf::Saaf;
use super::Ctx;
use crate::autodiff::{Activation, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Linear interpolation of envelopes `[B × n]` to `[B × n·factor]`; knot `j`
/// lands on sample `j·factor` and the last value is held.
pub fn envelope_upsample<T: Real>(g: &Graph<T>, z1: Var, factor: usize) -> Result<Var> {
    g.upsample_linear(z1, factor)
}

/// `X̂₀ = g₂⊙X̂₂ + g₃⊙X̂₃` with per-channel gains.
pub fn backend_mix<T: Real>(g: &Graph<T>, x2: Var, x3: Var, g2: Var, g3: Var) -> Result<Var> {
    if g.shape(x2) != g.shape(x3) {
        return Err(Error::shape(format!("backend_mix: {:?} vs {:?}", g.shape(x2), g.shape(x3))));
    }
    g.add(g.mul_rows(x2, g2)?, g.mul_rows(x3, g3)?)
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        let g = ParamGroup::Backend;
        Dense {
            w: store.add(format!("{name}.w"), g, glorot_uniform(rng, &[output, input], input, output)),
            b: store.add(format!("{name}.b"), g, Tensor::zeros(&[output])),
        }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.g.linear(x, ctx.p(self.w), ctx.p(self.b))
    }
}

/// Time-distributed waveshaper: fully connected layers across the band axis
/// at every sample, tanh between them and a SAAF at the output.
#[derive(Clone, Debug)]
pub struct DnnSaaf {
    layers: Vec<Dense>,
    pub saaf: Saaf,
}

impl DnnSaaf {
    /// `widths` lists the layer outputs; the last must equal `bands`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, bands: usize, widths: &[usize], intervals: usize) -> Self {
        let mut layers = Vec::new();
        let mut input = bands;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::new(store, rng, &format!("dnn_saaf.fc{i}"), input, w));
            input = w;
        }
        let saaf = Saaf::new(store, "dnn_saaf.saaf", ParamGroup::Backend, input, intervals);
        DnnSaaf { layers, saaf }
    }

    /// `[B × T]` → `[B × T]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, r: Var) -> Result<Var> {
        let g = ctx.g;
        let mut h = g.transpose(r)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        g.transpose(self.saaf.forward(ctx, h)?)
    }
}

/// Squeeze-and-excitation gains driven by a recurrent layer over the
/// per-frame channel descriptors of the whole context window.
#[derive(Clone, Debug)]
pub struct SeLstm {
    pub lstm: Lstm,
    fc1: Dense,
    fc2: Dense,
}

impl SeLstm {
    /// `widths = [lstm, fc1, fc2]`; `fc2` must equal `bands`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, bands: usize, widths: [usize; 3]) -> Self {
        let [h, f1, f2] = widths;
        SeLstm {
            lstm: Lstm::new(store, rng, &format!("{name}.lstm"), ParamGroup::Backend, bands, h, Activation::Relu, false),
            fc1: Dense::new(store, rng, &format!("{name}.fc1"), h, f1),
            fc2: Dense::new(store, rng, &format!("{name}.fc2"), f1, f2),
        }
    }

    /// Per-frame `mean_t |x|` descriptors as a `[frames × B]` sequence.
    pub fn descriptors<T: Real>(g: &Graph<T>, frames: &[Var]) -> Result<Var> {
        let rows = frames
            .iter()
            .map(|&f| {
                let d = g.mean_rows(g.abs(f))?;
                let b = g.shape(d)[0];
                g.reshape(d, &[1, b])
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)
    }

    /// Gains in `(0, 1)` for the frame at position `center`: `[B]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, frames: &[Var], center: usize) -> Result<Var> {
        let g = ctx.g;
        let seq = Self::descriptors(g, frames)?;
        let h = self.lstm.forward(ctx, seq, 0.0)?;
        let hc = g.slice_rows(h, center, center + 1)?;
        let a = g.relu(self.fc1.forward(ctx, hc)?);
        let gains = g.sigmoid(self.fc2.forward(ctx, a)?);
        let b = g.shape(gains)[1];
        g.reshape(gains, &[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::{RngExt, SeedableRng};

    #[test]
    fn upsample_examples() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2, 4], 0.7));
        let y = envelope_upsample(&g, c, 8).unwrap();
        assert_eq!(g.shape(y), vec![2, 32]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));

        let ramp = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let y = g.value(envelope_upsample(&g, ramp, 64).unwrap());
        assert!((y.data()[32] - 0.5).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::from_fn(&[3, 16], |_| rng.random_range(-1.0..1.0));
        let y = g.value(envelope_upsample(&g, g.constant(z.clone()), 8).unwrap());
        for b in 0..3 {
            for j in 0..16 {
                assert_eq!(y.row(b)[j * 8], z.row(b)[j]);
            }
        }
    }

    #[test]
    fn mix_examples() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x2 = Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
        let x5 = Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
        let (v2, v5) = (g.constant(x2.clone()), g.constant(x5.clone()));
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        assert_eq!(*g.value(backend_mix(&g, v2, v5, ones, zeros).unwrap()), x2);
        let x4 = g.constant(Tensor::full(&[3, 5], 1.0));
        let x3 = g.mul(v5, x4).unwrap();
        assert_eq!(*g.value(backend_mix(&g, v2, x3, zeros, ones).unwrap()), x5);

        let g2 = Tensor::from_fn(&[3], |_| rng.random_range(0.0..1.0));
        let g3 = Tensor::from_fn(&[3], |_| rng.random_range(0.0..1.0));
        let y = g.value(backend_mix(&g, v2, v5, g.constant(g2.clone()), g.constant(g3.clone())).unwrap());
        for i in 0..15 {
            let expect = g2.data()[i / 5] * x2.data()[i] + g3.data()[i / 5] * x5.data()[i];
            assert_eq!(y.data()[i], expect);
        }
        assert!(backend_mix(&g, v2, g.constant(Tensor::zeros(&[3, 4])), ones, ones).is_err());
    }

    fn dnn(bands: usize) -> (ParamStore<f64>, DnnSaaf) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DnnSaaf::new(&mut store, &mut rng, bands, &[8, 4, 4, bands], 25);
        (store, d)
    }

    #[test]
    fn dnn_saaf_zero_input_is_saaf_of_zero() {
        let (store, d) = dnn(6);
        let g = Graph::new();
        let ctx = Ctx::infer(&g, &store);
        let y = d.forward(&ctx, g.constant(Tensor::zeros(&[6, 10]))).unwrap();
        assert_eq!(g.shape(y), vec![6, 10]);
        // identity SAAF with zero biases maps zero to zero
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dnn_saaf_gradients() {
        let (mut store, d) = dnn(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        d.saaf.randomize(&mut store, &mut rng, 0.3);
        for _ in 0..5 {
            let r = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
            let w = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
            let report = check_gradients(
                |g, v| {
                    let ctx = Ctx::infer(g, &store);
                    let y = d.forward(&ctx, v[0])?;
                    Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
                },
                &[r],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    fn se(bands: usize) -> (ParamStore<f64>, SeLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = SeLstm::new(&mut store, &mut rng, "se", bands, [5, 16, bands]);
        (store, s)
    }

    #[test]
    fn se_gain_properties() {
        let (store, s) = se(4);
        let g = Graph::new();
        let ctx = Ctx::infer(&g, &store);
        let zeros: Vec<Var> = (0..9).map(|_| g.constant(Tensor::zeros(&[4, 16]))).collect();
        let gz = g.value(s.forward(&ctx, &zeros, 4).unwrap());
        assert!(gz.data().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats: Vec<Tensor<f64>> = (0..9).map(|_| Tensor::from_fn(&[4, 16], |_| rng.random_range(-3.0..3.0))).collect();
        let pos: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
        let neg: Vec<Var> = feats.iter().map(|t| g.constant(t.map(|v| -v))).collect();
        let gp = g.value(s.forward(&ctx, &pos, 4).unwrap());
        let gn = g.value(s.forward(&ctx, &neg, 4).unwrap());
        assert_eq!(*gp, *gn);
        assert!(gp.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn se_gradients() {
        let (store, s) = se(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let pts: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0))).collect();
            let w = Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
            let report = check_gradients(
                |g, v| {
                    let ctx = Ctx::infer(g, &store);
                    let y = s.forward(&ctx, v, 1)?;
                    Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
                },
                &pts,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
