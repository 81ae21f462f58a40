//! The full network: front-end, recurrent latent space and synthesis back-end.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, Phase, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Config, ModelConfig, TrainConfig};

use crate::audio::AudioClip;
use crate::autodiff::{Graph, ParamGroup, ParamStore, Real, Tensor, Var};
use crate::dsp::{frame_signal, make_context, overlap_add, FrameStack};
use crate::error::{Error, Result};
use crate::layers::{backend_mix, envelope_upsample, BiLstm, Ctx, DnnSaaf, FrontEnd, Saaf, SeLstm, SfirLayer};
use crate::seed::{stream_rng, Stream};

/// Layer wiring; holds only parameter handles.
#[derive(Clone, Debug)]
pub struct Network {
    pub frontend: FrontEnd,
    pub shared: Vec<BiLstm>,
    pub branch_env: BiLstm,
    pub saaf_env: Saaf,
    pub branch_fir: BiLstm,
    pub saaf_fir: Saaf,
    pub sfir: SfirLayer,
    pub dnn: DnnSaaf,
    pub se_direct: SeLstm,
    pub se_reverb: SeLstm,
}

/// Intermediate maps of one forward pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Var,
    /// Band decomposition of the current frame.
    pub x1: Var,
    /// SFIR values, position activations and integer slots of the current frame.
    pub values: Var,
    pub positions: Var,
    pub slots: Var,
    /// Waveshaped direct path and enveloped reverberant path of the current frame.
    pub x2: Var,
    pub x3: Var,
    pub g2: Var,
    pub g3: Var,
}

#[derive(Clone, Debug)]
pub struct ReverbModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub net: Network,
}

impl<T: Real> ReverbModel<T> {
    /// Fresh initialization from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut store = ParamStore::new();
        let c = &config;
        let (b, n) = (c.bands, c.steps());
        let frontend = FrontEnd::new(&mut store, &mut rng, b, c.kernel1, c.kernel2, c.pool);
        let mut shared = Vec::new();
        let mut width = b;
        for (i, &h) in c.shared_lstm.iter().enumerate() {
            let layer = BiLstm::new(&mut store, &mut rng, &format!("latent.shared{i}"), ParamGroup::Latent, width, h);
            width = layer.output_width();
            shared.push(layer);
        }
        let branch_env = BiLstm::new(&mut store, &mut rng, "latent.env", ParamGroup::Latent, width, c.branch_lstm);
        let saaf_env = Saaf::new(&mut store, "latent.env.saaf", ParamGroup::Latent, b, c.saaf_intervals);
        let branch_fir = BiLstm::new(&mut store, &mut rng, "latent.fir", ParamGroup::Latent, width, c.branch_lstm);
        let saaf_fir = Saaf::new(&mut store, "latent.fir.saaf", ParamGroup::Latent, b, c.saaf_intervals);
        let sfir = SfirLayer::new(&mut store, &mut rng, n, c.sfir_units, c.ts);
        let dnn = DnnSaaf::new(&mut store, &mut rng, b, &c.dnn_saaf, c.saaf_intervals);
        let se = [c.se_lstm[0], c.se_lstm[1], c.se_lstm[2]];
        let se_direct = SeLstm::new(&mut store, &mut rng, "se.direct", b, se);
        let se_reverb = SeLstm::new(&mut store, &mut rng, "se.reverb", b, se);
        let net = Network { frontend, shared, branch_env, saaf_env, branch_fir, saaf_fir, sfir, dnn, se_direct, se_reverb };
        Ok(ReverbModel { config, params: store, net })
    }

    /// Rebuilds the wiring for `config` and takes every value from `params`,
    /// matched by name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, found {}", model.params.len(), params.len())));
        }
        for (_, p) in params.iter() {
            let id = model.params.find(&p.name).ok_or_else(|| Error::Config(format!("unexpected parameter {}", p.name)))?;
            model.params.set_value(id, p.value().clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> ReverbModel<U> {
        ReverbModel { config: self.config.clone(), params: self.params.cast(), net: self.net.clone() }
    }

    /// `(name, group, scalar count)` for every tensor.
    pub fn census(&self) -> Vec<(String, ParamGroup, usize)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.group, p.value().len())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Builds a binding context for this model's parameters.
    pub fn infer_ctx<'a>(&'a self, g: &'a Graph<T>) -> Ctx<'a, T> {
        Ctx::infer(g, &self.params)
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, stack: &FrameStack<T>) -> Result<Var> {
        Ok(self.forward_trace(ctx, stack)?.output)
    }

    pub fn forward_trace(&self, ctx: &Ctx<'_, T>, stack: &FrameStack<T>) -> Result<Trace> {
        let c = &self.config;
        let net = &self.net;
        let g = ctx.g;
        let rows = c.window();
        if stack.frames.shape() != [rows, c.frame_size] {
            return Err(Error::Config(format!(
                "frame stack {:?} does not match the configured [{rows} x {}]",
                stack.frames.shape(),
                c.frame_size
            )));
        }
        let n = c.steps();
        let k = c.context;

        let mut x1s = Vec::with_capacity(rows);
        let mut pooled = Vec::with_capacity(rows);
        for j in 0..rows {
            let x = g.constant(Tensor::from_vec(stack.row(j).to_vec()));
            let fe = net.frontend.forward(ctx, x)?;
            pooled.push(g.transpose(fe.z)?);
            x1s.push(fe.x1);
        }

        let mut h = g.concat(&pooled, 0)?;
        for layer in &net.shared {
            h = layer.forward(ctx, h, c.dropout)?;
        }
        let z_env = net.saaf_env.forward(ctx, net.branch_env.forward(ctx, h, c.dropout)?)?;
        let z_fir = net.saaf_fir.forward(ctx, net.branch_fir.forward(ctx, h, c.dropout)?)?;

        let mut x2s = Vec::with_capacity(rows);
        let mut x3s = Vec::with_capacity(rows);
        let mut center = None;
        for (j, &x1) in x1s.iter().enumerate() {
            let z1 = g.transpose(g.slice_rows(z_env, j * n, (j + 1) * n)?)?;
            let z2 = g.transpose(g.slice_rows(z_fir, j * n, (j + 1) * n)?)?;
            let x4 = envelope_upsample(g, z1, c.pool)?;
            let (values, positions, slots) = net.sfir.build(ctx, z2)?;
            let x5 = g.sfir_apply(x1, values, slots, c.ts)?;
            x3s.push(g.mul(x5, x4)?);
            x2s.push(net.dnn.forward(ctx, x1)?);
            if j == k {
                center = Some((values, positions, slots));
            }
        }
        let (values, positions, slots) = center.expect("center row exists");

        let g2 = net.se_direct.forward(ctx, &x2s, k)?;
        let g3 = net.se_reverb.forward(ctx, &x3s, k)?;
        let x0 = backend_mix(g, x2s[k], x3s[k], g2, g3)?;
        let output = net.frontend.deconv(ctx, x0)?;
        Ok(Trace { output, x1: x1s[k], values, positions, slots, x2: x2s[k], x3: x3s[k], g2, g3 })
    }

    /// Front-end reconstruction of a single frame, used for pretraining.
    pub fn pretrain_forward(&self, ctx: &Ctx<'_, T>, frame: &[T]) -> Result<Var> {
        if frame.len() != self.config.frame_size {
            return Err(Error::Config(format!("frame of {} samples, expected {}", frame.len(), self.config.frame_size)));
        }
        let x = ctx.g.constant(Tensor::from_vec(frame.to_vec()));
        self.net.frontend.reconstruct(ctx, x)
    }

    /// Summed Lipschitz penalty of every SAAF, unweighted.
    pub fn saaf_penalty(&self, ctx: &Ctx<'_, T>) -> Result<Var> {
        let l = self.config.lipschitz_l;
        let net = &self.net;
        let a = net.saaf_env.penalty(ctx, l)?;
        let b = net.saaf_fir.penalty(ctx, l)?;
        let c = net.dnn.saaf.penalty(ctx, l)?;
        ctx.g.add(ctx.g.add(a, b)?, c)
    }

    /// Analysis frames of a signal, offset by one hop of leading silence so
    /// every input sample is covered by two frames.
    pub fn frames(&self, signal: &[T]) -> Result<Vec<Vec<T>>> {
        padded_frames(signal, self.config.frame_size, self.config.hop)
    }

    pub fn context(&self, frames: &[Vec<T>], i: usize) -> Result<FrameStack<T>> {
        make_context(frames, i, self.config.context, self.config.hop)
    }

    /// Frame, run every frame in inference mode, and overlap-add back to the
    /// input length.
    pub fn process_clip(&self, clip: &AudioClip) -> Result<AudioClip> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::invalid(format!(
                "clip is {} Hz, model expects {} Hz",
                clip.sample_rate(),
                self.config.sample_rate
            )));
        }
        let signal: Vec<T> = clip.samples().iter().map(|&s| T::lit(f64::from(s))).collect();
        let out = self.process_signal(&signal)?;
        let samples = out.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        AudioClip::new(samples, clip.sample_rate()).map_err(|_| Error::NumericFailure("model produced non-finite audio".into()))
    }

    pub fn process_signal(&self, signal: &[T]) -> Result<Vec<T>> {
        let frames = self.frames(signal)?;
        let mut outputs = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let stack = self.context(&frames, i)?;
            let g = Graph::new();
            let y = self.forward(&self.infer_ctx(&g), &stack)?;
            outputs.push(g.value(y).data().to_vec());
        }
        Ok(unpad(overlap_add(&outputs, self.config.hop)?, self.config.hop, signal.len()))
    }
}

/// [`frame_signal`] after prepending `hop` zeros.
pub fn padded_frames<T: Real>(signal: &[T], frame_size: usize, hop: usize) -> Result<Vec<Vec<T>>> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot frame an empty signal"));
    }
    let mut padded = vec![T::zero(); hop];
    padded.extend_from_slice(signal);
    frame_signal(&padded, frame_size, hop)
}

/// Inverse of the padding in [`padded_frames`] after overlap-add.
pub fn unpad<T: Real>(mut synth: Vec<T>, hop: usize, len: usize) -> Vec<T> {
    synth.drain(..hop.min(synth.len()));
    synth.truncate(len);
    synth
}
