//! Pretraining, supervised training with early stopping, and fine-tuning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::loss::{compute_loss, loss_graph};
use crate::audio::ClipPair;
use crate::autodiff::{AdamState, Graph, Param, ParamGroup, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{Checkpoint, Phase, ReverbModel, TrainConfig};
use crate::seed::{stream_rng, Stream};

/// A clip cut into the model's padded analysis frames.
#[derive(Clone, Debug)]
pub struct ClipFrames<T> {
    pub id: String,
    pub dry: Vec<Vec<T>>,
    pub wet: Vec<Vec<T>>,
}

impl<T: Real> ClipFrames<T> {
    pub fn new(model: &ReverbModel<T>, pair: &ClipPair) -> Result<Self> {
        let rate = model.config.sample_rate;
        if pair.dry.sample_rate() != rate {
            return Err(Error::invalid(format!("{}: {} Hz audio for a {rate} Hz model", pair.id, pair.dry.sample_rate())));
        }
        let conv = |s: &[f32]| s.iter().map(|&v| T::lit(f64::from(v))).collect::<Vec<T>>();
        Ok(ClipFrames {
            id: pair.id.clone(),
            dry: model.frames(&conv(pair.dry.samples()))?,
            wet: model.frames(&conv(pair.wet.samples()))?,
        })
    }

    pub fn from_pairs(model: &ReverbModel<T>, pairs: &[&ClipPair]) -> Result<Vec<Self>> {
        pairs.iter().map(|p| Self::new(model, p)).collect()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,phase,lr,train_loss,val_loss";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:?},{:?},{:?}", r.epoch, r.phase.as_str(), r.lr, r.train_loss, r.val_loss);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

/// Outcome of one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub lr: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    /// False when the phase ran into its epoch cap instead.
    pub stopped_early: bool,
}

/// Owns the model under training and every random stream of the run.
pub struct Trainer<T: Real> {
    pub model: ReverbModel<T>,
    pub config: TrainConfig,
    pub log: TrainingLog,
    /// Best validation loss over every supervised phase so far.
    pub best_val: f64,
    pub phase: Phase,
    pub epoch: usize,
    adam: Option<AdamState<T>>,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    progress: Option<Box<dyn FnMut(&EpochRecord)>>,
    stop: Option<Box<dyn FnMut(&EpochRecord) -> bool>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ReverbModel<T>, config: TrainConfig) -> Self {
        let seed = config.seed;
        Trainer {
            model,
            config,
            log: TrainingLog::default(),
            best_val: f64::INFINITY,
            phase: Phase::Init,
            epoch: 0,
            adam: None,
            shuffle: stream_rng(seed, Stream::Shuffle),
            dropout: stream_rng(seed, Stream::Dropout),
            progress: None,
            stop: None,
        }
    }

    /// Resumes from a checkpoint's weights; the run restarts its random streams.
    pub fn from_checkpoint(ck: Checkpoint<T>, config: TrainConfig) -> Self {
        let mut t = Self::new(ck.model, config);
        t.phase = ck.phase;
        t
    }

    /// Called after every epoch with the new log line.
    pub fn on_epoch(&mut self, f: impl FnMut(&EpochRecord) + 'static) {
        self.progress = Some(Box::new(f));
    }

    /// Ends the current phase after any epoch for which `f` returns true.
    pub fn stop_when(&mut self, f: impl FnMut(&EpochRecord) -> bool + 'static) {
        self.stop = Some(Box::new(f));
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            phase: self.phase,
            epoch: self.epoch,
            best_val: self.best_val,
            adam: self.adam.clone(),
        }
    }

    /// Front-end reconstruction of dry and wet frames, summed, updating only
    /// the front-end convolutions.
    pub fn pretrain(&mut self, train: &[ClipFrames<T>], val: &[ClipFrames<T>]) -> Result<PhaseReport> {
        let (lr, max) = (self.config.lr, self.config.max_epochs_pretrain);
        let report = self.run_phase(Phase::Pretrain, lr, max, train, val)?;
        // supervised phases compare a different loss
        self.best_val = f64::INFINITY;
        Ok(report)
    }

    /// Main phase, then fine-tuning from its best weights at a reduced rate.
    /// Leaves the model at the best validation loss of both.
    pub fn train(&mut self, train: &[ClipFrames<T>], val: &[ClipFrames<T>]) -> Result<(PhaseReport, PhaseReport)> {
        let c = self.config.clone();
        let main = self.run_phase(Phase::Main, c.lr, c.max_epochs_main, train, val)?;
        let fine = self.run_phase(Phase::Finetune, c.lr * c.finetune_factor, c.max_epochs_finetune, train, val)?;
        Ok((main, fine))
    }

    /// One phase with its own Adam state. Stops once `patience` epochs pass
    /// without a new best validation loss, then restores the best weights if
    /// they beat everything seen in earlier supervised phases.
    pub fn run_phase(&mut self, phase: Phase, lr: f64, max_epochs: usize, train: &[ClipFrames<T>], val: &[ClipFrames<T>]) -> Result<PhaseReport> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(format!("{} needs non-empty training and validation sets", phase.as_str())));
        }
        info!("{} phase: lr {lr:e}, up to {max_epochs} epochs, {} training clips", phase.as_str(), train.len());
        self.phase = phase;
        let mut opt = AdamState::new(T::lit(lr));
        // entering weights are the best of earlier supervised phases
        let entry = self.model.params.clone();
        let mut best: Option<(f64, usize, ParamStore<T>)> = None;
        let mut report = PhaseReport { phase, lr, epochs: 0, best_epoch: 0, best_val: f64::INFINITY, stopped_early: false };

        for epoch in 0..max_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.shuffle);
            let mut train_loss = 0.0;
            for &c in &order {
                train_loss += self.step_clip(&train[c], phase, &mut opt)?;
            }
            train_loss /= train.len() as f64;
            let val_loss = val.iter().map(|c| self.clip_loss(c, phase)).sum::<Result<f64>>()? / val.len() as f64;
            if !val_loss.is_finite() {
                return Err(Error::NumericFailure(format!("{} epoch {epoch}: validation loss is {val_loss}", phase.as_str())));
            }

            let rec = EpochRecord { epoch, phase, lr, train_loss, val_loss };
            debug!("{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", phase.as_str());
            self.log.records.push(rec);
            if let Some(f) = self.progress.as_mut() {
                f(&rec);
            }
            self.epoch = epoch;
            report.epochs = epoch + 1;

            if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
                best = Some((val_loss, epoch, self.model.params.clone()));
            }
            let best_epoch = best.as_ref().map_or(0, |b| b.1);
            if epoch - best_epoch >= self.config.patience {
                report.stopped_early = true;
                break;
            }
            if self.stop.as_mut().is_some_and(|f| f(&rec)) {
                break;
            }
        }

        let (best_val, best_epoch, params) = best.expect("at least one epoch ran");
        report.best_val = best_val;
        report.best_epoch = best_epoch;
        if phase == Phase::Pretrain || best_val < self.best_val {
            self.model.params = params;
            self.best_val = best_val;
        } else {
            self.model.params = entry;
        }
        self.model.params.zero_grads();
        self.adam = Some(opt);
        info!(
            "{} phase ended after {} epochs; best validation loss {best_val:.6} at epoch {best_epoch}",
            phase.as_str(),
            report.epochs
        );
        Ok(report)
    }

    /// One optimizer step on the mean gradient over all frames of a clip.
    /// Returns the mean frame loss before the step.
    fn step_clip(&mut self, clip: &ClipFrames<T>, phase: Phase, opt: &mut AdamState<T>) -> Result<f64> {
        let n = clip.dry.len();
        let scale = T::one() / T::lit(n as f64);
        let mut total = 0.0;
        let model = &self.model;
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let g = Graph::new();
            let loss = if phase == Phase::Pretrain {
                let ctx = Ctx::train(&g, &model.params, None);
                let lx = self::frame_pair_loss(&g, model, &ctx, &clip.dry[i])?;
                let ly = self::frame_pair_loss(&g, model, &ctx, &clip.wet[i])?;
                g.add(lx, ly)?
            } else {
                let stack = model.context(&clip.dry, i)?;
                let ctx = Ctx::train(&g, &model.params, Some(&mut self.dropout));
                let y = model.forward(&ctx, &stack)?;
                let t = g.constant(Tensor::from_vec(clip.wet[i].clone()));
                loss_graph(&g, t, y)?.total
            };
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NumericFailure(format!("{}: loss is {value} on frame {i} of {}", phase.as_str(), clip.id)));
            }
            total += value;
            grads.push(g.backward(loss)?);
        }
        for gr in &grads {
            self.model.params.accumulate(gr, scale);
        }
        let weight = self.model.config.lipschitz_weight;
        if phase != Phase::Pretrain && weight > 0.0 {
            let g = Graph::new();
            let ctx = Ctx::train(&g, &self.model.params, None);
            let p = g.scale(self.model.saaf_penalty(&ctx)?, T::lit(weight));
            let gr = g.backward(p)?;
            self.model.params.accumulate(&gr, T::one());
        }
        let active = |p: &Param<T>| phase != Phase::Pretrain || p.group == ParamGroup::Frontend;
        opt.step(&mut self.model.params, active)?;
        Ok(total / n as f64)
    }

    /// Mean frame loss of a clip in inference mode: reconstruction loss for
    /// pretraining, the supervised loss otherwise.
    pub fn clip_loss(&self, clip: &ClipFrames<T>, phase: Phase) -> Result<f64> {
        frame_loss(&self.model, clip, phase)
    }
}

fn frame_pair_loss<T: Real>(g: &Graph<T>, model: &ReverbModel<T>, ctx: &Ctx<'_, T>, frame: &[T]) -> Result<crate::autodiff::Var> {
    let r = model.pretrain_forward(ctx, frame)?;
    let t = g.constant(Tensor::from_vec(frame.to_vec()));
    Ok(loss_graph(g, t, r)?.total)
}

/// Mean per-frame loss of `clip` without recording gradients.
pub fn frame_loss<T: Real>(model: &ReverbModel<T>, clip: &ClipFrames<T>, phase: Phase) -> Result<f64> {
    let n = clip.dry.len();
    let mut total = 0.0;
    for i in 0..n {
        let g = Graph::new();
        let ctx = model.infer_ctx(&g);
        total += if phase == Phase::Pretrain {
            let rx = g.value(model.pretrain_forward(&ctx, &clip.dry[i])?);
            let ry = g.value(model.pretrain_forward(&ctx, &clip.wet[i])?);
            compute_loss(&clip.dry[i], rx.data())?.total + compute_loss(&clip.wet[i], ry.data())?.total
        } else {
            let y = g.value(model.forward(&ctx, &model.context(&clip.dry, i)?)?);
            compute_loss(&clip.wet[i], y.data())?.total
        };
    }
    Ok(total / n as f64)
}
