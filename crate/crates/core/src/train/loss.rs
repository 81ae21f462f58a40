//! Frame loss: pre-emphasized time-domain MAE plus a small log-spectral MSE.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::dsp::PRE_EMPHASIS;
use crate::error::{Error, Result};

pub const ALPHA_TIME: f64 = 1.0;
pub const ALPHA_SPEC: f64 = 1e-4;

/// The two loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mae_time: f64,
    pub mse_spec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(mae_time: f64, mse_spec: f64) -> Self {
        LossBreakdown { mae_time, mse_spec, total: ALPHA_TIME * mae_time + ALPHA_SPEC * mse_spec }
    }

    /// Term-wise mean; the total stays the weighted sum of the means.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mae = items.iter().map(|l| l.mae_time).sum::<f64>() / n;
        let mse = items.iter().map(|l| l.mse_spec).sum::<f64>() / n;
        Self::from_terms(mae, mse)
    }
}

/// Loss nodes recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mae: Var,
    pub mse: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let f = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown { mae_time: f(self.mae), mse_spec: f(self.mse), total: f(self.total) }
    }
}

/// Records the loss between `target` and `output` frames.
pub fn loss_graph<T: Real>(g: &Graph<T>, target: Var, output: Var) -> Result<LossVars> {
    let (a, b) = (g.shape(target), g.shape(output));
    if a != b || a.len() != 1 {
        return Err(Error::shape(format!("loss needs two equal-length frames, got {a:?} and {b:?}")));
    }
    let coeff = T::lit(PRE_EMPHASIS);
    let diff = g.sub(g.pre_emphasis(target, coeff)?, g.pre_emphasis(output, coeff)?)?;
    let mae = g.mean(g.abs(diff));
    let spec = g.sub(g.log_power_spectrum(target)?, g.log_power_spectrum(output)?)?;
    let mse = g.mean(g.square(spec));
    let total = g.add(g.scale(mae, T::lit(ALPHA_TIME)), g.scale(mse, T::lit(ALPHA_SPEC)))?;
    Ok(LossVars { mae, mse, total })
}

/// Loss of two frames without recording gradients.
pub fn compute_loss<T: Real>(target: &[T], output: &[T]) -> Result<LossBreakdown> {
    let g = Graph::new();
    let t = g.constant(Tensor::from_vec(target.to_vec()));
    let o = g.constant(Tensor::from_vec(output.to_vec()));
    Ok(loss_graph(&g, t, o)?.breakdown(&g))
}
