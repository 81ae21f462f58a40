//! Learned filter-bank front-end and its tied-weight synthesis transpose.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::init::glorot_uniform;
use super::Ctx;
use crate::autodiff::{ParamGroup, ParamId, ParamStore, Padding, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FrontEnd {
    /// `[B × K1]`, shared with the deconvolution.
    pub conv: ParamId,
    /// `[B × K2]`, one kernel per band.
    pub local: ParamId,
    pub local_bias: ParamId,
    pub pool: usize,
}

/// Front-end output for one frame.
#[derive(Clone, Debug)]
pub struct FrontendOut {
    /// Band decomposition `X₁ = conv(x)`, `[B × T]`, before the absolute value.
    pub x1: Var,
    /// Pooled envelope features `[B × T/pool]`.
    pub z: Var,
    /// Absolute argmax positions of every pooling window.
    pub indices: Rc<Vec<usize>>,
}

impl FrontEnd {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, bands: usize, k1: usize, k2: usize, pool: usize) -> Self {
        let g = ParamGroup::Frontend;
        FrontEnd {
            conv: store.add("frontend.conv", g, glorot_uniform(rng, &[bands, k1], k1, k1 * bands)),
            local: store.add("frontend.local", g, glorot_uniform(rng, &[bands, k2], k2, k2)),
            local_bias: store.add("frontend.local_bias", g, Tensor::zeros(&[bands])),
            pool,
        }
    }

    /// `x: [T]` → conv → |·| → local conv + softplus → max-pool.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<FrontendOut> {
        let g = ctx.g;
        let x1 = g.conv1d(x, ctx.p(self.conv), Padding::Same)?;
        let m = g.softplus(g.conv1d_local(g.abs(x1), ctx.p(self.local), ctx.p(self.local_bias))?);
        let (z, indices) = g.maxpool(m, self.pool)?;
        Ok(FrontendOut { x1, z, indices })
    }

    /// Transposed convolution with the Conv1D kernels. The layer owns no
    /// weights; the shared kernels collect gradient from both uses.
    pub fn deconv<T: Real>(&self, ctx: &Ctx<'_, T>, y: Var) -> Result<Var> {
        ctx.g.conv1d_transpose(y, ctx.p(self.conv))
    }

    /// Reconstruction path used for pretraining: the pooled features are
    /// unpooled to their recorded positions, multiplied by the band
    /// decomposition and synthesized by the deconvolution.
    pub fn reconstruct<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let out = self.forward(ctx, x)?;
        let len = ctx.g.shape(x)[0];
        let unpooled = ctx.g.unpool(out.z, &out.indices, len)?;
        let gated = ctx.g.mul(unpooled, out.x1)?;
        self.deconv(ctx, gated)
    }
}
