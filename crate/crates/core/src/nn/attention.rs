use super::params::{Ctx, Initializer, ParamId, ParamStore};
use crate::autodiff::{Padding, Var};
use crate::element::Element;
use crate::error::Result;
use crate::tensor::Tensor;

pub const SA_KERNEL: usize = 7;

/// Spatial attention: a biasless 7x7 convolution over the channel-wise
/// max and mean maps, squashed by a sigmoid into a per-pixel weight.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub kernel: ParamId,
}

/// Output of [`SpatialAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// Attention map, `N x H x W x 1`.
    pub map: Var,
    /// Input reweighted by the map.
    pub output: Var,
}

impl SpatialAttention {
    pub fn new<E: Element>(init: &mut Initializer<'_, E>) -> Result<Self> {
        let kernel = init.he_normal("weight", &[SA_KERNEL, SA_KERNEL, 2, 1], SA_KERNEL * SA_KERNEL * 2)?;
        Ok(SpatialAttention { kernel })
    }

    pub fn zeroed<E: Element>(init: &mut Initializer<'_, E>) -> Result<Self> {
        let kernel = init.add("weight", Tensor::zeros(&[SA_KERNEL, SA_KERNEL, 2, 1])?, true)?;
        Ok(SpatialAttention { kernel })
    }

    pub fn parameter_count<E: Element>(&self, store: &ParamStore<E>) -> usize {
        store.get(self.kernel).value.len()
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, features: Var) -> Result<Attended> {
        let k = ctx.var(self.kernel);
        let g = &mut *ctx.graph;
        let max = g.channel_max(features)?;
        let avg = g.channel_avg(features)?;
        let descriptor = g.concat_channels(max, avg)?;
        let logits = g.conv2d(descriptor, k, None, 1, Padding::Same)?;
        let map = g.sigmoid(logits)?;
        let output = g.mul_broadcast(features, map)?;
        Ok(Attended { map, output })
    }
}
