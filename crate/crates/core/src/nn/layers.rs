use super::params::{Ctx, Initializer, Mode, ParamId, StatsUpdate, RUNNING_MEAN_SUFFIX, RUNNING_VAR_SUFFIX};
use crate::autodiff::{Padding, Var};
use crate::element::Element;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// Square `kernel x kernel` convolution with same padding and stride 1.
    pub fn new<E: Element>(
        init: &mut Initializer<'_, E>,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.he_normal(
            "weight",
            &[kernel, kernel, in_channels, out_channels],
            kernel * kernel * in_channels,
        )?;
        let bias = if bias {
            Some(init.constant("bias", &[out_channels], 0.0, true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let k = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.graph.conv2d(x, k, b, 1, Padding::Same)
    }
}

/// `2 x 2`, stride-2 transposed convolution that doubles H and W.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new<E: Element>(init: &mut Initializer<'_, E>, in_channels: usize, out_channels: usize) -> Result<Self> {
        // each output pixel sees exactly one input pixel
        let weight = init.he_normal("weight", &[2, 2, out_channels, in_channels], in_channels)?;
        let bias = init.constant("bias", &[out_channels], 0.0, true)?;
        Ok(Upsample { weight, bias })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let k = ctx.var(self.weight);
        let b = ctx.var(self.bias);
        ctx.graph.conv2d_transpose(x, k, Some(b), 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    /// Weight on the previous running estimate.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub config: BatchNormConfig,
}

impl BatchNorm {
    pub fn new<E: Element>(init: &mut Initializer<'_, E>, channels: usize, config: BatchNormConfig) -> Result<Self> {
        Ok(BatchNorm {
            gamma: init.constant("gamma", &[channels], 1.0, true)?,
            beta: init.constant("beta", &[channels], 0.0, true)?,
            running_mean: init.constant(RUNNING_MEAN_SUFFIX.trim_start_matches('.'), &[channels], 0.0, false)?,
            running_var: init.constant(RUNNING_VAR_SUFFIX.trim_start_matches('.'), &[channels], 1.0, false)?,
            config,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, self.config.eps)?;
                ctx.updates.push(StatsUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.config.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.param(self.running_mean).data().to_vec();
                let var = ctx.param(self.running_var).data().to_vec();
                ctx.graph.batch_norm_eval(x, gamma, beta, &mean, &var, self.config.eps)
            }
        }
    }
}
