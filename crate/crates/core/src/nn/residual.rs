//! Pre-activation residual blocks, optionally regularized with DropBlock
//! and optionally reweighted by spatial attention (RSAB).

use serde::{Deserialize, Serialize};

use super::attention::SpatialAttention;
use super::dropblock::{apply_dropblock, DropBlockConfig};
use super::layers::{BatchNorm, BatchNormConfig, Conv2d};
use super::params::{Ctx, Initializer};
use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};

/// Where DropBlock sits inside a pre-activation residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropBlockPlacement {
    /// Before each of the two convolutions.
    #[default]
    PerConv,
    /// Once per block, before the second convolution.
    PerBlock,
}

/// Where the attention map is applied inside an RSAB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaPlacement {
    /// Reweight the residual branch before the shortcut is added.
    #[default]
    Branch,
    /// Reweight the sum of branch and shortcut.
    Post,
}

/// BN -> ReLU -> (DropBlock) -> conv3x3.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub bn: BatchNorm,
    pub dropblock: Option<DropBlockConfig>,
    pub conv: Conv2d,
}

impl ConvUnit {
    pub fn new<E: Element>(
        init: &mut Initializer<'_, E>,
        in_channels: usize,
        out_channels: usize,
        dropblock: Option<DropBlockConfig>,
        bn: BatchNormConfig,
    ) -> Result<Self> {
        Ok(ConvUnit {
            bn: BatchNorm::new(&mut init.scope("bn"), in_channels, bn)?,
            dropblock,
            conv: Conv2d::new(&mut init.scope("conv"), 3, in_channels, out_channels, true)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.bn.forward(ctx, x)?;
        let mut y = ctx.graph.relu(y)?;
        if let Some(cfg) = &self.dropblock {
            let mode = ctx.mode;
            let (graph, rng) = ctx.graph_and_rng();
            y = apply_dropblock(graph, y, cfg, mode, rng)?;
        }
        self.conv.forward(ctx, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropblock: Option<DropBlockConfig>,
    pub placement: DropBlockPlacement,
    pub bn: BatchNormConfig,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        BlockConfig {
            in_channels,
            out_channels,
            dropblock: None,
            placement: DropBlockPlacement::default(),
            bn: BatchNormConfig::default(),
        }
    }

    pub fn with_dropblock(mut self, cfg: Option<DropBlockConfig>) -> Self {
        self.dropblock = cfg;
        self
    }
}

/// `y = F(x) + h(x)` with `F` two pre-activation conv units and `h` the
/// identity, or a 1x1 projection when the channel count changes. No
/// activation follows the addition.
#[derive(Debug, Clone)]
pub struct PreActResidualBlock {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub projection: Option<Conv2d>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PreActResidualBlock {
    pub fn new<E: Element>(init: &mut Initializer<'_, E>, cfg: &BlockConfig) -> Result<Self> {
        if let Some(db) = &cfg.dropblock {
            db.validate()?;
        }
        let (db1, db2) = match cfg.placement {
            DropBlockPlacement::PerConv => (cfg.dropblock, cfg.dropblock),
            DropBlockPlacement::PerBlock => (None, cfg.dropblock),
        };
        let first = ConvUnit::new(&mut init.scope("unit1"), cfg.in_channels, cfg.out_channels, db1, cfg.bn)?;
        let second = ConvUnit::new(
            &mut init.scope("unit2"),
            cfg.out_channels,
            cfg.out_channels,
            db2,
            cfg.bn,
        )?;
        let projection = if cfg.in_channels != cfg.out_channels {
            Some(Conv2d::new(
                &mut init.scope("proj"),
                1,
                cfg.in_channels,
                cfg.out_channels,
                true,
            )?)
        } else {
            None
        };
        Ok(PreActResidualBlock {
            first,
            second,
            projection,
            in_channels: cfg.in_channels,
            out_channels: cfg.out_channels,
        })
    }

    fn check_input<E: Element>(&self, ctx: &Ctx<'_, E>, x: Var) -> Result<()> {
        let [.., c] = ctx.graph.value(x).nhwc("residual block")?;
        if c != self.in_channels {
            return Err(Error::shape("residual block", ctx.graph.shape(x), &[self.in_channels]));
        }
        Ok(())
    }

    /// The residual function `F(x)`.
    pub fn branch<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        self.check_input(ctx, x)?;
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }

    /// The shortcut `h(x)`.
    pub fn shortcut<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        match &self.projection {
            Some(p) => p.forward(ctx, x),
            None => Ok(x),
        }
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let f = self.branch(ctx, x)?;
        let h = self.shortcut(ctx, x)?;
        ctx.graph.add(f, h)
    }
}

/// Residual spatial attention block: a pre-activation residual block
/// whose output is reweighted by a [`SpatialAttention`] map.
#[derive(Debug, Clone)]
pub struct Rsab {
    pub body: PreActResidualBlock,
    pub attention: SpatialAttention,
    pub placement: SaPlacement,
}

impl Rsab {
    pub fn new<E: Element>(init: &mut Initializer<'_, E>, cfg: &BlockConfig, placement: SaPlacement) -> Result<Self> {
        let body = PreActResidualBlock::new(init, cfg)?;
        let attention = SpatialAttention::new(&mut init.scope("sa"))?;
        Ok(Rsab {
            body,
            attention,
            placement,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        match self.placement {
            SaPlacement::Branch => {
                let f = self.body.branch(ctx, x)?;
                let attended = self.attention.forward(ctx, f)?;
                let h = self.body.shortcut(ctx, x)?;
                ctx.graph.add(attended.output, h)
            }
            SaPlacement::Post => {
                let y = self.body.forward(ctx, x)?;
                Ok(self.attention.forward(ctx, y)?.output)
            }
        }
    }
}
