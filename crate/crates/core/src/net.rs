//! The three-level encoder-decoder segmentation network and its ablation
//! variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::params::StatsUpdate;
use crate::nn::{
    BatchNorm, BatchNormConfig, BlockConfig, Conv2d, Ctx, DropBlockConfig, DropBlockPlacement, Initializer, Mode,
    ParamStore, PreActResidualBlock, Rsab, SaPlacement, Upsample,
};
use crate::tensor::Tensor;

/// Number of pooling steps between input and bottleneck.
pub const DEPTH: usize = 3;

/// Spatial dims must be a multiple of this.
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pre-activation residual blocks only, no DropBlock.
    Backbone,
    /// Residual blocks with DropBlock.
    BackboneDropblock,
    /// Residual blocks with DropBlock, second block of each stage an RSAB.
    Rsan,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Backbone, Variant::BackboneDropblock, Variant::Rsan];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::BackboneDropblock => "backbone_dropblock",
            Variant::Rsan => "rsan",
        }
    }

    pub fn uses_dropblock(self) -> bool {
        !matches!(self, Variant::Backbone)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Rsan)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "backbone" => Ok(Variant::Backbone),
            "backbone_dropblock" | "backbone+dropblock" => Ok(Variant::BackboneDropblock),
            "rsan" => Ok(Variant::Rsan),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Widths of the three encoder stages and the bottleneck.
    pub stage_channels: [usize; 4],
    pub input_channels: usize,
    pub dropblock: DropBlockConfig,
    #[serde(default)]
    pub dropblock_placement: DropBlockPlacement,
    #[serde(default)]
    pub sa_placement: SaPlacement,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::Rsan,
            stage_channels: [16, 32, 64, 128],
            input_channels: 3,
            dropblock: DropBlockConfig::default(),
            dropblock_placement: DropBlockPlacement::default(),
            sa_placement: SaPlacement::default(),
            batch_norm: BatchNormConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn new(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            ..Default::default()
        }
    }

    /// Widths used at full image resolution.
    pub fn full_width(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            stage_channels: [32, 64, 128, 256],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must be positive and strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        self.dropblock.validate()
    }

    /// DropBlock as actually applied: disabled for the backbone variant.
    pub fn effective_dropblock(&self) -> Option<DropBlockConfig> {
        self.variant.uses_dropblock().then_some(self.dropblock)
    }
}

#[derive(Debug, Clone)]
pub enum SecondBlock {
    Residual(PreActResidualBlock),
    Rsab(Rsab),
}

/// residual block -> residual block or RSAB -> BN -> ReLU.
#[derive(Debug, Clone)]
pub struct Stage {
    pub first: PreActResidualBlock,
    pub second: SecondBlock,
    pub bn: BatchNorm,
}

impl Stage {
    fn new<E: Element>(
        init: &mut Initializer<'_, E>,
        config: &NetworkConfig,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let block = |cin, cout| BlockConfig {
            in_channels: cin,
            out_channels: cout,
            dropblock: config.effective_dropblock(),
            placement: config.dropblock_placement,
            bn: config.batch_norm,
        };
        let first = PreActResidualBlock::new(&mut init.scope("res"), &block(in_channels, out_channels))?;
        let second = if config.variant.uses_attention() {
            SecondBlock::Rsab(Rsab::new(
                &mut init.scope("rsab"),
                &block(out_channels, out_channels),
                config.sa_placement,
            )?)
        } else {
            SecondBlock::Residual(PreActResidualBlock::new(
                &mut init.scope("res2"),
                &block(out_channels, out_channels),
            )?)
        };
        let bn = BatchNorm::new(&mut init.scope("bn"), out_channels, config.batch_norm)?;
        Ok(Stage { first, second, bn })
    }

    fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = match &self.second {
            SecondBlock::Residual(b) => b.forward(ctx, y)?,
            SecondBlock::Rsab(b) => b.forward(ctx, y)?,
        };
        let y = self.bn.forward(ctx, y)?;
        ctx.graph.relu(y)
    }
}

/// Result of a forward pass over a recording graph.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Probability map, `N x H x W x 1`.
    pub output: Var,
    /// Graph variable of each store entry that took part in the pass.
    pub bindings: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct Network<E: Element = f32> {
    config: NetworkConfig,
    params: ParamStore<E>,
    encoders: Vec<Stage>,
    bottleneck: Stage,
    upsamplers: Vec<Upsample>,
    decoders: Vec<Stage>,
    head: Conv2d,
}

impl<E: Element> Network<E> {
    /// Builds the network with parameters drawn from a seeded stream.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut params, &mut rng);
        let ch = config.stage_channels;

        let mut encoders = Vec::with_capacity(DEPTH);
        let mut prev = config.input_channels;
        for (level, &c) in ch[..DEPTH].iter().enumerate() {
            encoders.push(Stage::new(
                &mut init.scope(&format!("enc{}", level + 1)),
                &config,
                prev,
                c,
            )?);
            prev = c;
        }
        let bottleneck = Stage::new(&mut init.scope("bottleneck"), &config, prev, ch[DEPTH])?;
        prev = ch[DEPTH];

        let mut upsamplers = Vec::with_capacity(DEPTH);
        let mut decoders = Vec::with_capacity(DEPTH);
        for level in (0..DEPTH).rev() {
            let c = ch[level];
            upsamplers.push(Upsample::new(&mut init.scope(&format!("up{}", level + 1)), prev, c)?);
            decoders.push(Stage::new(
                &mut init.scope(&format!("dec{}", level + 1)),
                &config,
                2 * c,
                c,
            )?);
            prev = c;
        }
        let head = Conv2d::new(&mut init.scope("head"), 1, prev, 1, true)?;

        Ok(Network {
            config,
            params,
            encoders,
            bottleneck,
            upsamplers,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn rsab_count(&self) -> usize {
        self.stages()
            .filter(|s| matches!(s.second, SecondBlock::Rsab(_)))
            .count()
    }

    fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter())
    }

    /// Same architecture and values at another precision.
    pub fn cast<F: Element>(&self) -> Network<F> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            bottleneck: self.bottleneck.clone(),
            upsamplers: self.upsamplers.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, h, w, c] = shape else {
            return Err(Error::invalid_shape("network input", shape, "expected N x H x W x C"));
        };
        if c != self.config.input_channels {
            return Err(Error::invalid_shape(
                "network input",
                shape,
                format!("expected {} channels", self.config.input_channels),
            ));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::PaddingRequired {
                height: h,
                width: w,
                multiple: SIZE_MULTIPLE,
            });
        }
        Ok(())
    }

    fn run(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        self.check_input(ctx.graph.shape(x))?;
        let mut skips = Vec::with_capacity(DEPTH);
        let mut y = x;
        for stage in &self.encoders {
            y = stage.forward(ctx, y)?;
            skips.push(y);
            y = ctx.graph.maxpool2d(y, 2)?;
        }
        y = self.bottleneck.forward(ctx, y)?;
        for ((up, stage), skip) in self.upsamplers.iter().zip(&self.decoders).zip(skips.into_iter().rev()) {
            let u = up.forward(ctx, y)?;
            let merged = ctx.graph.concat_channels(skip, u)?;
            y = stage.forward(ctx, merged)?;
        }
        let logits = self.head.forward(ctx, y)?;
        ctx.graph.sigmoid(logits)
    }

    /// Forward pass that leaves running statistics untouched.
    pub fn forward_frozen(
        &self,
        graph: &mut Graph<E>,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.forward_inner(graph, x, mode, rng).map(|(pass, _)| pass)
    }

    /// Forward pass; in training mode batch-norm running statistics are updated.
    pub fn forward(
        &mut self,
        graph: &mut Graph<E>,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let (pass, updates) = self.forward_inner(graph, x, mode, rng)?;
        for u in updates {
            self.apply_update(&u);
        }
        Ok(pass)
    }

    fn forward_inner(
        &self,
        graph: &mut Graph<E>,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardPass, Vec<StatsUpdate>)> {
        let mut ctx = Ctx::new(graph, &self.params, mode, rng);
        let output = self.run(&mut ctx, x)?;
        let (bindings, updates) = ctx.into_bindings();
        Ok((ForwardPass { output, bindings }, updates))
    }

    fn apply_update(&mut self, u: &StatsUpdate) {
        let m = u.momentum;
        let unbias = u.stats.count as f64 / (u.stats.count as f64 - 1.0);
        let mean = self.params.get_mut(u.mean).value.data_mut();
        for (r, &b) in mean.iter_mut().zip(&u.stats.mean) {
            *r = E::from_f64(m * r.as_f64() + (1.0 - m) * b);
        }
        let var = self.params.get_mut(u.var).value.data_mut();
        for (r, &b) in var.iter_mut().zip(&u.stats.var) {
            *r = E::from_f64(m * r.as_f64() + (1.0 - m) * b * unbias);
        }
    }

    /// Eval-mode probabilities for `N x H x W x C` (or a single `H x W x C`) input.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let single = x.rank() == 3;
        let input = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            x.clone().reshape(&shape)?
        } else {
            x.clone()
        };
        let mut graph = Graph::inference();
        let xv = graph.leaf(input);
        let pass = self.forward_frozen(&mut graph, xv, Mode::Eval, None)?;
        let out = graph.take_value(pass.output);
        if single {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> NetworkConfig {
        NetworkConfig {
            variant,
            stage_channels: [4, 6, 8, 10],
            dropblock: DropBlockConfig::new(3, 0.9).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn parameter_names_are_unique_and_scoped() {
        let net = Network::<f32>::build(tiny(Variant::Rsan), 0).unwrap();
        let names: Vec<_> = net.params().iter().map(|p| p.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"enc1.rsab.sa.weight"));
        assert!(names.contains(&"dec3.bn.running_var"));
        assert!(names.contains(&"enc1.res.proj.weight"));
    }

    #[test]
    fn rejects_unpadded_input_and_bad_config() {
        let net = Network::<f32>::build(tiny(Variant::Backbone), 0).unwrap();
        let x = Tensor::zeros(&[1, 12, 16, 3]).unwrap();
        assert!(matches!(net.predict(&x), Err(Error::PaddingRequired { .. })));
        let mut cfg = tiny(Variant::Rsan);
        cfg.stage_channels = [8, 8, 16, 32];
        assert!(Network::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn variant_parses_from_cli_spellings() {
        assert_eq!(
            "backbone-dropblock".parse::<Variant>().unwrap(),
            Variant::BackboneDropblock
        );
        assert_eq!("RSAN".parse::<Variant>().unwrap(), Variant::Rsan);
        assert!("unet".parse::<Variant>().is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let net = Network::<f32>::build(tiny(Variant::Rsan), 1).unwrap();
        let x = Tensor::full(&[2, 16, 24, 3], 0.3).unwrap();
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 16, 24, 1]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
