//! DropBlock: structured dropout that zeroes contiguous square regions.
//!
//! Seeds are drawn only at centers where a whole block fits. Because
//! neighbouring blocks overlap and border pixels are covered by fewer
//! candidate blocks, the nominal seed rate under-drops; the default
//! [`SeedRate::Calibrated`] solves for the rate whose expected zero
//! fraction equals `1 - keep_prob` exactly for the feature size at hand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Mode;
use crate::autodiff::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedRate {
    /// `(1 - keep) / bs^2 * HW / ((H - bs + 1)(W - bs + 1))`.
    Nominal,
    /// Rate whose expected zero fraction is exactly `1 - keep`.
    #[default]
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub keep_prob: f64,
    #[serde(default)]
    pub seed_rate: SeedRate,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            block_size: 7,
            keep_prob: 0.85,
            seed_rate: SeedRate::Calibrated,
        }
    }
}

impl DropBlockConfig {
    pub fn new(block_size: usize, keep_prob: f64) -> Result<Self> {
        let cfg = DropBlockConfig {
            block_size,
            keep_prob,
            seed_rate: SeedRate::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block_size must be odd and >= 1, got {}",
                self.block_size
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must be in (0, 1], got {}",
                self.keep_prob
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.keep_prob >= 1.0
    }

    fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        if self.block_size > height || self.block_size > width {
            return Err(Error::Config(format!(
                "block_size {} exceeds feature size {height}x{width}",
                self.block_size
            )));
        }
        Ok(())
    }

    pub fn nominal_gamma(&self, height: usize, width: usize) -> Result<f64> {
        self.check_fits(height, width)?;
        let bs = self.block_size as f64;
        let valid = ((height - self.block_size + 1) * (width - self.block_size + 1)) as f64;
        Ok((1.0 - self.keep_prob) / (bs * bs) * (height * width) as f64 / valid)
    }

    pub fn calibrated_gamma(&self, height: usize, width: usize) -> Result<f64> {
        self.check_fits(height, width)?;
        let target = 1.0 - self.keep_prob;
        if target <= 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if expected_drop_fraction(height, width, self.block_size, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Seed rate used when sampling masks of the given size.
    pub fn gamma(&self, height: usize, width: usize) -> Result<f64> {
        match self.seed_rate {
            SeedRate::Nominal => self.nominal_gamma(height, width),
            SeedRate::Calibrated => self.calibrated_gamma(height, width),
        }
    }
}

/// Number of valid block centers whose block covers each coordinate along one axis.
fn axis_coverage(len: usize, block: usize) -> Vec<usize> {
    let half = block / 2;
    let mut cover = vec![0; len];
    for center in half..len - half {
        for c in &mut cover[center - half..=center + half] {
            *c += 1;
        }
    }
    cover
}

/// Expected fraction of zeroed pixels when each valid center seeds a block
/// independently with probability `gamma`.
pub fn expected_drop_fraction(height: usize, width: usize, block: usize, gamma: f64) -> f64 {
    let ch = axis_coverage(height, block);
    let cw = axis_coverage(width, block);
    // coverage values take at most `block` distinct values per axis
    let hist = |cover: &[usize]| {
        let mut h = vec![0usize; block + 1];
        cover.iter().for_each(|&c| h[c] += 1);
        h
    };
    let (hh, hw) = (hist(&ch), hist(&cw));
    let mut total = 0.0;
    for (a, &na) in hh.iter().enumerate().filter(|(_, &n)| n > 0) {
        for (b, &nb) in hw.iter().enumerate().filter(|(_, &n)| n > 0) {
            total += (na * nb) as f64 * (1.0 - (1.0 - gamma).powi((a * b) as i32));
        }
    }
    total / (height * width) as f64
}

/// One sampled DropBlock mask for a single `H x W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct DropBlockMask {
    pub height: usize,
    pub width: usize,
    /// Row-major keep flags.
    pub keep: Vec<bool>,
    /// Sampled block centers as (row, col).
    pub seeds: Vec<(usize, usize)>,
    /// `count_total / count_kept`, or 1 when nothing survives.
    pub scale: f64,
}

impl DropBlockMask {
    pub fn identity(height: usize, width: usize) -> Self {
        DropBlockMask {
            height,
            width,
            keep: vec![true; height * width],
            seeds: Vec::new(),
            scale: 1.0,
        }
    }

    pub fn zero_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.keep.len() as f64
    }

    /// Mask values with the rescale folded in.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.keep.iter().map(|&k| if k { self.scale } else { 0.0 })
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let data = self.values().map(E::from_f64).collect();
        Tensor::from_vec(&[self.height, self.width, 1], data).expect("mask dims are positive")
    }
}

/// Samples a mask for one feature map. Eval mode and `keep_prob == 1` give the identity.
pub fn dropblock_mask(
    height: usize,
    width: usize,
    cfg: &DropBlockConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<DropBlockMask> {
    cfg.validate()?;
    cfg.check_fits(height, width)?;
    if mode == Mode::Eval || cfg.is_identity() {
        return Ok(DropBlockMask::identity(height, width));
    }
    let gamma = cfg.gamma(height, width)?;
    let half = cfg.block_size / 2;
    let mut keep = vec![true; height * width];
    let mut seeds = Vec::new();
    for r in half..height - half {
        for c in half..width - half {
            if rng.random::<f64>() < gamma {
                seeds.push((r, c));
                for row in keep[(r - half) * width..(r + half + 1) * width].chunks_mut(width) {
                    row[c - half..=c + half].fill(false);
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        1.0
    } else {
        (height * width) as f64 / kept as f64
    };
    Ok(DropBlockMask {
        height,
        width,
        keep,
        seeds,
        scale,
    })
}

/// Applies an independent mask to each sample of an `N x H x W x C` tensor,
/// shared across its channels.
pub fn apply_dropblock<E: Element>(
    graph: &mut Graph<E>,
    x: Var,
    cfg: &DropBlockConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let [n, h, w, _] = graph.value(x).nhwc("dropblock")?;
    cfg.validate()?;
    if mode == Mode::Eval || cfg.is_identity() {
        return Ok(x);
    }
    cfg.check_fits(h, w)?;
    let rng = rng.ok_or_else(|| Error::Config("dropblock in training mode needs a random stream".into()))?;
    let mut mask = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let m = dropblock_mask(h, w, cfg, mode, rng)?;
        mask.extend(m.values().map(E::from_f64));
    }
    graph.spatial_mask(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn nominal_gamma_matches_closed_form() {
        let cfg = DropBlockConfig {
            block_size: 7,
            keep_prob: 0.85,
            seed_rate: SeedRate::Nominal,
        };
        let g = cfg.nominal_gamma(28, 28).unwrap();
        let expect = 0.15 / 49.0 * 784.0 / 484.0;
        assert!((g - expect).abs() < 1e-15);
        assert!((g - 4.959e-3).abs() < 1e-6);
    }

    #[test]
    fn calibrated_gamma_hits_target_fraction() {
        for &kp in &[0.85, 0.78, 0.5] {
            let cfg = DropBlockConfig::new(7, kp).unwrap();
            let g = cfg.calibrated_gamma(56, 56).unwrap();
            assert!((expected_drop_fraction(56, 56, 7, g) - (1.0 - kp)).abs() < 1e-12);
            assert!(g > cfg.nominal_gamma(56, 56).unwrap());
        }
    }

    #[test]
    fn keep_prob_one_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DropBlockConfig::new(7, 1.0).unwrap();
        let m = dropblock_mask(28, 28, &cfg, Mode::Train, &mut rng).unwrap();
        assert_eq!(m, DropBlockMask::identity(28, 28));
        let cfg = DropBlockConfig::new(7, 0.3).unwrap();
        let m = dropblock_mask(28, 28, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(m.scale, 1.0);
        assert_eq!(m.zero_count(), 0);
    }

    #[test]
    fn rejects_oversized_block_and_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DropBlockConfig::new(7, 0.9).unwrap();
        assert!(dropblock_mask(6, 20, &cfg, Mode::Train, &mut rng).is_err());
        assert!(DropBlockConfig::new(4, 0.9).is_err());
        assert!(DropBlockConfig::new(3, 0.0).is_err());
        assert!(DropBlockConfig::new(3, 1.2).is_err());
    }

    #[test]
    fn zeros_reconstruct_from_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DropBlockConfig::new(5, 0.7).unwrap();
        for _ in 0..50 {
            let m = dropblock_mask(20, 24, &cfg, Mode::Train, &mut rng).unwrap();
            let mut rebuilt = vec![true; 20 * 24];
            for &(r, c) in &m.seeds {
                for rr in r - 2..=r + 2 {
                    for cc in c - 2..=c + 2 {
                        rebuilt[rr * 24 + cc] = false;
                    }
                }
            }
            assert_eq!(rebuilt, m.keep);
            let kept = m.keep.iter().filter(|&&k| k).count();
            if kept > 0 {
                assert!((m.scale - 480.0 / kept as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_shares_mask_across_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DropBlockConfig::new(3, 0.6).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2, 9, 9, 4]).unwrap());
        let yv = apply_dropblock(&mut g, x, &cfg, Mode::Train, Some(&mut rng)).unwrap();
        let y = g.value(yv).clone();
        for px in y.data().chunks_exact(4) {
            assert!(px.iter().all(|&v| v == px[0]));
        }
        let y_eval = apply_dropblock(&mut g, x, &cfg, Mode::Eval, None).unwrap();
        assert_eq!(y_eval, x);
    }
}
