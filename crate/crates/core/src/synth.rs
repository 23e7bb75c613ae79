//! Synthetic fundus-like images with branching vessel trees, for
//! experiments that must run without the real datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::net::SIZE_MULTIPLE;
use crate::tensor::Tensor;

/// Accepted range of vessel pixel fraction per mask.
pub const VESSEL_FRACTION: (f64, f64) = (0.02, 0.25);

const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    /// Trailing samples assigned to the test split.
    pub test_count: usize,
}

impl SynthConfig {
    pub fn new(count: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            height,
            width,
            seed,
            noise_level: 0.03,
            test_count: 0,
        }
    }
}

struct Raster {
    height: usize,
    width: usize,
    /// Per-pixel vessel width in px; 0 is background.
    width_map: Vec<f32>,
}

impl Raster {
    fn stamp(&mut self, y: f64, x: f64, thickness: f64) {
        let r = thickness / 2.0;
        let (y0, y1) = ((y - r).floor().max(0.0) as usize, (y + r).ceil() as usize);
        let (x0, x1) = ((x - r).floor().max(0.0) as usize, (x + r).ceil() as usize);
        for py in y0..=y1.min(self.height - 1) {
            for px in x0..=x1.min(self.width - 1) {
                let (dy, dx) = (py as f64 + 0.5 - y, px as f64 + 0.5 - x);
                if dy * dy + dx * dx <= r * r + 0.25 {
                    let slot = &mut self.width_map[py * self.width + px];
                    *slot = slot.max(thickness as f32);
                }
            }
        }
    }

    fn segment(&mut self, from: (f64, f64), to: (f64, f64), thickness: f64) {
        let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.stamp(from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1), thickness);
        }
    }

    fn inside(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 < self.height as f64 && p.1 < self.width as f64
    }

    /// Wandering polyline that forks into two thinner children at its end.
    fn branch(&mut self, rng: &mut ChaCha8Rng, start: (f64, f64), heading: f64, thickness: f64, depth: usize) {
        let scale = self.height.min(self.width) as f64;
        let length = scale * rng.random_range(0.2..0.4) / (1.0 + 0.3 * (3 - depth.min(3)) as f64).sqrt();
        let pieces = 6;
        let mut p = start;
        let mut angle = heading;
        for _ in 0..pieces {
            angle += rng.random_range(-0.25..0.25);
            let next = (
                p.0 + angle.sin() * length / pieces as f64,
                p.1 + angle.cos() * length / pieces as f64,
            );
            self.segment(p, next, thickness);
            p = next;
            if !self.inside(p) {
                return;
            }
        }
        if depth == 0 {
            return;
        }
        let child = (thickness - 1.0).max(1.0);
        for sign in [-1.0, 1.0] {
            let spread = rng.random_range(0.35..0.8);
            self.branch(rng, p, angle + sign * spread, child, depth - 1);
        }
    }
}

fn vessel_tree(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut raster = Raster {
        height,
        width,
        width_map: vec![0.0; height * width],
    };
    let roots = rng.random_range(2..=3);
    for _ in 0..roots {
        // enter from a random border point, heading roughly inward
        let (start, heading) = match rng.random_range(0..4) {
            0 => ((0.0, rng.random_range(0.0..width as f64)), std::f64::consts::FRAC_PI_2),
            1 => (
                (height as f64 - 0.5, rng.random_range(0.0..width as f64)),
                -std::f64::consts::FRAC_PI_2,
            ),
            2 => ((rng.random_range(0.0..height as f64), 0.0), 0.0),
            _ => (
                (rng.random_range(0.0..height as f64), width as f64 - 0.5),
                std::f64::consts::PI,
            ),
        };
        let heading = heading + rng.random_range(-0.5..0.5);
        raster.branch(rng, start, heading, 3.0, 3);
    }
    raster
}

/// Renders the fundus-like image for a vessel raster. With zero noise the
/// result depends only on the raster and the stream state.
fn render(raster: &Raster, rng: &mut ChaCha8Rng, noise_level: f64) -> Result<Tensor> {
    let (h, w) = (raster.height, raster.width);
    let tint = [
        rng.random_range(0.70..0.85),
        rng.random_range(0.30..0.42),
        rng.random_range(0.10..0.20),
    ];
    let (cy, cx) = (
        h as f64 * rng.random_range(0.35..0.65),
        w as f64 * rng.random_range(0.35..0.65),
    );
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.40..0.55);
    let noise = if noise_level > 0.0 {
        Some(Normal::new(0.0, noise_level).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / diag;
            let shade = (1.0 - 0.6 * r * r) * (1.0 + 0.05 * (x as f64 / w as f64 * 6.0 + phase).sin());
            let vw = raster.width_map[y * w + x] as f64;
            // thinner vessels are fainter
            let darken = if vw > 0.0 {
                contrast * (0.6 + 0.4 * vw / 3.0)
            } else {
                0.0
            };
            for &t in &tint {
                let mut v = t * shade * (1.0 - darken);
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// One sample; deterministic in (`seed`, `index`).
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    for _ in 0..MAX_ATTEMPTS {
        let raster = vessel_tree(cfg.height, cfg.width, &mut rng);
        let mask: Vec<f32> = raster
            .width_map
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let fraction = mask.iter().sum::<f32>() as f64 / mask.len() as f64;
        if fraction < VESSEL_FRACTION.0 || fraction > VESSEL_FRACTION.1 {
            continue;
        }
        let image = render(&raster, &mut rng, cfg.noise_level)?;
        let mask = Tensor::from_vec(&[cfg.height, cfg.width, 1], mask)?;
        return Sample::new(format!("synth_{index:04}"), image, mask, Some((cfg.height, cfg.width)));
    }
    Err(Error::Config(format!(
        "could not draw a vessel tree within {VESSEL_FRACTION:?} at {}x{}",
        cfg.height, cfg.width
    )))
}

/// A seeded synthetic dataset; the last `test_count` samples form the test split.
pub fn synth_vessels(cfg: &SynthConfig) -> Result<DatasetSpec> {
    if cfg.height < 2 * SIZE_MULTIPLE
        || cfg.width < 2 * SIZE_MULTIPLE
        || !cfg.height.is_multiple_of(SIZE_MULTIPLE)
        || !cfg.width.is_multiple_of(SIZE_MULTIPLE)
    {
        return Err(Error::Config(format!(
            "synthetic size {}x{} must be at least 16 and divisible by {SIZE_MULTIPLE}",
            cfg.height, cfg.width
        )));
    }
    if cfg.count == 0 || cfg.test_count > cfg.count {
        return Err(Error::Config(format!(
            "need count > 0 and test_count <= count, got {} / {}",
            cfg.count, cfg.test_count
        )));
    }
    let samples = (0..cfg.count)
        .map(|i| synth_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let n_train = cfg.count - cfg.test_count;
    Ok(DatasetSpec {
        name: format!("synthetic-{}", cfg.seed),
        samples,
        train: (0..n_train).collect(),
        val: Vec::new(),
        test: (n_train..cfg.count).collect(),
        pad: (cfg.height, cfg.width),
    })
}
