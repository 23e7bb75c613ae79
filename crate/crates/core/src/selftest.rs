//! The built-in verification suite: gradient checks, DropBlock statistics,
//! the attention parameter budget, AUC oracle agreement and the padding
//! geometry. Each check yields an [`Outcome`] instead of panicking so the
//! CLI can report every failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::check::{auc_by_sweep, check_fn, check_network, CheckConfig, CheckReport};
use crate::data::{crop_to, pad_to, CHASE_ORIGINAL, CHASE_PAD, DRIVE_ORIGINAL, DRIVE_PAD};
use crate::error::Result;
use crate::metrics::auc;
use crate::net::{Network, NetworkConfig, Variant};
use crate::nn::{
    apply_dropblock, dropblock_mask, BlockConfig, Ctx, DropBlockConfig, Initializer, Mode, ParamStore,
    PreActResidualBlock, Rsab, SaPlacement, SpatialAttention,
};
use crate::tensor::Tensor;

/// Relative-error bound for single ops.
pub const ATOMIC_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for batch norm and composed blocks.
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn gradient(name: &str, tolerance: f64, r: &CheckReport) -> Self {
        Outcome::new(
            format!("grad {name}"),
            r.max_rel_error < tolerance,
            format!(
                "max rel err {:.2e} < {tolerance:.0e} ({} probes, worst {})",
                r.max_rel_error, r.checked, r.worst
            ),
        )
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// `sum(y * r)` with a fixed random `r`, so every output gets its own weight.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.leaf(random(g.shape(y), seed));
    let p = g.mul(y, r)?;
    g.sum(p)
}

type OpCase = (
    &'static str,
    f64,
    Vec<Tensor<f64>>,
    fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    let x = || random(&[1, 8, 8, 4], 1);
    let small = || random(&[1, 4, 4, 4], 2);
    vec![
        (
            "conv2d same",
            ATOMIC_TOLERANCE,
            vec![x(), random(&[3, 3, 4, 4], 3), random(&[4], 4)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
                weighted_sum(g, y, 10)
            },
        ),
        (
            "conv2d valid stride 2",
            ATOMIC_TOLERANCE,
            vec![x(), random(&[3, 3, 4, 2], 5)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, Padding::Valid)?;
                weighted_sum(g, y, 11)
            },
        ),
        (
            "conv2d_transpose",
            ATOMIC_TOLERANCE,
            vec![small(), random(&[2, 2, 3, 4], 6), random(&[3], 7)],
            |g, v| {
                let y = g.conv2d_transpose(v[0], v[1], Some(v[2]), 2)?;
                weighted_sum(g, y, 12)
            },
        ),
        ("maxpool2d", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.maxpool2d(v[0], 2)?;
            weighted_sum(g, y, 13)
        }),
        ("channel_max", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.channel_max(v[0])?;
            weighted_sum(g, y, 14)
        }),
        ("channel_avg", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.channel_avg(v[0])?;
            weighted_sum(g, y, 15)
        }),
        (
            "concat_channels",
            ATOMIC_TOLERANCE,
            vec![x(), random(&[1, 8, 8, 2], 8)],
            |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                weighted_sum(g, y, 16)
            },
        ),
        ("slice_channels", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.slice_channels(v[0], 1, 3)?;
            weighted_sum(g, y, 17)
        }),
        ("relu", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 18)
        }),
        ("sigmoid", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y, 19)
        }),
        ("add", ATOMIC_TOLERANCE, vec![x(), random(&[1, 8, 8, 4], 9)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 20)
        }),
        ("mul", ATOMIC_TOLERANCE, vec![x(), random(&[1, 8, 8, 4], 9)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 21)
        }),
        (
            "mul_broadcast",
            ATOMIC_TOLERANCE,
            vec![x(), random(&[1, 8, 8, 1], 9)],
            |g, v| {
                let y = g.mul_broadcast(v[0], v[1])?;
                weighted_sum(g, y, 22)
            },
        ),
        ("scale and mean", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let y = g.scale(v[0], -1.5)?;
            let y = g.mul(y, v[0])?;
            g.mean(y)
        }),
        ("dropblock", ATOMIC_TOLERANCE, vec![x()], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let cfg = DropBlockConfig::new(3, 0.7)?;
            let y = apply_dropblock(g, v[0], &cfg, Mode::Train, Some(&mut rng))?;
            weighted_sum(g, y, 24)
        }),
        (
            "sigmoid + bce",
            ATOMIC_TOLERANCE,
            vec![random(&[1, 8, 8, 1], 25)],
            |g, v| {
                let p = g.sigmoid(v[0])?;
                let t = random(&[1, 8, 8, 1], 26).map(|t| if t > 0.0 { 1.0 } else { 0.0 });
                g.bce(p, &t, crate::train::BCE_EPS)
            },
        ),
        (
            "batch_norm train",
            COMPOSED_TOLERANCE,
            vec![x(), random(&[4], 27), random(&[4], 28)],
            |g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 29)
            },
        ),
        (
            "batch_norm eval",
            COMPOSED_TOLERANCE,
            vec![x(), random(&[4], 30), random(&[4], 31)],
            |g, v| {
                let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.5, 0.5, 2.0, 1.0], 1e-5)?;
                weighted_sum(g, y, 32)
            },
        ),
    ]
}

/// Finite differences over a layer's input and every trainable parameter.
fn check_layer<T>(
    store: &ParamStore<f64>,
    layer: &T,
    x: Tensor<f64>,
    forward: fn(&T, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let ids: Vec<_> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| store.find(&p.name).expect("listed name"))
        .collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).value.clone()));
    check_fn(&inputs, &CheckConfig::default(), |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ctx = Ctx::new(g, store, Mode::Train, Some(&mut rng));
        for (&id, &var) in ids.iter().zip(&v[1..]) {
            ctx.bind(id, var);
        }
        let y = forward(layer, &mut ctx, v[0])?;
        weighted_sum(g, y, 99)
    })
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Initializer<'_, f64>) -> Result<T>) -> Result<(ParamStore<f64>, T)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = f(&mut Initializer::new(&mut store, &mut rng))?;
    Ok((store, layer))
}

/// Gradient checks for every differentiable op, the three blocks, and
/// (when `network` is set) the full default-width network under BCE.
pub fn gradient_checks(network: bool) -> Result<Vec<Outcome>> {
    let cfg = CheckConfig::default();
    let mut out = Vec::new();
    for (name, tol, inputs, f) in op_cases() {
        out.push(Outcome::gradient(name, tol, &check_fn(&inputs, &cfg, f)?));
    }

    let drop = Some(DropBlockConfig::new(3, 0.8)?);
    let block_cfg = BlockConfig::new(3, 4).with_dropblock(drop);
    let (store, blk) = build(2, |i| PreActResidualBlock::new(i, &block_cfg))?;
    let r = check_layer(&store, &blk, random(&[2, 6, 6, 3], 5), |b, c, x| b.forward(c, x))?;
    out.push(Outcome::gradient("residual block", COMPOSED_TOLERANCE, &r));

    let (store, sa) = build(4, SpatialAttention::new)?;
    let r = check_layer(&store, &sa, random(&[1, 8, 8, 4], 6), |s, c, x| {
        Ok(s.forward(c, x)?.output)
    })?;
    out.push(Outcome::gradient("spatial attention", COMPOSED_TOLERANCE, &r));

    let rsab_cfg = BlockConfig::new(4, 4).with_dropblock(drop);
    for placement in [SaPlacement::Branch, SaPlacement::Post] {
        let (store, rsab) = build(5, |i| Rsab::new(i, &rsab_cfg, placement))?;
        let r = check_layer(&store, &rsab, random(&[2, 6, 6, 4], 7), |b, c, x| b.forward(c, x))?;
        out.push(Outcome::gradient(
            &format!("rsab {placement:?}"),
            COMPOSED_TOLERANCE,
            &r,
        ));
    }

    if network {
        // the 3x3 bottleneck of a 24x24 input fits a 3x3 DropBlock
        let net_cfg = NetworkConfig {
            dropblock: DropBlockConfig::new(3, 0.85)?,
            ..NetworkConfig::new(Variant::Rsan)
        };
        let net = Network::<f32>::build(net_cfg, 4)?.cast::<f64>();
        let x = random(&[2, 24, 24, 3], 11).map(|v| 0.5 + 0.5 * v);
        let y = random(&[2, 24, 24, 1], 12).map(|v| if v > 0.4 { 1.0 } else { 0.0 });
        let probe = CheckConfig {
            per_tensor: Some(2),
            ..cfg
        };
        let r = check_network(&net, &x, &y, Mode::Train, 5, &probe)?;
        out.push(Outcome::gradient("rsan-tiny + bce", COMPOSED_TOLERANCE, &r));
    }
    Ok(out)
}

/// Exactly 98 trainable scalars in spatial attention, whatever the width.
pub fn attention_budget() -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for c in [1, 8, 64] {
        let (store, sa) = build::<SpatialAttention>(0, SpatialAttention::new)?;
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(random(&[1, 8, 8, c], c as u64));
        let mut ctx = Ctx::new(&mut g, &store, Mode::Eval, None);
        let y = sa.forward(&mut ctx, x)?.output;
        let count = sa.parameter_count(&store);
        let passed = count == 98 && store.trainable_count() == 98 && g.shape(y) == [1, 8, 8, c];
        out.push(Outcome::new(
            format!("attention budget C={c}"),
            passed,
            format!("{count} parameters"),
        ));
    }
    Ok(out)
}

/// Zero fraction of `trials` training masks at 56x56 with block 7 for the
/// two published keep probabilities, plus the identity and seed-square
/// reconstruction properties.
pub fn dropblock_statistics(trials: usize, seed: u64) -> Result<Vec<Outcome>> {
    const SIDE: usize = 56;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for keep in [0.85, 0.78] {
        let cfg = DropBlockConfig::new(7, keep)?;
        let mut zeros = 0usize;
        let mut rebuilt_ok = true;
        for _ in 0..trials {
            let m = dropblock_mask(SIDE, SIDE, &cfg, Mode::Train, &mut rng)?;
            zeros += m.zero_count();
            let mut rebuilt = vec![true; SIDE * SIDE];
            for &(r, c) in &m.seeds {
                for y in r - 3..=r + 3 {
                    for x in c - 3..=c + 3 {
                        rebuilt[y * SIDE + x] = false;
                    }
                }
            }
            rebuilt_ok &= rebuilt == m.keep;
        }
        let frac = zeros as f64 / (trials * SIDE * SIDE) as f64;
        let target = 1.0 - keep;
        out.push(Outcome::new(
            format!("dropblock zero fraction keep={keep}"),
            (frac - target).abs() <= 0.02,
            format!("{frac:.4} vs {target:.2} +/- 0.02 over {trials} masks"),
        ));
        out.push(Outcome::new(
            format!("dropblock seed reconstruction keep={keep}"),
            rebuilt_ok,
            "every zero lies in a 7x7 square around a sampled seed",
        ));
    }
    let identity = DropBlockConfig::new(7, 1.0)?;
    let x = random(&[2, SIDE, SIDE, 3], 40);
    let mut g = Graph::<f64>::inference();
    let xv = g.leaf(x.clone());
    let y = apply_dropblock(&mut g, xv, &identity, Mode::Train, Some(&mut rng))?;
    out.push(Outcome::new(
        "dropblock keep=1 identity",
        g.value(y) == &x,
        "output equals input",
    ));
    Ok(out)
}

/// Random score/label instances with heavy ties; rank AUC against the sweep.
pub fn auc_equivalence(instances: usize, pixels: usize, seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut defined = true;
    for _ in 0..instances {
        let levels = rng.random_range(2..100);
        let scores: Vec<f32> = (0..pixels)
            .map(|_| rng.random_range(0..levels) as f32 / levels as f32)
            .collect();
        let p = rng.random_range(0.05..0.95);
        let mut labels: Vec<bool> = (0..pixels).map(|_| rng.random_bool(p)).collect();
        labels[0] = true;
        labels[1] = false;
        match (auc(&scores, &labels)?, auc_by_sweep(&scores, &labels)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => defined = false,
        }
    }
    Ok(Outcome::new(
        "auc rank vs sweep",
        defined && worst < 1e-9,
        format!("max |diff| {worst:.2e} over {instances} x {pixels} tied scores"),
    ))
}

/// Dataset padding targets and bitwise pad/crop round trips.
pub fn geometry() -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for (name, orig, target) in [
        ("DRIVE", DRIVE_ORIGINAL, DRIVE_PAD),
        ("CHASE", CHASE_ORIGINAL, CHASE_PAD),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(orig.0 as u64);
        let x = Tensor::<f32>::from_vec(
            &[orig.0, orig.1, 3],
            (0..orig.0 * orig.1 * 3).map(|_| rng.random()).collect(),
        )?;
        let padded = pad_to(&x, target)?;
        let back = crop_to(&padded, orig)?;
        let exact = x
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let passed = padded.shape() == [target.0, target.1, 3] && exact;
        out.push(Outcome::new(
            format!("pad/crop {name}"),
            passed,
            format!("{}x{} (W x H) -> {}x{} and back", orig.1, orig.0, target.1, target.0),
        ));
    }
    Ok(out)
}

/// Everything above; the full-network gradient check is the slow part.
pub fn run_all() -> Result<Vec<Outcome>> {
    let mut out = gradient_checks(true)?;
    out.extend(attention_budget()?);
    out.extend(dropblock_statistics(10_000, 0)?);
    out.push(auc_equivalence(100, 1000, 0)?);
    out.extend(geometry()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_and_block_checks_pass() {
        for o in gradient_checks(false).unwrap() {
            assert!(o.passed, "{}", o.line());
        }
    }

    #[test]
    fn cheap_checks_pass() {
        let mut all = attention_budget().unwrap();
        all.extend(dropblock_statistics(300, 1).unwrap());
        all.push(auc_equivalence(5, 300, 1).unwrap());
        all.extend(geometry().unwrap());
        for o in all.iter().filter(|o| !o.name.contains("zero fraction")) {
            assert!(o.passed, "{}", o.line());
        }
        assert!(all[0].line().starts_with("PASS attention budget C=1"));
    }
}
