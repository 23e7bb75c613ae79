//! Independent references used to validate the fast paths: central
//! finite-difference gradient checks and a threshold-sweep AUC.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::nn::{Mode, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Elements probed per tensor; `None` probes all of them.
    pub per_tensor: Option<usize>,
    /// Lower bound of the relative-error denominator. Structurally zero
    /// gradients (a bias feeding batch norm) come back from central
    /// differences as rounding noise of about `eps * |loss| / step`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-6,
            per_tensor: None,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// `tensor[index]` with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Probes scored against a one-sided difference because it matched
    /// the analytic value better than the central one.
    pub one_sided: usize,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            one_sided: 0,
        }
    }

    /// Scores `analytic` against the central difference and, for probes
    /// straddling a kink, the one-sided differences. On a smooth stretch
    /// all three agree to O(step); across a kink the analytic (one-sided)
    /// derivative matches one of the one-sided quotients, while a wrong
    /// backward pass matches none.
    fn record(&mut self, name: &str, index: usize, analytic: f64, d: Differences, floor: f64) {
        let rel = |numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        let central = (d.plus - d.minus) / (2.0 * d.step);
        let mut numeric = central;
        for side in [(d.plus - d.center) / d.step, (d.center - d.minus) / d.step] {
            if rel(side) < rel(numeric) {
                numeric = side;
            }
        }
        if numeric != central {
            self.one_sided += 1;
        }
        let rel = rel(numeric);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = rel;
            self.worst = format!("{name}[{index}]");
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Differences {
    center: f64,
    plus: f64,
    minus: f64,
    step: f64,
}

fn probe_indices(len: usize, cfg: &CheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.per_tensor {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar(graph: &Graph<f64>, v: Var) -> Result<f64> {
    let t = graph.value(v);
    if t.len() != 1 {
        return Err(Error::invalid_shape(
            "gradient check",
            t.shape(),
            "loss must be a scalar",
        ));
    }
    Ok(t.data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input tensor. `f` must be deterministic.
pub fn check_fn(
    inputs: &[Tensor<f64>],
    cfg: &CheckConfig,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    scalar(&graph, loss)?;
    graph.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        scalar(&g, loss)
    };

    let center = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport::new();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let grad = graph
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in probe_indices(inputs[i].len(), cfg, &mut rng) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let d = Differences {
                center,
                plus,
                minus,
                step: cfg.step,
            };
            report.record(&format!("input{i}"), j, grad[j], d, cfg.floor);
        }
    }
    Ok(report)
}

/// Checks every trainable parameter of `net` under mean BCE against
/// `target`. In training mode DropBlock draws from a stream reseeded with
/// `mask_seed` on every evaluation, so all evaluations share one mask.
pub fn check_network(
    net: &Network<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    mode: Mode,
    mask_seed: u64,
    cfg: &CheckConfig,
) -> Result<CheckReport> {
    let loss_of = |net: &Network<f64>, graph: &mut Graph<f64>| -> Result<(Var, Vec<Option<Var>>)> {
        let x = graph.leaf(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let pass = net.forward_frozen(graph, x, mode, Some(&mut rng))?;
        let loss = graph.bce(pass.output, target, crate::train::BCE_EPS)?;
        Ok((loss, pass.bindings))
    };

    let mut graph = Graph::new();
    let (loss, bindings) = loss_of(net, &mut graph)?;
    graph.backward(loss)?;

    let center = {
        let mut g = Graph::inference();
        let (l, _) = loss_of(net, &mut g)?;
        scalar(&g, l)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport::new();
    let mut work = net.clone();
    let trainable: Vec<(ParamId, String)> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (ParamId(i), p.name.clone()))
        .collect();
    for (pid, name) in trainable {
        let grad = bindings[pid.index()]
            .and_then(|v| graph.grad(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; net.params().get(pid).value.len()]);
        for j in probe_indices(grad.len(), cfg, &mut rng) {
            let orig = work.params().get(pid).value.data()[j];
            let mut eval_at = |w: f64| -> Result<f64> {
                work.params_mut().get_mut(pid).value.data_mut()[j] = w;
                let mut g = Graph::inference();
                let (l, _) = loss_of(&work, &mut g)?;
                scalar(&g, l)
            };
            let plus = eval_at(orig + cfg.step)?;
            let minus = eval_at(orig - cfg.step)?;
            work.params_mut().get_mut(pid).value.data_mut()[j] = orig;
            let d = Differences {
                center,
                plus,
                minus,
                step: cfg.step,
            };
            report.record(&name, j, grad[j], d, cfg.floor);
        }
    }
    Ok(report)
}

/// ROC AUC by sweeping every distinct score as a threshold (predict
/// positive when `score >= t`) and integrating with the trapezoid rule.
/// Quadratic time; meant as a reference only.
pub fn auc_by_sweep(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    Some(area)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_handles_ties() {
        assert_eq!(auc_by_sweep(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc_by_sweep(&[0.9, 0.1, 0.4], &[true, false, true]), Some(1.0));
        assert_eq!(auc_by_sweep(&[0.9], &[true]), None);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        // scale by 2 but report: correct op, so error is tiny
        let ok = check_fn(std::slice::from_ref(&x), &CheckConfig::default(), |g, v| {
            let y = g.scale(v[0], 2.0)?;
            let y = g.mul(y, v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-7, "{ok:?}");
        assert_eq!(ok.checked, 3);

        // the recorded pass scales by 3, later evaluations by 2
        let calls = std::cell::Cell::new(0);
        let bad = check_fn(&[x], &CheckConfig::default(), |g, v| {
            calls.set(calls.get() + 1);
            let k = if calls.get() == 1 { 3.0 } else { 2.0 };
            let y = g.scale(v[0], k)?;
            g.sum(y)
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.3, "{bad:?}");
    }

    #[test]
    fn kinks_use_the_matching_side() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = check_fn(&[x], &CheckConfig::default(), |g, v| {
            let y = g.relu(v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.one_sided, 1);
    }
}
