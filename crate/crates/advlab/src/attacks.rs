//! Adversarial sample crafting and the cross-model evaluation protocol.
//!
//! Three crafting strategies share one shape: compute input gradients on a
//! *surrogate* model (the only thing an attacker can differentiate through),
//! perturb within a norm budget and the data domain, then score success
//! against the *target* — which may be the surrogate itself (white box), a
//! separately trained substitute (black box), or a defended model that
//! exposes no gradients at all.
//!
//! Crafting is strictly per-sample: every gradient is an exact per-row
//! quantity, so results are bit-identical regardless of batching or the
//! number of worker threads.

use serde::{Deserialize, Serialize};

use crate::dataset::{save_idx, Dataset, Domain};
use crate::error::{ensure, Error, Result};
use crate::mlp::{argmax_row, forward, input_gradients, MlpModel};
use crate::numerics::Matrix;

/// Number of rows crafted per inner block; purely a working-set knob, results
/// do not depend on it.
const CRAFT_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L0Direction {
    /// Any coordinate may move to whichever extreme (0 or 1) raises the loss.
    Any,
    /// Only 0→1 flips are admissible (feature-presence data, where removing
    /// a feature could break the artifact the vector describes).
    ZeroToOneOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "norm", rename_all = "snake_case")]
pub enum AttackNorm {
    Linf { eps: f64 },
    L2 { c: f64, steps: usize, step_size: f64 },
    L0 { budget: usize, direction: L0Direction },
}

impl AttackNorm {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackNorm::Linf { .. } => "linf",
            AttackNorm::L2 { .. } => "l2",
            AttackNorm::L0 { .. } => "l0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub norm: AttackNorm,
    /// Craft toward this class instead of away from the true one. Only the
    /// l₂ attack supports targeting; the other norms reject it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targeted: Option<usize>,
}

impl AttackSpec {
    pub fn untargeted(norm: AttackNorm) -> Self {
        AttackSpec { norm, targeted: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.norm {
            AttackNorm::Linf { eps } => {
                ensure!(eps > 0.0 && eps.is_finite(), "linf attack needs eps > 0, got {eps}");
                ensure!(self.targeted.is_none(), "the linf attack does not support targeting");
            }
            AttackNorm::L2 { c, step_size, .. } => {
                ensure!(c > 0.0 && c.is_finite(), "l2 attack needs c > 0, got {c}");
                ensure!(
                    step_size > 0.0 && step_size.is_finite(),
                    "l2 attack needs step_size > 0, got {step_size}"
                );
            }
            AttackNorm::L0 { budget, .. } => {
                ensure!(budget >= 1, "l0 attack needs budget >= 1");
                ensure!(self.targeted.is_none(), "the l0 attack does not support targeting");
            }
        }
        Ok(())
    }
}

fn check_unit_box(x: &Matrix, what: &str) -> Result<()> {
    for &v in x.data() {
        ensure!((0.0..=1.0).contains(&v), "{what}: input value {v} outside [0,1]");
    }
    Ok(())
}

/// Loss-increasing sign with sign(0) = 0 (f64::signum maps +0 to 1, which
/// would perturb coordinates the loss does not even depend on).
fn grad_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Move `x` by ±eps along `dir`, staying inside [0,1] and guaranteeing that
/// the *representable* difference x̂ − x never exceeds eps in magnitude. The
/// naive x + eps can round to a float whose recomputed difference is one ulp
/// above the budget; nudging back toward x (at most a couple of ulps) keeps
/// norm verification exact.
fn step_within_linf(x: f64, eps: f64, dir: f64) -> f64 {
    if dir == 0.0 {
        return x;
    }
    let mut cand = (x + dir * eps).clamp(0.0, 1.0);
    while (cand - x).abs() > eps {
        cand = if cand > x { cand.next_down() } else { cand.next_up() };
    }
    cand
}

/// Fast gradient sign method: x̂ = clip(x + eps·sign(∂L/∂x)). The perturbed
/// batch satisfies ‖x̂−x‖∞ ≤ eps and x̂ ∈ [0,1] under exact float comparison.
pub fn fgsm(surrogate: &MlpModel, x: &Matrix, labels: &Matrix, eps: f64) -> Result<Matrix> {
    ensure!(eps > 0.0 && eps.is_finite(), "fgsm: eps must be > 0, got {eps}");
    check_unit_box(x, "fgsm")?;
    let (perturbed, _) = craft_in_blocks(x.rows(), |range| {
        let xb = submatrix(x, range.clone());
        let yb = submatrix(labels, range);
        let (_, grads, _) = input_gradients(surrogate, &xb, &yb)?;
        let mut pb = xb;
        for (v, &g) in pb.data_mut().iter_mut().zip(grads.data()) {
            *v = step_within_linf(*v, eps, grad_sign(g));
        }
        Ok((pb, None))
    })?;
    Ok(perturbed)
}

/// Iterative l₂ attack on the penalized objective L(x̂) − c·‖x̂−x‖₂ (its
/// negation, L(x̂, target) + c·‖x̂−x‖₂, is minimized when targeted). Each of
/// the `steps` iterations takes a fixed-size steepest-ascent step along the
/// sign of the loss gradient and projects onto [0,1]; the penalty enters
/// through the selection rule, which returns, per sample, the iterate with
/// the best penalized objective seen — including the starting point, so a
/// prohibitive penalty (or steps = 0) returns x unchanged.
///
/// Stepping on the raw objective gradient instead stalls: once ‖δ‖ is small,
/// the −c·δ/‖δ‖ term dominates coordinates where the loss gradient is weak
/// and the iterate oscillates around the clean sample.
pub fn l2_attack(
    surrogate: &MlpModel,
    x: &Matrix,
    labels: &Matrix,
    c: f64,
    steps: usize,
    step_size: f64,
    targeted: Option<usize>,
) -> Result<Matrix> {
    ensure!(c > 0.0 && c.is_finite(), "l2_attack: c must be > 0, got {c}");
    ensure!(step_size > 0.0 && step_size.is_finite(), "l2_attack: bad step_size {step_size}");
    check_unit_box(x, "l2_attack")?;
    if let Some(t) = targeted {
        ensure!(t < surrogate.output_dim(), "l2_attack: target class {t} out of range");
    }

    let (perturbed, _) = craft_in_blocks(x.rows(), |range| {
        let x0 = submatrix(x, range.clone());
        // Targeted mode descends on the loss toward the target class; both
        // modes maximize sigma·L − c·‖δ‖₂.
        let (targets, sigma) = match targeted {
            Some(t) => {
                let mut m = Matrix::zeros(x0.rows(), surrogate.output_dim());
                for i in 0..x0.rows() {
                    m.set(i, t, 1.0);
                }
                (m, -1.0)
            }
            None => (submatrix(labels, range.clone()), 1.0),
        };

        let objective = |xi: &[f64], x0i: &[f64], loss: f64| -> f64 {
            let dist: f64 = xi.iter().zip(x0i).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            sigma * loss - c * dist
        };

        let mut cur = x0.clone();
        let mut best = x0.clone();
        let mut best_obj = vec![f64::NEG_INFINITY; x0.rows()];
        for step in 0..=steps {
            let (losses, grads, _) = input_gradients(surrogate, &cur, &targets)?;
            for i in 0..cur.rows() {
                let obj = objective(cur.row(i), x0.row(i), losses[i]);
                if obj > best_obj[i] {
                    best_obj[i] = obj;
                    best.row_mut(i).copy_from_slice(cur.row(i));
                }
            }
            if step == steps {
                break;
            }
            for i in 0..cur.rows() {
                for (xv, &g) in cur.row_mut(i).iter_mut().zip(grads.row(i)) {
                    *xv = (*xv + step_size * grad_sign(sigma * g)).clamp(0.0, 1.0);
                }
            }
        }
        Ok((best, None))
    })?;
    Ok(perturbed)
}

/// Outcome of an l₀ crafting run: the perturbed batch plus, per sample, a
/// flag saying the greedy search ran out of admissible coordinates before
/// either flipping the sample's prediction or using up the budget.
pub struct L0Outcome {
    pub perturbed: Matrix,
    pub exhausted: Vec<bool>,
}

/// Greedy l₀: repeatedly flip the not-yet-touched coordinate whose admissible
/// extreme most increases the surrogate loss (ties to the lowest index),
/// stopping per sample on surrogate misclassification, on budget exhaustion,
/// or — raising the exhausted flag — when no admissible coordinate remains.
/// `budget = 0` is a no-op. With `ZeroToOneOnly` the input must be binary and
/// only 0→1 flips are considered.
pub fn l0_attack(
    surrogate: &MlpModel,
    x: &Matrix,
    labels: &Matrix,
    budget: usize,
    direction: L0Direction,
) -> Result<L0Outcome> {
    check_unit_box(x, "l0_attack")?;
    if direction == L0Direction::ZeroToOneOnly {
        for &v in x.data() {
            ensure!(v == 0.0 || v == 1.0, "l0_attack: zero_to_one_only requires binary inputs");
        }
    }

    let (perturbed, exhausted) = craft_in_blocks(x.rows(), |range| {
        let mut cur = submatrix(x, range.clone());
        let yb = submatrix(labels, range.clone());
        let rows = cur.rows();
        let cols = cur.cols();
        let mut flipped = vec![vec![false; cols]; rows];
        let mut used = vec![0usize; rows];
        let mut done = vec![false; rows];
        let mut exhausted = vec![false; rows];

        loop {
            let active: Vec<usize> =
                (0..rows).filter(|&i| !done[i] && !exhausted[i] && used[i] < budget).collect();
            if active.is_empty() {
                break;
            }
            let xa = gather(&cur, &active);
            let ya = gather(&yb, &active);
            let (_, grads, probs) = input_gradients(surrogate, &xa, &ya)?;

            for (slot, &i) in active.iter().enumerate() {
                let truth = argmax_row(yb.row(i));
                if argmax_row(probs.row(slot)) != truth {
                    done[i] = true;
                    continue;
                }
                // Best admissible coordinate: strictly greater saliency wins,
                // so equal saliencies keep the lowest index.
                let mut pick: Option<(usize, f64, f64)> = None; // (j, |g|, extreme)
                for (j, &g) in grads.row(slot).iter().enumerate() {
                    if flipped[i][j] {
                        continue;
                    }
                    let xv = cur.get(i, j);
                    let candidate = match direction {
                        L0Direction::ZeroToOneOnly => {
                            if xv == 0.0 && g > 0.0 {
                                Some((g, 1.0))
                            } else {
                                None
                            }
                        }
                        L0Direction::Any => {
                            let extreme = if g > 0.0 { 1.0 } else { 0.0 };
                            if g != 0.0 && xv != extreme {
                                Some((g.abs(), extreme))
                            } else {
                                None
                            }
                        }
                    };
                    if let Some((saliency, extreme)) = candidate {
                        let better = match pick {
                            None => true,
                            Some((_, best, _)) => saliency > best,
                        };
                        if better {
                            pick = Some((j, saliency, extreme));
                        }
                    }
                }
                match pick {
                    Some((j, _, extreme)) => {
                        cur.set(i, j, extreme);
                        flipped[i][j] = true;
                        used[i] += 1;
                    }
                    None => exhausted[i] = true,
                }
            }
        }
        Ok((cur, Some(exhausted)))
    })?;
    Ok(L0Outcome { perturbed, exhausted: exhausted.expect("l0 always reports flags") })
}

// ---------------------------------------------------------------------------
// Block/worker plumbing
// ---------------------------------------------------------------------------

fn submatrix(x: &Matrix, range: std::ops::Range<usize>) -> Matrix {
    let mut out = Matrix::zeros(range.len(), x.cols());
    for (dst, src) in range.enumerate() {
        out.row_mut(dst).copy_from_slice(x.row(src));
    }
    out
}

fn gather(x: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), x.cols());
    for (dst, &src) in indices.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(x.row(src));
    }
    out
}

fn worker_count() -> usize {
    std::env::var("ADVLAB_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(1).max(1)
}

type BlockResult = (Matrix, Option<Vec<bool>>);

/// Run `craft_block` over fixed-size row blocks, optionally spread across
/// worker threads (ADVLAB_WORKERS), and reassemble in row order. Because each
/// row's result is independent of its neighbors, the output is bit-identical
/// for any worker count.
fn craft_in_blocks<F>(n: usize, craft_block: F) -> Result<BlockResult>
where
    F: Fn(std::ops::Range<usize>) -> Result<BlockResult> + Sync,
{
    ensure!(n >= 1, "attack crafting: empty sample set");
    let blocks: Vec<std::ops::Range<usize>> =
        (0..n).step_by(CRAFT_BLOCK).map(|start| start..(start + CRAFT_BLOCK).min(n)).collect();
    let workers = worker_count().min(blocks.len());

    let results: Vec<Result<(usize, BlockResult)>> = if workers <= 1 {
        blocks
            .iter()
            .enumerate()
            .map(|(bi, range)| craft_block(range.clone()).map(|r| (bi, r)))
            .collect()
    } else {
        let mut collected: Vec<Result<(usize, BlockResult)>> = Vec::with_capacity(blocks.len());
        std::thread::scope(|scope| {
            let chunk = blocks.len().div_ceil(workers);
            let handles: Vec<_> = blocks
                .chunks(chunk)
                .enumerate()
                .map(|(wi, my_blocks)| {
                    let craft_block = &craft_block;
                    let base = wi * chunk;
                    scope.spawn(move || {
                        my_blocks
                            .iter()
                            .enumerate()
                            .map(|(off, range)| craft_block(range.clone()).map(|r| (base + off, r)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                collected.extend(h.join().expect("crafting worker panicked"));
            }
        });
        collected.sort_by_key(|r| match r {
            Ok((bi, _)) => *bi,
            Err(_) => usize::MAX,
        });
        collected
    };

    let mut perturbed: Option<Matrix> = None;
    let mut flags: Option<Vec<bool>> = None;
    for res in results {
        let (bi, (block, block_flags)) = res?;
        let out = perturbed.get_or_insert_with(|| Matrix::zeros(n, block.cols()));
        let start = bi * CRAFT_BLOCK;
        for r in 0..block.rows() {
            out.row_mut(start + r).copy_from_slice(block.row(r));
        }
        if let Some(bf) = block_flags {
            flags.get_or_insert_with(|| vec![false; n])[start..start + bf.len()]
                .copy_from_slice(&bf);
        }
    }
    Ok((perturbed.expect("at least one block"), flags))
}

// ---------------------------------------------------------------------------
// Cross-model protocol
// ---------------------------------------------------------------------------

/// Anything that can be attacked: returns class scores (rows ordered like the
/// input). Defended models implement this without exposing gradients.
pub trait Predictor {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix>;
}

impl Predictor for MlpModel {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        forward(self, x)
    }
}

/// Everything a resistance-table cell needs to know about one attack run.
#[derive(Debug)]
pub struct AttackReport {
    /// Which model the gradients came from (e.g. "self", "standard",
    /// "retrained(seed+1)", "lle-approximator").
    pub surrogate: String,
    pub norm_tag: String,
    /// Target accuracy on the clean evaluation set.
    pub clean_accuracy: f64,
    /// Fraction of originally-correct samples still classified correctly
    /// after the attack: 1 − mean(success) over originally-correct samples.
    pub adv_accuracy: f64,
    /// Mean perturbation size over originally-correct samples, measured in
    /// the attack's own norm (l∞ radius, l₂ distance, or flip count).
    pub mean_distortion: f64,
    pub originally_correct: Vec<bool>,
    /// True where the sample was originally correct and the target now errs.
    pub success_mask: Vec<bool>,
    /// Per-sample l₀ exhaustion flags (None for other norms).
    pub exhausted: Option<Vec<bool>>,
    pub perturbed: Matrix,
}

/// A crafted adversarial batch, not yet scored against any target. Crafting
/// depends only on the surrogate, so one `Crafted` can be evaluated against
/// several targets (the resistance table shares black-box crafts this way).
#[derive(Debug, Clone)]
pub struct Crafted {
    pub perturbed: Matrix,
    pub exhausted: Option<Vec<bool>>,
}

/// Run the attack described by `spec` against `surrogate` over the whole
/// dataset. Continuous-norm attacks require a continuous domain;
/// `zero_to_one_only` l₀ requires a binary one.
pub fn craft_for_spec(surrogate: &MlpModel, data: &Dataset, spec: &AttackSpec) -> Result<Crafted> {
    spec.validate()?;
    match (data.domain(), &spec.norm) {
        (Domain::Binary, AttackNorm::L0 { direction: L0Direction::ZeroToOneOnly, .. }) => {}
        (Domain::Binary, _) => {
            return Err(Error::Contract(format!(
                "attack norm {} would break the binary domain; only zero_to_one_only l0 applies",
                spec.norm.tag()
            )))
        }
        (Domain::ContinuousUnit, AttackNorm::L0 { direction: L0Direction::ZeroToOneOnly, .. }) => {
            return Err(Error::Contract("zero_to_one_only l0 requires a binary domain".into()))
        }
        (Domain::ContinuousUnit, _) => {}
    }

    let x = data.samples();
    let labels = data.labels();
    let (perturbed, exhausted) = match spec.norm {
        AttackNorm::Linf { eps } => (fgsm(surrogate, x, labels, eps)?, None),
        AttackNorm::L2 { c, steps, step_size } => {
            (l2_attack(surrogate, x, labels, c, steps, step_size, spec.targeted)?, None)
        }
        AttackNorm::L0 { budget, direction } => {
            let out = l0_attack(surrogate, x, labels, budget, direction)?;
            (out.perturbed, Some(out.exhausted))
        }
    };
    Ok(Crafted { perturbed, exhausted })
}

/// Score an already-crafted batch against `target`. Success statistics are
/// restricted to the samples the target classifies correctly in the first
/// place; if there are none, the evaluation is meaningless and an
/// `EmptyEvaluationSet` error is returned.
pub fn evaluate_transfer(
    target: &dyn Predictor,
    data: &Dataset,
    crafted: &Crafted,
    spec: &AttackSpec,
) -> Result<AttackReport> {
    let x = data.samples();
    let perturbed = &crafted.perturbed;
    ensure!(
        perturbed.rows() == data.len() && perturbed.cols() == data.input_dim(),
        "evaluate_transfer: crafted batch is {}x{}, dataset is {}x{}",
        perturbed.rows(),
        perturbed.cols(),
        data.len(),
        data.input_dim()
    );
    let clean = target.predict_proba(x)?;
    let originally_correct: Vec<bool> =
        (0..data.len()).map(|i| argmax_row(clean.row(i)) == data.class_of(i)).collect();
    let n_correct = originally_correct.iter().filter(|&&c| c).count();
    if n_correct == 0 {
        return Err(Error::EmptyEvaluationSet);
    }
    let clean_accuracy = n_correct as f64 / data.len() as f64;

    let adv = target.predict_proba(perturbed)?;
    let mut success_mask = vec![false; data.len()];
    let mut survivors = 0usize;
    let mut distortion_sum = 0.0;
    for i in 0..data.len() {
        if !originally_correct[i] {
            continue;
        }
        let still_correct = argmax_row(adv.row(i)) == data.class_of(i);
        success_mask[i] = !still_correct;
        if still_correct {
            survivors += 1;
        }
        let (xi, pi) = (x.row(i), perturbed.row(i));
        distortion_sum += match spec.norm {
            AttackNorm::Linf { .. } => {
                xi.iter().zip(pi).map(|(&a, &b)| (a - b).abs()).fold(0.0f64, f64::max)
            }
            AttackNorm::L2 { .. } => {
                xi.iter().zip(pi).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
            AttackNorm::L0 { .. } => xi.iter().zip(pi).filter(|(&a, &b)| a != b).count() as f64,
        };
    }

    Ok(AttackReport {
        surrogate: "mlp-surrogate".to_string(),
        norm_tag: spec.norm.tag().to_string(),
        clean_accuracy,
        adv_accuracy: survivors as f64 / n_correct as f64,
        mean_distortion: distortion_sum / n_correct as f64,
        originally_correct,
        success_mask,
        exhausted: crafted.exhausted.clone(),
        perturbed: perturbed.clone(),
    })
}

/// Craft adversarial samples against `surrogate` and score them against
/// `target` in one go. See `craft_for_spec` and `evaluate_transfer`.
pub fn cross_model_attack(
    surrogate: &MlpModel,
    target: &dyn Predictor,
    data: &Dataset,
    spec: &AttackSpec,
) -> Result<AttackReport> {
    let crafted = craft_for_spec(surrogate, data, spec)?;
    evaluate_transfer(target, data, &crafted, spec)
}

/// Report as a JSON document (format_version 1). The perturbed samples are
/// embedded row-wise; use `export_perturbed_idx` for the IDX form.
pub fn report_to_json_value(report: &AttackReport) -> serde_json::Value {
    serde_json::json!({
        "format_version": 1,
        "surrogate": report.surrogate,
        "norm": report.norm_tag,
        "clean_accuracy": report.clean_accuracy,
        "adv_accuracy": report.adv_accuracy,
        "mean_distortion": report.mean_distortion,
        "n_eval": report.originally_correct.iter().filter(|&&c| c).count(),
        "originally_correct": report.originally_correct,
        "success_mask": report.success_mask,
        "exhausted": report.exhausted,
        "perturbed": (0..report.perturbed.rows())
            .map(|i| report.perturbed.row(i).to_vec())
            .collect::<Vec<_>>(),
    })
}

/// Write the perturbed samples as an IDX pair, labelled with the original
/// (true) labels from `reference` — which must be the dataset the report was
/// produced from.
pub fn export_perturbed_idx(
    report: &AttackReport,
    reference: &Dataset,
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
) -> Result<()> {
    ensure!(
        report.perturbed.rows() == reference.len()
            && report.perturbed.cols() == reference.input_dim(),
        "export_perturbed_idx: report does not match the reference dataset"
    );
    let adv = reference.with_samples(report.perturbed.clone())?;
    save_idx(&adv, images_path, labels_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_gaussian_clusters, synth_sparse_binary};
    use crate::mlp::{classifier_specs, init_model, train, Optimizer, TrainConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn trained_toy() -> (crate::mlp::MlpModel, Dataset) {
        let d = synth_gaussian_clusters(300, 12, 31, 6.0).unwrap();
        let specs = classifier_specs(&[12, 10, 2], crate::mlp::Activation::Tanh).unwrap();
        let model = init_model(&specs, 7).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::adam(0.01),
            batch_size: 30,
            epochs: 25,
            dropout_keep: 1.0,
            seed: 2,
        };
        (train(model, &d, &cfg).unwrap().model, d)
    }

    #[test]
    fn fgsm_tiny_eps_is_a_no_op_in_effect() {
        let (model, d) = trained_toy();
        let adv = fgsm(&model, d.samples(), d.labels(), 1e-12).unwrap();
        let max_delta = adv
            .data()
            .iter()
            .zip(d.samples().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta <= 1e-12, "perturbation {max_delta} exceeds eps");
        let before = forward(&model, d.samples()).unwrap();
        let after = forward(&model, &adv).unwrap();
        for i in 0..d.len() {
            assert_eq!(argmax_row(before.row(i)), argmax_row(after.row(i)));
        }
    }

    #[test]
    fn fgsm_respects_budget_and_box_exactly() {
        let (model, d) = trained_toy();
        let eps = 0.15;
        let adv = fgsm(&model, d.samples(), d.labels(), eps).unwrap();
        for (i, (&a, &b)) in adv.data().iter().zip(d.samples().data()).enumerate() {
            assert!((a - b).abs() <= eps, "entry {i}: |{a} - {b}| > {eps}");
            assert!((0.0..=1.0).contains(&a), "entry {i} escaped the unit box: {a}");
        }
        // It should actually hurt: surrogate == target here.
        let clean = crate::mlp::accuracy_on(&model, d.samples(), d.labels()).unwrap();
        let advacc = crate::mlp::accuracy_on(&model, &adv, d.labels()).unwrap();
        assert!(advacc < clean, "self-attack did nothing: {clean} -> {advacc}");
    }

    #[test]
    fn fgsm_leaves_zero_gradient_coordinates_alone() {
        // All-zero weights: the loss does not depend on the input at all, so
        // sign(0) = 0 must leave every coordinate untouched.
        let specs = classifier_specs(&[4, 2], crate::mlp::Activation::Tanh).unwrap();
        let mut model = init_model(&specs, 0).unwrap();
        for v in model.layers_mut()[0].w.data_mut() {
            *v = 0.0;
        }
        let x = Matrix::from_rows(&[vec![0.2, 0.8, 0.5, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let adv = fgsm(&model, &x, &y, 0.3).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn l2_prohibitive_penalty_returns_input_unchanged() {
        let (model, d) = trained_toy();
        let adv = l2_attack(&model, d.samples(), d.labels(), 1e9, 5, 0.05, None).unwrap();
        assert_eq!(adv.data(), d.samples().data(), "best objective must include the start");
    }

    #[test]
    fn l2_zero_steps_is_the_identity() {
        let (model, d) = trained_toy();
        let adv = l2_attack(&model, d.samples(), d.labels(), 0.1, 0, 0.05, None).unwrap();
        assert_eq!(adv.data(), d.samples().data());
    }

    #[test]
    fn l2_attack_moves_and_stays_in_box() {
        let (model, d) = trained_toy();
        let adv = l2_attack(&model, d.samples(), d.labels(), 0.1, 40, 0.05, None).unwrap();
        assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let clean = crate::mlp::accuracy_on(&model, d.samples(), d.labels()).unwrap();
        let advacc = crate::mlp::accuracy_on(&model, &adv, d.labels()).unwrap();
        assert!(advacc < clean - 0.2, "l2 self-attack too weak: {clean} -> {advacc}");
    }

    #[test]
    fn l2_targeted_steers_toward_the_target_class() {
        let (model, d) = trained_toy();
        // Pick samples of class 0 and steer them to class 1.
        let idx: Vec<usize> = (0..d.len()).filter(|&i| d.class_of(i) == 0).take(40).collect();
        let sub = d.take_rows(&idx).unwrap();
        let adv = l2_attack(&model, sub.samples(), sub.labels(), 0.05, 60, 0.05, Some(1)).unwrap();
        let preds = forward(&model, &adv).unwrap();
        let hit = (0..adv.rows()).filter(|&i| argmax_row(preds.row(i)) == 1).count();
        assert!(
            hit as f64 / adv.rows() as f64 > 0.8,
            "targeted attack reached class 1 on only {hit}/{} samples",
            adv.rows()
        );
    }

    #[test]
    fn l0_budget_zero_is_a_no_op() {
        let (model, d) = trained_toy();
        let out = l0_attack(&model, d.samples(), d.labels(), 0, L0Direction::Any).unwrap();
        assert_eq!(out.perturbed.data(), d.samples().data());
        assert!(out.exhausted.iter().all(|&e| !e));
    }

    #[test]
    fn l0_zero_to_one_on_all_ones_exhausts_immediately() {
        let d = synth_sparse_binary(40, 16, 3, 0.05).unwrap();
        let specs = classifier_specs(&[16, 8, 2], crate::mlp::Activation::Relu).unwrap();
        let model = init_model(&specs, 1).unwrap();
        let ones = Matrix::from_rows(&vec![vec![1.0; 16]; 4]).unwrap();
        let labels = crate::mlp::gather_rows(d.labels(), &[0, 1, 2, 3]);
        let out = l0_attack(&model, &ones, &labels, 5, L0Direction::ZeroToOneOnly).unwrap();
        assert_eq!(out.perturbed.data(), ones.data());
        // Untrained nets may or may not classify these correctly; every
        // sample that was not already misclassified must be flagged.
        let preds = forward(&model, &ones).unwrap();
        for i in 0..4 {
            let already_wrong = argmax_row(preds.row(i)) != argmax_row(labels.row(i));
            assert_eq!(out.exhausted[i], !already_wrong);
        }
    }

    #[test]
    fn l0_respects_budget_and_flip_direction() {
        let d = synth_sparse_binary(200, 32, 9, 0.05).unwrap();
        let specs = classifier_specs(&[32, 12, 2], crate::mlp::Activation::Relu).unwrap();
        let model = init_model(&specs, 4).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::adam(0.01),
            batch_size: 20,
            epochs: 20,
            dropout_keep: 1.0,
            seed: 6,
        };
        let model = train(model, &d, &cfg).unwrap().model;

        let budget = 6;
        let out =
            l0_attack(&model, d.samples(), d.labels(), budget, L0Direction::ZeroToOneOnly).unwrap();
        for i in 0..d.len() {
            let mut flips = 0;
            for (j, (&a, &b)) in d.samples().row(i).iter().zip(out.perturbed.row(i)).enumerate() {
                if a != b {
                    flips += 1;
                    assert_eq!(a, 0.0, "sample {i} coordinate {j}: only 0→1 flips are legal");
                    assert_eq!(b, 1.0);
                }
            }
            assert!(flips <= budget, "sample {i} used {flips} flips");
        }
        // The attack must actually flip something on a trained model.
        assert_ne!(out.perturbed.data(), d.samples().data());
    }

    #[test]
    fn l0_breaks_saliency_ties_toward_lower_index() {
        // Two identical input columns ⇒ identical gradients; the greedy pick
        // must take the lower index first.
        let specs = classifier_specs(&[2, 2], crate::mlp::Activation::Relu).unwrap();
        let mut model = init_model(&specs, 0).unwrap();
        {
            let w = &mut model.layers_mut()[0].w;
            w.set(0, 0, -1.0);
            w.set(0, 1, -1.0);
            w.set(1, 0, 1.0);
            w.set(1, 1, 1.0);
        }
        // Zero input ties the logits; argmax breaks to class 0 = truth, so the
        // sample starts correctly classified and both coordinates carry the
        // same positive gradient.
        let x = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = l0_attack(&model, &x, &y, 1, L0Direction::ZeroToOneOnly).unwrap();
        assert_eq!(out.perturbed.get(0, 0), 1.0, "lower index must win the tie");
        assert_eq!(out.perturbed.get(0, 1), 0.0);
    }

    #[test]
    fn crafting_is_deterministic_and_worker_invariant() {
        let (model, d) = trained_toy();
        let a = fgsm(&model, d.samples(), d.labels(), 0.1).unwrap();
        let b = fgsm(&model, d.samples(), d.labels(), 0.1).unwrap();
        assert_eq!(a.data(), b.data());

        // Same computation split across worker threads must be bit-identical.
        // (Set via env for the child computation only; tests run in one
        // process, so restore immediately.)
        std::env::set_var("ADVLAB_WORKERS", "3");
        let c = fgsm(&model, d.samples(), d.labels(), 0.1);
        std::env::remove_var("ADVLAB_WORKERS");
        assert_eq!(c.unwrap().data(), a.data());
    }

    #[test]
    fn cross_model_attack_reports_consistently() {
        let (model, d) = trained_toy();
        let spec = AttackSpec::untargeted(AttackNorm::Linf { eps: 0.15 });
        let report = cross_model_attack(&model, &model, &d, &spec).unwrap();

        let n_correct = report.originally_correct.iter().filter(|&&c| c).count();
        assert!(n_correct > 0);
        assert!((report.clean_accuracy - n_correct as f64 / d.len() as f64).abs() < 1e-12);
        for i in 0..d.len() {
            if report.success_mask[i] {
                assert!(report.originally_correct[i], "success only counts originally-correct");
            }
        }
        let successes = report.success_mask.iter().filter(|&&s| s).count();
        let expect = 1.0 - successes as f64 / n_correct as f64;
        assert!((report.adv_accuracy - expect).abs() < 1e-12);
        assert!(report.mean_distortion > 0.0 && report.mean_distortion <= 0.15 + 1e-15);
        assert_eq!(report.norm_tag, "linf");

        let json = report_to_json_value(&report);
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["n_eval"], n_correct);
    }

    #[test]
    fn cross_model_attack_rejects_hopeless_targets_and_bad_domains() {
        let (model, d) = trained_toy();

        // A target that never matches the labels: scores class counts.
        struct AlwaysWrong;
        impl Predictor for AlwaysWrong {
            fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
                let mut out = Matrix::zeros(x.rows(), 2);
                for i in 0..x.rows() {
                    out.set(i, 0, 1.0);
                }
                Ok(out)
            }
        }
        let only_class1: Vec<usize> = (0..d.len()).filter(|&i| d.class_of(i) == 1).collect();
        let skewed = d.take_rows(&only_class1).unwrap();
        let spec = AttackSpec::untargeted(AttackNorm::Linf { eps: 0.1 });
        let err = cross_model_attack(&model, &AlwaysWrong, &skewed, &spec).unwrap_err();
        assert!(matches!(err, Error::EmptyEvaluationSet), "got {err}");

        // Continuous attacks on binary data are rejected up front.
        let binary = synth_sparse_binary(50, 16, 1, 0.05).unwrap();
        let bspecs = classifier_specs(&[16, 4, 2], crate::mlp::Activation::Relu).unwrap();
        let bmodel = init_model(&bspecs, 2).unwrap();
        let err = cross_model_attack(&bmodel, &bmodel, &binary, &spec).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        // zero_to_one_only on continuous data likewise.
        let spec = AttackSpec::untargeted(AttackNorm::L0 {
            budget: 3,
            direction: L0Direction::ZeroToOneOnly,
        });
        let err = cross_model_attack(&model, &model, &d, &spec).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        // Invalid specs are rejected before any work happens.
        assert!(AttackSpec::untargeted(AttackNorm::Linf { eps: 0.0 }).validate().is_err());
        assert!(AttackSpec::untargeted(AttackNorm::L0 { budget: 0, direction: L0Direction::Any })
            .validate()
            .is_err());
        assert!(AttackSpec { norm: AttackNorm::Linf { eps: 0.1 }, targeted: Some(1) }
            .validate()
            .is_err());
    }

    #[test]
    fn perturbed_idx_export_round_trips() {
        let (model, d) = trained_toy();
        let spec =
            AttackSpec::untargeted(AttackNorm::L0 { budget: 4, direction: L0Direction::Any });
        let report = cross_model_attack(&model, &model, &d, &spec).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("adv-img"), dir.path().join("adv-lbl"));
        export_perturbed_idx(&report, &d, &img, &lbl).unwrap();
        let loaded = crate::dataset::load_idx(&img, &lbl).unwrap();
        assert_eq!(loaded.len(), d.len());
        for i in 0..d.len() {
            assert_eq!(loaded.class_of(i), d.class_of(i), "labels must be the true ones");
        }
        // l0 flips are exact extremes, so they survive byte quantization.
        for (a, b) in loaded.samples().data().iter().zip(report.perturbed.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn block_splitting_does_not_change_results() {
        // More rows than one crafting block, odd remainder.
        let d = synth_gaussian_clusters(2 * CRAFT_BLOCK + 37, 8, 77, 5.0).unwrap();
        let specs = classifier_specs(&[8, 6, 2], crate::mlp::Activation::Sigmoid).unwrap();
        let model = init_model(&specs, 3).unwrap();
        let whole = fgsm(&model, d.samples(), d.labels(), 0.2).unwrap();
        // Craft row-by-row and compare.
        let mut rng = rng_from_seed(0);
        for _ in 0..10 {
            let i = rng.random_range(0..d.len());
            let xi = crate::mlp::gather_rows(d.samples(), &[i]);
            let yi = crate::mlp::gather_rows(d.labels(), &[i]);
            let one = fgsm(&model, &xi, &yi, 0.2).unwrap();
            assert_eq!(one.row(0), whole.row(i), "row {i} differs when crafted alone");
        }
    }
}
