//! Category-specific adaptation by constrained multiple-instance learning.
//!
//! For a target image the current prediction decides which classes are
//! present; the source size statistics then bound each class's coverage.
//! Network outputs are projected onto those bounds in KL divergence, and the
//! projection becomes a soft pseudo-label for a re-weighted cross-entropy.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, LabelMap, ScoreMap};
use crate::stats::{coverage, ClassStats};
use crate::tensor::Tensor3;

/// Presence threshold used in place of `0.1·α` when `α = 0`.
pub const PRESENCE_FLOOR: f64 = 5e-4;
/// Hinge coefficient on violated soft bounds.
pub const SLACK_PENALTY: f64 = 10.0;
/// Floor applied to model probabilities before projection.
pub const PROB_FLOOR: f64 = 1e-7;
pub const MAX_DUAL_ITERS: usize = 500;
pub const DUAL_TOLERANCE: f64 = 1e-6;
/// Multipliers on hard bounds are confined to this magnitude; `e^{-60}`
/// already drives any coverage far below the tolerance.
const HARD_CAP: f64 = 60.0;

/// Classes predicted present in one image, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageLabelSet(pub Vec<usize>);

impl ImageLabelSet {
    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A class is present when its predicted coverage exceeds a tenth of the
/// source lower decile (or [`PRESENCE_FLOOR`] when that decile is zero) and
/// the class has usable statistics.
pub fn infer_image_labels(pred: &LabelMap, stats: &ClassStats) -> Result<ImageLabelSet> {
    let d = coverage(pred, stats.num_classes())?;
    Ok(ImageLabelSet(
        (0..stats.num_classes())
            .filter(|&c| {
                let s = stats.get(c);
                let threshold = if s.alpha > 0.0 { 0.1 * s.alpha } else { PRESENCE_FLOOR };
                s.usable() && d.get(c) > threshold
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub value: f64,
    pub hard: bool,
}

/// Coverage bounds for one class; either side may be absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClassBounds {
    pub lower: Option<Bound>,
    pub upper: Option<Bound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSet {
    pub classes: Vec<ClassBounds>,
}

impl ConstraintSet {
    pub fn unconstrained(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassBounds::default(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|b| b.lower.is_none() && b.upper.is_none())
    }

    /// Rejects sets no per-pixel distribution can satisfy.
    pub fn check_feasible(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (c, b) in self.classes.iter().enumerate() {
            for bound in [b.lower, b.upper].into_iter().flatten() {
                if !bound.value.is_finite() || !(0.0..=1.0).contains(&bound.value) {
                    problems.push(format!("class {c}: bound {} outside [0,1]", bound.value));
                }
            }
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l.hard && u.hard && l.value > u.value {
                    problems.push(format!("class {c}: lower {} > upper {}", l.value, u.value));
                }
            }
        }
        let upper_sum: f64 = self
            .classes
            .iter()
            .map(|b| match b.upper {
                Some(u) if u.hard => u.value,
                _ => f64::INFINITY,
            })
            .sum();
        if upper_sum < 1.0 {
            let which: Vec<String> = self
                .classes
                .iter()
                .enumerate()
                .filter_map(|(c, b)| b.upper.map(|u| format!("class {c} <= {}", u.value)))
                .collect();
            problems.push(format!("hard upper bounds sum to {upper_sum} < 1 ({})", which.join(", ")));
        }
        let lower_sum: f64 = self
            .classes
            .iter()
            .filter_map(|b| b.lower.filter(|l| l.hard).map(|l| l.value))
            .sum();
        if lower_sum > 1.0 {
            problems.push(format!("hard lower bounds sum to {lower_sum} > 1"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Infeasible(problems.join("; ")))
        }
    }
}

/// Soft lower bound `δ_c` and hard upper bound `γ_c` for each present class;
/// absent classes with `α_c > 0` are capped at `0.1·α_c`. Lower bounds that
/// sum past one are scaled down proportionally.
pub fn build_constraints(present: &ImageLabelSet, stats: &ClassStats) -> Result<ConstraintSet> {
    if present.is_empty() {
        return Err(Error::Argument("no present classes to constrain".into()));
    }
    let mut set = ConstraintSet::unconstrained(stats.num_classes());
    for (c, b) in set.classes.iter_mut().enumerate() {
        let s = stats.get(c);
        if present.contains(c) {
            if !s.usable() {
                return Err(Error::Argument(format!("present class {c} has no statistics")));
            }
            b.lower = Some(Bound {
                value: s.delta.min(s.gamma),
                hard: false,
            });
            b.upper = Some(Bound {
                value: s.gamma,
                hard: true,
            });
        } else if s.usable() && s.alpha > 0.0 {
            b.upper = Some(Bound {
                value: 0.1 * s.alpha,
                hard: true,
            });
        }
    }
    let lower_sum: f64 = set.classes.iter().filter_map(|b| b.lower.map(|l| l.value)).sum();
    if lower_sum > 1.0 {
        for b in &mut set.classes {
            if let Some(l) = b.lower.as_mut() {
                l.value /= lower_sum;
            }
        }
    }
    Ok(set)
}

/// Per-pixel class distribution obtained by projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution(pub Tensor3);

impl LatentDistribution {
    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn coverage(&self) -> Vec<f64> {
        class_coverage(&self.0)
    }
}

fn class_coverage(t: &Tensor3) -> Vec<f64> {
    let n = t.plane_len() as f64;
    (0..t.channels).map(|c| t.plane(c).iter().sum::<f64>() / n).collect()
}

/// Outcome of a projection, including the dual state for debugging dumps.
#[derive(Debug, Clone)]
pub struct Projection {
    pub q: LatentDistribution,
    /// Net multiplier per class (positive: lower bound active, negative:
    /// upper bound active).
    pub multipliers: Vec<f64>,
    /// Bound violations of the final `Q`, per class, as `(lower, upper)`.
    pub violations: Vec<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
}

impl Projection {
    pub fn max_hard_violation(&self, cons: &ConstraintSet) -> f64 {
        self.violations
            .iter()
            .zip(&cons.classes)
            .map(|(&(lo, up), b)| {
                let lo = if b.lower.is_some_and(|l| l.hard) { lo } else { 0.0 };
                let up = if b.upper.is_some_and(|u| u.hard) { up } else { 0.0 };
                lo.max(up)
            })
            .fold(0.0, f64::max)
    }
}

struct ClassBox {
    lower: f64,
    upper: f64,
    /// Largest admissible positive multiplier (0 without a lower bound).
    cap_pos: f64,
    /// Largest admissible magnitude of a negative multiplier.
    cap_neg: f64,
}

fn class_boxes(cons: &ConstraintSet) -> Vec<ClassBox> {
    let cap = |b: Option<Bound>| match b {
        None => 0.0,
        Some(b) if b.hard => HARD_CAP,
        Some(_) => SLACK_PENALTY,
    };
    cons.classes
        .iter()
        .map(|b| ClassBox {
            lower: b.lower.map_or(0.0, |l| l.value),
            upper: b.upper.map_or(1.0, |u| u.value),
            cap_pos: cap(b.lower),
            cap_neg: cap(b.upper),
        })
        .collect()
}

/// Coverage of class `c` when its multiplier is `t`, given per-pixel
/// `a_i = P_ic` and `b_i = Σ_{k≠c} P_ik e^{λ_k}`; also returns the
/// derivative with respect to `t`.
fn coverage_at(a: &[f64], b: &[f64], t: f64) -> (f64, f64) {
    let e = t.exp();
    let n = a.len() as f64;
    let (mut s, mut ds) = (0.0, 0.0);
    for (&ai, &bi) in a.iter().zip(b) {
        let num = ai * e;
        let q = num / (num + bi);
        s += q;
        ds += q * (1.0 - q);
    }
    (s / n, ds / n)
}

/// Solves `coverage(t) = target` for `t` in `[lo, hi]`, coverage increasing.
fn solve_coverage(a: &[f64], b: &[f64], target: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut t = 0.5 * (lo + hi);
    for _ in 0..100 {
        let (f, df) = coverage_at(a, b, t);
        let r = f - target;
        if r.abs() < 1e-14 {
            break;
        }
        if r > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let newton = if df > 0.0 { t - r / df } else { f64::NAN };
        t = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            break;
        }
    }
    t
}

fn normalize_probs(probs: &Tensor3) -> Tensor3 {
    let n = probs.plane_len();
    let c = probs.channels;
    let mut p = probs.clone();
    for i in 0..n {
        let mut z = 0.0;
        for k in 0..c {
            let v = p.data[k * n + i].max(PROB_FLOOR);
            p.data[k * n + i] = v;
            z += v;
        }
        for k in 0..c {
            p.data[k * n + i] /= z;
        }
    }
    p
}

fn distribution(p: &Tensor3, lambda: &[f64]) -> Tensor3 {
    let n = p.plane_len();
    let c = p.channels;
    let shift = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lambda.iter().map(|l| (l - shift).exp()).collect();
    let mut q = Tensor3::zeros(c, p.height, p.width);
    for i in 0..n {
        let mut z = 0.0;
        for k in 0..c {
            let v = p.data[k * n + i] * w[k];
            q.data[k * n + i] = v;
            z += v;
        }
        for k in 0..c {
            q.data[k * n + i] /= z;
        }
    }
    q
}

/// KKT residual of class `c` at multiplier `lam` with coverage `cov`.
fn residual(bx: &ClassBox, lam: f64, cov: f64) -> f64 {
    if lam > 0.0 {
        if lam >= bx.cap_pos {
            (cov - bx.lower).max(0.0)
        } else {
            (bx.lower - cov).abs()
        }
    } else if lam < 0.0 {
        if -lam >= bx.cap_neg {
            (bx.upper - cov).max(0.0)
        } else {
            (cov - bx.upper).abs()
        }
    } else {
        let lo = if bx.cap_pos > 0.0 { (bx.lower - cov).max(0.0) } else { 0.0 };
        let up = if bx.cap_neg > 0.0 { (cov - bx.upper).max(0.0) } else { 0.0 };
        lo.max(up)
    }
}

/// KL projection of per-pixel distributions onto a coverage constraint set.
///
/// Minimises `(1/N)·Σ_i KL(Q_i ‖ P_i) + SLACK_PENALTY·Σ_soft hinge` subject to
/// the hard bounds. The minimiser has the form `Q_ic ∝ P_ic·e^{λ_c}`; the
/// multipliers are found by projected block-coordinate ascent on the dual,
/// each class's multiplier being maximised exactly within its admissible
/// interval (`[0, 10]` for a soft lower bound, unbounded for hard bounds).
/// Iteration stops once every KKT residual is below [`DUAL_TOLERANCE`] or
/// after [`MAX_DUAL_ITERS`] sweeps.
pub fn project_to_constraints(probs: &Tensor3, cons: &ConstraintSet) -> Result<Projection> {
    let c = probs.channels;
    if cons.num_classes() != c {
        return Err(Error::Shape(format!(
            "{} constrained classes for {c}-channel probabilities",
            cons.num_classes()
        )));
    }
    if probs.plane_len() == 0 {
        return Err(Error::Shape("empty probability map".into()));
    }
    cons.check_feasible()?;
    let p = normalize_probs(probs);
    let n = p.plane_len();
    let boxes = class_boxes(cons);
    let mut lambda = vec![0.0; c];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    if !cons.is_empty() {
        let weights = |lambda: &[f64]| -> Vec<f64> { lambda.iter().map(|l| l.exp()).collect() };
        for sweep in 0..MAX_DUAL_ITERS {
            iterations = sweep + 1;
            for cls in 0..c {
                let bx = &boxes[cls];
                if bx.cap_pos == 0.0 && bx.cap_neg == 0.0 {
                    continue;
                }
                let w = weights(&lambda);
                for i in 0..n {
                    a[i] = p.data[cls * n + i];
                    b[i] = (0..c)
                        .filter(|&k| k != cls)
                        .map(|k| p.data[k * n + i] * w[k])
                        .sum();
                }
                let (cov0, _) = coverage_at(&a, &b, 0.0);
                lambda[cls] = if bx.cap_pos > 0.0 && cov0 < bx.lower {
                    let (top, _) = coverage_at(&a, &b, bx.cap_pos);
                    if top <= bx.lower {
                        bx.cap_pos
                    } else {
                        solve_coverage(&a, &b, bx.lower, 0.0, bx.cap_pos)
                    }
                } else if bx.cap_neg > 0.0 && cov0 > bx.upper {
                    let (bottom, _) = coverage_at(&a, &b, -bx.cap_neg);
                    if bottom >= bx.upper {
                        -bx.cap_neg
                    } else {
                        solve_coverage(&a, &b, bx.upper, -bx.cap_neg, 0.0)
                    }
                } else {
                    0.0
                };
            }
            let cov = class_coverage(&distribution(&p, &lambda));
            let worst = (0..c)
                .map(|k| residual(&boxes[k], lambda[k], cov[k]))
                .fold(0.0, f64::max);
            if worst < DUAL_TOLERANCE {
                converged = true;
                break;
            }
        }
    } else {
        converged = true;
    }

    let q = if lambda.iter().all(|&l| l == 0.0) {
        p
    } else {
        distribution(&p, &lambda)
    };
    let cov = class_coverage(&q);
    let violations = cons
        .classes
        .iter()
        .zip(&cov)
        .map(|(bd, &d)| {
            (
                bd.lower.map_or(0.0, |l| (l.value - d).max(0.0)),
                bd.upper.map_or(0.0, |u| (d - u.value).max(0.0)),
            )
        })
        .collect();
    Ok(Projection {
        q: LatentDistribution(q),
        multipliers: lambda,
        violations,
        iterations,
        converged,
    })
}

/// Primal objective minimised by [`project_to_constraints`]: mean per-pixel
/// `KL(Q‖P)` plus the hinge penalty on soft bounds. `P` is floored and
/// renormalised exactly as the projection does.
pub fn projection_objective(q: &Tensor3, probs: &Tensor3, cons: &ConstraintSet) -> f64 {
    let p = normalize_probs(probs);
    let n = p.plane_len();
    let mut kl = 0.0;
    for (qv, pv) in q.data.iter().zip(&p.data) {
        if *qv > 0.0 {
            kl += qv * (qv / pv).ln();
        }
    }
    kl /= n as f64;
    let cov = class_coverage(q);
    let penalty: f64 = cons
        .classes
        .iter()
        .zip(&cov)
        .map(|(b, &d)| {
            let lo = b.lower.filter(|l| !l.hard).map_or(0.0, |l| (l.value - d).max(0.0));
            let up = b.upper.filter(|u| !u.hard).map_or(0.0, |u| (d - u.value).max(0.0));
            SLACK_PENALTY * (lo + up)
        })
        .sum();
    kl + penalty
}

/// `w_c = 0.1` for classes whose source lower decile exceeds 0.1, else 1.
pub fn class_weights(stats: &ClassStats) -> Vec<f64> {
    stats
        .classes
        .iter()
        .map(|s| if s.alpha > 0.1 { 0.1 } else { 1.0 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MilLoss {
    pub value: f64,
    pub grad: Tensor3,
}

/// Mean over pixels of `w·CE(Q, softmax(scores))`, where each pixel's weight
/// is that of its most likely class under `Q` (lowest index on ties).
pub fn mil_loss(scores: &ScoreMap, q: &LatentDistribution, weights: &[f64]) -> Result<MilLoss> {
    let s = scores.tensor();
    let qt = q.tensor();
    if !s.same_shape(qt) {
        return Err(Error::Shape(format!(
            "scores {:?} vs pseudo-label {:?}",
            s.shape(),
            qt.shape()
        )));
    }
    if weights.len() != s.channels {
        return Err(Error::Shape(format!(
            "{} class weights for {} classes",
            weights.len(),
            s.channels
        )));
    }
    let probs = model::softmax(scores);
    let n = s.plane_len();
    let c = s.channels;
    let inv = 1.0 / n as f64;
    let mut grad = Tensor3::zeros(c, s.height, s.width);
    let mut total = 0.0;
    for i in 0..n {
        let mut arg = 0;
        for k in 1..c {
            if qt.data[k * n + i] > qt.data[arg * n + i] {
                arg = k;
            }
        }
        let w = weights[arg];
        let m = (0..c).map(|k| s.data[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|k| (s.data[k * n + i] - m).exp()).sum::<f64>().ln();
        let qsum: f64 = (0..c).map(|k| qt.data[k * n + i]).sum();
        let mut ce = 0.0;
        for k in 0..c {
            let qk = qt.data[k * n + i];
            ce += qk * (lse - s.data[k * n + i]);
            grad.data[k * n + i] = w * inv * (probs.data[k * n + i] * qsum - qk);
        }
        total += w * ce;
    }
    Ok(MilLoss {
        value: total * inv,
        grad,
    })
}

/// Everything derived for one target image when refreshing pseudo-labels.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub present: ImageLabelSet,
    pub constraints: ConstraintSet,
    pub projection: Projection,
}

/// Structured per-image record for constraint debugging.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionDump<'a> {
    pub image: usize,
    pub present: &'a ImageLabelSet,
    pub constraints: &'a ConstraintSet,
    pub multipliers: &'a [f64],
    pub violations: &'a [(f64, f64)],
    pub iterations: usize,
    pub converged: bool,
}

impl PseudoLabel {
    pub fn dump(&self, image: usize) -> ProjectionDump<'_> {
        ProjectionDump {
            image,
            present: &self.present,
            constraints: &self.constraints,
            multipliers: &self.projection.multipliers,
            violations: &self.projection.violations,
            iterations: self.projection.iterations,
            converged: self.projection.converged,
        }
    }
}

/// Infers image labels from the current scores, builds the size
/// constraints and projects the softmax onto them. Returns `None` when no
/// class is present or the constraints are infeasible; such images are
/// skipped for the multiple-instance term.
pub fn pseudo_label(scores: &ScoreMap, stats: &ClassStats) -> Result<Option<PseudoLabel>> {
    let pred = model::predict(scores);
    let present = infer_image_labels(&pred, stats)?;
    if present.is_empty() {
        return Ok(None);
    }
    let constraints = build_constraints(&present, stats)?;
    match project_to_constraints(&model::softmax(scores), &constraints) {
        Ok(projection) => Ok(Some(PseudoLabel {
            present,
            constraints,
            projection,
        })),
        Err(Error::Infeasible(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
