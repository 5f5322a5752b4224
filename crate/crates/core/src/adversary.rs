//! Per-unit domain classifier, the domain-classifier and inverse losses, and
//! the alternating minimisation that aligns source and target features.
//!
//! Every spatial unit of the feature map is an instance: the classifier is a
//! pair of 1×1 convolutions ending in a single logit, and `p` is the
//! probability that a unit came from the source domain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{self, ConvGeom};
use crate::model::{self, FeatureMap, Image, ModelParams};
use crate::optim::{Sgd, DEFAULT_MOMENTUM};
use crate::params::{init_uniform, NamedTensor, ParamSet};
use crate::tensor::Tensor3;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Negative-side slope of the classifier's hidden rectifier. A leaky unit
/// keeps the classifier from collapsing to a constant output when the
/// representation pushes every hidden unit negative.
pub const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub set: ParamSet,
}

impl DomainParams {
    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        let mut set = ParamSet::new();
        set.push(NamedTensor::zeros("fc1.weight", vec![hidden, in_channels, 1, 1]));
        set.push(NamedTensor::zeros("fc1.bias", vec![hidden]));
        set.push(NamedTensor::zeros("fc2.weight", vec![1, hidden, 1, 1]));
        set.push(NamedTensor::zeros("fc2.bias", vec![1]));
        Self {
            in_channels,
            hidden,
            set,
        }
    }

    pub fn init(in_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(in_channels, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans = [in_channels, in_channels, hidden, hidden];
        for (t, fan) in p.set.tensors_mut().iter_mut().zip(fans) {
            init_uniform(&mut rng, &mut t.data, fan);
        }
        p
    }

    fn fc1(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.in_channels,
            out_channels: self.hidden,
            kernel: 1,
            dilation: 1,
        }
    }

    fn fc2(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.hidden,
            out_channels: 1,
            kernel: 1,
            dilation: 1,
        }
    }
}

/// Source-domain probability per spatial unit, with the logits that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProbMap {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl DomainProbMap {
    pub fn from_logits(height: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != height * width {
            return Err(Error::Shape(format!(
                "{} logits for a {height}x{width} map",
                logits.len()
            )));
        }
        let probs = logits.iter().map(|&z| logistic(z).clamp(EPS, 1.0 - EPS)).collect();
        Ok(Self {
            height,
            width,
            logits,
            probs,
        })
    }

    /// Builds a map from probabilities; the logits are their log-odds.
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("probability {p} outside [0,1]")));
        }
        let logits = probs
            .iter()
            .map(|&p| {
                let p = p.clamp(EPS, 1.0 - EPS);
                (p / (1.0 - p)).ln()
            })
            .collect();
        let mut m = Self::from_logits(height, width, logits)?;
        m.probs = probs.iter().map(|p| p.clamp(EPS, 1.0 - EPS)).collect();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Retained activations of a classifier forward pass.
pub struct DomainTrace {
    input: Tensor3,
    hidden: Tensor3,
}

pub fn domain_forward(dparams: &DomainParams, features: &FeatureMap) -> Result<DomainProbMap> {
    domain_forward_trace(dparams, features).map(|(m, _)| m)
}

pub fn domain_forward_trace(
    dparams: &DomainParams,
    features: &FeatureMap,
) -> Result<(DomainProbMap, DomainTrace)> {
    let f = features.tensor();
    if f.channels != dparams.in_channels {
        return Err(Error::Config(format!(
            "feature map has {} channels, domain classifier expects {}",
            f.channels, dparams.in_channels
        )));
    }
    let (mut hidden, _) =
        layers::conv2d_forward(f, dparams.set.data(0), dparams.set.data(1), &dparams.fc1());
    layers::leaky_relu_inplace(&mut hidden, LEAK);
    let (logits, _) =
        layers::conv2d_forward(&hidden, dparams.set.data(2), dparams.set.data(3), &dparams.fc2());
    let map = DomainProbMap::from_logits(f.height, f.width, logits.data)?;
    Ok((
        map,
        DomainTrace {
            input: f.clone(),
            hidden,
        },
    ))
}

/// Backpropagates logit gradients through the classifier. Parameter
/// gradients are accumulated into `grads` when given; the returned tensor is
/// the gradient with respect to the input features.
pub fn domain_backward(
    dparams: &DomainParams,
    trace: &DomainTrace,
    grad_logits: &[f64],
    grads: Option<&mut ParamSet>,
) -> Tensor3 {
    let (h, w) = (trace.input.height, trace.input.width);
    let gl = Tensor3::from_vec(1, h, w, grad_logits.to_vec()).expect("logit grad shape");
    let c2 = layers::conv2d_backward(&gl, &trace.hidden.data, dparams.set.data(2), &dparams.fc2(), true);
    let mut gh = c2.input.expect("hidden grad");
    layers::leaky_relu_backward_inplace(&mut gh, &trace.hidden, LEAK);
    let c1 = layers::conv2d_backward(&gh, &trace.input.data, dparams.set.data(0), &dparams.fc1(), true);
    if let Some(g) = grads {
        for (i, vals) in [c1.weight, c1.bias, c2.weight, c2.bias].iter().enumerate() {
            for (a, b) in g.data_mut(i).iter_mut().zip(vals) {
                *a += b;
            }
        }
    }
    c1.input.expect("input grad")
}

/// A summed binary cross-entropy over all units of two groups of maps, with
/// its gradient with respect to every logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLoss {
    pub value: f64,
    pub grad_src: Vec<Vec<f64>>,
    pub grad_tgt: Vec<Vec<f64>>,
}

/// `-Σ log p` (as_source) or `-Σ log(1-p)` over one group, with logit
/// gradients. The value uses the clamped probabilities; the gradient is the
/// unclamped logistic derivative `σ(z) - 1` (or `σ(z)`), so a unit the
/// classifier has saturated on the wrong side still receives a gradient.
fn side(maps: &[DomainProbMap], as_source: bool) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let grads = maps
        .iter()
        .map(|m| {
            let mut s = 0.0;
            let g = (0..m.len())
                .map(|i| {
                    let p = m.probs[i];
                    s += if as_source { -p.ln() } else { -(1.0 - p).ln() };
                    let raw = logistic(m.logits[i]);
                    if as_source {
                        raw - 1.0
                    } else {
                        raw
                    }
                })
                .collect();
            total += s;
            g
        })
        .collect();
    (total, grads)
}

fn check_sides(p_src: &[DomainProbMap], p_tgt: &[DomainProbMap]) -> Result<()> {
    if p_src.is_empty() || p_tgt.is_empty() {
        return Err(Error::Argument(
            "domain loss needs at least one source and one target map".into(),
        ));
    }
    Ok(())
}

/// Domain-classifier loss: source units labelled source, target units
/// labelled target.
pub fn domain_loss(p_src: &[DomainProbMap], p_tgt: &[DomainProbMap]) -> Result<DomainLoss> {
    check_sides(p_src, p_tgt)?;
    let (a, grad_src) = side(p_src, true);
    let (b, grad_tgt) = side(p_tgt, false);
    Ok(DomainLoss {
        value: a + b,
        grad_src,
        grad_tgt,
    })
}

/// Inverse domain loss: the same cross-entropy with the domain labels
/// exchanged.
pub fn inverse_domain_loss(p_src: &[DomainProbMap], p_tgt: &[DomainProbMap]) -> Result<DomainLoss> {
    check_sides(p_src, p_tgt)?;
    let (a, grad_src) = side(p_src, false);
    let (b, grad_tgt) = side(p_tgt, true);
    Ok(DomainLoss {
        value: a + b,
        grad_src,
        grad_tgt,
    })
}

/// The representation objective `(L_D + L_Dinv) / 2`.
pub fn alignment_loss(p_src: &[DomainProbMap], p_tgt: &[DomainProbMap]) -> Result<DomainLoss> {
    let d = domain_loss(p_src, p_tgt)?;
    let inv = inverse_domain_loss(p_src, p_tgt)?;
    let half = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| 0.5 * (u + v)).collect())
            .collect()
    };
    Ok(DomainLoss {
        value: 0.5 * (d.value + inv.value),
        grad_src: half(&d.grad_src, &inv.grad_src),
        grad_tgt: half(&d.grad_tgt, &inv.grad_tgt),
    })
}

/// Update counts and learning rates of one alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    #[serde(default = "one")]
    pub k_d: usize,
    #[serde(default = "one")]
    pub k_r: usize,
    #[serde(default = "default_lr_domain")]
    pub lr_domain: f64,
    #[serde(default = "default_lr_repr")]
    pub lr_repr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn one() -> usize {
    1
}
fn default_lr_domain() -> f64 {
    1e-3
}
fn default_lr_repr() -> f64 {
    1e-4
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            k_d: 1,
            k_r: 1,
            lr_domain: default_lr_domain(),
            lr_repr: default_lr_repr(),
            momentum: default_momentum(),
        }
    }
}

fn check_finite(term: &str, value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: format!("{term} [{}]", context()),
            value,
        })
    }
}

fn features_of(params: &ModelParams, images: &[Image]) -> Result<Vec<FeatureMap>> {
    images.iter().map(|im| model::forward_features(params, im)).collect()
}

fn probs_of(dparams: &DomainParams, feats: &[FeatureMap]) -> Result<Vec<DomainProbMap>> {
    feats.iter().map(|f| domain_forward(dparams, f)).collect()
}

/// Loss and classifier-parameter gradient of the domain-classifier loss on
/// fixed features.
pub fn classifier_loss_and_grad(
    dparams: &DomainParams,
    feats_src: &[FeatureMap],
    feats_tgt: &[FeatureMap],
) -> Result<(f64, ParamSet)> {
    let mut grads = dparams.set.zeros_like();
    let run = |feats: &[FeatureMap]| -> Result<Vec<(DomainProbMap, DomainTrace)>> {
        feats.iter().map(|f| domain_forward_trace(dparams, f)).collect()
    };
    let src = run(feats_src)?;
    let tgt = run(feats_tgt)?;
    let ps: Vec<_> = src.iter().map(|(m, _)| m.clone()).collect();
    let pt: Vec<_> = tgt.iter().map(|(m, _)| m.clone()).collect();
    let loss = domain_loss(&ps, &pt)?;
    for ((_, tr), g) in src.iter().zip(&loss.grad_src) {
        domain_backward(dparams, tr, g, Some(&mut grads));
    }
    for ((_, tr), g) in tgt.iter().zip(&loss.grad_tgt) {
        domain_backward(dparams, tr, g, Some(&mut grads));
    }
    Ok((loss.value, grads))
}

/// Value and model-parameter gradient of the alignment objective
/// `(L_D + L_Dinv) / 2` with the classifier held fixed.
pub fn alignment_loss_and_grad(
    params: &ModelParams,
    dparams: &DomainParams,
    batch_src: &[Image],
    batch_tgt: &[Image],
) -> Result<(f64, ParamSet)> {
    let mut grads = params.set.zeros_like();
    let value = accumulate_alignment_grad(params, dparams, batch_src, batch_tgt, 1.0, &mut grads)?;
    Ok((value, grads))
}

/// Adds `scale ·` the alignment gradient into `grads`; returns the unscaled
/// alignment loss.
pub(crate) fn accumulate_alignment_grad(
    params: &ModelParams,
    dparams: &DomainParams,
    batch_src: &[Image],
    batch_tgt: &[Image],
    scale: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    let mut traces = Vec::with_capacity(batch_src.len() + batch_tgt.len());
    let mut maps_src = Vec::with_capacity(batch_src.len());
    let mut maps_tgt = Vec::with_capacity(batch_tgt.len());
    for (i, im) in batch_src.iter().chain(batch_tgt).enumerate() {
        let (_, tr) = model::forward_trace(params, im)?;
        let (map, dtr) = domain_forward_trace(dparams, &tr.features())?;
        if i < batch_src.len() {
            maps_src.push(map);
        } else {
            maps_tgt.push(map);
        }
        traces.push((tr, dtr));
    }
    let loss = alignment_loss(&maps_src, &maps_tgt)?;
    for ((tr, dtr), g) in traces.iter().zip(loss.grad_src.iter().chain(&loss.grad_tgt)) {
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let gf = domain_backward(dparams, dtr, &scaled, None);
        model::backward(params, tr, None, Some(&gf), grads)?;
    }
    Ok(loss.value)
}

/// Loss values bracketing one alternation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub domain_loss_before: f64,
    pub domain_loss_after: f64,
    pub inverse_loss_before: f64,
    pub inverse_loss_after: f64,
}

fn both_losses(
    params: &ModelParams,
    dparams: &DomainParams,
    src: &[Image],
    tgt: &[Image],
) -> Result<(f64, f64)> {
    let ps = probs_of(dparams, &features_of(params, src)?)?;
    let pt = probs_of(dparams, &features_of(params, tgt)?)?;
    Ok((domain_loss(&ps, &pt)?.value, inverse_domain_loss(&ps, &pt)?.value))
}

/// One round of the alternating minimisation: `k_d` classifier updates on
/// the domain loss with the representation frozen, then `k_r` representation
/// updates on `(L_D + L_Dinv)/2` with the classifier frozen.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    params: &mut ModelParams,
    model_opt: &mut Sgd,
    dparams: &mut DomainParams,
    domain_opt: &mut Sgd,
    batch_src: &[Image],
    batch_tgt: &[Image],
    cfg: &StepConfig,
) -> Result<StepDiagnostics> {
    if batch_src.is_empty() || batch_tgt.is_empty() {
        return Err(Error::Argument("adversarial step needs non-empty batches".into()));
    }
    domain_opt.lr = cfg.lr_domain;
    domain_opt.momentum = cfg.momentum;
    model_opt.lr = cfg.lr_repr;
    model_opt.momentum = cfg.momentum;
    let (d0, i0) = both_losses(params, dparams, batch_src, batch_tgt)?;
    let dump = |stage: &str, k: usize| format!("{stage} update {k}; L_D before step {d0}, L_Dinv {i0}");
    check_finite("domain loss", d0, || dump("initial", 0))?;
    check_finite("inverse domain loss", i0, || dump("initial", 0))?;

    let fs = features_of(params, batch_src)?;
    let ft = features_of(params, batch_tgt)?;
    for k in 0..cfg.k_d {
        let (loss, grads) = classifier_loss_and_grad(dparams, &fs, &ft)?;
        check_finite("domain loss", loss, || dump("classifier", k))?;
        domain_opt.step(&mut dparams.set, &grads)?;
    }
    for k in 0..cfg.k_r {
        let (loss, grads) = alignment_loss_and_grad(params, dparams, batch_src, batch_tgt)?;
        check_finite("alignment loss", loss, || dump("representation", k))?;
        model_opt.step(&mut params.set, &grads)?;
    }
    let (d1, i1) = both_losses(params, dparams, batch_src, batch_tgt)?;
    check_finite("domain loss", d1, || dump("final", cfg.k_r))?;
    Ok(StepDiagnostics {
        domain_loss_before: d0,
        domain_loss_after: d1,
        inverse_loss_before: i0,
        inverse_loss_after: i1,
    })
}

/// Fraction of units classified into their own domain (`p > 0.5` means
/// source).
pub fn unit_accuracy(
    dparams: &DomainParams,
    feats_src: &[FeatureMap],
    feats_tgt: &[FeatureMap],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (feats, is_src) in [(feats_src, true), (feats_tgt, false)] {
        for f in feats {
            let m = domain_forward(dparams, f)?;
            correct += m.probs.iter().filter(|&&p| (p > 0.5) == is_src).count();
            total += m.len();
        }
    }
    if total == 0 {
        return Err(Error::Argument("no units to classify".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Settings for training a fresh classifier on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_units: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 300,
            batch_units: 256,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Trains a new domain classifier to convergence on frozen features by
/// minibatch gradient descent on the mean domain loss. Inputs are
/// standardised per channel during training and the standardisation is
/// folded back into the first layer, so the result consumes raw features.
pub fn train_probe(
    feats_src: &[FeatureMap],
    feats_tgt: &[FeatureMap],
    cfg: &ProbeConfig,
) -> Result<DomainParams> {
    let d = feats_src
        .first()
        .or(feats_tgt.first())
        .ok_or_else(|| Error::Argument("probe needs features".into()))?
        .tensor()
        .channels;
    if feats_src.is_empty() || feats_tgt.is_empty() {
        return Err(Error::Argument("probe needs features from both domains".into()));
    }
    // (unit vector, is_source)
    let mut units: Vec<(Vec<f64>, bool)> = Vec::new();
    for (feats, is_src) in [(feats_src, true), (feats_tgt, false)] {
        for f in feats {
            let t = f.tensor();
            if t.channels != d {
                return Err(Error::Shape("feature maps disagree on channel count".into()));
            }
            let n = t.plane_len();
            for p in 0..n {
                units.push(((0..d).map(|c| t.data[c * n + p]).collect(), is_src));
            }
        }
    }
    let count = units.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (u, _) in &units {
        for c in 0..d {
            mean[c] += u[c] / count;
        }
    }
    for (u, _) in &units {
        for c in 0..d {
            sd[c] += (u[c] - mean[c]).powi(2) / count;
        }
    }
    for s in &mut sd {
        *s = s.sqrt().max(1e-6);
    }
    for (u, _) in &mut units {
        for c in 0..d {
            u[c] = (u[c] - mean[c]) / sd[c];
        }
    }

    let mut probe = DomainParams::init(d, cfg.hidden, cfg.seed);
    let mut opt = Sgd::new(&probe.set, cfg.lr, DEFAULT_MOMENTUM);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let bs = cfg.batch_units.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            for &i in chunk {
                if units[i].1 {
                    src.push(i)
                } else {
                    tgt.push(i)
                }
            }
            let pack = |idx: &[usize]| -> Vec<FeatureMap> {
                if idx.is_empty() {
                    return Vec::new();
                }
                let mut t = Tensor3::zeros(d, 1, idx.len());
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        t.data[c * idx.len() + j] = units[i].0[c];
                    }
                }
                vec![FeatureMap(t)]
            };
            let (fs, ft) = (pack(&src), pack(&tgt));
            let mut grads = probe.set.zeros_like();
            for (feats, is_src) in [(&fs, true), (&ft, false)] {
                for f in feats.iter() {
                    let (m, tr) = domain_forward_trace(&probe, f)?;
                    let (_, g) = side(std::slice::from_ref(&m), is_src);
                    domain_backward(&probe, &tr, &g[0], Some(&mut grads));
                }
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut probe.set, &grads)?;
        }
    }
    // fold standardisation: W' = W / sd, b' = b - W' · mean
    let h = probe.hidden;
    let mut w = probe.set.data(0).to_vec();
    let mut b = probe.set.data(1).to_vec();
    for j in 0..h {
        for c in 0..d {
            w[j * d + c] /= sd[c];
            b[j] -= w[j * d + c] * mean[c];
        }
    }
    probe.set.data_mut(0).copy_from_slice(&w);
    probe.set.data_mut(1).copy_from_slice(&b);
    Ok(probe)
}
