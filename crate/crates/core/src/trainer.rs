//! Training phases over the joint objective
//! `L = L_seg + λ_da·L_da + λ_mi·L_mi`.
//!
//! SOURCE optimises `L_seg` on labelled source images. GA alternates domain
//! classifier updates with representation updates on `L_seg + λ_da·L_da`.
//! GA_CA refreshes target pseudo-labels at the start of every epoch and adds
//! `λ_mi·L_mi`. The segmentation loss stays active in every phase.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{self, DomainParams, DomainProbMap};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{Phase, PhaseConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, ConfusionMatrix};
use crate::mil::{self, LatentDistribution, PseudoLabel};
use crate::model::{self, FeatureMap, Image, LabelMap, ModelParams};
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::stats::{load_stats, ClassStats};
use crate::synth::{load_dataset, Labels, Sample};
use crate::util::{derive_seed, str_salt};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub dparams: DomainParams,
    pub model_opt: Sgd,
    pub domain_opt: Sgd,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    /// Optimisation steps over the whole run.
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg.arch, derive_seed(cfg.seed, &[str_salt("model")]))?;
        let dparams = DomainParams::init(
            cfg.arch.feature_channels(),
            cfg.domain.hidden,
            derive_seed(cfg.seed, &[str_salt("domain")]),
        );
        Ok(Self {
            model_opt: Sgd::new(&params.set, 0.0, 0.0),
            domain_opt: Sgd::new(&dparams.set, 0.0, 0.0),
            params,
            dparams,
            phase: Phase::Source,
            epoch: 0,
            step: 0,
        })
    }

    fn check_order(&self, phase: Phase) -> Result<()> {
        if phase.index() < self.phase.index() {
            return Err(Error::Config(format!(
                "state is already in phase {}; cannot run earlier phase {}",
                self.phase, phase
            )));
        }
        Ok(())
    }

    /// Moves to `phase`. Entering a new phase resets the epoch counter and
    /// both momentum buffers; parameters carry over.
    fn enter_phase(&mut self, phase: Phase) -> Result<()> {
        self.check_order(phase)?;
        if phase != self.phase {
            self.phase = phase;
            self.epoch = 0;
            self.model_opt = Sgd::new(&self.params.set, 0.0, 0.0);
            self.domain_opt = Sgd::new(&self.dparams.set, 0.0, 0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl LabeledSet {
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut out = Self::default();
        for (i, s) in samples.into_iter().enumerate() {
            let labels = s
                .labels
                .ok_or_else(|| Error::Config(format!("sample {i} of a labelled split has no labels")))?;
            out.images.push(s.image);
            out.labels.push(labels);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Training inputs. Target training images carry no labels at all; target
/// ground truth lives only in `target_test` and is read for evaluation.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub source: LabeledSet,
    pub source_val: LabeledSet,
    pub target: Vec<Image>,
    pub target_test: LabeledSet,
    pub stats: Option<ClassStats>,
}

/// Term weights; a zero weight disables (and skips computing) that term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_da: f64,
    pub lambda_mi: f64,
}

impl LossWeights {
    pub const SEG_ONLY: LossWeights = LossWeights {
        lambda_da: 0.0,
        lambda_mi: 0.0,
    };

    pub fn for_phase(phase: Phase, cfg: &PhaseConfig) -> Self {
        match phase {
            Phase::Source => Self::SEG_ONLY,
            Phase::Ga => Self {
                lambda_da: cfg.lambda_da,
                lambda_mi: 0.0,
            },
            Phase::GaCa => Self {
                lambda_da: cfg.lambda_da,
                lambda_mi: cfg.lambda_mi,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointTerms {
    /// Mean over source images of the per-pixel cross-entropy.
    pub seg: f64,
    /// `(L_D + L_Dinv)/2`, summed over all units of the batch.
    pub da: f64,
    /// Mean over pseudo-labelled target images of the weighted MIL loss.
    pub mi: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub terms: JointTerms,
    /// Gradient of `total` with respect to the segmentation network.
    pub grads: ParamSet,
    pub source_predictions: Vec<LabelMap>,
}

fn finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            value,
        })
    }
}

/// Weighted joint objective and its gradient with respect to the
/// segmentation network; the domain classifier is held fixed.
///
/// `pseudo[i]` is the latent target distribution for `tgt_images[i]`, or
/// `None` to leave that image out of the MIL term.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    params: &ModelParams,
    dparams: &DomainParams,
    src_images: &[&Image],
    src_labels: &[&LabelMap],
    tgt_images: &[&Image],
    pseudo: &[Option<&LatentDistribution>],
    class_weights: &[f64],
    weights: LossWeights,
) -> Result<JointLoss> {
    if src_images.is_empty() || src_images.len() != src_labels.len() {
        return Err(Error::Argument("source batch needs matching images and labels".into()));
    }
    if pseudo.len() != tgt_images.len() {
        return Err(Error::Argument("one pseudo-label slot per target image required".into()));
    }
    let use_da = weights.lambda_da > 0.0 && !tgt_images.is_empty();
    let mi_count = pseudo.iter().filter(|q| q.is_some()).count();
    let use_mi = weights.lambda_mi > 0.0 && mi_count > 0;
    let use_tgt = use_da || use_mi;

    let mut grads = params.set.zeros_like();
    let mut terms = JointTerms::default();
    let mut source_predictions = Vec::with_capacity(src_images.len());

    let n_src = src_images.len() as f64;
    let mut src = Vec::with_capacity(src_images.len());
    for (im, lab) in src_images.iter().zip(src_labels) {
        let (scores, trace) = model::forward_trace(params, im)?;
        let seg = model::seg_loss(&scores, lab)?;
        terms.seg += seg.value / n_src;
        let mut g = seg.grad;
        g.data.iter_mut().for_each(|v| *v /= n_src);
        source_predictions.push(model::predict(&scores));
        src.push((trace, g, None));
    }
    finite("L_seg", terms.seg)?;

    let mut tgt = Vec::new();
    if use_tgt {
        for im in tgt_images {
            let (scores, trace) = model::forward_trace(params, im)?;
            tgt.push((scores, trace));
        }
    }

    let mut grad_feat_tgt: Vec<Option<crate::Tensor3>> = vec![None; tgt.len()];
    if use_da {
        let mut dtr_src = Vec::with_capacity(src.len());
        let mut maps_src = Vec::with_capacity(src.len());
        for (trace, _, _) in &src {
            let (m, d) = adversary::domain_forward_trace(dparams, &trace.features())?;
            maps_src.push(m);
            dtr_src.push(d);
        }
        let mut dtr_tgt = Vec::with_capacity(tgt.len());
        let mut maps_tgt = Vec::with_capacity(tgt.len());
        for (_, trace) in &tgt {
            let (m, d) = adversary::domain_forward_trace(dparams, &trace.features())?;
            maps_tgt.push(m);
            dtr_tgt.push(d);
        }
        let align = adversary::alignment_loss(&maps_src, &maps_tgt)?;
        terms.da = finite("L_da", align.value)?;
        let scale = |g: &[f64]| -> Vec<f64> { g.iter().map(|v| v * weights.lambda_da).collect() };
        for (i, d) in dtr_src.iter().enumerate() {
            let gf = adversary::domain_backward(dparams, d, &scale(&align.grad_src[i]), None);
            src[i].2 = Some(gf);
        }
        for (i, d) in dtr_tgt.iter().enumerate() {
            grad_feat_tgt[i] = Some(adversary::domain_backward(dparams, d, &scale(&align.grad_tgt[i]), None));
        }
    }

    let mut grad_scores_tgt: Vec<Option<crate::Tensor3>> = vec![None; tgt.len()];
    if use_mi {
        let inv = 1.0 / mi_count as f64;
        for (i, ((scores, _), q)) in tgt.iter().zip(pseudo).enumerate() {
            if let Some(q) = q {
                let l = mil::mil_loss(scores, q, class_weights)?;
                terms.mi += l.value * inv;
                let mut g = l.grad;
                g.data.iter_mut().for_each(|v| *v *= weights.lambda_mi * inv);
                grad_scores_tgt[i] = Some(g);
            }
        }
        finite("L_mi", terms.mi)?;
    }

    for (trace, gs, gf) in &src {
        model::backward(params, trace, Some(gs), gf.as_ref(), &mut grads)?;
    }
    for (i, (_, trace)) in tgt.iter().enumerate() {
        let gs = grad_scores_tgt[i].as_ref();
        let gf = grad_feat_tgt[i].as_ref();
        if gs.is_some() || gf.is_some() {
            model::backward(params, trace, gs, gf, &mut grads)?;
        }
    }

    terms.total = terms.seg;
    if use_da {
        terms.total += weights.lambda_da * terms.da;
    }
    if use_mi {
        terms.total += weights.lambda_mi * terms.mi;
    }
    finite("joint loss", terms.total)?;
    Ok(JointLoss {
        terms,
        grads,
        source_predictions,
    })
}

/// One line of the adversary diagnostics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    /// Classifier losses on the batch before this step's updates.
    pub domain_loss: f64,
    pub inverse_loss: f64,
    /// Unit accuracy of the current classifier on held-out images; filled
    /// on the last step of each epoch.
    pub heldout_acc: Option<f64>,
}

/// Per-epoch metrics. Losses are means over the epoch's batches; the
/// training mIoU is accumulated from the predictions made during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based epoch index within the phase.
    pub epoch: usize,
    pub step: u64,
    pub seg_loss: f64,
    pub da_loss: f64,
    pub mi_loss: f64,
    pub total_loss: f64,
    pub train_miou: Option<f64>,
    pub source_val_miou: Option<f64>,
    pub target_test_miou: Option<f64>,
    pub heldout_domain_acc: Option<f64>,
    /// Target images that received a pseudo-label this epoch.
    pub pseudo_labelled: Option<usize>,
}

pub trait Observer {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_pseudo_labels(&mut self, _phase: Phase, _epoch: usize, _labels: &[Option<PseudoLabel>]) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the updated state; `phase_done` marks
    /// the final epoch of the phase.
    fn on_epoch(&mut self, _rec: &EpochRecord, _state: &TrainState, _phase_done: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that discards everything.
pub struct Silent;

impl Observer for Silent {}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Loads the splits named in `cfg.data`, resolving relative paths against
/// `root`. Target training labels are never read. Every manifest must
/// share the network's label space.
pub fn load_datasets(cfg: &TrainConfig, root: &Path) -> Result<Datasets> {
    let c = cfg.arch.num_classes;
    let mut names: Option<(PathBuf, Vec<String>)> = None;
    let mut load = |p: &Option<String>, labels: Labels| -> Result<Vec<Sample>> {
        let Some(p) = p else { return Ok(Vec::new()) };
        let path = root.join(p);
        let (m, samples) = load_dataset(&path, labels)?;
        if m.num_classes != c {
            return Err(Error::Config(format!(
                "label-space mismatch: {} has {} classes, network predicts {c}",
                path.display(),
                m.num_classes
            )));
        }
        match &names {
            Some((first, n)) if *n != m.class_names => {
                return Err(Error::Config(format!(
                    "label-space mismatch: class names of {} differ from {}",
                    path.display(),
                    first.display()
                )))
            }
            Some(_) => {}
            None => names = Some((path.clone(), m.class_names.clone())),
        }
        Ok(samples)
    };
    let d = &cfg.data;
    let source = LabeledSet::from_samples(load(&d.source, Labels::Keep)?)?;
    let source_val = LabeledSet::from_samples(load(&d.source_val, Labels::Keep)?)?;
    let target = load(&d.target, Labels::Mask)?.into_iter().map(|s| s.image).collect();
    let target_test = LabeledSet::from_samples(load(&d.target_test, Labels::Keep)?)?;
    let stats = match &d.stats {
        Some(p) => {
            let s = load_stats(&root.join(p))?;
            if let Some((_, n)) = &names {
                if s.class_names != *n {
                    return Err(Error::Config(format!(
                        "label-space mismatch: statistics {p} use classes {:?}, manifests {n:?}",
                        s.class_names
                    )));
                }
            }
            Some(s)
        }
        None => None,
    };
    Ok(Datasets {
        source,
        source_val,
        target,
        target_test,
        stats,
    })
}

fn check_inputs(phase: Phase, data: &Datasets, cfg: &TrainConfig) -> Result<()> {
    if data.source.is_empty() {
        return Err(Error::Config(format!("phase {phase} needs labelled source images")));
    }
    if phase.uses_target() && data.target.is_empty() {
        return Err(Error::Config(format!("phase {phase} needs target images")));
    }
    if phase.uses_constraints() {
        let stats = data
            .stats
            .as_ref()
            .ok_or_else(|| Error::Config(format!("phase {phase} needs source class statistics")))?;
        if stats.num_classes() != cfg.arch.num_classes {
            return Err(Error::Config(format!(
                "statistics cover {} classes, network predicts {}",
                stats.num_classes(),
                cfg.arch.num_classes
            )));
        }
    }
    Ok(())
}

fn features(params: &ModelParams, images: &[&Image]) -> Result<Vec<FeatureMap>> {
    images.iter().map(|im| model::forward_features(params, im)).collect()
}

fn probs(dparams: &DomainParams, feats: &[FeatureMap]) -> Result<Vec<DomainProbMap>> {
    feats.iter().map(|f| adversary::domain_forward(dparams, f)).collect()
}

fn heldout_accuracy(state: &TrainState, data: &Datasets, cfg: &TrainConfig) -> Result<Option<f64>> {
    let k = cfg.domain.holdout;
    let src: Vec<&Image> = data.source_val.images.iter().take(k).collect();
    let tgt: Vec<&Image> = data.target_test.images.iter().take(k).collect();
    if src.is_empty() || tgt.is_empty() {
        return Ok(None);
    }
    let fs = features(&state.params, &src)?;
    let ft = features(&state.params, &tgt)?;
    adversary::unit_accuracy(&state.dparams, &fs, &ft).map(Some)
}

/// Computes pseudo-labels for every target image under the current network.
pub fn refresh_pseudo_labels(
    params: &ModelParams,
    images: &[Image],
    stats: &ClassStats,
) -> Result<Vec<Option<PseudoLabel>>> {
    images
        .iter()
        .map(|im| mil::pseudo_label(&model::forward_scores(params, im)?, stats))
        .collect()
}

/// Runs the remaining epochs of `phase`, starting from `state.epoch` when
/// the state is already in that phase and from epoch 0 otherwise.
pub fn run_phase(
    state: &mut TrainState,
    phase: Phase,
    data: &Datasets,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_inputs(phase, data, cfg)?;
    state.check_order(phase)?;
    let pc = cfg.phases.get(phase);
    let start = if state.phase == phase { state.epoch } else { 0 };
    if start >= pc.epochs {
        return Ok(Vec::new());
    }
    state.enter_phase(phase)?;
    state.model_opt.lr = pc.lr;
    state.model_opt.momentum = pc.momentum;
    state.domain_opt.lr = pc.lr_domain;
    state.domain_opt.momentum = pc.momentum;
    let weights = LossWeights::for_phase(phase, pc);
    let class_weights = data.stats.as_ref().map(mil::class_weights).unwrap_or_default();
    let bs = pc.batch_size;
    let n_src = data.source.len();
    let n_tgt = data.target.len();
    let batches = n_src.div_ceil(bs);
    let k_r = if phase.uses_target() { pc.k_r } else { 1 };

    let mut records = Vec::new();
    for epoch in start..pc.epochs {
        let salt = [phase.index() as u64, epoch as u64];
        let src_order = permutation(n_src, derive_seed(cfg.seed, &[salt[0], salt[1], str_salt("source")]));
        let tgt_order = permutation(n_tgt, derive_seed(cfg.seed, &[salt[0], salt[1], str_salt("target")]));

        let pseudo: Vec<Option<LatentDistribution>> = if phase.uses_constraints() {
            let stats = data.stats.as_ref().expect("checked above");
            let labels = refresh_pseudo_labels(&state.params, &data.target, stats)?;
            observer.on_pseudo_labels(phase, epoch + 1, &labels)?;
            labels.into_iter().map(|p| p.map(|p| p.projection.q)).collect()
        } else {
            Vec::new()
        };
        let pseudo_labelled = phase.uses_constraints().then(|| pseudo.iter().flatten().count());

        let mut cm = ConfusionMatrix::new(cfg.arch.num_classes);
        let mut sums = JointTerms::default();
        for b in 0..batches {
            let idx = &src_order[b * bs..((b + 1) * bs).min(n_src)];
            let src_images: Vec<&Image> = idx.iter().map(|&i| &data.source.images[i]).collect();
            let src_labels: Vec<&LabelMap> = idx.iter().map(|&i| &data.source.labels[i]).collect();
            let (tgt_idx, tgt_images): (Vec<usize>, Vec<&Image>) = if phase.uses_target() {
                (0..idx.len())
                    .map(|j| {
                        let t = tgt_order[(b * bs + j) % n_tgt];
                        (t, &data.target[t])
                    })
                    .unzip()
            } else {
                (Vec::new(), Vec::new())
            };
            let tgt_pseudo: Vec<Option<&LatentDistribution>> = tgt_idx
                .iter()
                .map(|&t| pseudo.get(t).and_then(Option::as_ref))
                .collect();

            let mut step_rec = None;
            if phase.uses_target() {
                let fs = features(&state.params, &src_images)?;
                let ft = features(&state.params, &tgt_images)?;
                let (ps, pt) = (probs(&state.dparams, &fs)?, probs(&state.dparams, &ft)?);
                let d0 = finite("L_D", adversary::domain_loss(&ps, &pt)?.value)?;
                let i0 = finite("L_Dinv", adversary::inverse_domain_loss(&ps, &pt)?.value)?;
                for _ in 0..pc.k_d {
                    let (l, g) = adversary::classifier_loss_and_grad(&state.dparams, &fs, &ft)?;
                    finite("L_D", l)?;
                    state.domain_opt.step(&mut state.dparams.set, &g)?;
                }
                step_rec = Some((d0, i0));
            }
            for k in 0..k_r {
                let jl = joint_loss(
                    &state.params,
                    &state.dparams,
                    &src_images,
                    &src_labels,
                    &tgt_images,
                    &tgt_pseudo,
                    &class_weights,
                    weights,
                )?;
                if k == 0 {
                    for (p, g) in jl.source_predictions.iter().zip(&src_labels) {
                        cm.accumulate(p, g)?;
                    }
                    sums.seg += jl.terms.seg;
                    sums.da += jl.terms.da;
                    sums.mi += jl.terms.mi;
                    sums.total += jl.terms.total;
                }
                state.model_opt.step(&mut state.params.set, &jl.grads)?;
            }
            state.step += 1;
            if let Some((d0, i0)) = step_rec {
                let heldout_acc = if b + 1 == batches {
                    heldout_accuracy(state, data, cfg)?
                } else {
                    None
                };
                observer.on_step(&StepRecord {
                    phase,
                    epoch: epoch + 1,
                    step: state.step,
                    domain_loss: d0,
                    inverse_loss: i0,
                    heldout_acc,
                })?;
            }
        }

        let nb = batches as f64;
        let heldout_domain_acc = if phase.uses_target() {
            heldout_accuracy(state, data, cfg)?
        } else {
            None
        };
        let miou_of = |set: &LabeledSet| -> Result<Option<f64>> {
            if set.is_empty() {
                Ok(None)
            } else {
                Ok(evaluate_model(&state.params, &set.images, &set.labels)?.miou)
            }
        };
        state.epoch = epoch + 1;
        let rec = EpochRecord {
            phase,
            epoch: epoch + 1,
            step: state.step,
            seg_loss: sums.seg / nb,
            da_loss: sums.da / nb,
            mi_loss: sums.mi / nb,
            total_loss: sums.total / nb,
            train_miou: cm.iou().miou,
            source_val_miou: miou_of(&data.source_val)?,
            target_test_miou: miou_of(&data.target_test)?,
            heldout_domain_acc,
            pseudo_labelled,
        };
        observer.on_epoch(&rec, state, epoch + 1 == pc.epochs)?;
        records.push(rec);
    }
    Ok(records)
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const ADVERSARY_FILE: &str = "adversary.tsv";
pub const METRICS_HEADER: &str = "phase\tepoch\tstep\tseg_loss\tda_loss\tmi_loss\ttotal_loss\ttrain_miou\tsource_val_miou\ttarget_test_miou\theldout_domain_acc\tpseudo_labelled";
pub const ADVERSARY_HEADER: &str = "phase\tepoch\tstep\tdomain_loss\tinverse_loss\theldout_acc";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl EpochRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.phase,
            self.epoch,
            self.step,
            self.seg_loss,
            self.da_loss,
            self.mi_loss,
            self.total_loss,
            opt(self.train_miou),
            opt(self.source_val_miou),
            opt(self.target_test_miou),
            opt(self.heldout_domain_acc),
            opt(self.pseudo_labelled),
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: String| Error::parse("metrics line", m);
        if f.len() != 12 {
            return Err(bad(format!("expected 12 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let optf = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            phase: f[0].parse()?,
            epoch: f[1].parse().map_err(|e| bad(format!("epoch: {e}")))?,
            step: f[2].parse().map_err(|e| bad(format!("step: {e}")))?,
            seg_loss: num(f[3])?,
            da_loss: num(f[4])?,
            mi_loss: num(f[5])?,
            total_loss: num(f[6])?,
            train_miou: optf(f[7])?,
            source_val_miou: optf(f[8])?,
            target_test_miou: optf(f[9])?,
            heldout_domain_acc: optf(f[10])?,
            pseudo_labelled: if f[11] == "-" {
                None
            } else {
                Some(f[11].parse().map_err(|e| bad(format!("pseudo_labelled: {e}")))?)
            },
        })
    }
}

impl StepRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.phase,
            self.epoch,
            self.step,
            self.domain_loss,
            self.inverse_loss,
            opt(self.heldout_acc)
        )
    }
}

/// Reads every record of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        out.push(EpochRecord::from_tsv(&line).map_err(|e| Error::parse(path.display().to_string(), e))?);
    }
    Ok(out)
}

/// Observer writing logs and checkpoints into an output directory:
/// `metrics.tsv`, `adversary.tsv`, `checkpoints/<phase>-epochNNN.ckpt`,
/// `checkpoints/<phase>.ckpt` at the end of each phase, and, when enabled,
/// `constraints/<phase>-epochNNN.jsonl` with per-image projection records.
pub struct RunDir {
    root: PathBuf,
    config_hash: String,
    seed: u64,
    every_epochs: usize,
    pub dump_constraints: bool,
}

impl RunDir {
    /// Opens `root` for a run continuing from `state`. Log lines recorded
    /// beyond `state` (by an interrupted run) are dropped so that the logs
    /// of a resumed run match an uninterrupted one.
    pub fn open(root: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let keep = |line: &str| -> bool {
            let mut it = line.split('\t');
            let phase = it.next().and_then(|p| p.parse::<Phase>().ok());
            let epoch = it.next().and_then(|e| e.parse::<usize>().ok());
            match (phase, epoch) {
                (Some(p), Some(e)) => {
                    p.index() < state.phase.index() || (p == state.phase && e <= state.epoch)
                }
                _ => false,
            }
        };
        for (name, header) in [(METRICS_FILE, METRICS_HEADER), (ADVERSARY_FILE, ADVERSARY_HEADER)] {
            let path = root.join(name);
            let mut text = format!("{header}\n");
            if path.exists() {
                let old = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for line in old.lines().skip(1).filter(|l| keep(l)) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            every_epochs: cfg.checkpoint.every_epochs,
            dump_constraints: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn phase_checkpoint(&self, phase: Phase) -> PathBuf {
        self.root.join("checkpoints").join(format!("{phase}.ckpt"))
    }

    pub fn epoch_checkpoint(&self, phase: Phase, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{phase}-epoch{epoch:03}.ckpt"))
    }

    fn append(&self, name: &str, line: &str) -> Result<()> {
        let path = self.root.join(name);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

impl Observer for RunDir {
    fn on_step(&mut self, rec: &StepRecord) -> Result<()> {
        self.append(ADVERSARY_FILE, &rec.to_tsv())
    }

    fn on_pseudo_labels(&mut self, phase: Phase, epoch: usize, labels: &[Option<PseudoLabel>]) -> Result<()> {
        if !self.dump_constraints {
            return Ok(());
        }
        let dir = self.root.join("constraints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{phase}-epoch{epoch:03}.jsonl"));
        let mut text = String::new();
        for (i, l) in labels.iter().enumerate() {
            let line = match l {
                Some(p) => serde_json::to_string(&p.dump(i)),
                None => serde_json::to_string(&serde_json::json!({ "image": i, "skipped": true })),
            }
            .expect("dump serialises");
            text.push_str(&line);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn on_epoch(&mut self, rec: &EpochRecord, state: &TrainState, phase_done: bool) -> Result<()> {
        self.append(METRICS_FILE, &rec.to_tsv())?;
        let ckpt = Checkpoint {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            state: state.clone(),
        };
        if rec.epoch.is_multiple_of(self.every_epochs) || phase_done {
            save_checkpoint(&ckpt, &self.epoch_checkpoint(rec.phase, rec.epoch))?;
        }
        if phase_done {
            save_checkpoint(&ckpt, &self.phase_checkpoint(rec.phase))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::compute_stats;
    use crate::testutil::{fd_params, rand_image, rel_err, rng, tiny_arch};
    use rand::Rng;

    /// Label = brightest channel, so the task is learnable; target images
    /// are dimmed copies drawn from another stream.
    fn labelled(r: &mut impl Rng, n: usize, gain: f64) -> LabeledSet {
        let mut set = LabeledSet::default();
        for _ in 0..n {
            let im = rand_image(r, 8, 8);
            let px = im.pixels();
            let labels = (0..64)
                .map(|p| (0..3).max_by(|&a, &b| px.data[a * 64 + p].total_cmp(&px.data[b * 64 + p])).unwrap() as u8)
                .collect();
            let mut dimmed = px.clone();
            dimmed.data.iter_mut().for_each(|v| *v *= gain);
            set.images.push(Image::new(dimmed).unwrap());
            set.labels.push(LabelMap::new(8, 8, labels).unwrap());
        }
        set
    }

    fn data(seed: u64) -> Datasets {
        let mut r = rng(seed);
        let source = labelled(&mut r, 6, 1.0);
        let source_val = labelled(&mut r, 2, 1.0);
        let target = labelled(&mut r, 4, 0.6).images;
        let target_test = labelled(&mut r, 2, 0.6);
        let names: Vec<String> = ["r", "g", "b"].map(String::from).to_vec();
        let stats = Some(compute_stats(&source.labels, 3, &names).unwrap());
        Datasets {
            source,
            source_val,
            target,
            target_test,
            stats,
        }
    }

    fn config() -> TrainConfig {
        let mut cfg = TrainConfig::new(5);
        cfg.arch = tiny_arch(3);
        cfg.domain.hidden = 8;
        cfg.domain.holdout = 2;
        for (phase, epochs) in [(Phase::Source, 3), (Phase::Ga, 2), (Phase::GaCa, 2)] {
            let p = cfg.phases.get_mut(phase);
            p.epochs = epochs;
            p.batch_size = 4;
            p.lr = 0.05;
            p.lambda_da = 0.01;
            p.lambda_mi = 0.5;
        }
        cfg
    }

    struct Fixture {
        params: ModelParams,
        dparams: DomainParams,
        data: Datasets,
        pseudo: Vec<Option<LatentDistribution>>,
        weights: Vec<f64>,
    }

    fn fixture(seed: u64) -> Fixture {
        let data = data(seed);
        let params = ModelParams::init(&tiny_arch(3), seed).unwrap();
        let dparams = DomainParams::init(5, 6, seed + 1);
        let stats = data.stats.clone().unwrap();
        let mut pseudo: Vec<_> = refresh_pseudo_labels(&params, &data.target[..2], &stats)
            .unwrap()
            .into_iter()
            .map(|p| p.map(|p| p.projection.q))
            .collect();
        if pseudo[0].is_none() {
            // fall back to the softmax itself so the MIL term is exercised
            pseudo[0] = Some(LatentDistribution(model::softmax(
                &model::forward_scores(&params, &data.target[0]).unwrap(),
            )));
        }
        pseudo[1] = None;
        let weights = mil::class_weights(&stats);
        Fixture {
            params,
            dparams,
            data,
            pseudo,
            weights,
        }
    }

    impl Fixture {
        fn eval(&self, params: &ModelParams, w: LossWeights) -> JointLoss {
            let src: Vec<&Image> = self.data.source.images[..2].iter().collect();
            let lab: Vec<&LabelMap> = self.data.source.labels[..2].iter().collect();
            let tgt: Vec<&Image> = self.data.target[..2].iter().collect();
            let q: Vec<Option<&LatentDistribution>> = self.pseudo.iter().map(Option::as_ref).collect();
            joint_loss(params, &self.dparams, &src, &lab, &tgt, &q, &self.weights, w).unwrap()
        }
    }

    #[test]
    fn zero_weights_reduce_to_the_segmentation_loss() {
        let f = fixture(0);
        let jl = f.eval(&f.params, LossWeights::SEG_ONLY);
        let mut want = 0.0;
        let mut g = f.params.set.zeros_like();
        for i in 0..2 {
            let (s, tr) = model::forward_trace(&f.params, &f.data.source.images[i]).unwrap();
            let mut sl = model::seg_loss(&s, &f.data.source.labels[i]).unwrap();
            want += sl.value / 2.0;
            sl.grad.data.iter_mut().for_each(|v| *v /= 2.0);
            model::backward(&f.params, &tr, Some(&sl.grad), None, &mut g).unwrap();
        }
        assert_eq!(jl.terms.total, jl.terms.seg);
        assert!((jl.terms.total - want).abs() < 1e-15);
        assert_eq!(jl.grads, g);
    }

    #[test]
    fn total_is_the_sum_of_independently_computed_terms() {
        let f = fixture(1);
        let w = LossWeights { lambda_da: 0.3, lambda_mi: 0.7 };
        let jl = f.eval(&f.params, w);
        let src: Vec<Image> = f.data.source.images[..2].to_vec();
        let tgt: Vec<Image> = f.data.target[..2].to_vec();
        let (da, _) = adversary::alignment_loss_and_grad(&f.params, &f.dparams, &src, &tgt).unwrap();
        let q = f.pseudo[0].as_ref().unwrap();
        let s = model::forward_scores(&f.params, &f.data.target[0]).unwrap();
        let mi = mil::mil_loss(&s, q, &f.weights).unwrap().value;
        assert!((jl.terms.da - da).abs() < 1e-8);
        assert!((jl.terms.mi - mi).abs() < 1e-8);
        let want = jl.terms.seg + 0.3 * da + 0.7 * mi;
        assert!((jl.terms.total - want).abs() < 1e-8);
    }

    #[test]
    fn doubling_lambda_da_doubles_its_contribution() {
        let f = fixture(2);
        let base = f.eval(&f.params, LossWeights { lambda_da: 0.0, lambda_mi: 0.2 });
        let one = f.eval(&f.params, LossWeights { lambda_da: 0.4, lambda_mi: 0.2 });
        let two = f.eval(&f.params, LossWeights { lambda_da: 0.8, lambda_mi: 0.2 });
        let c1 = one.terms.total - base.terms.total;
        let c2 = two.terms.total - base.terms.total;
        assert!((c2 - 2.0 * c1).abs() < 1e-12 * c1.abs().max(1.0));
        for ((a, b), z) in one.grads.values().zip(two.grads.values()).zip(base.grads.values()) {
            assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let f = fixture(seed);
            let w = LossWeights { lambda_da: 0.05, lambda_mi: 0.5 };
            let jl = f.eval(&f.params, w);
            let num = fd_params(&f.params.set, 1e-5, |set| {
                let p = ModelParams { arch: f.params.arch.clone(), set: set.clone() };
                f.eval(&p, w).terms.total
            });
            let analytic: Vec<f64> = jl.grads.values().collect();
            let e = rel_err(&analytic, &num);
            assert!(e < 1e-4, "seed {seed}: {e}");
        }
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let f = fixture(3);
        let im = &f.data.source.images[0];
        let e = joint_loss(&f.params, &f.dparams, &[im], &[], &[], &[], &[], LossWeights::SEG_ONLY);
        assert!(e.is_err());
        let lab = &f.data.source.labels[0];
        let e = joint_loss(&f.params, &f.dparams, &[im], &[lab], &[im], &[], &[], LossWeights::SEG_ONLY);
        assert!(e.is_err());
    }

    #[test]
    fn zero_epochs_leave_the_state_alone() {
        let mut cfg = config();
        cfg.phases.source.epochs = 0;
        let mut st = TrainState::init(&cfg).unwrap();
        let before = st.clone();
        let recs = run_phase(&mut st, Phase::Source, &data(0), &cfg, &mut Silent).unwrap();
        assert!(recs.is_empty());
        assert_eq!(st, before);
    }

    fn full_run(cfg: &TrainConfig, data: &Datasets) -> (TrainState, Vec<EpochRecord>) {
        let mut st = TrainState::init(cfg).unwrap();
        let mut all = Vec::new();
        for phase in Phase::ALL {
            all.extend(run_phase(&mut st, phase, data, cfg, &mut Silent).unwrap());
        }
        (st, all)
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = config();
        let d = data(1);
        let (a, ra) = full_run(&cfg, &d);
        let (b, rb) = full_run(&cfg, &d);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 7);
        assert!(ra.iter().filter(|r| r.phase == Phase::GaCa).all(|r| r.pseudo_labelled.is_some()));
    }

    #[test]
    fn resuming_mid_phase_matches_an_uninterrupted_run() {
        let cfg = config();
        let d = data(2);
        let (_, full) = full_run(&cfg, &d);
        let mut st = TrainState::init(&cfg).unwrap();
        run_phase(&mut st, Phase::Source, &d, &cfg, &mut Silent).unwrap();
        let mut partial = cfg.clone();
        partial.phases.ga.epochs = 1;
        run_phase(&mut st, Phase::Ga, &d, &partial, &mut Silent).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let ck = Checkpoint { config_hash: cfg.hash(), seed: cfg.seed, state: st };
        save_checkpoint(&ck, &path).unwrap();
        let mut st = crate::checkpoint::load_for_resume(&path, &cfg.hash()).unwrap().state;
        let mut rest = run_phase(&mut st, Phase::Ga, &d, &cfg, &mut Silent).unwrap();
        rest.extend(run_phase(&mut st, Phase::GaCa, &d, &cfg, &mut Silent).unwrap());
        assert_eq!(rest.as_slice(), &full[4..]);
    }

    #[test]
    fn source_phase_never_touches_target_training_data() {
        let cfg = config();
        let d = data(3);
        let mut other = d.clone();
        other.target = data(99).target;
        other.target.truncate(1);
        let mut a = TrainState::init(&cfg).unwrap();
        let mut b = a.clone();
        run_phase(&mut a, Phase::Source, &d, &cfg, &mut Silent).unwrap();
        run_phase(&mut b, Phase::Source, &other, &cfg, &mut Silent).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adaptation_never_reads_target_labels() {
        let cfg = config();
        let d = data(4);
        let mut relabelled = d.clone();
        for l in &mut relabelled.target_test.labels {
            l.labels.iter_mut().for_each(|v| *v = (*v + 1) % 3);
        }
        let (a, ra) = full_run(&cfg, &d);
        let (b, rb) = full_run(&cfg, &relabelled);
        assert_eq!(a, b);
        // only the evaluation column may differ
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(EpochRecord { target_test_miou: None, ..x.clone() }, EpochRecord { target_test_miou: None, ..y.clone() });
        }
    }

    #[test]
    fn missing_inputs_are_configuration_errors() {
        let cfg = config();
        let mut st = TrainState::init(&cfg).unwrap();
        let mut d = data(5);
        d.target.clear();
        assert!(matches!(run_phase(&mut st, Phase::Ga, &d, &cfg, &mut Silent), Err(Error::Config(_))));
        let mut d = data(5);
        d.stats = None;
        assert!(matches!(run_phase(&mut st, Phase::GaCa, &d, &cfg, &mut Silent), Err(Error::Config(_))));
        let mut d = data(5);
        d.source = LabeledSet::default();
        assert!(matches!(run_phase(&mut st, Phase::Source, &d, &cfg, &mut Silent), Err(Error::Config(_))));
    }

    #[test]
    fn phases_cannot_run_backwards_and_reset_momentum() {
        let cfg = config();
        let d = data(6);
        let mut st = TrainState::init(&cfg).unwrap();
        run_phase(&mut st, Phase::Source, &d, &cfg, &mut Silent).unwrap();
        assert!(st.model_opt.velocity().values().any(|v| v != 0.0));
        let mut one = cfg.clone();
        one.phases.ga.epochs = 1;
        one.phases.ga.batch_size = 100;
        let before = st.params.clone();
        let mut seen = None;
        struct Grab<'a>(&'a mut Option<TrainState>);
        impl Observer for Grab<'_> {
            fn on_epoch(&mut self, _: &EpochRecord, s: &TrainState, _: bool) -> Result<()> {
                *self.0 = Some(s.clone());
                Ok(())
            }
        }
        run_phase(&mut st, Phase::Ga, &d, &one, &mut Grab(&mut seen)).unwrap();
        // one step from zero momentum: v = g, θ = θ0 − lr·g
        let s = seen.unwrap();
        let v = s.model_opt.velocity();
        for ((a, b), g) in before.set.values().zip(s.params.set.values()).zip(v.values()) {
            assert!((a - 0.05 * g - b).abs() < 1e-6);
        }
        assert!(run_phase(&mut st, Phase::Source, &d, &cfg, &mut Silent).is_err());
    }

    #[test]
    fn metrics_lines_round_trip() {
        let (_, recs) = full_run(&config(), &data(7));
        for r in &recs {
            assert_eq!(&EpochRecord::from_tsv(&r.to_tsv()).unwrap(), r);
        }
        assert!(EpochRecord::from_tsv("source\t1").is_err());
    }

    #[test]
    fn run_dir_writes_logs_and_drops_lines_past_the_resume_point() {
        let cfg = config();
        let d = data(8);
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::init(&cfg).unwrap();
        let mut run = RunDir::open(dir.path(), &cfg, &st).unwrap();
        run.dump_constraints = true;
        for phase in Phase::ALL {
            run_phase(&mut st, phase, &d, &cfg, &mut run).unwrap();
        }
        let metrics = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.len(), 7);
        let adv = std::fs::read_to_string(dir.path().join(ADVERSARY_FILE)).unwrap();
        assert_eq!(adv.lines().count(), 1 + 4 * 2);
        for phase in Phase::ALL {
            assert!(run.phase_checkpoint(phase).exists());
        }
        assert!(dir.path().join("constraints/ga-ca-epoch001.jsonl").exists());

        let ck = crate::checkpoint::load_checkpoint(&run.epoch_checkpoint(Phase::Source, 3)).unwrap();
        RunDir::open(dir.path(), &cfg, &ck.state).unwrap();
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), metrics[..3]);
        let adv = std::fs::read_to_string(dir.path().join(ADVERSARY_FILE)).unwrap();
        assert_eq!(adv.lines().count(), 1);
    }
}
