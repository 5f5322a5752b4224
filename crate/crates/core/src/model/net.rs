use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvGeom};
use super::types::{FeatureMap, Image, ScoreMap};
use crate::error::{Error, Result};
use crate::params::{init_uniform, NamedTensor, ParamSet};
use crate::tensor::Tensor3;

/// Architecture of the segmentation network.
///
/// `widths`, `dilations` and `pools` describe the hidden 3×3 convolutions;
/// `pools[i]` is the average-pooling factor applied after hidden layer `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub dilations: Vec<usize>,
    pub pools: Vec<usize>,
}

fn default_in_channels() -> usize {
    3
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 6,
            widths: vec![8, 16, 32, 32],
            dilations: vec![1, 1, 2, 4],
            pools: vec![2, 4, 1, 1],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if !(3..=5).contains(&n) {
            return Err(Error::Config(format!("expected 3-5 hidden layers, got {n}")));
        }
        if self.dilations.len() != n || self.pools.len() != n {
            return Err(Error::Config(
                "widths, dilations and pools must have the same length".into(),
            ));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "need >=1 input channel and 2..=255 classes, got {} / {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.widths.iter().chain(&self.dilations).chain(&self.pools).any(|&v| v == 0) {
            return Err(Error::Config("widths, dilations and pools must be positive".into()));
        }
        Ok(())
    }

    /// Total spatial downsampling between input and feature grid.
    pub fn downsample(&self) -> usize {
        self.pools.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated architecture")
    }

    fn hidden_geoms(&self) -> Vec<ConvGeom> {
        let mut in_ch = self.in_channels;
        self.widths
            .iter()
            .zip(&self.dilations)
            .map(|(&w, &d)| {
                let g = ConvGeom {
                    in_channels: in_ch,
                    out_channels: w,
                    kernel: 3,
                    dilation: d,
                };
                in_ch = w;
                g
            })
            .collect()
    }

    fn score_geom(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.feature_channels(),
            out_channels: self.num_classes,
            kernel: 1,
            dilation: 1,
        }
    }

    fn check_input(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        let f = self.downsample();
        if channels != self.in_channels {
            return Err(Error::Config(format!(
                "image has {channels} channels, network expects {}",
                self.in_channels
            )));
        }
        if height < f || width < f || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "image {height}x{width} is not a positive multiple of the downsample factor {f}"
            )));
        }
        Ok(())
    }
}

/// Network weights: architecture plus named tensors
/// `conv{i}.weight`, `conv{i}.bias`, `score.weight`, `score.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub set: ParamSet,
}

impl ModelParams {
    /// Seeded uniform initialisation in `[-s, s]`, `s = fan_in^{-1/2}`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::zeros(arch)?.set;
        // each bias follows its weight and shares that weight's fan-in
        let mut fan_in = 1;
        for t in set.tensors_mut() {
            if t.shape.len() == 4 {
                fan_in = t.shape[1] * t.shape[2] * t.shape[3];
            }
            init_uniform(&mut rng, &mut t.data, fan_in);
        }
        Ok(Self {
            arch: arch.clone(),
            set,
        })
    }

    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut set = ParamSet::new();
        for (i, g) in arch.hidden_geoms().iter().enumerate() {
            set.push(NamedTensor::zeros(
                format!("conv{i}.weight"),
                vec![g.out_channels, g.in_channels, 3, 3],
            ));
            set.push(NamedTensor::zeros(format!("conv{i}.bias"), vec![g.out_channels]));
        }
        let s = arch.score_geom();
        set.push(NamedTensor::zeros(
            "score.weight",
            vec![s.out_channels, s.in_channels, 1, 1],
        ));
        set.push(NamedTensor::zeros("score.bias", vec![s.out_channels]));
        Ok(Self {
            arch: arch.clone(),
            set,
        })
    }

    pub fn num_hidden(&self) -> usize {
        self.arch.widths.len()
    }

    fn weight(&self, layer: usize) -> &[f64] {
        self.set.data(2 * layer)
    }

    fn bias(&self, layer: usize) -> &[f64] {
        self.set.data(2 * layer + 1)
    }
}

struct HiddenTrace {
    input_hw: (usize, usize),
    patches: Vec<f64>,
    /// Rectifier output, before pooling.
    activ: Tensor3,
}

/// Intermediate values retained by the forward pass for [`backward`].
pub struct ForwardTrace {
    hidden: Vec<HiddenTrace>,
    features: Tensor3,
    low_scores_hw: (usize, usize),
}

impl ForwardTrace {
    pub fn features(&self) -> FeatureMap {
        FeatureMap(self.features.clone())
    }
}

fn run_hidden(
    params: &ModelParams,
    image: &Image,
    mut keep: Option<&mut Vec<HiddenTrace>>,
) -> Result<Tensor3> {
    let arch = &params.arch;
    let px = image.pixels();
    arch.check_input(px.height, px.width, px.channels)?;
    let mut x = px.clone();
    for (i, g) in arch.hidden_geoms().iter().enumerate() {
        let (mut y, patches) = layers::conv2d_forward(&x, params.weight(i), params.bias(i), g);
        layers::relu_inplace(&mut y);
        let pooled = layers::avg_pool_forward(&y, arch.pools[i]);
        if let Some(k) = keep.as_deref_mut() {
            k.push(HiddenTrace {
                input_hw: (x.height, x.width),
                patches: if g.kernel == 1 { x.data.clone() } else { patches },
                activ: y,
            });
        }
        x = pooled;
    }
    Ok(x)
}

/// Output of the last hidden layer, the representation scored per pixel and
/// classified per unit by the domain adversary.
pub fn forward_features(params: &ModelParams, image: &Image) -> Result<FeatureMap> {
    run_hidden(params, image, None).map(FeatureMap)
}

fn score_from_features(params: &ModelParams, features: &Tensor3) -> Tensor3 {
    let n = params.num_hidden();
    let geom = params.arch.score_geom();
    let (low, _) = layers::conv2d_forward(features, params.weight(n), params.bias(n), &geom);
    layers::bilinear_upsample(&low, params.arch.downsample())
}

pub fn forward_scores(params: &ModelParams, image: &Image) -> Result<ScoreMap> {
    let feats = run_hidden(params, image, None)?;
    Ok(ScoreMap(score_from_features(params, &feats)))
}

/// Forward pass that keeps what [`backward`] needs.
pub fn forward_trace(params: &ModelParams, image: &Image) -> Result<(ScoreMap, ForwardTrace)> {
    let mut hidden = Vec::with_capacity(params.num_hidden());
    let feats = run_hidden(params, image, Some(&mut hidden))?;
    let scores = score_from_features(params, &feats);
    let trace = ForwardTrace {
        hidden,
        low_scores_hw: (feats.height, feats.width),
        features: feats,
    };
    Ok((ScoreMap(scores), trace))
}

/// Reverse-mode gradient of a scalar with respect to every parameter, given
/// its gradient with respect to the full-resolution scores and/or the
/// feature map. Gradients are accumulated into `grads`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_scores: Option<&Tensor3>,
    grad_features: Option<&Tensor3>,
    grads: &mut ParamSet,
) -> Result<()> {
    let n = params.num_hidden();
    let (fh, fw) = trace.low_scores_hw;
    let mut g = Tensor3::zeros(trace.features.channels, fh, fw);
    if let Some(gs) = grad_scores {
        let f = params.arch.downsample();
        if gs.shape() != (params.arch.num_classes, fh * f, fw * f) {
            return Err(Error::Shape(format!(
                "score gradient {:?} does not match network output",
                gs.shape()
            )));
        }
        let g_low = layers::bilinear_upsample_backward(gs, f, fh, fw);
        let geom = params.arch.score_geom();
        let cg = layers::conv2d_backward(&g_low, &trace.features.data, params.weight(n), &geom, true);
        accumulate(grads, 2 * n, &cg.weight);
        accumulate(grads, 2 * n + 1, &cg.bias);
        g = cg.input.expect("requested input grad");
    }
    if let Some(gf) = grad_features {
        if !gf.same_shape(&trace.features) {
            return Err(Error::Shape("feature gradient does not match feature map".into()));
        }
        for (a, b) in g.data.iter_mut().zip(&gf.data) {
            *a += b;
        }
    }
    let geoms = params.arch.hidden_geoms();
    for i in (0..n).rev() {
        let h = &trace.hidden[i];
        let mut gy = layers::avg_pool_backward(&g, params.arch.pools[i], h.activ.height, h.activ.width);
        layers::relu_backward_inplace(&mut gy, &h.activ);
        let cg = layers::conv2d_backward(&gy, &h.patches, params.weight(i), &geoms[i], i > 0);
        accumulate(grads, 2 * i, &cg.weight);
        accumulate(grads, 2 * i + 1, &cg.bias);
        if let Some(gi) = cg.input {
            debug_assert_eq!((gi.height, gi.width), h.input_hw);
            g = gi;
        }
    }
    Ok(())
}

fn accumulate(grads: &mut ParamSet, index: usize, values: &[f64]) {
    for (a, b) in grads.data_mut(index).iter_mut().zip(values) {
        *a += b;
    }
}
