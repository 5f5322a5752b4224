//! Deterministic generator of paired synthetic street-scene domains.
//!
//! A scene is three horizontal "stuff" bands (sky, building, road) with
//! "thing" objects (cars on the road, poles with signs) painted on top.
//! Layout and appearance draw from separate per-image random streams, so a
//! purely photometric shift leaves every label map unchanged.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Image, LabelMap};
use crate::util::{derive_seed, sha256_hex, str_salt};

pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const CAR: u8 = 3;
pub const POLE: u8 = 4;
pub const SIGN: u8 = 5;
pub const NUM_CLASSES: usize = 6;
const POLE_WIDTH: usize = 8;

pub const MANIFEST_SCHEMA: &str = "segadapt.manifest.v1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn default_class_names() -> Vec<String> {
    ["sky", "building", "road", "car", "pole", "sign"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutPriors {
    /// Mean fraction of image height above the building band.
    pub sky_mean: f64,
    pub sky_jitter: f64,
    /// Mean fraction of image height covered by the road band.
    pub road_mean: f64,
    pub road_jitter: f64,
    /// Maximum horizon slope, in pixels per pixel.
    pub horizon_slope: f64,
    /// Maximum skyline step per building block, as a fraction of height.
    pub skyline_step: f64,
    pub cars: (u32, u32),
    /// Car width range in pixels.
    pub car_width: (f64, f64),
    pub poles: (u32, u32),
    pub sign_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceParams {
    /// Base RGB colour per class.
    pub class_colors: Vec<[f64; 3]>,
    /// Standard deviation of per-pixel Gaussian texture noise.
    pub noise: f64,
    /// Half-range of the per-image brightness jitter.
    pub illumination_jitter: f64,
    /// Darkening applied to the window pattern on buildings.
    pub window_contrast: f64,
    /// Global per-channel transform `v ↦ gain·v + offset`.
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub layout: LayoutPriors,
    pub appearance: AppearanceParams,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            class_names: default_class_names(),
            height: 64,
            width: 64,
            layout: LayoutPriors {
                sky_mean: 0.25,
                sky_jitter: 0.05,
                road_mean: 0.4,
                road_jitter: 0.06,
                horizon_slope: 0.15,
                skyline_step: 0.06,
                cars: (2, 2),
                car_width: (20.0, 26.0),
                poles: (1, 1),
                sign_prob: 1.0,
            },
            appearance: AppearanceParams {
                class_colors: vec![
                    [0.18, 0.33, 0.48],
                    [0.45, 0.33, 0.21],
                    [0.33, 0.33, 0.33],
                    [0.55, 0.22, 0.22],
                    [0.21, 0.55, 0.23],
                    [0.50, 0.50, 0.05],
                ],
                noise: 0.03,
                illumination_jitter: 0.0,
                window_contrast: 0.12,
                gain: [1.0; 3],
                offset: [0.0; 3],
            },
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        let a = &self.appearance;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image size {}x{} below 16", self.height, self.width));
        }
        if self.num_classes() != NUM_CLASSES || a.class_colors.len() != NUM_CLASSES {
            return bad(format!("scene generator expects {NUM_CLASSES} classes"));
        }
        let vals = [
            l.sky_mean,
            l.sky_jitter,
            l.road_mean,
            l.road_jitter,
            l.horizon_slope,
            l.skyline_step,
            l.sign_prob,
            a.noise,
            a.illumination_jitter,
            a.window_contrast,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("layout and appearance priors must be finite and nonnegative".into());
        }
        if l.sky_mean - l.sky_jitter < 0.0 || l.road_mean - l.road_jitter < 0.0 {
            return bad("band jitter exceeds band mean".into());
        }
        if l.sky_mean + l.sky_jitter > 1.0 || l.road_mean + l.road_jitter > 1.0 {
            return bad("band fractions exceed 1".into());
        }
        if l.cars.0 > l.cars.1 || l.poles.0 > l.poles.1 || l.sign_prob > 1.0 {
            return bad("object count ranges must be ordered; sign_prob <= 1".into());
        }
        if !(l.car_width.0 > 0.0 && l.car_width.0 <= l.car_width.1) {
            return bad("car width range must be positive and ordered".into());
        }
        if a.class_colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("class colours must lie in [0,1]".into());
        }
        if a.gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) || a.offset.iter().any(|o| !o.is_finite()) {
            return bad("colour transform must be finite with positive gains".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

/// Parameters of a domain shift: a photometric transform composed onto the
/// existing one, a texture-noise multiplier, and offsets of layout priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub noise_scale: f64,
    /// Added to the car base colour only.
    pub car_tint: [f64; 3],
    pub sky_delta: f64,
    pub road_delta: f64,
    pub car_delta: i32,
    pub pole_delta: i32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            gain: [1.0; 3],
            offset: [0.0; 3],
            noise_scale: 1.0,
            car_tint: [0.0; 3],
            sky_delta: 0.0,
            road_delta: 0.0,
            car_delta: 0,
            pole_delta: 0,
        }
    }
}

fn shift_count(range: (u32, u32), delta: i32) -> Result<(u32, u32)> {
    let lo = range.0 as i64 + delta as i64;
    let hi = range.1 as i64 + delta as i64;
    if lo < 0 {
        return Err(Error::Argument(format!("object count shift {delta} below zero")));
    }
    Ok((lo as u32, hi as u32))
}

/// Returns `config` with `shift` applied. The zero shift returns an equal
/// config.
pub fn apply_shift(config: &SceneConfig, shift: &DomainShift) -> Result<SceneConfig> {
    if shift.gain.iter().any(|g| !(0.25..=4.0).contains(g)) {
        return Err(Error::Argument("shift gains must lie in [0.25, 4]".into()));
    }
    if shift.offset.iter().any(|o| !(-0.5..=0.5).contains(o)) {
        return Err(Error::Argument("shift offsets must lie in [-0.5, 0.5]".into()));
    }
    if !(0.25..=4.0).contains(&shift.noise_scale) {
        return Err(Error::Argument("noise scale must lie in [0.25, 4]".into()));
    }
    if shift.car_tint.iter().any(|t| !(-0.5..=0.5).contains(t)) {
        return Err(Error::Argument("car tint must lie in [-0.5, 0.5]".into()));
    }
    if !(-0.5..=0.5).contains(&shift.sky_delta) || !(-0.5..=0.5).contains(&shift.road_delta) {
        return Err(Error::Argument("layout prior deltas must lie in [-0.5, 0.5]".into()));
    }
    let mut out = config.clone();
    let a = &mut out.appearance;
    for ch in 0..3 {
        a.offset[ch] = shift.gain[ch] * a.offset[ch] + shift.offset[ch];
        a.gain[ch] *= shift.gain[ch];
    }
    a.noise *= shift.noise_scale;
    for (c, t) in a.class_colors[CAR as usize].iter_mut().zip(shift.car_tint) {
        *c += t;
    }
    let l = &mut out.layout;
    l.sky_mean += shift.sky_delta;
    l.road_mean += shift.road_delta;
    l.cars = shift_count(l.cars, shift.car_delta)?;
    l.poles = shift_count(l.poles, shift.pole_delta)?;
    out.validate()?;
    Ok(out)
}

/// Named shift magnitudes, loosely mirroring cross-city, cross-season and
/// synthetic-to-real gaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Medium,
    Large,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    pub fn shift(self) -> DomainShift {
        match self {
            Preset::Small => DomainShift {
                offset: [0.05; 3],
                car_tint: [-0.01, 0.01, 0.0],
                road_delta: 0.01,
                ..DomainShift::default()
            },
            Preset::Medium => DomainShift {
                offset: [0.15; 3],
                car_tint: [-0.03, 0.03, 0.0],
                road_delta: 0.02,
                ..DomainShift::default()
            },
            Preset::Large => DomainShift {
                offset: [0.42; 3],
                car_tint: [-0.06, 0.06, 0.0],
                road_delta: 0.03,
                ..DomainShift::default()
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            other => Err(Error::Argument(format!("unknown preset {other:?}"))),
        }
    }
}

/// The dataset splits produced for one benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    SourceVal,
    Target,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Source, Split::SourceVal, Split::Target, Split::TargetTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::SourceVal => "source_val",
            Split::Target => "target",
            Split::TargetTest => "target_test",
        }
    }

    pub fn is_target(self) -> bool {
        matches!(self, Split::Target | Split::TargetTest)
    }
}

/// Scene config for one split of a preset benchmark. Splits differ only in
/// seed (and, for target splits, by the preset's shift).
pub fn preset_split_config(preset: Preset, seed: u64, split: Split) -> Result<SceneConfig> {
    let base = SceneConfig::default();
    let cfg = if split.is_target() {
        apply_shift(&base, &preset.shift())?
    } else {
        base
    };
    Ok(cfg.with_seed(derive_seed(seed, &[str_salt(split.name())])))
}

fn render_layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let l = &cfg.layout;
    let hf = h as f64;
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let sky_frac = l.sky_mean + sym(rng, l.sky_jitter);
    let road_frac = l.road_mean + sym(rng, l.road_jitter);
    let slope = sym(rng, l.horizon_slope);
    // skyline: blocks of 8 columns with independent symmetric steps
    let blocks = w.div_ceil(8);
    let steps: Vec<f64> = (0..blocks).map(|_| sym(rng, l.skyline_step)).collect();
    let cx = (w as f64 - 1.0) / 2.0;
    let road_top = |x: f64| hf * (1.0 - road_frac) + slope * (x - cx);
    let mut labels = vec![BUILDING; h * w];
    for x in 0..w {
        let sky_edge = hf * (sky_frac + steps[x / 8]);
        let road_edge = road_top(x as f64);
        for y in 0..h {
            let yc = y as f64 + 0.5;
            labels[y * w + x] = if road_frac > 0.0 && yc >= road_edge {
                ROAD
            } else if yc < sky_edge {
                SKY
            } else {
                BUILDING
            };
        }
    }

    // poles with optional signs, standing on the road edge
    let poles = rng.random_range(l.poles.0..=l.poles.1);
    for _ in 0..poles {
        let x0 = rng.random_range(0..=w.saturating_sub(POLE_WIDTH));
        let base = road_top(x0 as f64) + rng.random_range(0.0..3.0);
        let height = hf * rng.random_range(0.3..0.4);
        let top = (base - height).max(0.0);
        let has_sign = rng.random_bool(l.sign_prob);
        for y in (top as usize)..(base.min(hf) as usize) {
            for x in x0..(x0 + POLE_WIDTH).min(w) {
                labels[y * w + x] = POLE;
            }
        }
        if has_sign {
            let sy = top as isize - 4;
            for y in sy..sy + 10 {
                for x in x0 as isize - 4..x0 as isize + 10 {
                    if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                        labels[y as usize * w + x as usize] = SIGN;
                    }
                }
            }
        }
    }

    // cars: ellipses whose bottom lies inside the road band
    let cars = rng.random_range(l.cars.0..=l.cars.1);
    for _ in 0..cars {
        let cw = rng.random_range(l.car_width.0..=l.car_width.1);
        let ch = cw * 0.55;
        let xc = rng.random_range(0.0..w as f64);
        let edge = road_top(xc).clamp(0.0, hf);
        let bottom = edge + rng.random_range(0.3..1.0) * (hf - edge);
        if road_frac == 0.0 {
            continue;
        }
        let yc = bottom - ch / 2.0;
        let (rx, ry) = (cw / 2.0, ch / 2.0);
        let y_lo = (yc - ry).floor().max(0.0) as usize;
        let y_hi = ((yc + ry).ceil() as usize).min(h);
        let x_lo = (xc - rx).floor().max(0.0) as usize;
        let x_hi = ((xc + rx).ceil() as usize).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = (x as f64 + 0.5 - xc) / rx;
                let dy = (y as f64 + 0.5 - yc) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    labels[y * w + x] = CAR;
                }
            }
        }
    }
    labels
}

fn render_appearance(cfg: &SceneConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let a = &cfg.appearance;
    let light = if a.illumination_jitter > 0.0 {
        rng.random_range(-a.illumination_jitter..=a.illumination_jitter)
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = labels[p] as usize;
            let mut shade = light;
            match labels[p] {
                SKY => shade += 0.05 * (1.0 - y as f64 / h as f64),
                BUILDING if x % 6 < 3 && y % 6 < 3 => shade -= a.window_contrast,
                _ => {}
            }
            for ch in 0..3 {
                // one draw per channel and pixel regardless of class keeps the
                // appearance stream independent of the layout
                let z: f64 = normal.sample(rng);
                let v = a.class_colors[class][ch] + shade + a.noise * z;
                let v = (a.gain[ch] * v + a.offset[ch]).clamp(0.0, 1.0);
                rgb[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    rgb
}

/// Renders scene `index` of a domain as interleaved 8-bit RGB plus labels.
pub fn render_scene_raw(cfg: &SceneConfig, index: u64) -> (Vec<u8>, Vec<u8>) {
    let mut layout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index, str_salt("layout")]));
    let mut look_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index, str_salt("appearance")]));
    let labels = render_layout(cfg, &mut layout_rng);
    let rgb = render_appearance(cfg, &labels, &mut look_rng);
    (rgb, labels)
}

pub fn render_scene(cfg: &SceneConfig, index: u64) -> Result<(Image, LabelMap)> {
    let (rgb, labels) = render_scene_raw(cfg, index);
    Ok((
        Image::from_rgb8(cfg.height, cfg.width, &rgb)?,
        LabelMap::new(cfg.height, cfg.width, labels)?,
    ))
}

/// One labelled sample; target-domain loaders may withhold the labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub labels: Option<LabelMap>,
}

/// In-memory equivalent of [`generate_domain`] followed by [`load_dataset`].
pub fn generate_in_memory(cfg: &SceneConfig, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..n as u64)
        .map(|i| {
            render_scene(cfg, i).map(|(image, labels)| Sample {
                image,
                labels: Some(labels),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub split: String,
    pub count: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub config_hash: String,
    pub config: SceneConfig,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported schema {:?}", m.schema),
            ));
        }
        if m.config.hash() != m.config_hash {
            return Err(Error::parse(
                path.display().to_string(),
                "config hash does not match embedded config",
            ));
        }
        if m.items.len() != m.count || m.class_names.len() != m.num_classes {
            return Err(Error::parse(
                path.display().to_string(),
                "item count or class names inconsistent",
            ));
        }
        Ok(m)
    }
}

fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: image::ExtendedColorType) -> Result<()> {
    image::save_buffer(path, bytes, width as u32, height as u32, color).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `n` image/label PNG pairs and a manifest under `out_dir`:
/// `images/NNNNN.png`, `labels/NNNNN.png`, `manifest.json`.
pub fn generate_domain(cfg: &SceneConfig, n: usize, split: &str, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let (rgb, labels) = render_scene_raw(cfg, i as u64);
        let image = format!("images/{i:05}.png");
        let label = format!("labels/{i:05}.png");
        write_png(&out_dir.join(&image), cfg.width, cfg.height, &rgb, image::ExtendedColorType::Rgb8)?;
        write_png(&out_dir.join(&label), cfg.width, cfg.height, &labels, image::ExtendedColorType::L8)?;
        items.push(ManifestItem { image, label });
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        split: split.to_string(),
        count: n,
        num_classes: cfg.num_classes(),
        class_names: cfg.class_names.clone(),
        height: cfg.height,
        width: cfg.width,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        items,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_png(path: &Path, gray: bool, height: usize, width: usize) -> Result<Vec<u8>> {
    let err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    if img.height() as usize != height || img.width() as usize != width {
        return Err(err(format!(
            "raster is {}x{}, manifest says {height}x{width}",
            img.height(),
            img.width()
        )));
    }
    Ok(if gray {
        match img {
            image::DynamicImage::ImageLuma8(g) => g.into_raw(),
            _ => return Err(err("label raster is not 8-bit single channel".into())),
        }
    } else {
        img.into_rgb8().into_raw()
    })
}

/// Whether a loader hands labels to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labels {
    Keep,
    Mask,
}

/// Loads every sample of a manifest in listed order. Paths are resolved
/// relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path, labels: Labels) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.count);
    for item in &manifest.items {
        let ip = root.join(&item.image);
        let rgb = read_png(&ip, false, manifest.height, manifest.width)?;
        let image = Image::from_rgb8(manifest.height, manifest.width, &rgb)?;
        let labels = match labels {
            Labels::Mask => None,
            Labels::Keep => {
                let lp = root.join(&item.label);
                let raw = read_png(&lp, true, manifest.height, manifest.width)?;
                let map = LabelMap::new(manifest.height, manifest.width, raw)?;
                map.validate(manifest.num_classes).map_err(|e| Error::Image {
                    path: lp.clone(),
                    message: e.to_string(),
                })?;
                Some(map)
            }
        };
        samples.push(Sample { image, labels });
    }
    Ok((manifest, samples))
}
