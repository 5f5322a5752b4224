//! Evaluation records and their aggregation into ablation tables and plots.
//!
//! An [`EvalRecord`] is the single source of truth for a model's scores on
//! one split; [`RunReport`] only rearranges records, it never recomputes.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::Phase;
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::trainer::EpochRecord;

pub const EVAL_SCHEMA: &str = "segadapt.eval.v1";

/// Row label used for a model trained through `phase`.
pub fn method_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Source => "source-only",
        Phase::Ga => "GA only",
        Phase::GaCa => "GA+CA",
    }
}

/// Scores of one checkpoint on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub schema: String,
    pub method: String,
    pub phase: Phase,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: String,
    pub manifest: String,
    pub split: String,
    pub class_names: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Rows are ground truth, columns prediction.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        phase: Phase,
        seed: u64,
        config_hash: &str,
        checkpoint: &str,
        manifest: &str,
        split: &str,
        class_names: Vec<String>,
        cm: &ConfusionMatrix,
    ) -> Result<Self> {
        let c = cm.num_classes();
        if class_names.len() != c {
            return Err(Error::Argument(format!(
                "{} class names for a {c}-class confusion matrix",
                class_names.len()
            )));
        }
        let report = cm.iou();
        Ok(Self {
            schema: EVAL_SCHEMA.into(),
            method: method_name(phase).into(),
            phase,
            seed,
            config_hash: config_hash.into(),
            checkpoint: checkpoint.into(),
            manifest: manifest.into(),
            split: split.into(),
            class_names,
            iou: report.per_class,
            miou: report.miou,
            confusion: (0..c).map(|g| (0..c).map(|p| cm.get(g, p)).collect()).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::parse("evaluation record", m);
        if self.schema != EVAL_SCHEMA {
            return Err(bad(format!("schema {:?}, expected {EVAL_SCHEMA:?}", self.schema)));
        }
        let c = self.class_names.len();
        if self.iou.len() != c || self.confusion.len() != c || self.confusion.iter().any(|r| r.len() != c) {
            return Err(bad(format!("per-class fields disagree with {c} class names")));
        }
        for v in self.iou.iter().chain(std::iter::once(&self.miou)).flatten() {
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(bad(format!("score {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn save_eval(rec: &EvalRecord, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rec).expect("record serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_eval(path: &Path) -> Result<EvalRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: EvalRecord =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    rec.validate()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub split: String,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

/// Per-method rows of per-class IoU plus mIoU, one row per evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub class_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    /// Rows keep the order of `evals`. All records must share a label space.
    pub fn from_evals(evals: &[EvalRecord]) -> Result<Self> {
        let first = evals
            .first()
            .ok_or_else(|| Error::Argument("no evaluations to report".into()))?;
        for e in evals {
            e.validate()?;
            if e.class_names != first.class_names {
                return Err(Error::Argument(format!(
                    "label spaces differ: {:?} vs {:?}",
                    first.class_names, e.class_names
                )));
            }
        }
        Ok(Self {
            class_names: first.class_names.clone(),
            rows: evals
                .iter()
                .map(|e| ReportRow {
                    method: e.method.clone(),
                    seed: e.seed,
                    config_hash: e.config_hash.clone(),
                    split: e.split.clone(),
                    iou: e.iou.clone(),
                    miou: e.miou,
                })
                .collect(),
        })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string(), "seed".into(), "split".into()];
        h.extend(self.class_names.iter().cloned());
        h.push("mIoU".into());
        h.push("config_hash".into());
        h
    }

    /// Tab-separated table, scores as percentages with one decimal.
    pub fn to_tsv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut out = self.header().join("\t");
        out.push('\n');
        for r in &self.rows {
            let mut f = vec![r.method.clone(), r.seed.to_string(), r.split.clone()];
            f.extend(r.iou.iter().map(|&v| cell(v)));
            f.push(cell(r.miou));
            f.push(r.config_hash.clone());
            out.push_str(&f.join("\t"));
            out.push('\n');
        }
        out
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const SERIES: [Rgb<u8>; 6] = [
    Rgb([70, 110, 180]),
    Rgb([220, 130, 50]),
    Rgb([80, 160, 90]),
    Rgb([190, 70, 70]),
    Rgb([140, 100, 170]),
    Rgb([120, 120, 120]),
];

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

const PLOT_H: u32 = 200;
const MARGIN: u32 = 10;

/// Grouped bar chart: one group per class plus a final mIoU group, one bar
/// per report row, coloured by row order. Horizontal grid lines mark IoU
/// 0.25, 0.5, 0.75 and 1. Missing scores leave a gap.
pub fn iou_bar_chart(report: &RunReport) -> RgbImage {
    let (bar, gap) = (8u32, 12u32);
    let rows = report.rows.len().max(1) as u32;
    let groups = report.class_names.len() as u32 + 1;
    let width = 2 * MARGIN + groups * (rows * bar + gap);
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let base = MARGIN + PLOT_H;
    for q in 1..=4 {
        let y = base - PLOT_H * q / 4;
        fill_rect(&mut img, MARGIN, y, width - MARGIN, y + 1, GRID);
    }
    for (r, row) in report.rows.iter().enumerate() {
        let values = row.iou.iter().copied().chain(std::iter::once(row.miou));
        for (g, v) in values.enumerate() {
            let Some(v) = v else { continue };
            let x = MARGIN + gap / 2 + g as u32 * (rows * bar + gap) + r as u32 * bar;
            let h = (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
            fill_rect(&mut img, x, base - h, x + bar - 1, base, SERIES[r % SERIES.len()]);
        }
    }
    fill_rect(&mut img, MARGIN, base, width - MARGIN, base + 1, AXIS);
    img
}

/// Per-epoch loss curves over the whole run: segmentation loss (first
/// series colour), multiple-instance loss (second) and total loss (third),
/// each scaled to its own maximum. Vertical lines mark phase changes.
pub fn loss_chart(records: &[EpochRecord]) -> RgbImage {
    let step = 6u32;
    let width = 2 * MARGIN + (records.len().max(2) as u32 - 1) * step;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let base = (MARGIN + PLOT_H) as i64;
    for (i, w) in records.windows(2).enumerate() {
        if w[0].phase != w[1].phase {
            let x = MARGIN + (i as u32 + 1) * step;
            fill_rect(&mut img, x, MARGIN, x + 1, MARGIN + PLOT_H, GRID);
        }
    }
    let series: [fn(&EpochRecord) -> f64; 3] = [|r| r.seg_loss, |r| r.mi_loss, |r| r.total_loss];
    for (k, get) in series.iter().enumerate() {
        let top = records.iter().map(get).fold(0.0, f64::max);
        if top <= 0.0 || !top.is_finite() {
            continue;
        }
        let pt = |i: usize| {
            let x = (MARGIN + i as u32 * step) as i64;
            let y = base - (get(&records[i]) / top * PLOT_H as f64).round() as i64;
            (x, y)
        };
        for i in 1..records.len() {
            draw_line(&mut img, pt(i - 1), pt(i), SERIES[k]);
        }
    }
    fill_rect(&mut img, MARGIN, base as u32, width - MARGIN, base as u32 + 1, AXIS);
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })
}
