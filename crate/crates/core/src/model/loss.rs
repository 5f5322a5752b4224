use super::types::{LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::IGNORE;

/// Per-pixel softmax over channels.
pub fn softmax(scores: &ScoreMap) -> Tensor3 {
    let t = scores.tensor();
    let n = t.plane_len();
    let c = t.channels;
    let mut out = Tensor3::zeros(c, t.height, t.width);
    for p in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(t.data[k * n + p]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (t.data[k * n + p] - m).exp();
            out.data[k * n + p] = e;
            z += e;
        }
        for k in 0..c {
            out.data[k * n + p] /= z;
        }
    }
    out
}

/// Value and score-gradient of the supervised segmentation loss.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub value: f64,
    /// Gradient with respect to the raw scores.
    pub grad: Tensor3,
    pub valid_pixels: usize,
}

/// Mean cross-entropy over non-ignore pixels. All-ignore maps give a loss of
/// zero with zero gradient.
pub fn seg_loss(scores: &ScoreMap, labels: &LabelMap) -> Result<SegLoss> {
    let t = scores.tensor();
    if (t.height, t.width) != (labels.height, labels.width) {
        return Err(Error::Shape(format!(
            "scores {}x{} vs labels {}x{}",
            t.height, t.width, labels.height, labels.width
        )));
    }
    labels.validate(t.channels)?;
    let valid = labels.valid_count();
    let mut grad = Tensor3::zeros(t.channels, t.height, t.width);
    if valid == 0 {
        return Ok(SegLoss {
            value: 0.0,
            grad,
            valid_pixels: 0,
        });
    }
    let probs = softmax(scores);
    let n = t.plane_len();
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    for (p, &l) in labels.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let l = l as usize;
        // log-softmax computed from the scores directly for accuracy
        let m = (0..t.channels).map(|k| t.data[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..t.channels).map(|k| (t.data[k * n + p] - m).exp()).sum::<f64>().ln();
        total += lse - t.data[l * n + p];
        for k in 0..t.channels {
            let target = if k == l { 1.0 } else { 0.0 };
            grad.data[k * n + p] = (probs.data[k * n + p] - target) * inv;
        }
    }
    Ok(SegLoss {
        value: total * inv,
        grad,
        valid_pixels: valid,
    })
}

/// Per-pixel argmax, ties resolved towards the lower class index.
pub fn predict(scores: &ScoreMap) -> LabelMap {
    let t = scores.tensor();
    let n = t.plane_len();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            let mut best_v = t.data[p];
            for k in 1..t.channels {
                let v = t.data[k * n + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: t.height,
        width: t.width,
        labels,
    }
}
