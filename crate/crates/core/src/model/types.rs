use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::IGNORE;

/// Three-channel raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor3);

impl Image {
    pub fn new(pixels: Tensor3) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                pixels.channels
            )));
        }
        if let Some(v) = pixels
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Argument(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self(pixels))
    }

    /// Builds an image from interleaved 8-bit RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} RGB raster",
                rgb.len()
            )));
        }
        let mut t = Tensor3::zeros(3, height, width);
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                t.data[c * height * width + p] = v as f64 / 255.0;
            }
        }
        Ok(Self(t))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn pixels(&self) -> &Tensor3 {
        &self.0
    }
}

/// Per-pixel class indices, with [`IGNORE`] marking excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    /// Checks every non-ignore entry is a valid class index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(l) => Err(Error::Argument(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Pre-scoring representation: `D × H × W` spatial units.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Tensor3);

impl FeatureMap {
    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn units(&self) -> usize {
        self.0.plane_len()
    }
}

/// Raw per-class scores at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(pub Tensor3);

impl ScoreMap {
    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels
    }
}
