use candle_core::{DType, Device, Tensor, Var};

use crate::config::ModelConfig;
use crate::data::Radiograph;
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

/// Five feature levels, each `(B, C_l, H_l, W_l)`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn batch_size(&self) -> usize {
        self.levels.first().map_or(0, |t| t.dims()[0])
    }

    /// Checks level count, channel widths and strictly shrinking sides.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.levels.len() != 5 {
            return Err(Error::shape(format!("pyramid has {} levels, expected 5", self.levels.len())));
        }
        let mut prev_side = usize::MAX;
        for (l, t) in self.levels.iter().enumerate() {
            let d = t.dims();
            if d.len() != 4 || d[1] != cfg.pyramid_channels[l] {
                return Err(Error::shape(format!("level {} has shape {d:?}", l + 1)));
            }
            if d[2] >= prev_side || d[2] != cfg.level_side(l) || d[3] != cfg.level_side(l) {
                return Err(Error::shape(format!("level {} spatial size {}x{}", l + 1, d[2], d[3])));
            }
            prev_side = d[2];
        }
        Ok(())
    }

    /// The single-image pyramid at batch index `b`, levels `(C, H, W)`.
    pub fn image(&self, b: usize) -> Result<Vec<Tensor>> {
        Ok(self.levels.iter().map(|t| t.get(b)).collect::<candle_core::Result<_>>()?)
    }
}

/// An image encoder producing the five-level pyramid.
pub trait Backbone: Send + Sync {
    /// `images` is `(B, 1, H, W)`.
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid>;
}

/// Five strided 2x2 convolution stages with ReLU, halving the side each time
/// (224 -> 112, 56, 28, 14, 7).
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    stages: Vec<(Var, Var)>,
    input_size: usize,
}

impl ConvBackbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(5);
        let mut c_in = 1;
        for (l, &c_out) in cfg.pyramid_channels.iter().enumerate() {
            let std = (2.0 / (c_in * 4) as f64).sqrt();
            let w = store.get_or_init(&format!("backbone.conv{}.weight", l + 1), &[c_out, c_in, 2, 2], Init::Normal(std))?;
            let b = store.get_or_init(&format!("backbone.conv{}.bias", l + 1), &[c_out], Init::Zeros)?;
            stages.push((w, b));
            c_in = c_out;
        }
        Ok(ConvBackbone { stages, input_size: cfg.input_size })
    }
}

impl Backbone for ConvBackbone {
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let d = images.dims();
        if d.len() != 4 || d[1] != 1 || d[2] != self.input_size || d[3] != self.input_size {
            return Err(Error::shape(format!(
                "backbone expects (B, 1, {s}, {s}) images, got {d:?}",
                s = self.input_size
            )));
        }
        let mut h = images.clone();
        let mut levels = Vec::with_capacity(5);
        for (w, b) in &self.stages {
            let c = b.dims()[0];
            h = h.conv2d(w.as_tensor(), 0, 2, 1, 1)?.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?.relu()?;
            levels.push(h.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Stacks images into a `(B, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&Radiograph], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape("images in a batch must share a size"));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
