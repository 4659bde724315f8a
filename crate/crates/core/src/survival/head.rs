use candle_core::{Tensor, Var};

use crate::config::ModelConfig;
use crate::data::NUM_SENTENCES;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};

/// Per-modality survival features and the fused representation.
#[derive(Clone, Debug)]
pub struct SurvivalFeatures {
    pub text: Tensor,
    pub image: Tensor,
    pub clinical: Tensor,
    pub fused: Tensor,
}

/// Text, image and clinical encoders (two hidden layers each), the two
/// fusion layers and the risk predictor `C_sur`.
#[derive(Clone, Debug)]
pub struct SurvivalHead {
    pub text: Mlp,
    pub image: Mlp,
    pub clinical: Mlp,
    pub fusion1: Linear,
    pub fusion2: Linear,
    pub predictor: Linear,
}

impl SurvivalHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (h, w) = (cfg.survival_hidden, cfg.survival_width);
        Ok(SurvivalHead {
            text: Mlp::new(store, "survival.text", &[NUM_SENTENCES * cfg.text_width, h, h, w])?,
            image: Mlp::new(store, "survival.image", &[cfg.global_width(), h, h, w])?,
            clinical: Mlp::new(store, "survival.clinical", &[cfg.clinical_dim, h, h, w])?,
            fusion1: Linear::new(store, "survival.fusion1", 2 * w, w, true)?,
            fusion2: Linear::new(store, "survival.fusion2", 2 * w, w, true)?,
            predictor: Linear::new(store, "survival.predictor", w, 1, true)?,
        })
    }

    /// `v_t` is `(B, 5, d_t)` or already concatenated `(B, 5*d_t)`; `f_sur`
    /// is `(B, d)`, `clinical` is `(B, c)`. Fusion order is image with text,
    /// then clinical.
    pub fn encode_and_fuse(&self, v_t: &Tensor, f_sur: &Tensor, clinical: &Tensor) -> Result<SurvivalFeatures> {
        let text_in = match v_t.rank() {
            3 => v_t.flatten_from(1)?,
            2 => v_t.clone(),
            _ => return Err(Error::shape(format!("text features must be (B,5,d_t), got {:?}", v_t.dims()))),
        };
        let text = self.text.forward(&text_in)?;
        let image = self.image.forward(f_sur)?;
        let clinical = self.clinical.forward(clinical)?;
        let first = self.fusion1.forward(&Tensor::cat(&[&image, &text], 1)?)?;
        let fused = self.fusion2.forward(&Tensor::cat(&[&first, &clinical], 1)?)?;
        Ok(SurvivalFeatures { text, image, clinical, fused })
    }

    /// `(B,)` risks from `(B, w)` fused features.
    pub fn predict_risk(&self, fused: &Tensor) -> Result<Tensor> {
        Ok(self.predictor.forward(fused)?.squeeze(1)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = [&self.text, &self.image, &self.clinical].iter().flat_map(|m| m.layers.iter().flat_map(Linear::vars)).collect();
        for l in [&self.fusion1, &self.fusion2, &self.predictor] {
            v.extend(l.vars());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device};

    fn cfg() -> ModelConfig {
        ModelConfig {
            pyramid_channels: [2, 2, 2, 2, 8],
            text_width: 4,
            survival_width: 6,
            survival_hidden: 5,
            clinical_dim: 3,
            attention_heads: 2,
            decoder_heads: 2,
            ..ModelConfig::compact()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.get_or_init("x", shape, Init::Normal(1.0)).unwrap().as_tensor().detach()
    }

    #[test]
    fn zero_inputs_zero_biases_fuse_to_zero() {
        let mut s = ParamStore::new(1, DType::F64);
        let head = SurvivalHead::new(&mut s, &cfg()).unwrap();
        let z = |d: &[usize]| Tensor::zeros(d, DType::F64, &Device::Cpu).unwrap();
        let f = head.encode_and_fuse(&z(&[2, 5, 4]), &z(&[2, 8]), &z(&[2, 3])).unwrap();
        assert_eq!(f.fused.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(head.predict_risk(&f.fused).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn full_widths() {
        let c = ModelConfig { clinical_dim: 16, ..ModelConfig::default() };
        let mut s = ParamStore::new(1, DType::F32);
        let head = SurvivalHead::new(&mut s, &c).unwrap();
        for m in [&head.text, &head.image, &head.clinical] {
            assert_eq!(m.hidden_layers(), 2);
            assert_eq!(m.layers.last().unwrap().out_dim(), 2048);
        }
        assert_eq!(head.fusion2.out_dim(), 2048);
    }

    #[test]
    fn matches_step_by_step_evaluation() {
        let mut s = ParamStore::new(2, DType::F64);
        let head = SurvivalHead::new(&mut s, &cfg()).unwrap();
        for v in head.vars() {
            if v.rank() == 1 {
                v.set(&randn(v.dims(), 77)).unwrap();
            }
        }
        let (vt, fs, xc) = (randn(&[3, 5, 4], 3), randn(&[3, 8], 4), randn(&[3, 3], 5));
        let got = head.predict_risk(&head.encode_and_fuse(&vt, &fs, &xc).unwrap().fused).unwrap().to_vec1::<f64>().unwrap();

        let mat = |v: &Var| v.as_tensor().to_vec2::<f64>().unwrap();
        let vec1 = |v: &Option<Var>| v.as_ref().unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let affine = |x: &[f64], l: &Linear| -> Vec<f64> {
            let (w, b) = (mat(&l.weight), vec1(&l.bias));
            (0..b.len()).map(|o| b[o] + x.iter().enumerate().map(|(k, xk)| xk * w[k][o]).sum::<f64>()).collect()
        };
        let mlp = |x: &[f64], m: &Mlp| -> Vec<f64> {
            let h1: Vec<f64> = affine(x, &m.layers[0]).into_iter().map(|v| v.max(0.0)).collect();
            let h2: Vec<f64> = affine(&h1, &m.layers[1]).into_iter().map(|v| v.max(0.0)).collect();
            affine(&h2, &m.layers[2])
        };
        let (vt, fs, xc) = (vt.flatten_from(1).unwrap().to_vec2::<f64>().unwrap(), fs.to_vec2::<f64>().unwrap(), xc.to_vec2::<f64>().unwrap());
        for r in 0..3 {
            let s_t = mlp(&vt[r], &head.text);
            let s_i = mlp(&fs[r], &head.image);
            let s_c = mlp(&xc[r], &head.clinical);
            let f1 = affine(&[s_i, s_t].concat(), &head.fusion1);
            let f2 = affine(&[f1, s_c].concat(), &head.fusion2);
            let risk = affine(&f2, &head.predictor)[0];
            assert!((risk - got[r]).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch() {
        let mut s = ParamStore::new(1, DType::F64);
        let head = SurvivalHead::new(&mut s, &cfg()).unwrap();
        assert!(matches!(head.encode_and_fuse(&randn(&[2, 5, 3], 1), &randn(&[2, 8], 1), &randn(&[2, 3], 1)), Err(Error::Shape(_))));
    }
}
