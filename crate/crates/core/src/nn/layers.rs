use candle_core::{Tensor, Var, D};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.get_or_init(&format!("{name}.weight"), &[input, output], Init::Uniform(bound))?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dims().last().copied().unwrap_or(0);
        if last != self.in_dim() {
            return Err(Error::shape(format!(
                "linear layer expects width {}, got input {:?}",
                self.in_dim(),
                x.dims()
            )));
        }
        let w = self.weight.as_tensor();
        let y = if x.rank() == 2 { x.matmul(w)? } else { x.broadcast_matmul(w)? };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

/// Dense layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.get_or_init(&format!("{name}.gamma"), &[width], Init::Ones)?,
            beta: store.get_or_init(&format!("{name}.beta"), &[width], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn linear_handles_rank_two_and_three() {
        let mut s = ParamStore::new(1, DType::F64);
        let l = Linear::new(&mut s, "l", 3, 2, true).unwrap();
        let x2 = Tensor::ones((4, 3), DType::F64, s.device()).unwrap();
        let x3 = Tensor::ones((5, 4, 3), DType::F64, s.device()).unwrap();
        let y2 = l.forward(&x2).unwrap();
        let y3 = l.forward(&x3).unwrap();
        assert_eq!(y2.dims(), &[4, 2]);
        assert_eq!(y3.dims(), &[5, 4, 2]);
        assert_eq!(y3.get(2).unwrap().to_vec2::<f64>().unwrap(), y2.to_vec2::<f64>().unwrap());
        assert!(l.forward(&Tensor::ones((1, 4), DType::F64, s.device()).unwrap()).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut s = ParamStore::new(1, DType::F64);
        let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], s.device()).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
