//! Multi-head attention, the survival-attention pooling over the last backbone
//! level, and the survival-guided sentence encoder.

use candle_core::{Tensor, Var, D};

use crate::config::ModelConfig;
use crate::data::{RegionGroupTable, NUM_SENTENCES};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

/// Bias-free query/key/value/output projections, each `(d, d)`; head `h`
/// uses columns `h*d_k .. (h+1)*d_k` of the first three.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        let init = Init::Uniform(1.0 / (width as f64).sqrt());
        let mut mat = |m: &str| store.get_or_init(&format!("{name}.{m}"), &[width, width], init);
        Ok(AttentionParams { wq: mat("wq")?, wk: mat("wk")?, wv: mat("wv")?, wo: mat("wo")?, heads })
    }

    pub fn width(&self) -> usize {
        self.wq.dims()[0]
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.wq.clone(), self.wk.clone(), self.wv.clone(), self.wo.clone()]
    }
}

/// Attention result: `output` is `(B, q, d)`, `weights` is `(B, heads, q, m)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Tensor,
    pub weights: Tensor,
}

/// `(B, len, d)` -> `(B, heads, len, d_k)`.
pub(crate) fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, len, d) = t.dims3()?;
    Ok(t.reshape((b, len, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, heads, len, d_k)` -> `(B, len, d)`.
pub(crate) fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (b, h, len, dk) = t.dims4()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, len, h * dk))?)
}

/// Scaled dot-product attention of queries `y` over keys/values `x`, per
/// head, heads concatenated and mapped by `W^O`.
///
/// Accepts `x: (m, d)`, `y: (q, d)` or their batched `(B, ., d)` forms.
pub fn multi_head_attention(x: &Tensor, y: &Tensor, p: &AttentionParams) -> Result<Attention> {
    if x.rank() == 2 && y.rank() == 2 {
        let a = multi_head_attention(&x.unsqueeze(0)?, &y.unsqueeze(0)?, p)?;
        return Ok(Attention { output: a.output.squeeze(0)?, weights: a.weights.squeeze(0)? });
    }
    let (b, _, d) = x.dims3().map_err(|_| Error::shape(format!("keys must be (B,m,d), got {:?}", x.dims())))?;
    let (by, _, dy) = y.dims3().map_err(|_| Error::shape(format!("queries must be (B,q,d), got {:?}", y.dims())))?;
    if d != p.width() || dy != p.width() || b != by {
        return Err(Error::shape(format!(
            "attention of width {} got keys {:?} and queries {:?}",
            p.width(),
            x.dims(),
            y.dims()
        )));
    }
    let q = split_heads(&y.broadcast_matmul(p.wq.as_tensor())?, p.heads)?;
    let k = split_heads(&x.broadcast_matmul(p.wk.as_tensor())?, p.heads)?;
    let v = split_heads(&x.broadcast_matmul(p.wv.as_tensor())?, p.heads)?;
    let scale = (p.head_width() as f64).sqrt();
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / scale)?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let ctx = merge_heads(&weights.matmul(&v)?)?;
    Ok(Attention { output: ctx.broadcast_matmul(p.wo.as_tensor())?, weights })
}

/// Attention pooling of the last backbone level, queried by its own
/// channel-wise mean, plus the image-only risk head used to train it.
#[derive(Clone, Debug)]
pub struct SurvivalAttention {
    pub attn: AttentionParams,
    /// `(positions, d)` learnable positional embedding of the keys.
    pub pos: Var,
    /// `(1, d)` learnable positional embedding of the query.
    pub pos_query: Var,
    pub head: Linear,
}

impl SurvivalAttention {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.global_width();
        Ok(SurvivalAttention {
            attn: AttentionParams::new(store, "sa.attn", d, cfg.attention_heads)?,
            pos: store.get_or_init("sa.pos", &[cfg.positions(), d], Init::Normal(0.02))?,
            pos_query: store.get_or_init("sa.pos_query", &[1, d], Init::Normal(0.02))?,
            head: Linear::new(store, "sa.head", d, 1, true)?,
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    /// Keys `Z = f_v + Pos` `(B, P, d)` and query `Z' = mean(f_v) + Pos'`
    /// `(B, 1, d)` from a `(B, d, h, w)` map.
    pub fn sequences(&self, f5: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = f5.dims4().map_err(|_| Error::shape(format!("expected (B,C,h,w), got {:?}", f5.dims())))?;
        let positions = self.pos.dims()[0];
        if c != self.width() || h * w != positions {
            return Err(Error::shape(format!(
                "survival attention expects (B, {}, P) with P = {positions}, got {:?}",
                self.width(),
                f5.dims()
            )));
        }
        let fv = f5.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let fv_mean = fv.mean_keepdim(1)?;
        let z = fv.broadcast_add(self.pos.as_tensor())?;
        let zq = fv_mean.broadcast_add(self.pos_query.as_tensor())?;
        Ok((z, zq))
    }

    /// `f_sur`, `(B, d)`.
    ///
    /// With a single query row the key and value projections can be moved to
    /// the query side: `(q W_h^Q)(Z W_h^K)^T = ((q W_h^Q) W_h^K^T) Z^T` and
    /// `softmax(.) (Z W_h^V) = (softmax(.) Z) W_h^V`, which avoids projecting
    /// all positions.
    pub fn forward(&self, f5: &Tensor) -> Result<Tensor> {
        let (z, zq) = self.sequences(f5)?;
        let (weights, _) = self.pooled(&z, &zq)?;
        self.project_values(&z, &weights)
    }

    /// Attention weights over positions, `(B, heads, P)`.
    pub fn attention_weights(&self, f5: &Tensor) -> Result<Tensor> {
        let (z, zq) = self.sequences(f5)?;
        Ok(self.pooled(&z, &zq)?.0)
    }

    fn pooled(&self, z: &Tensor, zq: &Tensor) -> Result<(Tensor, ())> {
        let d = self.width();
        let n = self.attn.heads;
        let dk = d / n;
        let b = z.dims()[0];
        let q = zq.squeeze(1)?.matmul(self.attn.wq.as_tensor())?.reshape((b, n, dk))?;
        let wk = self.attn.wk.as_tensor().reshape((d, n, dk))?.permute((1, 2, 0))?.contiguous()?; // (n, dk, d)
        let q_key = q.transpose(0, 1)?.contiguous()?.matmul(&wk)?.transpose(0, 1)?.contiguous()?; // (B, n, d)
        let scores = (q_key.matmul(&z.transpose(1, 2)?.contiguous()?)? / (dk as f64).sqrt())?; // (B, n, P)
        Ok((candle_nn::ops::softmax(&scores, D::Minus1)?, ()))
    }

    fn project_values(&self, z: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let d = self.width();
        let n = self.attn.heads;
        let dk = d / n;
        let b = z.dims()[0];
        let ctx = weights.matmul(z)?; // (B, n, d)
        let wv = self.attn.wv.as_tensor().reshape((d, n, dk))?.transpose(0, 1)?.contiguous()?; // (n, d, dk)
        let heads = ctx.transpose(0, 1)?.contiguous()?.matmul(&wv)?.transpose(0, 1)?.contiguous()?; // (B, n, dk)
        Ok(heads.reshape((b, d))?.matmul(self.attn.wo.as_tensor())?)
    }

    /// The same quantity through the generic attention routine.
    pub fn forward_reference(&self, f5: &Tensor) -> Result<Tensor> {
        let (z, zq) = self.sequences(f5)?;
        Ok(multi_head_attention(&z, &zq, &self.attn)?.output.squeeze(1)?)
    }

    /// Image-only risk, `(B,)`.
    pub fn image_risk(&self, f_sur: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(f_sur)?.squeeze(1)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.attn.vars();
        v.push(self.pos.clone());
        v.push(self.pos_query.clone());
        v.extend(self.head.vars());
        v
    }
}

/// Per-sentence local and global embedders plus the shared
/// region-to-sentence embedder.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub local: Vec<Linear>,
    pub global: Vec<Linear>,
    pub region_to_sentence: Linear,
}

impl SentenceEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, table: &RegionGroupTable) -> Result<Self> {
        let mut local = Vec::with_capacity(NUM_SENTENCES);
        let mut global = Vec::with_capacity(NUM_SENTENCES);
        for i in 0..NUM_SENTENCES {
            let w = cfg.region_width() * table.group(i).len();
            local.push(Linear::new(store, &format!("sse.local{}", i + 1), w, cfg.embed_width, true)?);
            global.push(Linear::new(store, &format!("sse.global{}", i + 1), cfg.global_width(), cfg.embed_width, true)?);
        }
        let region_to_sentence = Linear::new(store, "sse.r2s", cfg.embed_width, cfg.embed_width, true)?;
        Ok(SentenceEncoder { local, global, region_to_sentence })
    }

    /// `v_I^i = E_R2S(E_L^i(g_i) + E_G^i(f_sur))`, `(B, d_e)`; `i` is 0-based.
    pub fn encode_sentence(&self, grouped: &Tensor, f_sur: &Tensor, i: usize) -> Result<Tensor> {
        if i >= NUM_SENTENCES {
            return Err(Error::Argument(format!("sentence index {i} out of range")));
        }
        let local = self.local[i].forward(grouped)?;
        let global = self.global[i].forward(f_sur)?;
        self.region_to_sentence.forward(&(local + global)?)
    }

    /// All five sentences, `(B, 5, d_e)`.
    pub fn forward(&self, grouped: &[Tensor], f_sur: &Tensor) -> Result<Tensor> {
        if grouped.len() != NUM_SENTENCES {
            return Err(Error::shape(format!("{} grouped features, expected 5", grouped.len())));
        }
        let v = grouped
            .iter()
            .enumerate()
            .map(|(i, g)| self.encode_sentence(g, f_sur, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&v, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.get_or_init("x", shape, Init::Normal(1.0)).unwrap().as_tensor().detach()
    }

    fn set_identity(p: &AttentionParams) {
        let d = p.width();
        let eye = Tensor::eye(d, DType::F64, &Device::Cpu).unwrap();
        for v in p.vars() {
            v.set(&eye).unwrap();
        }
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut s = ParamStore::new(1, DType::F64);
        let p = AttentionParams::new(&mut s, "a", 8, 2).unwrap();
        let x = randn(&[1, 8], 2);
        let y = randn(&[3, 8], 3);
        let got = multi_head_attention(&x, &y, &p).unwrap().output.to_vec2::<f64>().unwrap();
        let want = x.matmul(p.wv.as_tensor()).unwrap().matmul(p.wo.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for row in got {
            for (a, b) in row.iter().zip(&want[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut s = ParamStore::new(1, DType::F64);
        let p = AttentionParams::new(&mut s, "a", 8, 4).unwrap();
        let a = multi_head_attention(&randn(&[2, 5, 8], 4), &randn(&[2, 3, 8], 5), &p).unwrap();
        let sums = a.weights.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn hand_computed_single_head() {
        let mut s = ParamStore::new(1, DType::F64);
        let p = AttentionParams::new(&mut s, "a", 4, 1).unwrap();
        set_identity(&p);
        let x = Tensor::new(&[[1.0f64, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, -1.0]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[0.5f64, 1.0, 0.0, 0.5]], &Device::Cpu).unwrap();
        // scores: y.x0 = 0.5, y.x1 = 1.0 - 0.5 = 0.5, both over sqrt(4)
        let (s0, s1) = (0.5f64 / 2.0, 0.5f64 / 2.0);
        let (e0, e1) = (s0.exp(), s1.exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let want = [w0 * 1.0, w1 * 1.0, w0 * 2.0, -w1];
        let got = multi_head_attention(&x, &y, &p).unwrap().output.to_vec2::<f64>().unwrap();
        for (g, w) in got[0].iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn key_permutation_invariance_without_positions() {
        let mut s = ParamStore::new(6, DType::F64);
        let p = AttentionParams::new(&mut s, "a", 8, 2).unwrap();
        let x = randn(&[5, 8], 7);
        let y = randn(&[2, 8], 8);
        let perm = Tensor::new(&[3u32, 0, 4, 1, 2], &Device::Cpu).unwrap();
        let a = multi_head_attention(&x, &y, &p).unwrap().output.to_vec2::<f64>().unwrap();
        let b = multi_head_attention(&x.index_select(&perm, 0).unwrap(), &y, &p).unwrap().output.to_vec2::<f64>().unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (u, v) in ra.iter().zip(rb) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut s = ParamStore::new(1, DType::F64);
        let p = AttentionParams::new(&mut s, "a", 8, 2).unwrap();
        assert!(matches!(multi_head_attention(&randn(&[2, 6], 1), &randn(&[1, 8], 2), &p), Err(Error::Shape(_))));
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { input_size: 224, pyramid_channels: [2, 4, 8, 8, 16], attention_heads: 4, ..ModelConfig::compact() }
    }

    #[test]
    fn reassociated_pooling_matches_generic_attention() {
        let cfg = small_cfg();
        let mut s = ParamStore::new(2, DType::F64);
        let sa = SurvivalAttention::new(&mut s, &cfg).unwrap();
        let f5 = randn(&[3, 16, 7, 7], 9);
        let fast = sa.forward(&f5).unwrap().to_vec2::<f64>().unwrap();
        let slow = sa.forward_reference(&f5).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(sa.forward(&f5).unwrap().dims(), &[3, 16]);
        for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_field_without_positions_attends_uniformly() {
        let cfg = small_cfg();
        let mut s = ParamStore::new(2, DType::F64);
        let sa = SurvivalAttention::new(&mut s, &cfg).unwrap();
        sa.pos.set(&sa.pos.zeros_like().unwrap()).unwrap();
        sa.pos_query.set(&sa.pos_query.zeros_like().unwrap()).unwrap();
        let f5 = Tensor::full(0.7f64, (1, 16, 7, 7), &Device::Cpu).unwrap();
        let w = sa.attention_weights(&f5).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 49.0).abs() < 1e-12));
    }

    #[test]
    fn permuting_positions_with_embeddings_leaves_output_unchanged() {
        let cfg = small_cfg();
        let mut s = ParamStore::new(3, DType::F64);
        let sa = SurvivalAttention::new(&mut s, &cfg).unwrap();
        let f5 = randn(&[1, 16, 7, 7], 11);
        let before = sa.forward(&f5).unwrap().to_vec2::<f64>().unwrap();
        let perm: Vec<u32> = (0..49u32).map(|i| (i * 17 + 5) % 49).collect();
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let f5p = f5.flatten_from(2).unwrap().index_select(&idx, 2).unwrap().reshape((1, 16, 7, 7)).unwrap();
        sa.pos.set(&sa.pos.as_tensor().index_select(&idx, 0).unwrap()).unwrap();
        let after = sa.forward(&f5p).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in before[0].iter().zip(&after[0]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn positional_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let mut s = ParamStore::new(4, DType::F64);
        let sa = SurvivalAttention::new(&mut s, &cfg).unwrap();
        let f5 = randn(&[2, 16, 7, 7], 12);
        let probe = randn(&[16], 13);
        let loss = || sa.forward(&f5).unwrap().broadcast_mul(&probe).unwrap().sum_all().unwrap();
        let err = max_relative_error(&sa.pos, 40, 1e-5, loss).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sentence_encoding_composes_the_embedders() {
        let cfg = ModelConfig { region_proj_width: 2, embed_width: 6, ..small_cfg() };
        let table = RegionGroupTable::new([vec![1, 3], vec![7], vec![25], vec![18], vec![30]]).unwrap();
        let mut s = ParamStore::new(5, DType::F64);
        let enc = SentenceEncoder::new(&mut s, &cfg, &table).unwrap();
        let g = randn(&[3, 20], 14);
        let f_sur = randn(&[3, 16], 15);
        let got = enc.encode_sentence(&g, &f_sur, 0).unwrap().to_vec2::<f64>().unwrap();
        // step-by-step evaluation with plain loops
        let mat = |v: &Var| v.as_tensor().to_vec2::<f64>().unwrap();
        let vec1 = |v: &Option<Var>| v.as_ref().unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let affine = |x: &[f64], w: &[Vec<f64>], b: &[f64]| -> Vec<f64> {
            (0..b.len()).map(|o| b[o] + x.iter().enumerate().map(|(k, xk)| xk * w[k][o]).sum::<f64>()).collect()
        };
        let gx = g.to_vec2::<f64>().unwrap();
        let fx = f_sur.to_vec2::<f64>().unwrap();
        for r in 0..3 {
            let l = affine(&gx[r], &mat(&enc.local[0].weight), &vec1(&enc.local[0].bias));
            let gl = affine(&fx[r], &mat(&enc.global[0].weight), &vec1(&enc.global[0].bias));
            let sum: Vec<f64> = l.iter().zip(&gl).map(|(a, b)| a + b).collect();
            let want = affine(&sum, &mat(&enc.region_to_sentence.weight), &vec1(&enc.region_to_sentence.bias));
            for (a, b) in got[r].iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(matches!(enc.encode_sentence(&randn(&[3, 19], 1), &f_sur, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_inputs_and_biases_give_zero() {
        let cfg = ModelConfig { region_proj_width: 2, embed_width: 6, ..small_cfg() };
        let table = RegionGroupTable::default_table();
        let mut s = ParamStore::new(5, DType::F64);
        let enc = SentenceEncoder::new(&mut s, &cfg, &table).unwrap();
        let g = Tensor::zeros((2, 10 * 12), DType::F64, &Device::Cpu).unwrap();
        let f = Tensor::zeros((2, 16), DType::F64, &Device::Cpu).unwrap();
        let v = enc.encode_sentence(&g, &f, 0).unwrap();
        assert_eq!(v.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        // zero survival feature, zero-bias global branch: only the local path remains
        let g = randn(&[2, 120], 3);
        let with = enc.encode_sentence(&g, &f, 0).unwrap().to_vec2::<f64>().unwrap();
        let local_only = enc.region_to_sentence.forward(&enc.local[0].forward(&g).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(with, local_only);
    }
}
