use candle_core::{DType, Device, Tensor, Var, D};

use super::vocab::{TokenSequence, BOS, EOS, PAD};
use crate::attention::{merge_heads, split_heads, Attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamStore};

/// Self-attention projections plus the visual key/value projections
/// `U^K`, `U^V` (`(d, d)`, head `h` in columns `h*d_k .. (h+1)*d_k`).
#[derive(Clone, Debug)]
pub struct PsaParams {
    pub attn: AttentionParams,
    pub uk: Var,
    pub uv: Var,
}

impl PsaParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        let attn = AttentionParams::new(store, name, width, heads)?;
        let init = Init::Uniform(1.0 / (width as f64).sqrt());
        Ok(PsaParams {
            attn,
            uk: store.get_or_init(&format!("{name}.uk"), &[width, width], init)?,
            uv: store.get_or_init(&format!("{name}.uv"), &[width, width], init)?,
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }
}

/// Additive mask `(t, p + t)`: every token row sees all `p` visual rows and
/// the token rows up to itself.
fn causal_mask(p: usize, t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|k| (0..p + t).map(move |j| if j < p || j - p <= k { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, p + t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pseudo self-attention of token rows `y_tok` `(B, t, d)` over the
/// visual prefix `x_vis` `(B, p, d)` and the causal token prefix. Keys and
/// values are `[X U ; Y W]`; queries come from the token rows only. `x_vis`
/// may be `None` (or have `p = 0`).
pub fn pseudo_self_attention(x_vis: Option<&Tensor>, y_tok: &Tensor, params: &PsaParams) -> Result<Attention> {
    let (b, t, d) = y_tok.dims3().map_err(|_| Error::shape(format!("token rows must be (B,t,d), got {:?}", y_tok.dims())))?;
    if d != params.width() {
        return Err(Error::shape(format!("PSA of width {} got token rows {:?}", params.width(), y_tok.dims())));
    }
    let x_vis = match x_vis {
        Some(x) => {
            let (bx, p, dx) = x.dims3().map_err(|_| Error::shape(format!("visual rows must be (B,p,d), got {:?}", x.dims())))?;
            if bx != b || dx != d {
                return Err(Error::shape(format!("visual rows {:?} do not match token rows {:?}", x.dims(), y_tok.dims())));
            }
            (p > 0).then_some(x)
        }
        None => None,
    };
    let heads = params.attn.heads;
    let mut keys = y_tok.broadcast_matmul(params.attn.wk.as_tensor())?;
    let mut values = y_tok.broadcast_matmul(params.attn.wv.as_tensor())?;
    let mut p = 0;
    if let Some(x) = x_vis {
        p = x.dims()[1];
        keys = Tensor::cat(&[x.broadcast_matmul(params.uk.as_tensor())?, keys], 1)?;
        values = Tensor::cat(&[x.broadcast_matmul(params.uv.as_tensor())?, values], 1)?;
    }
    let q = split_heads(&y_tok.broadcast_matmul(params.attn.wq.as_tensor())?, heads)?;
    let k = split_heads(&keys, heads)?;
    let v = split_heads(&values, heads)?;
    let scale = ((d / heads) as f64).sqrt();
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / scale)?;
    let scores = scores.broadcast_add(&causal_mask(p, t, y_tok.dtype())?)?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let ctx = merge_heads(&weights.matmul(&v)?)?;
    Ok(Attention { output: ctx.broadcast_matmul(params.attn.wo.as_tensor())?, weights })
}

/// Pre-norm transformer block with pseudo self-attention.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub psa: PsaParams,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            psa: PsaParams::new(store, &format!("{name}.psa"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), width, ff, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, width, true)?,
        })
    }

    fn forward(&self, h: &Tensor, visual: Option<&Tensor>) -> Result<Tensor> {
        let a = pseudo_self_attention(visual, &self.ln1.forward(h)?, &self.psa)?.output;
        let h = (h + a)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&h)?)?.gelu()?)?;
        Ok((h + f)?)
    }
}

/// Autoregressive decoder conditioned on one text-space feature per
/// sequence, injected as a single visual prefix row in every block.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<DecoderBlock>,
    pub ln_final: LayerNorm,
    pub output: Linear,
    pub max_len: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        width: usize,
        blocks: usize,
        heads: usize,
        ff: usize,
        max_len: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("decoder width {width} not divisible by {heads} heads")));
        }
        Ok(Decoder {
            token_embedding: store.get_or_init("decoder.token_embedding", &[vocab_size, width], Init::Normal(0.1))?,
            position_embedding: store.get_or_init("decoder.position_embedding", &[max_len, width], Init::Normal(0.02))?,
            blocks: (0..blocks)
                .map(|k| DecoderBlock::new(store, &format!("decoder.block{k}"), width, heads, ff))
                .collect::<Result<_>>()?,
            ln_final: LayerNorm::new(store, "decoder.ln_final", width)?,
            output: Linear::new(store, "decoder.output", width, vocab_size, true)?,
            max_len,
        })
    }

    pub fn width(&self) -> usize {
        self.token_embedding.dims()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.dims()[0]
    }

    /// Next-token logits `(N, T, V)` for input ids `(N, T)` given the visual
    /// prefix `(N, p, d)`.
    pub fn logits(&self, visual: Option<&Tensor>, inputs: &Tensor) -> Result<Tensor> {
        let (n, t) = inputs.dims2()?;
        if t > self.max_len {
            return Err(Error::shape(format!("{t} decoder steps exceed the maximum of {}", self.max_len)));
        }
        let d = self.width();
        let tok = self.token_embedding.as_tensor().index_select(&inputs.flatten_all()?, 0)?.reshape((n, t, d))?;
        let mut h = tok.broadcast_add(&self.position_embedding.as_tensor().narrow(0, 0, t)?)?;
        for b in &self.blocks {
            h = b.forward(&h, visual)?;
        }
        self.output.forward(&self.ln_final.forward(&h)?)
    }

    fn prefix(&self, v: &Tensor) -> Result<Tensor> {
        let (_, d) = v.dims2().map_err(|_| Error::shape(format!("features must be (N,d), got {:?}", v.dims())))?;
        if d != self.width() {
            return Err(Error::shape(format!("decoder of width {} got features of width {d}", self.width())));
        }
        Ok(v.unsqueeze(1)?)
    }

    /// Teacher-forced log-probabilities `(N, T, V)` with `T` the longest
    /// target; step `k` predicts target token `k` from `[BOS, x_1..x_{k-1}]`.
    pub fn teacher_forced(&self, v: &Tensor, targets: &[TokenSequence]) -> Result<Tensor> {
        let prefix = self.prefix(v)?;
        if prefix.dims()[0] != targets.len() {
            return Err(Error::shape(format!("{} features for {} targets", prefix.dims()[0], targets.len())));
        }
        let t = targets.iter().map(TokenSequence::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(targets.len() * t);
        for s in targets {
            let kept = s.len().min(t - 1);
            ids.push(BOS);
            ids.extend(&s.ids[..kept]);
            ids.resize(ids.len() + t - 1 - kept, PAD);
        }
        let inputs = Tensor::from_vec(ids, (targets.len(), t), &Device::Cpu)?;
        Ok(candle_nn::ops::log_softmax(&self.logits(Some(&prefix), &inputs)?, D::Minus1)?)
    }

    /// Greedy decoding of every row of `v` `(N, d)`, stopping at
    /// end-of-sentence or after `max_len` tokens.
    pub fn greedy(&self, v: &Tensor, max_len: usize) -> Result<Vec<TokenSequence>> {
        let prefix = self.prefix(v)?.detach();
        let n = prefix.dims()[0];
        let max_len = max_len.min(self.max_len);
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let mut inputs: Vec<Vec<u32>> = vec![vec![BOS]; n];
        for _ in 0..max_len {
            let t = inputs[0].len();
            let flat: Vec<u32> = inputs.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(flat, (n, t), &Device::Cpu)?;
            let last = self.logits(Some(&prefix), &ids)?.narrow(1, t - 1, 1)?.squeeze(1)?;
            let next = last.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for i in 0..n {
                let tok = if done[i] { PAD } else { next[i] };
                if !done[i] {
                    out[i].push(tok);
                    done[i] = tok == EOS;
                }
                inputs[i].push(tok);
            }
            if done.iter().all(|d| *d) {
                break;
            }
        }
        Ok(out.into_iter().map(TokenSequence::new).collect())
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding.clone(), self.position_embedding.clone()];
        for b in &self.blocks {
            v.extend(b.psa.attn.vars());
            v.extend([b.psa.uk.clone(), b.psa.uv.clone()]);
            v.extend([b.ln1.gamma.clone(), b.ln1.beta.clone(), b.ln2.gamma.clone(), b.ln2.beta.clone()]);
            v.extend(b.ff1.vars());
            v.extend(b.ff2.vars());
        }
        v.extend([self.ln_final.gamma.clone(), self.ln_final.beta.clone()]);
        v.extend(self.output.vars());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.get_or_init("x", shape, Init::Normal(1.0)).unwrap().as_tensor().detach()
    }

    /// Masked self-attention written with plain loops.
    fn masked_self_attention_oracle(y: &[Vec<f64>], p: &PsaParams) -> Vec<Vec<f64>> {
        let m = |v: &Var| v.as_tensor().to_vec2::<f64>().unwrap();
        let (wq, wk, wv, wo) = (m(&p.attn.wq), m(&p.attn.wk), m(&p.attn.wv), m(&p.attn.wo));
        let d = wq.len();
        let n = p.attn.heads;
        let dk = d / n;
        let proj = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> { (0..d).map(|o| (0..d).map(|k| x[k] * w[k][o]).sum()).collect() };
        let q: Vec<Vec<f64>> = y.iter().map(|r| proj(r, &wq)).collect();
        let k: Vec<Vec<f64>> = y.iter().map(|r| proj(r, &wk)).collect();
        let v: Vec<Vec<f64>> = y.iter().map(|r| proj(r, &wv)).collect();
        let t = y.len();
        let mut out = Vec::new();
        for i in 0..t {
            let mut concat = vec![0.0; d];
            for h in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for (j, sj) in s.iter().enumerate() {
                    let w = (sj - mx).exp() / z;
                    for c in 0..dk {
                        concat[h * dk + c] += w * v[j][h * dk + c];
                    }
                }
            }
            out.push(proj(&concat, &wo));
        }
        out
    }

    #[test]
    fn empty_prefix_is_masked_self_attention() {
        let mut s = ParamStore::new(3, DType::F64);
        let p = PsaParams::new(&mut s, "psa", 8, 2).unwrap();
        let y = randn(&[1, 5, 8], 4);
        let got = pseudo_self_attention(None, &y, &p).unwrap().output.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let want = masked_self_attention_oracle(&y.squeeze(0).unwrap().to_vec2::<f64>().unwrap(), &p);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        let empty = Tensor::zeros((1, 0, 8), DType::F64, &Device::Cpu).unwrap();
        let same = pseudo_self_attention(Some(&empty), &y, &p).unwrap().output.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(same, got);
    }

    #[test]
    fn rows_sum_to_one_and_respect_causality() {
        let mut s = ParamStore::new(3, DType::F64);
        let p = PsaParams::new(&mut s, "psa", 8, 4).unwrap();
        let a = pseudo_self_attention(Some(&randn(&[2, 1, 8], 1)), &randn(&[2, 4, 8], 2), &p).unwrap();
        let sums = a.weights.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        let w = a.weights.get(0).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        // token row 0 sees the visual row and itself only
        assert!(w[0][2..].iter().all(|v| *v == 0.0));
        assert!(w[3].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn hand_computed_two_key_softmax() {
        let mut s = ParamStore::new(3, DType::F64);
        let p = PsaParams::new(&mut s, "psa", 4, 1).unwrap();
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        for v in p.attn.vars() {
            v.set(&eye).unwrap();
        }
        p.uk.set(&(&eye * 2.0).unwrap()).unwrap();
        p.uv.set(&(&eye * 3.0).unwrap()).unwrap();
        let x = Tensor::new(&[[[1.0f64, 0.0, 0.0, 1.0]]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[[0.5f64, 0.5, 0.0, 0.0]]], &Device::Cpu).unwrap();
        // keys: 2x = (2,0,0,2), y = (.5,.5,0,0); query y
        let s_vis: f64 = (0.5 * 2.0) / 2.0;
        let s_tok: f64 = (0.25 + 0.25) / 2.0;
        let wv = s_vis.exp() / (s_vis.exp() + f64::exp(s_tok));
        let wt = 1.0 - wv;
        let want = [wv * 3.0 + wt * 0.5, wt * 0.5, 0.0, wv * 3.0];
        let got = pseudo_self_attention(Some(&x), &y, &p).unwrap().output.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn visual_projection_gradients_match_finite_differences() {
        let mut s = ParamStore::new(5, DType::F64);
        let p = PsaParams::new(&mut s, "psa", 8, 2).unwrap();
        let x = randn(&[2, 1, 8], 6);
        let y = randn(&[2, 3, 8], 7);
        let probe = randn(&[2, 3, 8], 8);
        let loss = || pseudo_self_attention(Some(&x), &y, &p).unwrap().output.mul(&probe).unwrap().sum_all().unwrap();
        for var in [&p.uk, &p.uv] {
            let err = max_relative_error(var, 64, 1e-5, loss).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    fn tiny_decoder(seed: u64) -> Decoder {
        let mut s = ParamStore::new(seed, DType::F64);
        Decoder::new(&mut s, 12, 8, 2, 2, 16, 10).unwrap()
    }

    #[test]
    fn logits_are_causal() {
        let dec = tiny_decoder(1);
        let v = randn(&[1, 1, 8], 2);
        let a = Tensor::new(&[[1u32, 5, 6, 7]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[1u32, 5, 9, 4]], &Device::Cpu).unwrap();
        let la = dec.logits(Some(&v), &a).unwrap().narrow(1, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let lb = dec.logits(Some(&v), &b).unwrap().narrow(1, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn greedy_is_deterministic_and_capped() {
        let dec = tiny_decoder(2);
        let v = randn(&[3, 8], 3);
        let a = dec.greedy(&v, 6).unwrap();
        assert_eq!(a, dec.greedy(&v, 6).unwrap());
        assert!(a.iter().all(|s| !s.is_empty() && s.len() <= 6));
        assert!(dec.greedy(&v, 1).unwrap().iter().all(|s| s.len() == 1));
    }

    #[test]
    fn teacher_forcing_pads_to_longest_target() {
        let dec = tiny_decoder(3);
        let targets = [TokenSequence::new(vec![5, 6, EOS]), TokenSequence::new(vec![EOS])];
        let lp = dec.teacher_forced(&randn(&[2, 8], 1), &targets).unwrap();
        assert_eq!(lp.dims(), &[2, 3, 12]);
        assert!(dec.teacher_forced(&randn(&[1, 8], 1), &targets).is_err());
    }
}
