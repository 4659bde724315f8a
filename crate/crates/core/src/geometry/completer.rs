use candle_core::{DType, Device, Tensor};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, RegionSet, NUM_REGIONS};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Mlp, ParamStore};

/// Width of a flattened layout, `29 x 4`.
pub const COORDS: usize = NUM_REGIONS * 4;

/// Smallest side of a repaired predicted box.
const MIN_SIDE: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompleterConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Masked regions per training example are drawn from `1..=max_masked`.
    pub max_masked: usize,
    pub seed: u64,
}

impl Default for CompleterConfig {
    fn default() -> Self {
        CompleterConfig { hidden: 512, epochs: 60, batch_size: 32, lr: 1e-3, max_masked: 8, seed: 0 }
    }
}

/// Three-hidden-layer regression network over flattened layouts.
#[derive(Clone, Debug)]
pub struct Completer {
    pub net: Mlp,
}

impl Completer {
    pub fn new(store: &mut ParamStore, hidden: usize) -> Result<Self> {
        Ok(Completer { net: Mlp::new(store, "completer", &[COORDS, hidden, hidden, hidden, COORDS])? })
    }

    /// Raw predictions `(N, 116)` for masked inputs `(N, 116)`.
    pub fn forward(&self, coords: &Tensor) -> Result<Tensor> {
        self.net.forward(coords)
    }
}

/// Replaces `mask_count` distinct regions with the mask value; returns the
/// masked coordinates and the sorted masked region indices (0-based).
pub fn mask_regions(coords: &[f32; COORDS], mask_count: usize, seed: u64) -> Result<([f32; COORDS], Vec<usize>)> {
    if !(1..NUM_REGIONS).contains(&mask_count) {
        return Err(Error::Argument(format!("mask_count {mask_count} outside 1..=28")));
    }
    Ok(mask_with(coords, mask_count, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn mask_with<R: Rng>(coords: &[f32; COORDS], mask_count: usize, rng: &mut R) -> ([f32; COORDS], Vec<usize>) {
    let mut picked = index::sample(rng, NUM_REGIONS, mask_count).into_vec();
    picked.sort_unstable();
    let mut out = *coords;
    for &j in &picked {
        out[4 * j..4 * j + 4].fill(BoundingBox::MASK_VALUE);
    }
    (out, picked)
}

fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let sq = (pred - target)?.sqr()?.mul(mask)?.sum_all()?;
    Ok(sq.broadcast_div(&mask.sum_all()?)?)
}

/// Trains the completer to reconstruct randomly masked regions, with the
/// squared error taken over masked coordinates only. Returns the network and
/// the mean training loss of every epoch.
pub fn train_completer(layouts: &[RegionSet], cfg: &CompleterConfig) -> Result<(Completer, Vec<f64>)> {
    train_completer_in(&mut ParamStore::new(cfg.seed, DType::F32), layouts, cfg)
}

/// As [`train_completer`], creating the network's parameters in `store`.
pub fn train_completer_in(store: &mut ParamStore, layouts: &[RegionSet], cfg: &CompleterConfig) -> Result<(Completer, Vec<f64>)> {
    if layouts.len() < 2 {
        return Err(Error::Data(format!("completer training needs at least 2 layouts, got {}", layouts.len())));
    }
    if let Some(i) = layouts.iter().position(|l| !l.is_complete() || l.validate().is_err()) {
        return Err(Error::Data(format!("training layout {i} is not fully detected and valid")));
    }
    if cfg.max_masked == 0 || cfg.max_masked >= NUM_REGIONS || cfg.batch_size == 0 {
        return Err(Error::Config("completer: max_masked must be in 1..=28 and batch_size positive".into()));
    }
    let completer = Completer::new(store, cfg.hidden)?;
    let mut opt = AdamW::new(store.vars_with_prefixes(&["completer"]), AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636f6d70);
    let coords: Vec<[f32; COORDS]> = layouts.iter().map(RegionSet::masked_coords).collect();
    let mut order: Vec<usize> = (0..layouts.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * layouts.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut input = Vec::with_capacity(chunk.len() * COORDS);
            let mut target = Vec::with_capacity(chunk.len() * COORDS);
            let mut mask = Vec::with_capacity(chunk.len() * COORDS);
            for &i in chunk {
                let count = rng.random_range(1..=cfg.max_masked);
                let (masked, picked) = mask_with(&coords[i], count, &mut rng);
                input.extend_from_slice(&masked);
                target.extend_from_slice(&coords[i]);
                let mut m = [0f32; COORDS];
                for j in picked {
                    m[4 * j..4 * j + 4].fill(1.0);
                }
                mask.extend_from_slice(&m);
            }
            let n = chunk.len();
            let input = Tensor::from_vec(input, (n, COORDS), &Device::Cpu)?;
            let target = Tensor::from_vec(target, (n, COORDS), &Device::Cpu)?;
            let mask = Tensor::from_vec(mask, (n, COORDS), &Device::Cpu)?;
            let loss = masked_mse(&completer.forward(&input)?, &target, &mask)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Completion("completer loss diverged".into()));
            }
            opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
            opt.step(&loss)?;
            step += 1;
            total += value;
            steps += 1;
        }
        history.push(total / steps as f64);
    }
    Ok((completer, history))
}

/// Fills undetected regions with repaired predictions; detected boxes are
/// returned unchanged and every flag is set.
pub fn complete_regions(partial: &RegionSet, completer: &Completer) -> Result<RegionSet> {
    if partial.num_detected() == 0 {
        return Err(Error::Completion("no detected region to anchor the completion".into()));
    }
    if partial.is_complete() {
        return Ok(partial.clone());
    }
    let input = Tensor::from_slice(&partial.masked_coords(), (1, COORDS), &Device::Cpu)?;
    let dtype = completer.net.layers[0].weight.dtype();
    let pred = completer.forward(&input.to_dtype(dtype)?)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = partial.clone();
    for j in 0..NUM_REGIONS {
        if !out.detected[j] {
            out.boxes[j] = BoundingBox::new(pred[4 * j], pred[4 * j + 1], pred[4 * j + 2], pred[4 * j + 3]).repaired(MIN_SIDE);
            out.detected[j] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{canonical_layout, synthetic_layouts};

    #[test]
    fn mask_counts_and_determinism() {
        let c = RegionSet::fully_detected(canonical_layout()).masked_coords();
        let (m, idx) = mask_regions(&c, 1, 0).unwrap();
        assert_eq!(m.iter().zip(&c).filter(|(a, b)| a != b).count(), 4);
        assert_eq!(idx.len(), 1);
        let (m28, idx28) = mask_regions(&c, 28, 3).unwrap();
        assert_eq!(idx28.len(), 28);
        assert_eq!(m28.iter().filter(|v| **v != BoundingBox::MASK_VALUE).count(), 4);
        assert_eq!(mask_regions(&c, 5, 9).unwrap(), mask_regions(&c, 5, 9).unwrap());
        assert!(matches!(mask_regions(&c, 0, 0), Err(Error::Argument(_))));
        assert!(matches!(mask_regions(&c, 29, 0), Err(Error::Argument(_))));
    }

    fn small_cfg(epochs: usize) -> CompleterConfig {
        CompleterConfig { hidden: 64, epochs, batch_size: 16, lr: 2e-3, max_masked: 8, seed: 1 }
    }

    #[test]
    fn constant_layouts_are_learned() {
        let layouts = vec![RegionSet::fully_detected(canonical_layout()); 64];
        let (c, hist) = train_completer(&layouts, &small_cfg(400)).unwrap();
        assert!(hist.iter().all(|l| l.is_finite()));
        assert!(*hist.last().unwrap() < 1e-4, "final loss {}", hist.last().unwrap());
        let truth = canonical_layout();
        let mut partial = RegionSet::fully_detected(truth);
        partial.detected[6] = false;
        partial.boxes[6] = BoundingBox::MASK;
        let done = complete_regions(&partial, &c).unwrap();
        let err = done.boxes[6].to_array().iter().zip(truth[6].to_array()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(err < 0.01, "L-inf error {err}");
    }

    #[test]
    fn loss_decreases_on_jittered_layouts() {
        let layouts = synthetic_layouts(64, 0.01, 4);
        let (_, hist) = train_completer(&layouts, &small_cfg(11)).unwrap();
        assert!(hist[10] < hist[0]);
    }

    #[test]
    fn completion_contract() {
        let layouts = synthetic_layouts(8, 0.01, 4);
        let (c, _) = train_completer(&layouts, &small_cfg(1)).unwrap();
        let full = layouts[0].clone();
        assert_eq!(complete_regions(&full, &c).unwrap(), full);
        assert!(matches!(complete_regions(&RegionSet::undetected(), &c), Err(Error::Completion(_))));
        let mut partial = full.clone();
        for j in [0, 5, 17, 28] {
            partial.detected[j] = false;
            partial.boxes[j] = BoundingBox::MASK;
        }
        let done = complete_regions(&partial, &c).unwrap();
        assert!(done.is_complete());
        done.validate().unwrap();
        for j in 0..NUM_REGIONS {
            if partial.detected[j] {
                assert_eq!(done.boxes[j].to_array().map(f32::to_bits), full.boxes[j].to_array().map(f32::to_bits));
            }
        }
    }

    #[test]
    fn too_few_layouts() {
        let one = synthetic_layouts(1, 0.01, 4);
        assert!(matches!(train_completer(&one, &small_cfg(1)), Err(Error::Data(_))));
    }
}
