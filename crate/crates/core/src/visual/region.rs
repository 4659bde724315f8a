use candle_core::{Device, Tensor, D};

use super::backbone::FeaturePyramid;
use super::roi::roi_align_regions;
use crate::config::ModelConfig;
use crate::data::{RegionGroupTable, RegionSet, NUM_REGIONS, NUM_REGION_FEATURES, NUM_SENTENCES};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

/// ROI-aligned, flattened patches for a batch: level `l` is
/// `(B, 29, C_l * s_l * s_l)`; `global_pool` is the `(B, C_5)` spatial mean of
/// the last level. These depend only on the (frozen) backbone and the boxes.
#[derive(Clone, Debug)]
pub struct RegionPatches {
    pub levels: Vec<Tensor>,
    pub global_pool: Tensor,
}

impl RegionPatches {
    pub fn batch_size(&self) -> usize {
        self.global_pool.dims()[0]
    }

    /// Rows `indices` of the batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(indices.iter().map(|i| *i as u32).collect::<Vec<_>>(), indices.len(), &Device::Cpu)?;
        Ok(RegionPatches {
            levels: self.levels.iter().map(|t| t.index_select(&idx, 0)).collect::<candle_core::Result<_>>()?,
            global_pool: self.global_pool.index_select(&idx, 0)?,
        })
    }

    pub fn concat(parts: &[RegionPatches]) -> Result<Self> {
        let levels = (0..5)
            .map(|l| Tensor::cat(&parts.iter().map(|p| &p.levels[l]).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let global_pool = Tensor::cat(&parts.iter().map(|p| &p.global_pool).collect::<Vec<_>>(), 0)?;
        Ok(RegionPatches { levels, global_pool })
    }
}

/// Crops every region at every level. All regions must carry valid boxes,
/// i.e. completion has already run.
pub fn extract_region_patches(pyramid: &FeaturePyramid, regions: &[RegionSet], cfg: &ModelConfig) -> Result<RegionPatches> {
    pyramid.validate(cfg)?;
    let b = pyramid.batch_size();
    if regions.len() != b {
        return Err(Error::shape(format!("{} region sets for a batch of {b}", regions.len())));
    }
    for (i, r) in regions.iter().enumerate() {
        if !r.is_complete() {
            return Err(Error::Contract(format!(
                "image {i} has {} undetected regions; run completion first",
                NUM_REGIONS - r.num_detected()
            )));
        }
    }
    let mut levels = Vec::with_capacity(5);
    for l in 0..5 {
        let per_image = (0..b)
            .map(|i| roi_align_regions(&pyramid.levels[l].get(i)?, &regions[i].boxes, cfg.roi_sizes[l]))
            .collect::<Result<Vec<_>>>()?;
        levels.push(Tensor::stack(&per_image, 0)?);
    }
    let global_pool = pyramid.levels[4].flatten_from(2)?.mean(D::Minus1)?;
    Ok(RegionPatches { levels, global_pool })
}

/// `(B, 30, region_width)` region features; row 30 is the global feature.
#[derive(Clone, Debug)]
pub struct RegionFeatureSet {
    pub features: Tensor,
}

impl RegionFeatureSet {
    pub fn width(&self) -> usize {
        self.features.dims()[2]
    }
}

/// Per-level linear projections to a common width, and the global map.
#[derive(Clone, Debug)]
pub struct RegionEncoder {
    pub projections: Vec<Linear>,
    pub global: Linear,
}

impl RegionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let projections = cfg
            .patch_widths()
            .iter()
            .enumerate()
            .map(|(l, &w)| Linear::new(store, &format!("mre.level{}", l + 1), w, cfg.region_proj_width, true))
            .collect::<Result<Vec<_>>>()?;
        let global = Linear::new(store, "mre.global", cfg.global_width(), cfg.region_width(), true)?;
        Ok(RegionEncoder { projections, global })
    }

    /// Projects each level, concatenates in ascending level order, and
    /// appends the projected global pool as the 30th entry.
    pub fn forward(&self, patches: &RegionPatches) -> Result<RegionFeatureSet> {
        let per_level = self
            .projections
            .iter()
            .zip(&patches.levels)
            .map(|(p, x)| p.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let regional = Tensor::cat(&per_level, 2)?;
        let global = self.global.forward(&patches.global_pool)?.unsqueeze(1)?;
        Ok(RegionFeatureSet { features: Tensor::cat(&[regional, global], 1)? })
    }
}

pub fn encode_region_features(
    pyramid: &FeaturePyramid,
    regions: &[RegionSet],
    encoder: &RegionEncoder,
    cfg: &ModelConfig,
) -> Result<RegionFeatureSet> {
    encoder.forward(&extract_region_patches(pyramid, regions, cfg)?)
}

/// Concatenates each group's region features in ascending region order,
/// giving `(B, region_width * |group|)` per sentence.
pub fn aggregate_sentence_features(rfs: &Tensor, table: &RegionGroupTable) -> Result<Vec<Tensor>> {
    let (b, n, w) = rfs.dims3()?;
    if n != NUM_REGION_FEATURES {
        return Err(Error::shape(format!("expected {NUM_REGION_FEATURES} region features, got {n}")));
    }
    (0..NUM_SENTENCES)
        .map(|i| {
            let g = table.group(i);
            if let Some(bad) = g.iter().find(|j| **j == 0 || **j > NUM_REGION_FEATURES) {
                return Err(Error::Table(format!("region index {bad} outside 1..=30")));
            }
            let idx = Tensor::from_vec(g.iter().map(|j| (*j - 1) as u32).collect::<Vec<_>>(), g.len(), rfs.device())?;
            Ok(rfs.index_select(&idx, 1)?.reshape((b, g.len() * w))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::canonical_layout;
    use crate::visual::backbone::{images_to_tensor, Backbone, ConvBackbone};
    use crate::data::Radiograph;
    use candle_core::DType;

    fn table(groups: [Vec<usize>; 5]) -> RegionGroupTable {
        RegionGroupTable::new(groups).unwrap()
    }

    #[test]
    fn full_widths_give_thirty_by_1280() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new(0, DType::F32);
        let bb = ConvBackbone::new(&mut store, &cfg).unwrap();
        let enc = RegionEncoder::new(&mut store, &cfg).unwrap();
        let img = Radiograph::zeros(224, 224);
        let pyr = bb.forward(&images_to_tensor(&[&img], DType::F32).unwrap()).unwrap();
        let regions = [RegionSet::fully_detected(canonical_layout())];
        let patches = extract_region_patches(&pyr, &regions, &cfg).unwrap();
        let widths: Vec<usize> = patches.levels.iter().map(|t| t.dims()[2]).collect();
        assert_eq!(widths, vec![1024, 1024, 2048, 1024, 2048]);
        let rfs = enc.forward(&patches).unwrap();
        assert_eq!(rfs.features.dims(), &[1, 30, 1280]);
        // zero pyramid through zero-bias projections
        assert_eq!(rfs.features.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn undetected_region_is_a_contract_error() {
        let cfg = ModelConfig::compact();
        let mut store = ParamStore::new(0, DType::F32);
        let bb = ConvBackbone::new(&mut store, &cfg).unwrap();
        let img = Radiograph::zeros(224, 224);
        let pyr = bb.forward(&images_to_tensor(&[&img], DType::F32).unwrap()).unwrap();
        let mut r = RegionSet::fully_detected(canonical_layout());
        r.detected[3] = false;
        assert!(matches!(extract_region_patches(&pyr, &[r], &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn singleton_global_group_is_the_global_feature() {
        let rfs = Tensor::arange(0f32, (2 * 30 * 4) as f32, &Device::Cpu).unwrap().reshape((2, 30, 4)).unwrap();
        let t = table([vec![1, 3], vec![7], vec![25], vec![18], vec![30]]);
        let g = aggregate_sentence_features(&rfs, &t).unwrap();
        assert_eq!(g[4].to_vec2::<f32>().unwrap(), rfs.narrow(1, 29, 1).unwrap().squeeze(1).unwrap().to_vec2::<f32>().unwrap());
        assert_eq!(g[0].dims(), &[2, 8]);
        let first = g[0].narrow(1, 0, 4).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(first, rfs.narrow(1, 0, 1).unwrap().squeeze(1).unwrap().to_vec2::<f32>().unwrap());
        let permuted = table([vec![3, 1], vec![7], vec![25], vec![18], vec![30]]);
        let gp = aggregate_sentence_features(&rfs, &permuted).unwrap();
        assert_eq!(gp[0].to_vec2::<f32>().unwrap(), g[0].to_vec2::<f32>().unwrap());
    }
}
