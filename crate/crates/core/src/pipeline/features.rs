use candle_core::Tensor;

use crate::data::{CohortSample, Radiograph, RegionSet};
use crate::error::{Error, Result};
use crate::geometry::{complete_regions, resolve_detections, Detector, DetectorInput};
use crate::nn::params::name_hash;
use crate::visual::{extract_region_patches, images_to_tensor, RegionPatches};

use super::model::Model;

/// Images per backbone call.
const BACKBONE_BATCH: usize = 16;

/// Everything the trainable stages need from the frozen front end: the
/// completed layouts, the ROI patches and the last pyramid level.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub ids: Vec<String>,
    pub regions: Vec<RegionSet>,
    pub patches: RegionPatches,
    /// `(N, C_5, h, w)`.
    pub f5: Tensor,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<FeatureCache> {
        let idx = Tensor::from_vec(indices.iter().map(|i| *i as u32).collect::<Vec<_>>(), indices.len(), self.f5.device())?;
        Ok(FeatureCache {
            ids: indices.iter().map(|i| self.ids[*i].clone()).collect(),
            regions: indices.iter().map(|i| self.regions[*i].clone()).collect(),
            patches: self.patches.select(indices)?,
            f5: self.f5.index_select(&idx, 0)?,
        })
    }
}

/// Detector seed of a sample; it depends only on the run seed and the id.
pub fn detection_seed(seed: u64, id: &str) -> u64 {
    seed ^ name_hash(id)
}

/// Detects, resolves and completes the layout of one image.
pub fn detect_layout(model: &Model, detector: &dyn Detector, image: &Radiograph, reference: Option<&RegionSet>, seed: u64) -> Result<RegionSet> {
    let proposals = detector.detect(&DetectorInput { image, reference }, seed)?;
    proposals.validate()?;
    complete_regions(&resolve_detections(&proposals), &model.completer)
}

/// Runs detection, completion, the backbone and ROI align over `images`.
/// `references` holds annotated layouts for detectors that use them.
pub fn extract_features(
    model: &Model,
    detector: &dyn Detector,
    ids: &[String],
    images: &[&Radiograph],
    references: &[Option<&RegionSet>],
) -> Result<FeatureCache> {
    if images.is_empty() {
        return Err(Error::Data("no images to extract features from".into()));
    }
    if ids.len() != images.len() || references.len() != images.len() {
        return Err(Error::Data(format!("{} ids and {} references for {} images", ids.len(), references.len(), images.len())));
    }
    let regions = images
        .iter()
        .zip(references)
        .zip(ids)
        .map(|((img, r), id)| detect_layout(model, detector, img, *r, detection_seed(model.config.seed, id)))
        .collect::<Result<Vec<_>>>()?;
    let mut patches = Vec::new();
    let mut f5 = Vec::new();
    for (imgs, regs) in images.chunks(BACKBONE_BATCH).zip(regions.chunks(BACKBONE_BATCH)) {
        let pyramid = model.backbone.forward(&images_to_tensor(imgs, model.dtype())?)?;
        let p = extract_region_patches(&pyramid, regs, &model.config.model)?;
        patches.push(RegionPatches { levels: p.levels.iter().map(Tensor::detach).collect(), global_pool: p.global_pool.detach() });
        f5.push(pyramid.levels[4].detach());
    }
    Ok(FeatureCache {
        ids: ids.to_vec(),
        regions,
        patches: RegionPatches::concat(&patches)?,
        f5: Tensor::cat(&f5, 0)?,
    })
}

/// Features of annotated samples, with their reference layouts passed to
/// the detector.
pub fn sample_features(model: &Model, detector: &dyn Detector, samples: &[CohortSample]) -> Result<FeatureCache> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let images: Vec<&Radiograph> = samples.iter().map(|s| &s.image).collect();
    let refs: Vec<Option<&RegionSet>> = samples.iter().map(|s| Some(&s.regions)).collect();
    extract_features(model, detector, &ids, &images, &refs)
}
