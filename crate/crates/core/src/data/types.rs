use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of anatomical regions localized on a frontal radiograph.
pub const NUM_REGIONS: usize = 29;
/// Region features per image: the 29 regions plus the global feature.
pub const NUM_REGION_FEATURES: usize = 30;
/// 1-based index of the global (whole image) feature.
pub const GLOBAL_FEATURE_INDEX: usize = 30;
/// Four findings sentences plus the impression.
pub const NUM_SENTENCES: usize = 5;

/// Region names in index order (index 1 is `REGION_NAMES[0]`).
pub const REGION_NAMES: [&str; NUM_REGIONS] = [
    "right lung",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "right hilar structures",
    "right apical zone",
    "right costophrenic angle",
    "right hemidiaphragm",
    "left lung",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "left hilar structures",
    "left apical zone",
    "left costophrenic angle",
    "left hemidiaphragm",
    "trachea",
    "spine",
    "right clavicle",
    "left clavicle",
    "aortic arch",
    "mediastinum",
    "upper mediastinum",
    "svc",
    "cardiac silhouette",
    "cavoatrial junction",
    "right atrium",
    "carina",
    "abdomen",
];

/// Axis-aligned box in normalized image coordinates.
///
/// A box may temporarily hold the mask placeholder (all coordinates `-1`)
/// when it stands for an undetected region; [`BoundingBox::validate`] rejects it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BoundingBox {
    fn from(a: [f32; 4]) -> Self {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BoundingBox> for [f32; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl BoundingBox {
    /// Value used for every coordinate of a masked or undetected region.
    pub const MASK_VALUE: f32 = -1.0;
    pub const MASK: BoundingBox = BoundingBox {
        x1: Self::MASK_VALUE,
        y1: Self::MASK_VALUE,
        x2: Self::MASK_VALUE,
        y2: Self::MASK_VALUE,
    };

    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let coords = self.to_array();
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(format!("coordinates {coords:?} outside [0,1]"));
        }
        if self.x1 >= self.x2 {
            return Err(format!("x1 {} >= x2 {}", self.x1, self.x2));
        }
        if self.y1 >= self.y2 {
            return Err(format!("y1 {} >= y2 {}", self.y1, self.y2));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Makes any four numbers into a valid box: orders each axis, clamps to
    /// `[0,1]` and widens sides shorter than `min_side` around their center.
    pub fn repaired(&self, min_side: f32) -> BoundingBox {
        fn axis(a: f32, b: f32, min_side: f32) -> (f32, f32) {
            let a = if a.is_finite() { a } else { 0.0 };
            let b = if b.is_finite() { b } else { 1.0 };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (mut lo, mut hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
            if hi - lo < min_side {
                let c = (0.5 * (lo + hi)).clamp(0.5 * min_side, 1.0 - 0.5 * min_side);
                lo = c - 0.5 * min_side;
                hi = c + 0.5 * min_side;
            }
            (lo.max(0.0), hi.min(1.0))
        }
        let (x1, x2) = axis(self.x1, self.x2, min_side);
        let (y1, y2) = axis(self.y1, self.y2, min_side);
        BoundingBox { x1, y1, x2, y2 }
    }
}

/// The 29 anatomical region boxes of one image with their detection flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub boxes: [BoundingBox; NUM_REGIONS],
    pub detected: [bool; NUM_REGIONS],
}

impl RegionSet {
    pub fn fully_detected(boxes: [BoundingBox; NUM_REGIONS]) -> Self {
        RegionSet { boxes, detected: [true; NUM_REGIONS] }
    }

    pub fn undetected() -> Self {
        RegionSet { boxes: [BoundingBox::MASK; NUM_REGIONS], detected: [false; NUM_REGIONS] }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (j, (b, d)) in self.boxes.iter().zip(&self.detected).enumerate() {
            if *d {
                b.validate().map_err(|e| format!("region {}: {e}", j + 1))?;
            }
        }
        Ok(())
    }

    pub fn num_detected(&self) -> usize {
        self.detected.iter().filter(|d| **d).count()
    }

    pub fn is_complete(&self) -> bool {
        self.num_detected() == NUM_REGIONS
    }

    /// Flattened `29 x 4` coordinates with the mask value at undetected slots.
    pub fn masked_coords(&self) -> [f32; NUM_REGIONS * 4] {
        let mut out = [BoundingBox::MASK_VALUE; NUM_REGIONS * 4];
        for j in 0..NUM_REGIONS {
            if self.detected[j] {
                out[4 * j..4 * j + 4].copy_from_slice(&self.boxes[j].to_array());
            }
        }
        out
    }
}

/// Which region features (1..=30) each of the five sentences is grounded in.
///
/// Groups are stored sorted and deduplicated, so the concatenation order of
/// grouped features is always ascending in region index.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGroupTable {
    groups: [Vec<usize>; NUM_SENTENCES],
}

const DEFAULT_GROUPS_JSON: &str = include_str!("../../../../configs/region_groups.json");

impl RegionGroupTable {
    pub fn new(groups: [Vec<usize>; NUM_SENTENCES]) -> Result<Self> {
        let mut groups = groups;
        for (i, g) in groups.iter_mut().enumerate() {
            g.sort_unstable();
            g.dedup();
            if g.is_empty() {
                return Err(Error::Table(format!("group {} is empty", i + 1)));
            }
            if let Some(bad) = g.iter().find(|j| **j == 0 || **j > NUM_REGION_FEATURES) {
                return Err(Error::Table(format!("group {} has index {bad} outside 1..=30", i + 1)));
            }
        }
        if !groups[NUM_SENTENCES - 1].contains(&GLOBAL_FEATURE_INDEX) {
            return Err(Error::Table("impression group must contain the global index 30".into()));
        }
        Ok(RegionGroupTable { groups })
    }

    /// Parses `{"schema_version": ..., "1": [...], ..., "5": [...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Table(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| Error::Table("expected a JSON object".into()))?;
        if let Some(v) = obj.get("schema_version") {
            let v = v.as_str().unwrap_or_default();
            if v != super::SCHEMA_VERSION {
                return Err(Error::Table(format!("unknown schema_version {v:?}")));
            }
        }
        let mut groups: [Vec<usize>; NUM_SENTENCES] = Default::default();
        for (i, slot) in groups.iter_mut().enumerate() {
            let key = (i + 1).to_string();
            let arr = obj
                .get(&key)
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::Table(format!("missing group {key}")))?;
            for v in arr {
                let j = v
                    .as_u64()
                    .ok_or_else(|| Error::Table(format!("group {key}: non-integer entry {v}")))?;
                slot.push(j as usize);
            }
        }
        Self::new(groups)
    }

    pub fn to_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("schema_version".into(), super::SCHEMA_VERSION.into());
        for (i, g) in self.groups.iter().enumerate() {
            obj.insert((i + 1).to_string(), serde_json::json!(g));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json")
    }

    /// Four anatomical findings groups (lungs, pleura, heart and mediastinum,
    /// bones) plus the global feature for the impression.
    pub fn default_table() -> Self {
        Self::from_json(DEFAULT_GROUPS_JSON).expect("bundled region table is valid")
    }

    /// Region indices (1-based, ascending) of sentence `i` (0-based).
    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<usize>; NUM_SENTENCES] {
        &self.groups
    }
}

impl Default for RegionGroupTable {
    fn default() -> Self {
        Self::default_table()
    }
}

/// Five normalized sentences: four findings and the impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructuredReport {
    pub sentences: [String; NUM_SENTENCES],
}

impl StructuredReport {
    pub fn new(sentences: [String; NUM_SENTENCES]) -> Self {
        StructuredReport { sentences }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self.sentences.iter().position(|s| s.trim().is_empty()) {
            Some(i) => Err(format!("sentence {} is empty", i + 1)),
            None => Ok(()),
        }
    }

    /// The whole report as one string, sentences separated by spaces.
    pub fn joined(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub time_days: f64,
    pub event: bool,
    pub clinical: Vec<f32>,
}

impl SurvivalRecord {
    pub fn validate(&self, clinical_dim: usize) -> std::result::Result<(), String> {
        if !(self.time_days.is_finite() && self.time_days >= 0.0) {
            return Err(format!("time_days {} must be finite and non-negative", self.time_days));
        }
        if self.clinical.len() != clinical_dim {
            return Err(format!(
                "clinical vector has {} entries, expected {clinical_dim}",
                self.clinical.len()
            ));
        }
        if self.clinical.iter().any(|v| !v.is_finite()) {
            return Err("clinical vector has non-finite entries".into());
        }
        Ok(())
    }
}

/// Grayscale image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Radiograph {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Radiograph {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Radiograph { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Radiograph { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Generator ground truth attached to synthetic samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Latent disease severity in `[0,1]`.
    pub severity: f32,
    /// 1-based region index of the lung zone holding the planted opacity.
    pub abnormal_region: usize,
    /// Normalized `(x, y)` center of the planted opacity.
    pub lesion_center: [f32; 2],
    pub group_abnormal: [bool; NUM_SENTENCES],
    pub template_ids: [u32; NUM_SENTENCES],
    /// Linear clinical risk score used to draw the event time.
    pub clinical_risk: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSample {
    pub id: String,
    pub image: Radiograph,
    pub regions: RegionSet,
    pub report: StructuredReport,
    pub survival: SurvivalRecord,
    pub meta: Option<SampleMeta>,
}

impl CohortSample {
    pub fn validate(&self, image_size: (usize, usize), clinical_dim: usize) -> Result<()> {
        let fail = |msg: String| Error::Validation { id: self.id.clone(), msg };
        if (self.image.height, self.image.width) != image_size {
            return Err(fail(format!(
                "image is {}x{}, expected {}x{}",
                self.image.height, self.image.width, image_size.0, image_size.1
            )));
        }
        self.regions.validate().map_err(fail)?;
        self.report.validate().map_err(fail)?;
        self.survival.validate(clinical_dim).map_err(fail)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_orders_and_widens() {
        let b = BoundingBox::new(0.6, 0.5, 0.4, 0.5).repaired(0.01);
        assert!(b.is_valid());
        assert_eq!((b.x1, b.x2), (0.4, 0.6));
        assert!((b.height() - 0.01).abs() < 1e-6);
        let edge = BoundingBox::new(1.2, 1.0, 1.5, 1.0).repaired(0.01);
        assert!(edge.is_valid(), "{edge:?}");
    }

    #[test]
    fn mask_box_is_invalid() {
        assert!(!BoundingBox::MASK.is_valid());
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BoundingBox::new(0.1, 0.2, 0.3, 0.5);
        assert!((b.iou(&b) - 1.0).abs() < 1e-6);
        assert_eq!(b.iou(&BoundingBox::new(0.5, 0.6, 0.7, 0.9)), 0.0);
    }

    #[test]
    fn group_table_canonicalizes() {
        let t = RegionGroupTable::new([vec![3, 1], vec![7], vec![25], vec![18], vec![30]]).unwrap();
        assert_eq!(t.group(0), &[1, 3]);
    }

    #[test]
    fn group_table_rejects_bad_entries() {
        assert!(RegionGroupTable::new([vec![0], vec![7], vec![25], vec![18], vec![30]]).is_err());
        assert!(RegionGroupTable::new([vec![31], vec![7], vec![25], vec![18], vec![30]]).is_err());
        assert!(RegionGroupTable::new([vec![], vec![7], vec![25], vec![18], vec![30]]).is_err());
        assert!(RegionGroupTable::new([vec![1], vec![7], vec![25], vec![18], vec![2]]).is_err());
    }

    #[test]
    fn default_table_round_trips() {
        let t = RegionGroupTable::default_table();
        assert_eq!(RegionGroupTable::from_json(&t.to_json()).unwrap(), t);
        assert_eq!(t.group(4), &[30]);
    }
}
