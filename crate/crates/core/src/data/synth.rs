//! Synthetic cohort generator.
//!
//! Every sample carries a latent severity `s ~ U(0,1)` that drives three things
//! at once: an opacity blob planted in one lung zone of the rendered
//! radiograph, the choice of normal or abnormal template sentences, and the
//! event time (log-hazard linear in `s`, plus an independent clinical term).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::types::*;
use super::{CLINICAL_NAMES, DEFAULT_CLINICAL_DIM};
use crate::error::{Error, Result};

/// Hand-authored frontal-radiograph layout, patient right on image left.
const CANONICAL: [[f32; 4]; NUM_REGIONS] = [
    [0.12, 0.15, 0.47, 0.78], // right lung
    [0.14, 0.18, 0.46, 0.37], // right upper lung zone
    [0.13, 0.37, 0.46, 0.55], // right mid lung zone
    [0.12, 0.55, 0.46, 0.76], // right lower lung zone
    [0.34, 0.35, 0.46, 0.52], // right hilar structures
    [0.18, 0.13, 0.40, 0.24], // right apical zone
    [0.10, 0.68, 0.22, 0.80], // right costophrenic angle
    [0.12, 0.72, 0.46, 0.84], // right hemidiaphragm
    [0.53, 0.15, 0.88, 0.80], // left lung
    [0.54, 0.18, 0.86, 0.37], // left upper lung zone
    [0.54, 0.37, 0.87, 0.56], // left mid lung zone
    [0.54, 0.56, 0.88, 0.78], // left lower lung zone
    [0.54, 0.36, 0.66, 0.53], // left hilar structures
    [0.60, 0.13, 0.82, 0.24], // left apical zone
    [0.78, 0.70, 0.90, 0.82], // left costophrenic angle
    [0.54, 0.74, 0.88, 0.86], // left hemidiaphragm
    [0.46, 0.05, 0.54, 0.33], // trachea
    [0.45, 0.02, 0.55, 0.98], // spine
    [0.12, 0.10, 0.47, 0.20], // right clavicle
    [0.53, 0.10, 0.88, 0.20], // left clavicle
    [0.50, 0.25, 0.62, 0.36], // aortic arch
    [0.38, 0.20, 0.64, 0.78], // mediastinum
    [0.40, 0.15, 0.60, 0.38], // upper mediastinum
    [0.40, 0.25, 0.48, 0.42], // svc
    [0.38, 0.45, 0.74, 0.80], // cardiac silhouette
    [0.40, 0.42, 0.48, 0.50], // cavoatrial junction
    [0.38, 0.48, 0.50, 0.72], // right atrium
    [0.46, 0.30, 0.54, 0.38], // carina
    [0.10, 0.82, 0.90, 0.99], // abdomen
];

/// Lung zones (1-based region indices) that can hold the planted opacity.
pub const LESION_ZONES: [usize; 6] = [2, 3, 4, 10, 11, 12];

const GRADES: [&str; 3] = ["mild", "moderate", "severe"];
const SIDES: [&str; 2] = ["right", "left"];

pub fn canonical_layout() -> [BoundingBox; NUM_REGIONS] {
    CANONICAL.map(BoundingBox::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Standard deviation of the Gaussian jitter on every box coordinate.
    pub jitter_sigma: f32,
    /// Probability that a sample is right-censored before its event.
    pub censor_fraction: f64,
    pub clinical_dim: usize,
    /// Log-hazard change across the full severity range.
    pub severity_effect: f64,
    /// Log-hazard change per standard deviation of clinical risk.
    pub clinical_effect: f64,
    /// Median event time at average risk.
    pub median_days: f64,
    pub lesion_amplitude: f32,
    pub noise_std: f32,
    /// Severity below which the lungs are reported clear.
    pub abnormal_threshold: f32,
    /// Severity at or above which a pleural effusion accompanies the opacity.
    pub effusion_threshold: f32,
    pub cardiomegaly_rate: f64,
    pub degenerative_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 224,
            jitter_sigma: 0.01,
            censor_fraction: 0.3,
            clinical_dim: DEFAULT_CLINICAL_DIM,
            severity_effect: 10.0,
            clinical_effect: 1.0,
            median_days: 30.0,
            lesion_amplitude: 0.5,
            noise_std: 0.02,
            abnormal_threshold: 0.3,
            effusion_threshold: 0.75,
            cardiomegaly_rate: 0.25,
            degenerative_rate: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma < 0.2) {
            return bad("jitter_sigma must be in [0, 0.2)");
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return bad("censor_fraction must be in [0, 1)");
        }
        if self.clinical_dim == 0 {
            return bad("clinical_dim must be positive");
        }
        if !(self.median_days > 0.0) {
            return bad("median_days must be positive");
        }
        if !(0.0..=1.0).contains(&self.abnormal_threshold) || !(0.0..=1.0).contains(&self.effusion_threshold) {
            return bad("thresholds must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cardiomegaly_rate) || !(0.0..=1.0).contains(&self.degenerative_rate) {
            return bad("rates must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Sentence text for a template id of sentence group `group` (0-based).
pub fn template_sentence(group: usize, id: u32) -> Option<String> {
    let id = id as usize;
    match (group, id) {
        (0, 0) => Some("the lungs are clear .".into()),
        (0, k) if k <= 18 => {
            let zone = (k - 1) / 3;
            let grade = (k - 1) % 3;
            let name = REGION_NAMES[LESION_ZONES[zone] - 1];
            Some(format!("there is {} opacity in the {name} .", GRADES[grade]))
        }
        (1, 0) => Some("no pleural effusion or pneumothorax .".into()),
        (1, k) if k <= 2 => Some(format!("there is a small {} pleural effusion .", SIDES[k - 1])),
        (2, 0) => Some("the cardiomediastinal silhouette is within normal limits .".into()),
        (2, 1) => Some("the cardiac silhouette is enlarged .".into()),
        (3, 0) => Some("no acute osseous abnormality .".into()),
        (3, 1) => Some("there are degenerative changes of the spine .".into()),
        (4, 0) => Some("no acute cardiopulmonary process .".into()),
        (4, k) if k <= 3 => Some(format!("findings are consistent with {} multifocal pneumonia .", GRADES[k - 1])),
        _ => None,
    }
}

/// Every sentence the generator can emit, in template order.
pub fn template_corpus() -> Vec<String> {
    (0..NUM_SENTENCES)
        .flat_map(|g| (0..).map_while(move |id| template_sentence(g, id)))
        .collect()
}

fn grade_of(severity: f32, threshold: f32) -> Option<usize> {
    if severity < threshold {
        None
    } else if severity < 0.55 {
        Some(0)
    } else if severity < 0.8 {
        Some(1)
    } else {
        Some(2)
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Population moments of the raw clinical covariates, used to form the
/// clinical risk score.
struct Covariate {
    mean: f64,
    sd: f64,
}

const CONTINUOUS: [Covariate; 8] = [
    Covariate { mean: 60.0, sd: 15.0 }, // age
    Covariate { mean: 0.5, sd: 0.5 },   // sex (binary)
    Covariate { mean: 37.5, sd: 0.8 },  // temperature
    Covariate { mean: 94.0, sd: 3.0 },  // oxygen saturation
    Covariate { mean: 8.0, sd: 3.0 },   // white cells
    Covariate { mean: 1.2, sd: 0.5 },   // lymphocytes
    Covariate { mean: 1.0, sd: 0.4 },   // creatinine
    Covariate { mean: 50.0, sd: 40.0 }, // c-reactive protein
];
const COMORBIDITY_RATE: f64 = 0.2;

fn draw_clinical(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f32>, f64) {
    let mut values = Vec::with_capacity(dim.max(CLINICAL_NAMES.len()));
    let mut z = [0.0f64; 8];
    for (k, c) in CONTINUOUS.iter().enumerate() {
        let v = if k == 1 {
            if rng.random_bool(0.5) { 1.0 } else { 0.0 }
        } else {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            c.mean + c.sd * n
        };
        z[k] = (v - c.mean) / c.sd;
        values.push(v as f32);
    }
    let mut comorbid = 0.0;
    for _ in 0..8 {
        let v = rng.random_bool(COMORBIDITY_RATE);
        comorbid += v as u8 as f64;
        values.push(v as u8 as f32);
    }
    while values.len() < dim {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        values.push(n as f32);
    }
    values.truncate(dim);
    let comorbid_z = (comorbid - 8.0 * COMORBIDITY_RATE) / (8.0 * COMORBIDITY_RATE * (1.0 - COMORBIDITY_RATE)).sqrt();
    // Weights have unit L2 norm so the score is standard normal in the population.
    let raw = 0.6 * z[0] - 0.5 * z[3] + 0.45 * z[7] + 0.43 * comorbid_z;
    let norm = (0.6f64.powi(2) + 0.5f64.powi(2) + 0.45f64.powi(2) + 0.43f64.powi(2)).sqrt();
    (values, raw / norm)
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(size: usize, fill: f32) -> Self {
        Canvas { size, px: vec![fill; size * size] }
    }

    fn each(&mut self, mut f: impl FnMut(f32, f32, &mut f32)) {
        let n = self.size as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = ((x as f32 + 0.5) / n, (y as f32 + 0.5) / n);
                f(u, v, &mut self.px[y * self.size + x]);
            }
        }
    }

    fn ellipse(&mut self, b: &BoundingBox, scale_x: f32, value: f32) {
        let (cx, cy) = b.center();
        let (rx, ry) = (0.5 * b.width() * scale_x, 0.5 * b.height());
        self.each(|u, v, p| {
            let d = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            if d <= 1.0 {
                *p = value;
            }
        });
    }

    fn rect(&mut self, b: &BoundingBox, value: f32) {
        self.each(|u, v, p| {
            if b.contains(u, v) {
                *p = value;
            }
        });
    }

    fn blob(&mut self, cx: f32, cy: f32, sigma: f32, amplitude: f32) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        self.each(|u, v, p| {
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            *p += amplitude * (-d2 * inv).exp();
        });
    }
}

fn render(
    boxes: &[BoundingBox; NUM_REGIONS],
    cfg: &SynthConfig,
    lesion: Option<(f32, f32, f32, f32)>,
    effusion_side: Option<usize>,
    cardiomegaly: bool,
    degenerative: bool,
    rng: &mut ChaCha8Rng,
) -> Radiograph {
    let b = |j: usize| &boxes[j - 1];
    let mut c = Canvas::new(cfg.image_size, 0.05);
    c.ellipse(&BoundingBox::new(0.04, 0.0, 0.96, 1.0), 1.0, 0.45);
    c.rect(b(29), 0.5);
    c.ellipse(b(1), 1.0, 0.15);
    c.ellipse(b(9), 1.0, 0.15);
    c.rect(b(23), 0.5);
    c.ellipse(b(25), if cardiomegaly { 1.25 } else { 1.0 }, if cardiomegaly { 0.62 } else { 0.55 });
    let spine = b(18);
    let (sx, _) = spine.center();
    let core = BoundingBox::new(sx - 0.25 * spine.width(), spine.y1, sx + 0.25 * spine.width(), spine.y2);
    c.rect(&core, 0.7);
    if degenerative {
        let mut y = spine.y1 + 0.03;
        while y < spine.y2 - 0.02 {
            c.rect(&BoundingBox::new(spine.x1, y, spine.x2, y + 0.012), 0.85);
            y += 0.06;
        }
    }
    for j in [19, 20] {
        let cb = b(j);
        let (_, cy) = cb.center();
        c.rect(&BoundingBox::new(cb.x1, cy - 0.015, cb.x2, cy + 0.015), 0.75);
    }
    for j in [8, 16] {
        let d = b(j);
        let (_, cy) = d.center();
        c.rect(&BoundingBox::new(d.x1, cy, d.x2, d.y2), 0.6);
    }
    if let Some((x, y, sigma, amp)) = lesion {
        c.blob(x, y, sigma, amp);
    }
    if let Some(side) = effusion_side {
        let angle = b(if side == 0 { 7 } else { 15 });
        let (x, y) = angle.center();
        c.blob(x, y, 0.4 * angle.width().min(angle.height()), 0.3);
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std).expect("positive std");
        for p in c.px.iter_mut() {
            *p += noise.sample(rng);
        }
    }
    for p in c.px.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Radiograph { height: cfg.image_size, width: cfg.image_size, pixels: c.px }
}

/// Draws `n` samples. Sample `i` depends only on `(seed, i, config)`.
/// The canonical layout with independent Gaussian noise on every coordinate,
/// repaired to valid boxes.
pub fn jitter_layout<R: Rng>(rng: &mut R, sigma: f32) -> [BoundingBox; NUM_REGIONS] {
    let mut boxes = canonical_layout();
    if sigma > 0.0 {
        let jitter = Normal::new(0.0f32, sigma).expect("positive std");
        for b in boxes.iter_mut() {
            let mut a = b.to_array();
            for v in a.iter_mut() {
                *v += jitter.sample(rng);
            }
            *b = BoundingBox::from(a).repaired(0.01);
        }
    }
    boxes
}

/// `n` fully detected jittered layouts, deterministic in `seed`.
pub fn synthetic_layouts(n: usize, sigma: f32, seed: u64) -> Vec<RegionSet> {
    (0..n).map(|i| RegionSet::fully_detected(jitter_layout(&mut sample_rng(seed, i), sigma))).collect()
}

pub fn generate_synthetic_cohort(n: usize, seed: u64, config: &SynthConfig) -> Result<Vec<CohortSample>> {
    if n == 0 {
        return Err(Error::Argument("cohort size must be at least 1".into()));
    }
    config.validate()?;
    (0..n).map(|i| generate_one(i, seed, config)).collect()
}

fn generate_one(index: usize, seed: u64, cfg: &SynthConfig) -> Result<CohortSample> {
    let mut rng = sample_rng(seed, index);
    let boxes = jitter_layout(&mut rng, cfg.jitter_sigma);

    let severity: f32 = rng.random();
    let zone = rng.random_range(0..LESION_ZONES.len());
    let abnormal_region = LESION_ZONES[zone];
    let zb = boxes[abnormal_region - 1];
    let lesion_x = zb.x1 + zb.width() * rng.random_range(0.3..0.7f32);
    let lesion_y = zb.y1 + zb.height() * rng.random_range(0.3..0.7f32);
    let sigma = 0.3 * zb.width().min(zb.height());
    let cardiomegaly = rng.random_bool(cfg.cardiomegaly_rate);
    let degenerative = rng.random_bool(cfg.degenerative_rate);
    let grade = grade_of(severity, cfg.abnormal_threshold);
    let side = usize::from(abnormal_region >= 10);
    let effusion = grade.is_some() && severity >= cfg.effusion_threshold;

    let image = render(
        &boxes,
        cfg,
        Some((lesion_x, lesion_y, sigma, cfg.lesion_amplitude * severity)),
        effusion.then_some(side),
        cardiomegaly,
        degenerative,
        &mut rng,
    );

    let template_ids: [u32; NUM_SENTENCES] = [
        grade.map_or(0, |g| (1 + 3 * zone + g) as u32),
        if effusion { 1 + side as u32 } else { 0 },
        cardiomegaly as u32,
        degenerative as u32,
        grade.map_or(0, |g| 1 + g as u32),
    ];
    let sentences = std::array::from_fn(|g| template_sentence(g, template_ids[g]).expect("valid template"));
    let group_abnormal = template_ids.map(|t| t > 0);

    let (clinical, clinical_risk) = draw_clinical(&mut rng, cfg.clinical_dim);
    let log_hazard = cfg.severity_effect * (severity as f64 - 0.5) + cfg.clinical_effect * clinical_risk;
    let rate = std::f64::consts::LN_2 / cfg.median_days * log_hazard.exp();
    let e: f64 = rng.sample(Exp1);
    let event_time = e / rate;
    let censored = rng.random_bool(cfg.censor_fraction);
    let time_days = if censored { event_time * rng.random::<f64>() } else { event_time };

    let sample = CohortSample {
        id: format!("s{index:06}"),
        image,
        regions: RegionSet::fully_detected(boxes),
        report: StructuredReport::new(sentences),
        survival: SurvivalRecord { time_days, event: !censored, clinical },
        meta: Some(SampleMeta {
            severity,
            abnormal_region,
            lesion_center: [lesion_x, lesion_y],
            group_abnormal,
            template_ids,
            clinical_risk: clinical_risk as f32,
        }),
    };
    sample.validate((cfg.image_size, cfg.image_size), cfg.clinical_dim)?;
    Ok(sample)
}
