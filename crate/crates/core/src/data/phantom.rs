use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Manifest, ManifestRecord};
use super::{check_margin, derive_seed, save_png16, DataError, Image, Phase, Sample, IMAGE_SIZE};
use crate::geometry::{LandmarkSet, PixelPoint};

/// Geometry and texture of one synthetic long-axis frame.
///
/// The tissue bands run along `axis_angle_deg` (0 = horizontal). The
/// measurement line is the band normal through `anchor`, which sits in the
/// middle of the cavity. Septum is on the near (smaller `s`) side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub septum_thickness: f64,
    pub cavity_diameter: f64,
    pub posterior_wall_thickness: f64,
    pub axis_angle_deg: f64,
    pub anchor: PixelPoint,
    pub wall_intensity: f64,
    pub cavity_intensity: f64,
    /// Correlation length of the speckle field, px.
    pub speckle_scale: f64,
    pub blur_sigma: f64,
    /// Along-band offset of the bright leaflet tip from the measurement line, px.
    pub leaflet_offset: f64,
    pub fan_apex: PixelPoint,
    pub fan_half_angle_deg: f64,
    pub fan_radius: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            septum_thickness: 18.0,
            cavity_diameter: 72.0,
            posterior_wall_thickness: 18.0,
            axis_angle_deg: 0.0,
            anchor: PixelPoint::new(128.0, 128.0),
            wall_intensity: 0.7,
            cavity_intensity: 0.08,
            speckle_scale: 1.0,
            blur_sigma: 1.0,
            leaflet_offset: 30.0,
            fan_apex: PixelPoint::new(127.5, -12.0),
            fan_half_angle_deg: 42.0,
            fan_radius: 280.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn unit_vectors(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.axis_angle_deg.to_radians().sin_cos();
        ([c, s], [-s, c])
    }

    /// Signed offsets of the six landmarks from the anchor along the band normal.
    fn offsets(&self) -> [f64; 6] {
        let half = self.cavity_diameter / 2.0;
        [
            -half - self.septum_thickness,
            -half,
            -half,
            half,
            half,
            half + self.posterior_wall_thickness,
        ]
    }

    /// Analytic landmark positions on the band boundaries.
    pub fn landmarks(&self) -> LandmarkSet {
        let (_, n) = self.unit_vectors();
        let a = self.anchor;
        LandmarkSet::new(self.offsets().map(|s| PixelPoint::new(a.x + s * n[0], a.y + s * n[1])))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("septum_thickness", self.septum_thickness),
            ("cavity_diameter", self.cavity_diameter),
            ("posterior_wall_thickness", self.posterior_wall_thickness),
            ("speckle_scale", self.speckle_scale),
            ("fan_radius", self.fan_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DataError::Phantom(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("wall_intensity", self.wall_intensity), ("cavity_intensity", self.cavity_intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Phantom(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.blur_sigma >= 0.0) || !self.axis_angle_deg.is_finite() || !self.anchor.is_finite() {
            return Err(DataError::Phantom("blur, angle and anchor must be finite".into()));
        }
        if !(self.fan_half_angle_deg > 0.0 && self.fan_half_angle_deg < 90.0) {
            return Err(DataError::Phantom(format!("fan half angle must be in (0, 90), got {}", self.fan_half_angle_deg)));
        }
        check_margin(&self.landmarks(), IMAGE_SIZE, IMAGE_SIZE)
    }

    fn tissue(&self, s: f64, t: f64) -> f64 {
        let half = self.cavity_diameter / 2.0;
        let septum_top = -half - self.septum_thickness;
        let wall_end = half + self.posterior_wall_thickness;
        let leaflet = {
            // thin bright tip reaching from the posterior wall into the cavity
            let dt = (t - self.leaflet_offset) / 4.0;
            let ds = (s - half * 0.55) / (half * 0.45);
            if dt * dt + ds * ds < 1.0 { 0.55 } else { 0.0 }
        };
        if s < septum_top - 28.0 {
            0.4
        } else if s < septum_top {
            0.1
        } else if s < -half {
            self.wall_intensity
        } else if s < half {
            (self.cavity_intensity + leaflet).min(1.0)
        } else if s < wall_end {
            self.wall_intensity
        } else if s < wall_end + 7.0 {
            (self.wall_intensity + 0.2).min(1.0)
        } else {
            0.3
        }
    }

    fn in_fan(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.fan_apex.x, y - self.fan_apex.y);
        dy > 0.0 && dx.hypot(dy) <= self.fan_radius && dx.atan2(dy).abs().to_degrees() <= self.fan_half_angle_deg
    }
}

/// Renders one frame with analytic landmarks.
pub fn generate_phantom(p: &PhantomParams, patient_id: &str, phase: Phase, source_id: &str) -> Result<Sample, DataError> {
    p.validate()?;
    let n = IMAGE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut re = Image::new(n, n);
    let mut im = Image::new(n, n);
    for v in re.data_mut().iter_mut().chain(im.data_mut().iter_mut()) {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    let re = re.gaussian_blur(p.speckle_scale);
    let im = im.gaussian_blur(p.speckle_scale);
    let power = re.data().iter().zip(im.data()).map(|(a, b)| (a * a + b * b) as f64).sum::<f64>() / (n * n) as f64;
    let inv_rms = 1.0 / power.sqrt();

    let (u, nn) = p.unit_vectors();
    let mut img = Image::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - p.anchor.x, y as f64 - p.anchor.y);
            let t = dx * u[0] + dy * u[1];
            let s = dx * nn[0] + dy * nn[1];
            let i = y * n + x;
            let amp = (re.data()[i] as f64).hypot(im.data()[i] as f64) * inv_rms;
            img.data_mut()[i] = (p.tissue(s, t) * amp) as f32;
        }
    }
    let mut img = img.gaussian_blur(p.blur_sigma);
    for y in 0..n {
        for x in 0..n {
            let v = if p.in_fan(x as f64, y as f64) { img.get(x, y).clamp(0.0, 1.0) } else { 0.0 };
            img.set(x, y, v);
        }
    }
    Ok(Sample { image: img, landmarks: p.landmarks(), patient_id: patient_id.to_string(), phase, source_id: source_id.to_string() })
}

/// Sampling ranges for per-patient phantom parameters. Each pair is `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRanges {
    pub septum_thickness: [f64; 2],
    pub cavity_diameter: [f64; 2],
    pub posterior_wall_thickness: [f64; 2],
    pub axis_angle_deg: [f64; 2],
    pub anchor_x: [f64; 2],
    pub anchor_y: [f64; 2],
    pub wall_intensity: [f64; 2],
    pub cavity_intensity: [f64; 2],
    pub speckle_scale: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub leaflet_offset: [f64; 2],
    /// End-systolic cavity as a fraction of the patient's end-diastolic base.
    pub es_cavity_ratio: [f64; 2],
    /// End-systolic wall thickening factor.
    pub es_wall_ratio: [f64; 2],
    /// Relative per-frame jitter of the end-diastolic cavity.
    pub ed_cavity_jitter: f64,
    pub angle_jitter_deg: f64,
    pub anchor_jitter: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            septum_thickness: [14.0, 22.0],
            cavity_diameter: [62.0, 84.0],
            posterior_wall_thickness: [14.0, 22.0],
            axis_angle_deg: [-18.0, 18.0],
            anchor_x: [110.0, 146.0],
            anchor_y: [118.0, 138.0],
            wall_intensity: [0.55, 0.8],
            cavity_intensity: [0.03, 0.12],
            speckle_scale: [0.8, 1.5],
            blur_sigma: [0.8, 1.6],
            leaflet_offset: [28.0, 32.0],
            es_cavity_ratio: [0.62, 0.78],
            es_wall_ratio: [1.1, 1.3],
            ed_cavity_jitter: 0.03,
            angle_jitter_deg: 2.0,
            anchor_jitter: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_patients: usize,
    /// May be fractional; the corpus holds `round(n_patients * samples_per_patient)` frames.
    pub samples_per_patient: f64,
    pub seed: u64,
    pub ranges: PhantomRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_patients: 309, samples_per_patient: 585.0 / 309.0, seed: 0, ranges: PhantomRanges::default() }
    }
}

/// Planned frame: its identity and full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    pub index: usize,
    pub patient_id: String,
    pub phase: Phase,
    pub source_id: String,
    pub params: PhantomParams,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

impl CorpusConfig {
    pub fn total_samples(&self) -> usize {
        (self.n_patients as f64 * self.samples_per_patient).round() as usize
    }

    /// Frame counts per patient: an even share plus one extra for a seeded
    /// subset of patients.
    fn counts(&self) -> Result<Vec<usize>, DataError> {
        if self.n_patients == 0 {
            return Err(DataError::Phantom("corpus needs at least one patient".into()));
        }
        let total = self.total_samples();
        if !(self.samples_per_patient >= 1.0) || total < self.n_patients {
            return Err(DataError::Phantom(format!("samples_per_patient must be at least 1, got {}", self.samples_per_patient)));
        }
        let base = total / self.n_patients;
        let extra = total - base * self.n_patients;
        let mut order: Vec<usize> = (0..self.n_patients).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut counts = vec![base; self.n_patients];
        for &p in &order[..extra] {
            counts[p] += 1;
        }
        Ok(counts)
    }

    /// Deterministic parameters for every frame of the corpus.
    pub fn plan(&self) -> Result<Vec<PlannedSample>, DataError> {
        let r = &self.ranges;
        let counts = self.counts()?;
        let mut out = Vec::with_capacity(self.total_samples());
        for (patient, &count) in counts.iter().enumerate() {
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ 0x5041_5449_454E_5453, patient as u64));
            let base = PhantomParams {
                septum_thickness: uniform(&mut prng, r.septum_thickness),
                cavity_diameter: uniform(&mut prng, r.cavity_diameter),
                posterior_wall_thickness: uniform(&mut prng, r.posterior_wall_thickness),
                axis_angle_deg: uniform(&mut prng, r.axis_angle_deg),
                anchor: PixelPoint::new(uniform(&mut prng, r.anchor_x), uniform(&mut prng, r.anchor_y)),
                wall_intensity: uniform(&mut prng, r.wall_intensity),
                cavity_intensity: uniform(&mut prng, r.cavity_intensity),
                speckle_scale: uniform(&mut prng, r.speckle_scale),
                blur_sigma: uniform(&mut prng, r.blur_sigma),
                leaflet_offset: uniform(&mut prng, r.leaflet_offset),
                ..PhantomParams::default()
            };
            let patient_id = format!("P{:04}", patient + 1);
            for k in 0..count {
                let index = out.len();
                let seed = derive_seed(self.seed, index as u64);
                let mut srng = ChaCha8Rng::seed_from_u64(seed);
                let phase = if k % 2 == 0 { Phase::ED } else { Phase::ES };
                let j = r.ed_cavity_jitter;
                let cavity_factor = uniform(&mut srng, [1.0 - j, 1.0 + j]);
                let es_cavity = uniform(&mut srng, r.es_cavity_ratio);
                let es_wall = uniform(&mut srng, r.es_wall_ratio);
                let mut p = base.clone();
                p.seed = seed;
                p.axis_angle_deg += uniform(&mut srng, [-r.angle_jitter_deg, r.angle_jitter_deg]);
                p.anchor = p.anchor.translated(
                    uniform(&mut srng, [-r.anchor_jitter, r.anchor_jitter]),
                    uniform(&mut srng, [-r.anchor_jitter, r.anchor_jitter]),
                );
                match phase {
                    Phase::ED => p.cavity_diameter *= cavity_factor,
                    Phase::ES => {
                        p.cavity_diameter *= es_cavity;
                        p.septum_thickness *= es_wall;
                        p.posterior_wall_thickness *= es_wall;
                    }
                }
                out.push(PlannedSample {
                    index,
                    patient_id: patient_id.clone(),
                    phase,
                    source_id: format!("phantom:{}:{}", self.seed, index),
                    params: p,
                });
            }
        }
        Ok(out)
    }
}

/// Renders the whole corpus into `out_dir/images` and writes `out_dir/manifest.jsonl`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest, DataError> {
    let plan = cfg.plan()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let mut records = Vec::with_capacity(plan.len());
    for item in &plan {
        let sample = generate_phantom(&item.params, &item.patient_id, item.phase, &item.source_id)?;
        let rel = format!("images/{:05}_{}_{}.png", item.index, item.patient_id, item.phase);
        save_png16(&out_dir.join(&rel), &sample.image)?;
        records.push(ManifestRecord::new(rel, &sample));
        log::debug!("rendered {} ({}/{})", item.source_id, item.index + 1, plan.len());
    }
    let manifest = Manifest::new(out_dir.to_path_buf(), records);
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}
