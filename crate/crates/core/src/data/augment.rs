use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_margin, DataError, Image, Sample, BORDER_MARGIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Additive offset range.
    pub brightness: [f64; 2],
    /// Multiplicative scale range, applied about mid-gray.
    pub contrast: [f64; 2],
    /// Power-law exponent range.
    pub gamma: [f64; 2],
    /// Largest shift per axis, px.
    pub max_translation: i64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, brightness: [-0.1, 0.1], contrast: [0.8, 1.2], gamma: [0.8, 1.25], max_translation: 40 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    /// Draws parameters for `s`. The translation is drawn uniformly and then
    /// clamped per axis so every landmark keeps the border margin.
    pub fn sample<R: Rng + ?Sized>(&self, s: &Sample, rng: &mut R) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::identity();
        }
        let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let brightness = draw(self.brightness);
        let contrast = draw(self.contrast);
        let gamma = draw(self.gamma);
        let t = self.max_translation.max(0);
        let dx = rng.random_range(-t..=t);
        let dy = rng.random_range(-t..=t);
        let (min_x, min_y, max_x, max_y) = s.landmarks.bounds();
        let (w, h) = (s.image.width() as f64, s.image.height() as f64);
        let clamp = |d: i64, lo: f64, hi: f64, size: f64| {
            // allowed shift keeps lo + d >= margin and hi + d <= size - 1 - margin
            let min = (BORDER_MARGIN - lo).ceil() as i64;
            let max = (size - 1.0 - BORDER_MARGIN - hi).floor() as i64;
            if min > max { 0 } else { d.clamp(min, max) }
        };
        AugmentParams { brightness, contrast, gamma, dx: clamp(dx, min_x, max_x, w), dy: clamp(dy, min_y, max_y, h) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub dx: i64,
    pub dy: i64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { brightness: 0.0, contrast: 1.0, gamma: 1.0, dx: 0, dy: 0 }
    }

    fn is_identity_intensity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0 && self.gamma == 1.0
    }
}

/// Applies intensity then translation. Fails if either the input or the
/// shifted landmarks break the border margin.
pub fn apply_augmentation(s: &Sample, p: &AugmentParams) -> Result<Sample, DataError> {
    check_margin(&s.landmarks, s.image.width(), s.image.height())?;
    let mut image = if p.is_identity_intensity() {
        s.image.clone()
    } else {
        let mut img = s.image.clone();
        for v in img.data_mut() {
            let x = (*v as f64).clamp(0.0, 1.0).powf(p.gamma);
            *v = ((x - 0.5) * p.contrast + 0.5 + p.brightness).clamp(0.0, 1.0) as f32;
        }
        img
    };
    let mut landmarks = s.landmarks;
    if p.dx != 0 || p.dy != 0 {
        image = image.translated(p.dx, p.dy);
        landmarks = landmarks.translated(p.dx as f64, p.dy as f64);
        check_margin(&landmarks, image.width(), image.height())?;
    }
    Ok(Sample { image, landmarks, ..s.clone() })
}

pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample, DataError> {
    check_margin(&s.landmarks, s.image.width(), s.image.height())?;
    apply_augmentation(s, &cfg.sample(s, rng))
}

/// Subtracts the per-image mean.
pub fn mean_normalize(img: &Image) -> Image {
    let mean = img.mean();
    let data = img.data().iter().map(|&v| (v as f64 - mean) as f32).collect();
    Image::from_vec(img.width(), img.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Phase, IMAGE_SIZE};
    use crate::geometry::{measurements_from_landmarks, LandmarkSet};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(landmarks: LandmarkSet) -> Sample {
        let data = (0..IMAGE_SIZE * IMAGE_SIZE).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Sample {
            image: Image::from_vec(IMAGE_SIZE, IMAGE_SIZE, data),
            landmarks,
            patient_id: "P".into(),
            phase: Phase::ED,
            source_id: "s".into(),
        }
    }

    fn tight() -> LandmarkSet {
        // spans the full legal box in both axes
        LandmarkSet::from_pairs([[16.0, 16.0], [16.0, 60.0], [100.0, 61.0], [100.0, 200.0], [239.0, 201.0], [239.0, 239.0]])
    }

    #[test]
    fn identity_is_a_no_op() {
        let s = sample(tight());
        assert_eq!(apply_augmentation(&s, &AugmentParams::identity()).unwrap(), s);
    }

    #[test]
    fn rigid_shift_moves_landmarks_exactly() {
        let s = sample(LandmarkSet::from_pairs([[100.0, 100.0]; 6]));
        let p = AugmentParams { dx: 10, dy: -5, ..AugmentParams::identity() };
        let a = apply_augmentation(&s, &p).unwrap();
        for (o, n) in s.landmarks.points.iter().zip(&a.landmarks.points) {
            assert_eq!((n.x - o.x, n.y - o.y), (10.0, -5.0));
        }
        assert_eq!(a.image.get(110, 95), s.image.get(100, 100));
        assert_eq!(a.image.get(5, 255), 0.0);
    }

    #[test]
    fn intensity_only_leaves_landmarks_bitwise() {
        let s = sample(tight());
        let p = AugmentParams { brightness: 0.07, contrast: 1.15, gamma: 0.85, dx: 0, dy: 0 };
        let a = apply_augmentation(&s, &p).unwrap();
        assert_eq!(a.landmarks, s.landmarks);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.image, s.image);
    }

    #[test]
    fn margin_violation_is_an_error() {
        let s = sample(LandmarkSet::from_pairs([[10.0, 100.0]; 6]));
        assert!(matches!(augment(&s, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)), Err(DataError::Margin { .. })));
        let s = sample(LandmarkSet::from_pairs([[100.0, 100.0]; 6]));
        let p = AugmentParams { dx: -90, ..AugmentParams::identity() };
        assert!(apply_augmentation(&s, &p).is_err());
    }

    #[test]
    fn tight_sample_never_moves() {
        let s = sample(tight());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = AugmentConfig::default().sample(&s, &mut rng);
            assert_eq!((p.dx, p.dy), (0, 0));
        }
    }

    #[test]
    fn mean_normalize_properties() {
        let c = Image::from_vec(4, 4, vec![0.3; 16]);
        assert!(mean_normalize(&c).data().iter().all(|&v| v.abs() < 1e-7));
        let s = sample(tight());
        let once = mean_normalize(&s.image);
        assert!(once.mean().abs() < 1e-7);
        let twice = mean_normalize(&once);
        assert!(once.data().iter().zip(twice.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn augmentation_keeps_margin_and_lengths(seed in any::<u64>(), x in 16.0f64..200.0, y in 16.0f64..150.0, len in 1.0f64..80.0) {
            let lm = LandmarkSet::from_pairs([[x, y], [x + 10.0, y + len], [x, y + len], [x + 39.0, y + len + 10.0], [x, y], [x + 0.5, y + 0.25]]);
            let s = sample(lm);
            let before = measurements_from_landmarks(&s.landmarks).lengths();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(&s, &AugmentConfig::default(), &mut rng).unwrap();
            prop_assert!(a.landmarks.min_border_distance(IMAGE_SIZE, IMAGE_SIZE) >= BORDER_MARGIN);
            let after = measurements_from_landmarks(&a.landmarks).lengths();
            for (b, a) in before.iter().zip(after) {
                prop_assert!((b - a).abs() < 1e-9);
            }
        }
    }
}
