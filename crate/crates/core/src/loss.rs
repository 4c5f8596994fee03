//! Four-term training objective: heatmap RMSE, coordinate L2, relative
//! distance error and measurement-angle cosine.
//!
//! [`LossChain`] evaluates the objective from raw network scores and returns
//! the analytic gradient with respect to those scores, back through the
//! softmax and the center-of-mass decoder.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    denormalize_coords, measurements_from_landmarks, LandmarkSet, MeasurementSet, NormPoint,
    NUM_LANDMARKS, NUM_MEASUREMENTS,
};
use crate::heatmap::{
    normalize_to_probability, soft_center_of_mass, soft_center_of_mass_backward, softmax_backward,
    HeatmapError, HeatmapKind, HeatmapStack,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error("loss weights must be non-negative with at least one positive, got {0:?}")]
    InvalidWeights(LossWeights),
    #[error("non-finite loss: {0:?}")]
    NonFinite(LossBreakdown),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_heatmap: f64,
    pub w_coord: f64,
    pub w_dist: f64,
    pub w_angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_heatmap: 100.0, w_coord: 1.0, w_dist: 1.0, w_angle: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [self.w_heatmap, self.w_coord, self.w_dist, self.w_angle];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(LossError::InvalidWeights(*self));
        }
        Ok(())
    }
}

/// How the distance error of one measurement is scaled by its true length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `((d_hat - d) / d)^2`, unit-free.
    #[default]
    Relative,
    /// `(d_hat - d)^2 / d`.
    LengthScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub distance_form: DistanceForm,
    /// True lengths at or below this (pixels) are excluded from the distance and angle terms.
    pub min_true_length: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), distance_form: DistanceForm::Relative, min_true_length: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub coord: f64,
    pub dist: f64,
    pub angle: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(heatmap: f64, coord: f64, dist: f64, angle: f64, w: &LossWeights) -> Self {
        let total = w.w_heatmap * heatmap + w.w_coord * coord + w.w_dist * dist + w.w_angle * angle;
        Self { heatmap, coord, dist, angle, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.heatmap, self.coord, self.dist, self.angle, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        items.iter().fold(LossBreakdown::default(), |acc, b| LossBreakdown {
            heatmap: acc.heatmap + b.heatmap / n,
            coord: acc.coord + b.coord / n,
            dist: acc.dist + b.dist / n,
            angle: acc.angle + b.angle / n,
            total: acc.total + b.total / n,
        })
    }
}

/// Measurements skipped or penalized by fixed values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// True length too short; the measurement was left out of the distance and angle terms.
    pub excluded: [bool; NUM_MEASUREMENTS],
    /// Predicted vector degenerate; its angle term was fixed at 1.
    pub degenerate_prediction: [bool; NUM_MEASUREMENTS],
}

/// Root mean squared error over every entry of the two stacks.
pub fn heatmap_loss(label: &HeatmapStack, predicted: &HeatmapStack) -> Result<f64, LossError> {
    label.check_same_shape(predicted)?;
    let n = label.data().len() as f64;
    let sq: f64 = label.data().iter().zip(predicted.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n).sqrt())
}

/// Mean squared Euclidean distance over the six ordered points.
pub fn coord_loss(truth: &[NormPoint; NUM_LANDMARKS], predicted: &[NormPoint; NUM_LANDMARKS]) -> f64 {
    truth
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum::<f64>()
        / NUM_LANDMARKS as f64
}

fn distance_term(form: DistanceForm, truth: f64, predicted: f64) -> f64 {
    match form {
        DistanceForm::Relative => ((predicted - truth) / truth).powi(2),
        DistanceForm::LengthScaled => (predicted - truth).powi(2) / truth,
    }
}

/// Mean over valid measurements of the scaled squared length error.
pub fn distance_loss(truth: &MeasurementSet, predicted: &MeasurementSet, cfg: &LossConfig) -> (f64, LossFlags) {
    let mut flags = LossFlags::default();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (t, p)) in truth.iter().zip(predicted.iter()).enumerate() {
        if t.length <= cfg.min_true_length {
            flags.excluded[i] = true;
            continue;
        }
        sum += distance_term(cfg.distance_form, t.length, p.length);
        count += 1;
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, flags)
}

/// Mean over valid measurements of `1 - cos(truth, predicted)`.
pub fn angle_loss(truth: &MeasurementSet, predicted: &MeasurementSet, cfg: &LossConfig) -> (f64, LossFlags) {
    let mut flags = LossFlags::default();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (t, p)) in truth.iter().zip(predicted.iter()).enumerate() {
        if t.length <= cfg.min_true_length {
            flags.excluded[i] = true;
            continue;
        }
        count += 1;
        if p.degenerate {
            flags.degenerate_prediction[i] = true;
            sum += 1.0;
            continue;
        }
        let cos = (t.direction[0] * p.direction[0] + t.direction[1] * p.direction[1]).clamp(-1.0, 1.0);
        sum += 1.0 - cos;
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, flags)
}

/// Weighted sum of the four terms. Coordinates are normalized; measurement
/// sets are in pixels.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    label: &HeatmapStack,
    predicted: &HeatmapStack,
    truth_coords: &[NormPoint; NUM_LANDMARKS],
    predicted_coords: &[NormPoint; NUM_LANDMARKS],
    truth_ms: &MeasurementSet,
    predicted_ms: &MeasurementSet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossFlags), LossError> {
    cfg.weights.validate()?;
    let h = heatmap_loss(label, predicted)?;
    let c = coord_loss(truth_coords, predicted_coords);
    let (d, dflags) = distance_loss(truth_ms, predicted_ms, cfg);
    let (a, aflags) = angle_loss(truth_ms, predicted_ms, cfg);
    let flags = LossFlags { excluded: dflags.excluded, degenerate_prediction: aflags.degenerate_prediction };
    Ok((LossBreakdown::weighted(h, c, d, a, &cfg.weights), flags))
}

/// Supervision for one image on the raster the network predicts.
#[derive(Debug, Clone)]
pub struct LossTarget {
    pub heatmaps: HeatmapStack,
    /// Pixel coordinates on the same raster as `heatmaps`.
    pub landmarks: LandmarkSet,
}

/// Result of evaluating the objective on one raw prediction.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub breakdown: LossBreakdown,
    pub flags: LossFlags,
    pub probabilities: HeatmapStack,
    /// Decoded landmarks in pixels on the prediction raster.
    pub landmarks: LandmarkSet,
    /// Gradient of `breakdown.total` with respect to the raw scores; empty
    /// when not requested.
    pub grad_raw: Vec<f64>,
}

/// Raw scores -> softmax -> center of mass -> four-term loss, with gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossChain {
    pub cfg: LossConfig,
}

impl LossChain {
    pub fn new(cfg: LossConfig) -> Result<Self, LossError> {
        cfg.weights.validate()?;
        Ok(Self { cfg })
    }

    pub fn forward(&self, raw: &HeatmapStack, target: &LossTarget) -> Result<ChainOutput, LossError> {
        self.run(raw, target, false)
    }

    pub fn forward_backward(&self, raw: &HeatmapStack, target: &LossTarget) -> Result<ChainOutput, LossError> {
        self.run(raw, target, true)
    }

    fn run(&self, raw: &HeatmapStack, target: &LossTarget, with_grad: bool) -> Result<ChainOutput, LossError> {
        raw.check_same_shape(&target.heatmaps)?;
        let (h, w) = (raw.height(), raw.width());
        let prob = match raw.kind() {
            HeatmapKind::PredictedRaw => normalize_to_probability(raw)?,
            _ => return Err(HeatmapError::InvalidSpec("loss chain expects a raw prediction stack".into()).into()),
        };
        let coords = soft_center_of_mass(&prob);
        let truth_coords = target.landmarks.normalized(w, h);
        let predicted = LandmarkSet::new(coords.map(|p| denormalize_coords(p, w, h)));
        let truth_ms = measurements_from_landmarks(&target.landmarks);
        let pred_ms = measurements_from_landmarks(&predicted);

        let (breakdown, flags) =
            total_loss(&target.heatmaps, &prob, &truth_coords, &coords, &truth_ms, &pred_ms, &self.cfg)?;
        if !breakdown.is_finite() {
            return Err(LossError::NonFinite(breakdown));
        }
        let grad_raw = if with_grad {
            self.gradient(&prob, &target.heatmaps, &coords, &truth_coords, &truth_ms, &pred_ms, breakdown.heatmap)
        } else {
            Vec::new()
        };
        Ok(ChainOutput { breakdown, flags, probabilities: prob, landmarks: predicted, grad_raw })
    }

    #[allow(clippy::too_many_arguments)]
    fn gradient(
        &self,
        prob: &HeatmapStack,
        label: &HeatmapStack,
        coords: &[NormPoint; NUM_LANDMARKS],
        truth_coords: &[NormPoint; NUM_LANDMARKS],
        truth_ms: &MeasurementSet,
        pred_ms: &MeasurementSet,
        rmse: f64,
    ) -> Vec<f64> {
        let wts = &self.cfg.weights;
        let (h, w) = (prob.height(), prob.width());

        // d total / d normalized coordinates
        let mut grad_coords = [NormPoint::default(); NUM_LANDMARKS];
        for (g, (p, t)) in grad_coords.iter_mut().zip(coords.iter().zip(truth_coords)) {
            let s = wts.w_coord * 2.0 / NUM_LANDMARKS as f64;
            g.x = s * (p.x - t.x);
            g.y = s * (p.y - t.y);
        }

        // d total / d predicted measurement vectors (pixel space)
        let valid: Vec<usize> = (0..NUM_MEASUREMENTS)
            .filter(|&i| truth_ms.iter().nth(i).unwrap().length > self.cfg.min_true_length)
            .collect();
        if !valid.is_empty() {
            let n = valid.len() as f64;
            for &i in &valid {
                let t = truth_ms.iter().nth(i).unwrap();
                let p = pred_ms.iter().nth(i).unwrap();
                if p.degenerate {
                    continue;
                }
                let [vx, vy] = p.delta();
                let len = p.length;
                let d_len = match self.cfg.distance_form {
                    DistanceForm::Relative => 2.0 * (len - t.length) / (t.length * t.length),
                    DistanceForm::LengthScaled => 2.0 * (len - t.length) / t.length,
                } * wts.w_dist
                    / n;
                let mut gx = d_len * vx / len;
                let mut gy = d_len * vy / len;

                // 1 - cos: d/dv of -(t_hat . v / |v|) = -(t_hat - cos * v_hat) / |v|
                let (ux, uy) = (vx / len, vy / len);
                let [tx, ty] = t.direction;
                let cos = tx * ux + ty * uy;
                let s = -wts.w_angle / n / len;
                gx += s * (tx - cos * ux);
                gy += s * (ty - cos * uy);

                // v = end - start; pixel = denormalize(norm) scales by size/2
                let (a, b) = crate::geometry::Measurement::ALL[i].endpoints();
                let (sx, sy) = (w as f64 / 2.0, h as f64 / 2.0);
                grad_coords[b].x += gx * sx;
                grad_coords[b].y += gy * sy;
                grad_coords[a].x -= gx * sx;
                grad_coords[a].y -= gy * sy;
            }
        }

        let mut grad_prob = soft_center_of_mass_backward(h, w, &grad_coords);
        if rmse > 0.0 && wts.w_heatmap > 0.0 {
            let scale = wts.w_heatmap / (prob.data().len() as f64 * rmse);
            for ((g, p), l) in grad_prob.iter_mut().zip(prob.data()).zip(label.data()) {
                *g += scale * (p - l);
            }
        }
        softmax_backward(prob, &grad_prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelPoint;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ms(points: [[f64; 2]; 6]) -> MeasurementSet {
        measurements_from_landmarks(&LandmarkSet::from_pairs(points))
    }

    const BASE: [[f64; 2]; 6] = [[10.0, 10.0], [10.0, 20.0], [10.0, 20.0], [10.0, 40.0], [10.0, 40.0], [10.0, 50.0]];

    fn toy_stack(values: [f64; 4]) -> HeatmapStack {
        let data: Vec<f64> = (0..6).flat_map(|_| values).collect();
        HeatmapStack::from_vec(HeatmapKind::Label, 2, 2, data).unwrap()
    }

    #[test]
    fn heatmap_rmse_cases() {
        let h = toy_stack([0.1, 0.2, 0.3, 0.4]);
        assert_eq!(heatmap_loss(&h, &h).unwrap(), 0.0);
        let eps = 0.05;
        let p = toy_stack([0.1 + eps, 0.2 - eps, 0.3 + eps, 0.4 - eps]);
        assert_abs_diff_eq!(heatmap_loss(&h, &p).unwrap(), eps, epsilon = 1e-12);

        let mut swapped = h.clone();
        let c0 = h.channel(0).to_vec();
        let mut other = h.clone();
        other.channel_mut(1).copy_from_slice(&[0.4, 0.3, 0.2, 0.1]);
        swapped.channel_mut(0).copy_from_slice(other.channel(1));
        swapped.channel_mut(1).copy_from_slice(&c0);
        assert!(heatmap_loss(&other, &swapped).unwrap() > 0.0);

        let small = HeatmapStack::zeros(HeatmapKind::Label, 3, 2);
        assert!(matches!(heatmap_loss(&h, &small), Err(LossError::Heatmap(HeatmapError::ShapeMismatch { .. }))));
    }

    #[test]
    fn coord_loss_cases() {
        let c: [NormPoint; 6] = std::array::from_fn(|i| NormPoint::new(i as f64 * 0.1, -0.2));
        assert_eq!(coord_loss(&c, &c), 0.0);
        let mut off = c;
        off[2].x += 0.3;
        off[2].y += 0.4;
        assert_abs_diff_eq!(coord_loss(&c, &off), 0.25 / 6.0, epsilon = 1e-12);
        let mut perm = c;
        perm.swap(0, 1);
        assert!(coord_loss(&c, &perm) > 0.0);
    }

    #[test]
    fn distance_loss_cases() {
        let cfg = LossConfig::default();
        let t = ms(BASE);
        assert_eq!(distance_loss(&t, &t, &cfg).0, 0.0);

        // IVS true length 4, predicted 5
        let truth = ms([[0.0, 0.0], [0.0, 4.0], [0.0, 4.0], [0.0, 24.0], [0.0, 24.0], [0.0, 34.0]]);
        let pred = ms([[0.0, 0.0], [0.0, 5.0], [0.0, 4.0], [0.0, 24.0], [0.0, 24.0], [0.0, 34.0]]);
        assert_abs_diff_eq!(distance_loss(&truth, &pred, &cfg).0, 0.0625 / 3.0, epsilon = 1e-12);

        let scale = |m: [[f64; 2]; 6]| ms(m.map(|[x, y]| [10.0 * x, 10.0 * y]));
        let a = distance_loss(&truth, &pred, &cfg).0;
        let b = distance_loss(
            &scale([[0.0, 0.0], [0.0, 4.0], [0.0, 4.0], [0.0, 24.0], [0.0, 24.0], [0.0, 34.0]]),
            &scale([[0.0, 0.0], [0.0, 5.0], [0.0, 4.0], [0.0, 24.0], [0.0, 24.0], [0.0, 34.0]]),
            &cfg,
        )
        .0;
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);

        let alt = LossConfig { distance_form: DistanceForm::LengthScaled, ..cfg };
        assert_abs_diff_eq!(distance_loss(&truth, &pred, &alt).0, 0.25 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_loss_excludes_short_truth() {
        let mut pts = BASE;
        pts[1] = pts[0];
        let (loss, flags) = distance_loss(&ms(pts), &ms(BASE), &LossConfig::default());
        assert_eq!(flags.excluded, [true, false, false]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn angle_loss_cases() {
        let cfg = LossConfig::default();
        let t = ms(BASE);
        assert_eq!(angle_loss(&t, &t, &cfg).0, 0.0);

        let mut rev = BASE;
        rev.swap(2, 3);
        assert_abs_diff_eq!(angle_loss(&t, &ms(rev), &cfg).0, 2.0 / 3.0, epsilon = 1e-12);

        // magnitude blind
        let longer = ms([[10.0, 10.0], [10.0, 90.0], [10.0, 20.0], [10.0, 21.0], [10.0, 40.0], [10.0, 45.0]]);
        assert_abs_diff_eq!(angle_loss(&t, &longer, &cfg).0, 0.0, epsilon = 1e-12);

        let mut degenerate = BASE;
        degenerate[5] = degenerate[4];
        let (loss, flags) = angle_loss(&t, &ms(degenerate), &cfg);
        assert_abs_diff_eq!(loss, 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(flags.degenerate_prediction, [false, false, true]);
    }

    #[test]
    fn total_loss_projection_and_consistency() {
        let h = toy_stack([0.1, 0.2, 0.3, 0.4]);
        let p = toy_stack([0.2, 0.2, 0.3, 0.3]);
        let c: [NormPoint; 6] = std::array::from_fn(|i| NormPoint::new(0.1 * i as f64, 0.0));
        let mut c2 = c;
        c2[0].x += 0.2;
        let t = ms(BASE);
        let mut pred_pts = BASE;
        pred_pts[1] = [12.0, 21.0];
        let pm = ms(pred_pts);

        let perfect = total_loss(&h, &h, &c, &c, &t, &t, &LossConfig::default()).unwrap().0;
        assert_eq!(perfect, LossBreakdown::default());

        let only_heatmap = LossConfig { weights: LossWeights { w_heatmap: 1.0, w_coord: 0.0, w_dist: 0.0, w_angle: 0.0 }, ..Default::default() };
        let b = total_loss(&h, &p, &c, &c2, &t, &pm, &only_heatmap).unwrap().0;
        assert_eq!(b.total, heatmap_loss(&h, &p).unwrap());

        let cfg = LossConfig::default();
        let b = total_loss(&h, &p, &c, &c2, &t, &pm, &cfg).unwrap().0;
        let w = cfg.weights;
        let recomputed = w.w_heatmap * b.heatmap + w.w_coord * b.coord + w.w_dist * b.dist + w.w_angle * b.angle;
        assert!((recomputed - b.total).abs() < 1e-9);
        assert!(b.heatmap > 0.0 && b.coord > 0.0 && b.dist > 0.0 && b.angle > 0.0);
    }

    #[test]
    fn weights_are_validated() {
        let zero = LossWeights { w_heatmap: 0.0, w_coord: 0.0, w_dist: 0.0, w_angle: 0.0 };
        assert!(zero.validate().is_err());
        assert!(LossWeights { w_coord: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    fn random_problem(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (HeatmapStack, LossTarget) {
        let raw: Vec<f64> = (0..6 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let raw = HeatmapStack::from_vec(HeatmapKind::PredictedRaw, h, w, raw).unwrap();
        let mut label: Vec<f64> = (0..6 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        for c in label.chunks_mut(h * w) {
            let s: f64 = c.iter().sum();
            c.iter_mut().for_each(|v| *v /= s);
        }
        let landmarks = LandmarkSet::new(std::array::from_fn(|_| {
            PixelPoint::new(rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64))
        }));
        let heatmaps = HeatmapStack::from_vec(HeatmapKind::Label, h, w, label).unwrap();
        (raw, LossTarget { heatmaps, landmarks })
    }

    fn fd_relative_error(chain: &LossChain, raw: &HeatmapStack, target: &LossTarget) -> f64 {
        let analytic = chain.forward_backward(raw, target).unwrap().grad_raw;
        let eps = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..raw.data().len() {
            let mut plus = raw.clone();
            plus.data_mut()[i] += eps;
            let mut minus = raw.clone();
            minus.data_mut()[i] -= eps;
            let fd = (chain.forward(&plus, target).unwrap().breakdown.total
                - chain.forward(&minus, target).unwrap().breakdown.total)
                / (2.0 * eps);
            num += (fd - analytic[i]).powi(2);
            den += fd * fd;
        }
        (num / den).sqrt()
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = LossChain::new(LossConfig::default()).unwrap();
        let (raw, target) = random_problem(&mut rng, 8, 8);
        let err = fd_relative_error(&chain, &raw, &target);
        assert!(err < 1e-4, "relative error {err}");

        let alt = LossChain::new(LossConfig { distance_form: DistanceForm::LengthScaled, ..Default::default() }).unwrap();
        let (raw, target) = random_problem(&mut rng, 9, 12);
        let err = fd_relative_error(&alt, &raw, &target);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn chain_rejects_label_kind_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, target) = random_problem(&mut rng, 8, 8);
        let chain = LossChain::default();
        assert!(chain.forward(&target.heatmaps, &target).is_err());
    }
}
