use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::TOTAL_MPE_DEFINITION;
use super::{PipelineError, Predictor};
use crate::data::Manifest;
use crate::geometry::{measurements_from_landmarks, LandmarkSet, Measurement, PixelPoint, NUM_LANDMARKS};

/// Error statistics for one measurement over the evaluated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementStats {
    pub measurement: Measurement,
    /// Samples contributing (true length above zero).
    pub n: usize,
    /// Mean percent error.
    pub mpe: f64,
    /// Mean signed length error, px.
    pub bias_px: f64,
    /// Sample standard deviation of the signed length error, px.
    pub sd_px: f64,
    pub p50: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub truth: LandmarkSet,
    pub predicted: LandmarkSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub total_mpe_definition: String,
    pub n_samples: usize,
    pub total_mpe: f64,
    pub total_p50: f64,
    pub total_p95: f64,
    pub measurements: Vec<MeasurementStats>,
    pub parameter_count: Option<usize>,
    pub latency_ms: Option<f64>,
    /// Ascending per-sample endpoint RMSE.
    pub ranking: Vec<RankEntry>,
    /// Samples whose image could not be read.
    pub missing: Vec<String>,
    /// `sample:measurement` pairs left out because the true length is zero.
    pub excluded: Vec<String>,
    pub predictions: Vec<SamplePrediction>,
}

impl EvalReport {
    pub fn measurement(&self, m: Measurement) -> &MeasurementStats {
        &self.measurements[m.index()]
    }

    pub fn best(&self) -> Option<&RankEntry> {
        self.ranking.first()
    }

    pub fn median(&self) -> Option<&RankEntry> {
        self.ranking.get(self.ranking.len().saturating_sub(1) / 2)
    }

    pub fn worst(&self) -> Option<&RankEntry> {
        self.ranking.last()
    }
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values; NaN when empty.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Root mean squared endpoint distance over the six landmarks.
pub fn rmse(truth: &LandmarkSet, predicted: &LandmarkSet) -> f64 {
    let sq: f64 = truth.points.iter().zip(&predicted.points).map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sum();
    (sq / NUM_LANDMARKS as f64).sqrt()
}

/// Samples sorted by ascending RMSE; ties keep id order.
pub fn rank_by_rmse(predictions: &[SamplePrediction]) -> Vec<RankEntry> {
    let mut out: Vec<RankEntry> =
        predictions.iter().map(|p| RankEntry { id: p.id.clone(), rmse: rmse(&p.truth, &p.predicted) }).collect();
    out.sort_by(|a, b| a.rmse.total_cmp(&b.rmse).then_with(|| a.id.cmp(&b.id)));
    out
}

/// Point-wise midpoint of two annotations of the same image.
pub fn median_of_labels(a: &LandmarkSet, b: &LandmarkSet) -> LandmarkSet {
    let mut points = [PixelPoint::default(); NUM_LANDMARKS];
    for (i, p) in points.iter_mut().enumerate() {
        *p = PixelPoint::new((a.points[i].x + b.points[i].x) / 2.0, (a.points[i].y + b.points[i].y) / 2.0);
    }
    LandmarkSet::new(points)
}

/// Metrics over already computed predictions.
pub fn evaluate_predictions(model: &str, predictions: Vec<SamplePrediction>) -> EvalReport {
    let mut pct: [Vec<f64>; 3] = Default::default();
    let mut signed: [Vec<f64>; 3] = Default::default();
    let mut per_sample = Vec::with_capacity(predictions.len());
    let mut excluded = Vec::new();
    for p in &predictions {
        let t = measurements_from_landmarks(&p.truth);
        let q = measurements_from_landmarks(&p.predicted);
        let mut errors = Vec::with_capacity(3);
        for m in Measurement::ALL {
            let (d, dh) = (t.get(m).length, q.get(m).length);
            if !(d > 0.0) {
                excluded.push(format!("{}:{}", p.id, m));
                continue;
            }
            let e = 100.0 * (dh - d).abs() / d;
            pct[m.index()].push(e);
            signed[m.index()].push(dh - d);
            errors.push(e);
        }
        if !errors.is_empty() {
            per_sample.push(mean(&errors));
        }
    }
    let measurements = Measurement::ALL
        .iter()
        .map(|&m| {
            let (e, s) = (&pct[m.index()], &signed[m.index()]);
            MeasurementStats {
                measurement: m,
                n: e.len(),
                mpe: mean(e),
                bias_px: mean(s),
                sd_px: sample_sd(s),
                p50: percentile(e, 50.0),
                p95: percentile(e, 95.0),
            }
        })
        .collect();
    EvalReport {
        model: model.to_string(),
        total_mpe_definition: TOTAL_MPE_DEFINITION.to_string(),
        n_samples: predictions.len(),
        total_mpe: mean(&per_sample),
        total_p50: percentile(&per_sample, 50.0),
        total_p95: percentile(&per_sample, 95.0),
        measurements,
        parameter_count: None,
        latency_ms: None,
        ranking: rank_by_rmse(&predictions),
        missing: Vec::new(),
        excluded,
        predictions,
    }
}

/// Predicts every sample of `manifest`. Unreadable images are listed in
/// `missing` and skipped; prediction failures abort.
pub fn evaluate(predictor: &mut dyn Predictor, manifest: &Manifest) -> Result<EvalReport, PipelineError> {
    if manifest.is_empty() {
        return Err(PipelineError::Config("evaluation manifest is empty".into()));
    }
    let mut predictions = Vec::with_capacity(manifest.len());
    let mut missing = Vec::new();
    let mut elapsed = 0.0;
    for (i, record) in manifest.records.iter().enumerate() {
        let sample = match manifest.load_sample(i) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping {}: {e}", record.id());
                missing.push(record.id().to_string());
                continue;
            }
        };
        let clock = Instant::now();
        let predicted = predictor.predict(&sample)?;
        elapsed += clock.elapsed().as_secs_f64();
        predictions.push(SamplePrediction { id: record.id().to_string(), truth: sample.landmarks, predicted });
    }
    if predictions.is_empty() {
        return Err(PipelineError::Config(format!("none of the {} images could be read", manifest.len())));
    }
    let n = predictions.len();
    let mut report = evaluate_predictions(&predictor.name(), predictions);
    report.parameter_count = predictor.parameter_count();
    report.latency_ms = Some(1000.0 * elapsed / n as f64);
    report.missing = missing;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Vertical calipers with the given IVS/LVID/LVPW lengths starting at `y0`.
    fn calipers(x: f64, y0: f64, [ivs, lvid, lvpw]: [f64; 3]) -> LandmarkSet {
        let ys = [y0, y0 + ivs, y0 + ivs, y0 + ivs + lvid, y0 + ivs + lvid, y0 + ivs + lvid + lvpw];
        LandmarkSet::new(ys.map(|y| PixelPoint::new(x, y)))
    }

    fn pred(id: &str, t: [f64; 3], p: [f64; 3]) -> SamplePrediction {
        SamplePrediction { id: id.into(), truth: calipers(100.0, 50.0, t), predicted: calipers(100.0, 50.0, p) }
    }

    #[test]
    fn hand_computed_single_sample() {
        let r = evaluate_predictions("m", vec![pred("a", [10.0, 20.0, 10.0], [11.0, 21.0, 10.5])]);
        let mpe: Vec<f64> = r.measurements.iter().map(|m| m.mpe).collect();
        for (got, want) in mpe.iter().zip([10.0, 5.0, 5.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((r.total_mpe - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.measurement(Measurement::Lvid).bias_px, 1.0);
        assert_eq!(r.measurement(Measurement::Lvpw).sd_px, 0.0);
        assert_eq!(r.measurement(Measurement::Ivs).p95, r.measurement(Measurement::Ivs).p50);
    }

    #[test]
    fn bias_sd_and_percentiles_over_samples() {
        let r = evaluate_predictions(
            "m",
            vec![
                pred("a", [10.0, 20.0, 10.0], [11.0, 20.0, 10.0]),
                pred("b", [10.0, 20.0, 10.0], [8.0, 20.0, 10.0]),
                pred("c", [20.0, 20.0, 10.0], [23.0, 20.0, 10.0]),
            ],
        );
        let ivs = r.measurement(Measurement::Ivs);
        // percent errors 10, 20, 15; signed -2, 1, 3
        assert!((ivs.mpe - 15.0).abs() < 1e-12);
        assert!((ivs.bias_px - 2.0 / 3.0).abs() < 1e-12);
        let sd = ((1.0f64 / 3.0).powi(2) + (8.0f64 / 3.0).powi(2) + (7.0f64 / 3.0).powi(2)) / 2.0;
        assert!((ivs.sd_px - sd.sqrt()).abs() < 1e-12);
        assert!((ivs.p50 - 15.0).abs() < 1e-12);
        assert!((ivs.p95 - 19.5).abs() < 1e-12);
        // every sample has all three, so total equals the measurement mean
        let mean_of_three = r.measurements.iter().map(|m| m.mpe).sum::<f64>() / 3.0;
        assert!((r.total_mpe - mean_of_three).abs() < 1e-12);
        assert!(r.total_p50 <= r.total_p95);
    }

    #[test]
    fn perfect_and_scale_invariant() {
        let r = evaluate_predictions("m", vec![pred("a", [10.0, 40.0, 12.0], [10.0, 40.0, 12.0])]);
        assert_eq!(r.total_mpe, 0.0);
        let a = evaluate_predictions("m", vec![pred("a", [10.0, 40.0, 12.0], [12.0, 37.0, 11.0])]);
        let b = evaluate_predictions("m", vec![pred("a", [20.0, 80.0, 24.0], [24.0, 74.0, 22.0])]);
        assert!((a.total_mpe - b.total_mpe).abs() < 1e-12);
    }

    #[test]
    fn zero_length_truth_is_excluded() {
        let r = evaluate_predictions("m", vec![pred("a", [0.0, 20.0, 10.0], [1.0, 22.0, 10.0])]);
        assert_eq!(r.excluded, vec!["a:IVS".to_string()]);
        assert_eq!(r.measurement(Measurement::Ivs).n, 0);
        assert!((r.total_mpe - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_contract() {
        let t = calipers(100.0, 50.0, [10.0, 20.0, 10.0]);
        let mut off = t;
        off.points[2] = off.points[2].translated(3.0, 4.0);
        assert!((rmse(&t, &off) - (25.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let same = |id: &str| SamplePrediction { id: id.into(), truth: t, predicted: t };
        let ranked = rank_by_rmse(&[same("c"), same("a"), same("b")]);
        assert_eq!(ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        let mixed = evaluate_predictions("m", vec![same("z"), SamplePrediction { id: "y".into(), truth: t, predicted: off }, same("x")]);
        assert!(mixed.worst().unwrap().rmse >= mixed.median().unwrap().rmse);
        assert!(mixed.median().unwrap().rmse >= mixed.best().unwrap().rmse);
        assert_eq!(mixed.worst().unwrap().id, "y");
    }

    #[test]
    fn midpoint_labels() {
        let a = LandmarkSet::from_pairs([[0.0, 0.0]; 6]);
        let b = LandmarkSet::from_pairs([[2.0, 4.0]; 6]);
        assert_eq!(median_of_labels(&a, &b), LandmarkSet::from_pairs([[1.0, 2.0]; 6]));
        assert_eq!(median_of_labels(&a, &b), median_of_labels(&b, &a));
        assert_eq!(median_of_labels(&b, &b), b);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 95.0), 5.0);
        assert!(percentile(&[], 50.0).is_nan());
    }
}
