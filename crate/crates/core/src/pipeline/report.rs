use serde::{Deserialize, Serialize};

use super::evaluate::EvalReport;
use super::PipelineError;
use crate::geometry::Measurement;

pub const TOTAL_MPE_DEFINITION: &str =
    "total = mean over samples of the per-sample mean of the IVS, LVID and LVPW percent errors";
pub const REFERENCE_ROW_NAME: &str = "Intra-analyser";

/// One table row. Percentages are rounded to one decimal and both the text
/// and the JSON output are rendered from these values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub total: f64,
    pub ivs: f64,
    pub lvid: f64,
    pub lvpw: f64,
    pub params: Option<usize>,
    pub time_ms: Option<f64>,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

impl ReportRow {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            name: r.model.clone(),
            total: round1(r.total_mpe),
            ivs: round1(r.measurement(Measurement::Ivs).mpe),
            lvid: round1(r.measurement(Measurement::Lvid).mpe),
            lvpw: round1(r.measurement(Measurement::Lvpw).mpe),
            params: r.parameter_count,
            time_ms: r.latency_ms.map(round1),
        }
    }

    /// Human annotator agreement; no parameter count or latency.
    pub fn intra_analyser() -> Self {
        Self { name: REFERENCE_ROW_NAME.to_string(), total: 8.9, ivs: 8.0, lvid: 5.2, lvpw: 13.8, params: None, time_ms: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub total_mpe_definition: String,
    pub rows: Vec<ReportRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = format!("Mean percent error (%); {}\n", self.total_mpe_definition);
        s += &format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>10}  {:>9}\n", "Model", "Total", "IVS", "LVID", "LVPW", "Params", "Time (ms)");
        for r in &self.rows {
            let params = r.params.map_or("n/a".to_string(), |p| p.to_string());
            let time = r.time_ms.map_or("-".to_string(), |t| format!("{t:.1}"));
            s += &format!(
                "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>10}  {:>9}\n",
                r.name, r.total, r.ivs, r.lvid, r.lvpw, params, time
            );
        }
        s
    }
}

/// Builds the comparison table for one or more evaluation reports.
pub fn render_report(reports: &[EvalReport], include_reference: bool) -> Result<ComparisonTable, PipelineError> {
    if reports.is_empty() {
        return Err(PipelineError::Config("report needs at least one evaluation".into()));
    }
    let mut rows: Vec<ReportRow> = reports.iter().map(ReportRow::from_report).collect();
    if include_reference {
        rows.push(ReportRow::intra_analyser());
    }
    Ok(ComparisonTable { total_mpe_definition: TOTAL_MPE_DEFINITION.to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::evaluate::{evaluate_predictions, SamplePrediction};
    use crate::geometry::{LandmarkSet, PixelPoint};

    fn report() -> EvalReport {
        let lm = |l: [f64; 3]| {
            let ys = [50.0, 50.0 + l[0], 50.0 + l[0], 50.0 + l[0] + l[1], 50.0 + l[0] + l[1], 50.0 + l[0] + l[1] + l[2]];
            LandmarkSet::new(ys.map(|y| PixelPoint::new(90.0, y)))
        };
        let mut r = evaluate_predictions(
            "unet",
            vec![SamplePrediction { id: "a".into(), truth: lm([10.0, 20.0, 10.0]), predicted: lm([11.0, 21.0, 10.5]) }],
        );
        r.parameter_count = Some(7_700_000);
        r.latency_ms = Some(11.04);
        r
    }

    #[test]
    fn rows_follow_request() {
        let t = render_report(&[report()], false).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.to_text().lines().count(), 3);
        let t = render_report(&[report()], true).unwrap();
        assert_eq!(t.rows[1], ReportRow { name: "Intra-analyser".into(), total: 8.9, ivs: 8.0, lvid: 5.2, lvpw: 13.8, params: None, time_ms: None });
        let last = t.to_text().lines().last().unwrap().to_string();
        assert!(last.contains("n/a") && last.trim_end().ends_with('-'));
        assert!(render_report(&[], true).is_err());
    }

    #[test]
    fn text_and_json_agree() {
        let t = render_report(&[report()], true).unwrap();
        let json: ComparisonTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        let text = t.to_text();
        let row: Vec<&str> = text.lines().nth(2).unwrap().split_whitespace().collect();
        let r = &json.rows[0];
        assert_eq!(row[1..5].iter().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>(), [r.total, r.ivs, r.lvid, r.lvpw]);
        assert_eq!(row[5].parse::<usize>().unwrap(), r.params.unwrap());
        assert_eq!(row[6].parse::<f64>().unwrap(), r.time_ms.unwrap());
        assert_eq!((r.total, r.ivs, r.lvid, r.lvpw), (6.7, 10.0, 5.0, 5.0));
    }
}
