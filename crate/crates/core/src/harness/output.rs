use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::certification::CertificationRecord;
use crate::error::{NdcError, Result};

pub const RECORDS_HEADER: [&str; 7] = ["point_id", "true_label", "pred", "abstain", "pa_lower", "radius", "wall_ms"];

/// `%.9g`: nine significant digits, trailing zeros trimmed, exponent form outside `[1e-5, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let fixed = format!("{v:.*}", (8 - exp).max(0) as usize);
    if fixed.contains('.') {
        fixed.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        fixed
    }
}

/// Aggregate of a certification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    /// Radius grid in units of the data scale.
    pub radius_multiples: Vec<f64>,
    /// Radius grid in input units.
    pub radii: Vec<f64>,
    /// Fraction of points that are correct and certified at each radius; abstentions count as failures.
    pub certified_accuracy: Vec<f64>,
    pub clean_accuracy: f64,
    pub abstain_rate: f64,
    /// Mean certified radius, with incorrect and abstained points counted as 0.
    pub mean_radius: f64,
    pub evaluator_calls: u64,
    pub n_points: usize,
}

impl ResultTable {
    pub fn from_records(records: &[CertificationRecord], radius_multiples: &[f64], scale: f64, evaluator_calls: u64) -> Self {
        let n = records.len().max(1) as f64;
        let radii: Vec<f64> = radius_multiples.iter().map(|m| m * scale).collect();
        let certified_accuracy: Vec<f64> =
            radii.iter().map(|&r| records.iter().filter(|rec| rec.certified_at(r)).count() as f64 / n).collect();
        assert!(
            certified_accuracy.windows(2).all(|w| w[1] <= w[0]),
            "certified accuracy must be nonincreasing in the radius"
        );
        let correct = records.iter().filter(|r| r.pred == Some(r.true_label));
        Self {
            radius_multiples: radius_multiples.to_vec(),
            radii,
            certified_accuracy,
            clean_accuracy: correct.clone().count() as f64 / n,
            abstain_rate: records.iter().filter(|r| r.abstained()).count() as f64 / n,
            mean_radius: correct.map(|r| r.radius).sum::<f64>() / n,
            evaluator_calls,
            n_points: records.len(),
        }
    }
}

fn csv_err(e: csv::Error) -> NdcError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NdcError::Io(io),
        other => NdcError::arg(format!("CSV output: {other:?}")),
    }
}

/// Per-point rows; an abstention is written as `pred = -1`, `abstain = 1`.
pub fn write_records_csv(records: &[CertificationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(RECORDS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.point_id.to_string(),
            r.true_label.to_string(),
            r.pred.map_or("-1".into(), |p| p.to_string()),
            u8::from(r.abstained()).to_string(),
            format_sig9(r.p_a_lower),
            format_sig9(r.radius),
            format_sig9(r.wall_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per radius-grid entry; run-level figures repeat on every row.
pub fn write_table_csv(table: &ResultTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "radius_multiple",
        "radius",
        "certified_accuracy",
        "clean_accuracy",
        "abstain_rate",
        "mean_radius",
        "evaluator_calls",
        "n_points",
    ])
    .map_err(csv_err)?;
    for i in 0..table.radii.len() {
        w.write_record([
            format_sig9(table.radius_multiples[i]),
            format_sig9(table.radii[i]),
            format_sig9(table.certified_accuracy[i]),
            format_sig9(table.clean_accuracy),
            format_sig9(table.abstain_rate),
            format_sig9(table.mean_radius),
            table.evaluator_calls.to_string(),
            table.n_points.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `dir/name.csv` → `dir/name_aggregate.csv`.
pub fn aggregate_path(records_path: &Path) -> PathBuf {
    let stem = records_path.file_stem().and_then(|s| s.to_str()).unwrap_or("certify");
    records_path.with_file_name(format!("{stem}_aggregate.csv"))
}

pub fn write_json(value: &impl Serialize, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| NdcError::arg(format!("JSON output: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.375118756030159), "0.375118756");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(0.00001234567891), "1.23456789e-05");
        assert_eq!(format_sig9(0.0001234567891), "0.000123456789");
        assert_eq!(format_sig9(0.9999999999), "1");
    }

    fn rec(id: u64, label: usize, pred: Option<usize>, radius: f64) -> CertificationRecord {
        CertificationRecord { point_id: id, true_label: label, pred, p_a_lower: 0.9, radius, wall_ms: 0.0 }
    }

    #[test]
    fn table_aggregates() {
        let records = [rec(0, 1, Some(1), 0.6), rec(1, 0, Some(1), 0.9), rec(2, 0, None, 0.0), rec(3, 0, Some(0), 0.2)];
        let t = ResultTable::from_records(&records, &[0.0, 0.25, 0.5], 2.0, 17);
        assert_eq!(t.radii, vec![0.0, 0.5, 1.0]);
        assert_eq!(t.certified_accuracy, vec![0.5, 0.25, 0.0]);
        assert_eq!(t.clean_accuracy, 0.5);
        assert_eq!(t.abstain_rate, 0.25);
        assert!((t.mean_radius - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        write_records_csv(&[rec(0, 1, Some(1), 0.6), rec(1, 0, None, 0.0)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "point_id,true_label,pred,abstain,pa_lower,radius,wall_ms\n0,1,1,0,0.9,0.6,0\n1,0,-1,1,0.9,0,0\n"
        );
        assert_eq!(aggregate_path(&p), dir.path().join("out_aggregate.csv"));
    }
}
