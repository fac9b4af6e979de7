use std::path::Path;

use crate::denoiser::{GaussianMixtureSpec, LabeledSample};
use crate::error::{NdcError, Result};
use crate::rng;

const TRAIN: u64 = 0x7472;
const TEST: u64 = 0x7465;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn draw(gm: &GaussianMixtureSpec, split: u64, i: usize, seed: u64) -> LabeledSample {
    let mut r = rng::substream(seed, &[split, i as u64]);
    let label = gm.sample_label(&mut r);
    LabeledSample { x: gm.sample_class(label, &mut r), label }
}

/// I.i.d. draws from the mixture; sample `i` of each split has its own substream.
pub fn gen_dataset(gm: &GaussianMixtureSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    gm.validate()?;
    Ok(Dataset {
        train: (0..n_train).map(|i| draw(gm, TRAIN, i, seed)).collect(),
        test: (0..n_test).map(|i| draw(gm, TEST, i, seed)).collect(),
    })
}

fn csv_err(e: csv::Error) -> NdcError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NdcError::Io(io),
        other => NdcError::arg(format!("dataset CSV: {other:?}")),
    }
}

/// Writes `label,x0,x1,…` rows; floats use the shortest exact representation.
pub fn write_samples_csv(samples: &[LabeledSample], path: impl AsRef<Path>) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        if s.x.len() != dim {
            return Err(NdcError::DimensionMismatch { expected: dim, got: s.x.len() });
        }
        let mut row = vec![s.label.to_string()];
        row.extend(s.x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| NdcError::arg(format!("dataset row {}: bad {what}", line + 1));
        let label = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("label"))?;
        let x = rec.iter().skip(1).map(|v| v.parse::<f64>().map_err(|_| bad("coordinate"))).collect::<Result<Vec<_>>>()?;
        out.push(LabeledSample { x, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_round_trips() {
        let gm = GaussianMixtureSpec::two_class(3, 6.0, 1.0).unwrap();
        let a = gen_dataset(&gm, 50, 20, 3).unwrap();
        assert_eq!(a, gen_dataset(&gm, 50, 20, 3).unwrap());
        assert_ne!(a, gen_dataset(&gm, 50, 20, 4).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_samples_csv(&a.train, &p).unwrap();
        write_samples_csv(&gen_dataset(&gm, 50, 20, 3).unwrap().train, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(read_samples_csv(&p).unwrap(), a.train);
    }

    #[test]
    fn prefix_stability() {
        let gm = GaussianMixtureSpec::two_class(2, 6.0, 1.0).unwrap();
        let small = gen_dataset(&gm, 5, 5, 1).unwrap();
        let big = gen_dataset(&gm, 50, 9, 1).unwrap();
        assert_eq!(small.train[..], big.train[..5]);
        assert_eq!(small.test[..], big.test[..5]);
    }

    #[test]
    fn class_frequencies_and_means() {
        let gm = GaussianMixtureSpec::new(vec![vec![-2.0, 1.0], vec![3.0, 0.0], vec![0.0, -4.0]], 0.7, vec![0.2, 0.3, 0.5])
            .unwrap();
        let n = 10_000;
        let d = gen_dataset(&gm, n, 0, 8).unwrap();
        for y in 0..3 {
            let members: Vec<&LabeledSample> = d.train.iter().filter(|s| s.label == y).collect();
            let p = gm.priors()[y];
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((members.len() as f64 - n as f64 * p).abs() <= 3.0 * sd, "class {y}: {}", members.len());
            for j in 0..2 {
                let m = members.iter().map(|s| s.x[j]).sum::<f64>() / members.len() as f64;
                assert!((m - gm.mean(y)[j]).abs() <= 4.0 * 0.7 / (members.len() as f64).sqrt());
            }
        }
    }
}
