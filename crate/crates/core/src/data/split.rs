use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Manifest};

/// Patient-grouped split fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.79, val: 0.10, test: 0.11, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DataError::Split(format!("fractions must be non-negative, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(DataError::Split(format!("fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    /// Patients per split for `n` patients.
    pub fn counts(&self, n: usize) -> Result<[usize; 3], DataError> {
        self.validate()?;
        let fractions = [self.train, self.val, self.test];
        let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
        if n < wanted {
            return Err(DataError::Split(format!("{n} patients cannot fill {wanted} non-empty splits")));
        }
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train.min(n));
        let mut counts = [train.min(n), val, 0];
        counts[2] = n - counts[0] - counts[1];
        if self.test == 0.0 && counts[2] > 0 {
            counts[0] += counts[2];
            counts[2] = 0;
        }
        // every requested split gets at least one patient, taken from the largest
        for i in 0..3 {
            if fractions[i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Shuffles sorted patient ids under the spec seed, then partitions them.
/// Record order inside each split follows the input manifest.
pub fn split_dataset(manifest: &Manifest, spec: &SplitSpec) -> Result<Splits, DataError> {
    if manifest.is_empty() {
        return Err(DataError::Split("manifest is empty".into()));
    }
    let mut patients = manifest.patients();
    let counts = spec.counts(patients.len())?;
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut assignment = HashMap::with_capacity(patients.len());
    for (i, p) in patients.iter().enumerate() {
        let split = if i < counts[0] { 0 } else if i < counts[0] + counts[1] { 1 } else { 2 };
        assignment.insert(p.as_str(), split);
    }
    let mut parts: [Vec<_>; 3] = Default::default();
    for r in &manifest.records {
        parts[assignment[r.patient_id.as_str()]].push(r.clone());
    }
    let [train, val, test] = parts.map(|records| Manifest::new(manifest.root.clone(), records));
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ManifestRecord, Phase};
    use std::collections::HashSet;

    fn manifest(patients: usize, per: usize) -> Manifest {
        let mut records = Vec::new();
        for p in 0..patients {
            for k in 0..per {
                records.push(ManifestRecord {
                    schema_version: "1".into(),
                    image: format!("{p}_{k}.png"),
                    patient_id: format!("P{p:03}"),
                    phase: Phase::ED,
                    source_id: format!("{p}_{k}"),
                    landmarks: [[50.0, 50.0]; 6],
                });
            }
        }
        Manifest::new("/data".into(), records)
    }

    #[test]
    fn exact_division() {
        let spec = SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 1 };
        let s = split_dataset(&manifest(100, 1), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn patients_stay_together_and_seed_is_deterministic() {
        let m = manifest(37, 3);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let s = split_dataset(&m, &spec).unwrap();
        let sets: Vec<HashSet<String>> = [&s.train, &s.val, &s.test].iter().map(|x| x.records.iter().map(|r| r.patient_id.clone()).collect()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        for part in [&s.train, &s.val, &s.test] {
            assert_eq!(part.len() % 3, 0);
        }
        assert_eq!(s, split_dataset(&m, &spec).unwrap());
        assert_ne!(s.train, split_dataset(&m, &SplitSpec { seed: 10, ..spec }).unwrap().train);
    }

    #[test]
    fn too_few_patients_is_an_error() {
        assert!(matches!(split_dataset(&manifest(2, 4), &SplitSpec::default()), Err(DataError::Split(_))));
        let counts = SplitSpec::default().counts(3).unwrap();
        assert_eq!(counts, [1, 1, 1]);
        assert!(SplitSpec { train: 0.5, val: 0.1, test: 0.1, seed: 0 }.validate().is_err());
    }
}
