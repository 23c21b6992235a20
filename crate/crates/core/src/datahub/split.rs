use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::numcore::rng::seeded;

fn default_train_fraction() -> f64 {
    0.8
}

/// Seen/unseen patient counts for one patient-ID split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen_patients: usize,
    pub unseen_patients: usize,
    pub seed: u64,
    /// Share of the seen patients' samples that go to training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction_within_seen: f64,
}

impl SplitSpec {
    pub fn new(seen_patients: usize, unseen_patients: usize, seed: u64) -> Self {
        Self { seen_patients, unseen_patients, seed, train_fraction_within_seen: default_train_fraction() }
    }

    /// Column label such as `100/60`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.seen_patients, self.unseen_patients)
    }
}

/// Sample indices into the manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    TestSeen,
    TestUnseen,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestSeen => "test_seen",
            SplitName::TestUnseen => "test_unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test_seen" => Ok(SplitName::TestSeen),
            "test_unseen" => Ok(SplitName::TestUnseen),
            other => Err(Error::config(format!("unknown split {other:?}; expected train, test_seen or test_unseen"))),
        }
    }
}

impl Split {
    pub fn part(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::TestSeen => &self.test_seen,
            SplitName::TestUnseen => &self.test_unseen,
        }
    }
}

/// Seeded patient partition: the first `seen` shuffled patients are seen,
/// the next `unseen` are unseen, the rest are left out.
pub fn patient_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    if let Some(i) = manifest.entries.iter().position(|e| e.patient_id.is_empty()) {
        return Err(Error::Split(format!("row {} has an empty patient_id", i + 2)));
    }
    let f = spec.train_fraction_within_seen;
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Split(format!("train_fraction_within_seen {f} outside [0, 1]")));
    }
    let mut patients = manifest.patients();
    let need = spec.seen_patients + spec.unseen_patients;
    if need > patients.len() {
        return Err(Error::Split(format!(
            "{} seen + {} unseen patients requested, manifest has {} distinct patients",
            spec.seen_patients,
            spec.unseen_patients,
            patients.len()
        )));
    }
    let mut rng = seeded(spec.seed);
    patients.shuffle(&mut rng);
    let seen: HashSet<&str> = patients[..spec.seen_patients].iter().copied().collect();
    let unseen: HashSet<&str> = patients[spec.seen_patients..need].iter().copied().collect();

    let mut seen_samples = Vec::new();
    let mut test_unseen = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if seen.contains(e.patient_id.as_str()) {
            seen_samples.push(i);
        } else if unseen.contains(e.patient_id.as_str()) {
            test_unseen.push(i);
        }
    }
    seen_samples.shuffle(&mut rng);
    let n_train = (f * seen_samples.len() as f64).round() as usize;
    let mut train = seen_samples[..n_train].to_vec();
    let mut test_seen = seen_samples[n_train..].to_vec();
    train.sort_unstable();
    test_seen.sort_unstable();
    Ok(Split { train, test_seen, test_unseen })
}

/// The three patient-ID sweeps: equal totals, fixed seen=80, fixed unseen=20.
pub fn ood_sweep_specs(mode: u8, seed: u64) -> Result<Vec<SplitSpec>> {
    let pairs: Vec<(usize, usize)> = match mode {
        1 => vec![(160, 0), (100, 60), (80, 80), (60, 100)],
        2 => [80, 60, 40, 20].iter().map(|&u| (80, u)).collect(),
        3 => [140, 120, 100, 80, 60].iter().map(|&s| (s, 20)).collect(),
        other => return Err(Error::config(format!("OOD mode must be 1, 2 or 3, got {other}"))),
    };
    Ok(pairs.into_iter().map(|(s, u)| SplitSpec::new(s, u, seed)).collect())
}

/// Result of checking that no training patient appears among unseen patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub passed: bool,
    pub train_patients: usize,
    pub unseen_patients: usize,
    pub overlap: Vec<String>,
}

pub fn audit_split(manifest: &DatasetManifest, split: &Split) -> LeakageAudit {
    let ids =
        |idx: &[usize]| -> BTreeSet<&str> { idx.iter().map(|&i| manifest.entries[i].patient_id.as_str()).collect() };
    let train = ids(&split.train);
    let unseen = ids(&split.test_unseen);
    let overlap: Vec<String> = train.intersection(&unseen).map(|s| s.to_string()).collect();
    LeakageAudit { passed: overlap.is_empty(), train_patients: train.len(), unseen_patients: unseen.len(), overlap }
}

/// Split file contents: sample refs per part plus the spec that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen: Vec<String>,
    pub seed: u64,
    pub spec: SplitSpec,
}

impl SplitFile {
    pub fn new(manifest: &DatasetManifest, split: &Split, spec: &SplitSpec) -> Self {
        let refs = |idx: &[usize]| idx.iter().map(|&i| manifest.entries[i].sample_ref.clone()).collect();
        Self {
            train: refs(&split.train),
            test_seen: refs(&split.test_seen),
            test_unseen: refs(&split.test_unseen),
            seed: spec.seed,
            spec: *spec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::manifest::{ManifestEntry, Modality};

    fn manifest(patients: usize, per: usize) -> DatasetManifest {
        let entries = (0..patients * per)
            .map(|i| ManifestEntry {
                sample_ref: format!("s{i}"),
                label: i % 2,
                patient_id: format!("p{}", i / per),
                modality: Modality::Color,
            })
            .collect();
        DatasetManifest::new("m", 2, entries).unwrap()
    }

    #[test]
    fn all_seen_leaves_unseen_empty() {
        let m = manifest(160, 3);
        let s = patient_split(&m, &SplitSpec::new(160, 0, 1)).unwrap();
        assert!(s.test_unseen.is_empty());
        assert_eq!(s.train.len() + s.test_seen.len(), 480);
        assert_eq!(s.train.len(), 384);
    }

    #[test]
    fn seen_and_unseen_disjoint() {
        let m = manifest(160, 2);
        let s = patient_split(&m, &SplitSpec::new(100, 60, 9)).unwrap();
        let a = audit_split(&m, &s);
        assert!(a.passed);
        assert_eq!(a.unseen_patients, 60);
        let seen: BTreeSet<_> = s.train.iter().chain(&s.test_seen).map(|&i| m.entries[i].patient_id.clone()).collect();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn infeasible_counts_report_available() {
        let err = patient_split(&manifest(10, 1), &SplitSpec::new(8, 3, 0)).unwrap_err();
        assert!(err.to_string().contains("10 distinct"), "{err}");
    }

    #[test]
    fn seeds_determine_split() {
        let m = manifest(160, 1);
        let a = patient_split(&m, &SplitSpec::new(80, 20, 4)).unwrap();
        assert_eq!(a, patient_split(&m, &SplitSpec::new(80, 20, 4)).unwrap());
        let seen_set = |s: &Split| -> BTreeSet<usize> { s.train.iter().chain(&s.test_seen).copied().collect() };
        for seed in 5..10 {
            let b = patient_split(&m, &SplitSpec::new(80, 20, seed)).unwrap();
            assert_ne!(seen_set(&a), seen_set(&b));
        }
    }

    #[test]
    fn sweep_settings() {
        let one: Vec<_> = ood_sweep_specs(1, 0).unwrap().iter().map(|s| (s.seen_patients, s.unseen_patients)).collect();
        assert_eq!(one, vec![(160, 0), (100, 60), (80, 80), (60, 100)]);
        let two = ood_sweep_specs(2, 0).unwrap();
        assert_eq!(two.len(), 4);
        assert!(two.iter().all(|s| s.seen_patients == 80));
        let three = ood_sweep_specs(3, 0).unwrap();
        assert_eq!(three.iter().map(|s| s.seen_patients).collect::<Vec<_>>(), vec![140, 120, 100, 80, 60]);
        assert!(three.iter().all(|s| s.unseen_patients == 20));
        assert!(ood_sweep_specs(4, 0).is_err());
    }

    #[test]
    fn empty_patient_rejected() {
        let mut m = manifest(4, 1);
        m.entries[2].patient_id.clear();
        assert!(matches!(patient_split(&m, &SplitSpec::new(1, 1, 0)), Err(Error::Split(_))));
    }
}
