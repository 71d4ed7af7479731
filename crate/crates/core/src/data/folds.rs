use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubjectKey {
    pub subject_id: String,
    pub site_id: String,
    pub label: usize,
}

/// Subject-to-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn is_test(&self, subject_id: &str, fold: usize) -> bool {
        self.fold_of(subject_id) == Some(fold)
    }

    pub fn fold_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Subject-wise k-fold split stratified by site and class.
///
/// Within a site, strata are shuffled with a seeded stream and dealt
/// round-robin with the fold pointer carried across classes, so both the
/// per-class and the per-site fold sizes differ by at most one.
pub fn subject_kfold(subjects: &[SubjectKey], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut seen = BTreeSet::new();
    let mut strata: BTreeMap<(&str, usize), Vec<&str>> = BTreeMap::new();
    for s in subjects {
        if !seen.insert(s.subject_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate subject id `{}`", s.subject_id)));
        }
        strata.entry((s.site_id.as_str(), s.label)).or_default().push(&s.subject_id);
    }

    let mut assignments = BTreeMap::new();
    let mut pointer: BTreeMap<&str, usize> = BTreeMap::new();
    for ((site, label), mut ids) in strata {
        if ids.len() < k {
            return Err(Error::NotEnoughSubjects(format!(
                "site `{site}` class {label} has {} subjects for {k} folds",
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut r = rng::stream(seed, &format!("folds/{site}/{label}"));
        ids.shuffle(&mut r);
        let next = pointer.entry(site).or_insert(0);
        for id in ids {
            assignments.insert(id.to_string(), *next);
            *next = (*next + 1) % k;
        }
    }
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys(site: &str, asd: usize, hc: usize) -> Vec<SubjectKey> {
        (0..asd + hc)
            .map(|i| SubjectKey {
                subject_id: format!("{site}-{i}"),
                site_id: site.to_string(),
                label: usize::from(i < asd),
            })
            .collect()
    }

    fn sizes(split: &FoldSplit, subjects: &[SubjectKey]) -> Vec<usize> {
        let mut out = vec![0; split.k];
        for s in subjects {
            out[split.fold_of(&s.subject_id).unwrap()] += 1;
        }
        out
    }

    #[test]
    fn ten_subjects_five_folds() {
        let s = keys("a", 5, 5);
        let split = subject_kfold(&s, 5, 1).unwrap();
        assert_eq!(sizes(&split, &s), vec![2; 5]);
    }

    #[test]
    fn usm_like_site_has_balanced_folds() {
        let s = keys("usm", 33, 19);
        let split = subject_kfold(&s, 5, 3).unwrap();
        for size in sizes(&split, &s) {
            assert!(size == 10 || size == 11, "{size}");
        }
    }

    #[test]
    fn too_few_in_a_stratum() {
        assert!(matches!(subject_kfold(&keys("a", 4, 6), 5, 0), Err(Error::NotEnoughSubjects(_))));
    }

    proptest! {
        #[test]
        fn partition_and_determinism(asd in 5usize..30, hc in 5usize..30, seed in 0u64..100) {
            let mut s = keys("a", asd, hc);
            s.extend(keys("b", hc, asd));
            let split = subject_kfold(&s, 5, seed).unwrap();
            prop_assert_eq!(split.assignments.len(), s.len());
            prop_assert_eq!(&split, &subject_kfold(&s, 5, seed).unwrap());
            for site in ["a", "b"] {
                for label in [0, 1] {
                    let stratum: Vec<_> = s.iter().filter(|k| k.site_id == site && k.label == label).cloned().collect();
                    let sz = sizes(&split, &stratum);
                    prop_assert!(sz.iter().max().unwrap() - sz.iter().min().unwrap() <= 1);
                }
                let site_keys: Vec<_> = s.iter().filter(|k| k.site_id == site).cloned().collect();
                let sz = sizes(&split, &site_keys);
                prop_assert!(sz.iter().max().unwrap() - sz.iter().min().unwrap() <= 1);
            }
        }
    }
}
