use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

/// Labeled share of the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fraction {
    Eighth,
    Quarter,
    Half,
}

impl Fraction {
    pub fn denominator(self) -> usize {
        match self {
            Fraction::Eighth => 8,
            Fraction::Quarter => 4,
            Fraction::Half => 2,
        }
    }

    /// `floor(pool / denominator)`.
    pub fn labeled_count(self, pool: usize) -> usize {
        pool / self.denominator()
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "1/8" | "0.125" => Ok(Fraction::Eighth),
            "1/4" | "0.25" => Ok(Fraction::Quarter),
            "1/2" | "0.5" => Ok(Fraction::Half),
            other => Err(Error::invalid(format!(
                "labeled fraction must be 1/8, 1/4 or 1/2, got {other:?}"
            ))),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fraction: Fraction,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn training_pool(&self) -> Vec<String> {
        let mut pool: Vec<String> = self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .cloned()
            .collect();
        pool.sort();
        pool
    }

    /// Same split with the unlabeled pool emptied (labeled-only training).
    pub fn labeled_only(&self) -> Self {
        Self {
            unlabeled_ids: Vec::new(),
            ..self.clone()
        }
    }
}

/// How validation and test ids are chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Holdout {
    /// Drawn from the seeded shuffle.
    Counts { val: usize, test: usize },
    /// Fixed lists, e.g. a published split.
    Ids { val: Vec<String>, test: Vec<String> },
}

/// Partition with seeded val/test selection; see [`make_partition_with_holdout`].
pub fn make_partition(
    records: &[ImageRecord],
    fraction: Fraction,
    val_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    make_partition_with_holdout(
        records,
        fraction,
        &Holdout::Counts {
            val: val_count,
            test: test_count,
        },
        seed,
    )
}

/// Ids are sorted, shuffled with a ChaCha stream seeded by `seed`, and then
/// cut into test, validation, labeled and unlabeled pools in that order. The
/// labeled pool has `floor(fraction * pool)` members. Output lists are sorted.
pub fn make_partition_with_holdout(
    records: &[ImageRecord],
    fraction: Fraction,
    holdout: &Holdout,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    ids.sort();
    let unique: BTreeSet<String> = ids.iter().cloned().collect();
    if unique.len() != ids.len() {
        return Err(Error::invalid("duplicate record ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let (mut val, mut test, pool) = match holdout {
        Holdout::Counts { val, test } => {
            if val + test >= ids.len() {
                return Err(Error::invalid(format!(
                    "{} records cannot hold {val} validation + {test} test ids and a training pool",
                    ids.len()
                )));
            }
            let test_ids = ids[..*test].to_vec();
            let val_ids = ids[*test..test + val].to_vec();
            (val_ids, test_ids, ids[test + val..].to_vec())
        }
        Holdout::Ids { val, test } => {
            for id in val.iter().chain(test) {
                if !unique.contains(id) {
                    return Err(Error::invalid(format!(
                        "holdout id {id} is not in the dataset"
                    )));
                }
            }
            let held: BTreeSet<&String> = val.iter().chain(test).collect();
            if held.len() != val.len() + test.len() {
                return Err(Error::invalid("validation and test id lists overlap"));
            }
            let pool: Vec<String> = ids
                .iter()
                .filter(|id| !held.contains(id))
                .cloned()
                .collect();
            (val.clone(), test.clone(), pool)
        }
    };

    let n_labeled = fraction.labeled_count(pool.len());
    if n_labeled == 0 {
        return Err(Error::invalid(format!(
            "training pool of {} records gives an empty labeled pool at {fraction}",
            pool.len()
        )));
    }
    let mut labeled = pool[..n_labeled].to_vec();
    let mut unlabeled = pool[n_labeled..].to_vec();
    for list in [&mut labeled, &mut unlabeled, &mut val, &mut test] {
        list.sort();
    }
    Ok(DatasetSplit {
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
        val_ids: val,
        test_ids: test,
        fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Image, Source};
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                ImageRecord::new(
                    format!("r{i:04}"),
                    Image::zeros((2, 2)),
                    None,
                    Source::Synthetic,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn tn3k_sized_pool_at_one_eighth() {
        // 2578 training + 301 val + 614 test = 3493
        let recs = records(3493);
        let s = make_partition(&recs, Fraction::Eighth, 301, 614, 0).unwrap();
        assert_eq!(s.labeled_ids.len(), 322);
        assert_eq!(s.unlabeled_ids.len(), 2256);
        assert_eq!(s.val_ids.len(), 301);
        assert_eq!(s.test_ids.len(), 614);
    }

    #[test]
    fn half_of_four() {
        let s = make_partition(&records(4), Fraction::Half, 0, 0, 3).unwrap();
        assert_eq!((s.labeled_ids.len(), s.unlabeled_ids.len()), (2, 2));
    }

    #[test]
    fn busi_counts_verbatim() {
        let s = make_partition(&records(647), Fraction::Quarter, 0, 71, 1).unwrap();
        assert_eq!(s.training_pool().len(), 576);
        assert_eq!(s.labeled_ids.len(), 144);
    }

    #[test]
    fn seeds_change_labeled_set() {
        let recs = records(64);
        let a = make_partition(&recs, Fraction::Quarter, 4, 4, 1).unwrap();
        let b = make_partition(&recs, Fraction::Quarter, 4, 4, 2).unwrap();
        assert_ne!(a.labeled_ids, b.labeled_ids);
    }

    #[test]
    fn empty_labeled_pool_is_an_error() {
        assert!(make_partition(&records(10), Fraction::Eighth, 2, 2, 0).is_err());
    }

    #[test]
    fn explicit_holdout_lists() {
        let recs = records(20);
        let h = Holdout::Ids {
            val: vec!["r0000".into(), "r0001".into()],
            test: vec!["r0002".into()],
        };
        let s = make_partition_with_holdout(&recs, Fraction::Half, &h, 9).unwrap();
        assert_eq!(s.test_ids, vec!["r0002".to_string()]);
        assert_eq!(s.training_pool().len(), 17);
        assert_eq!(s.labeled_ids.len(), 8);
        let bad = Holdout::Ids {
            val: vec!["nope".into()],
            test: vec![],
        };
        assert!(make_partition_with_holdout(&recs, Fraction::Half, &bad, 9).is_err());
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!("1/8".parse::<Fraction>().unwrap(), Fraction::Eighth);
        assert_eq!("0.5".parse::<Fraction>().unwrap(), Fraction::Half);
        assert!("1/3".parse::<Fraction>().is_err());
    }

    proptest! {
        #[test]
        fn pools_are_disjoint_and_deterministic(n in 16usize..200, val in 0usize..5, test in 0usize..5, seed in any::<u64>(), f in 0usize..3) {
            let fraction = [Fraction::Eighth, Fraction::Quarter, Fraction::Half][f];
            let recs = records(n);
            let a = make_partition(&recs, fraction, val, test, seed).unwrap();
            let b = make_partition(&recs, fraction, val, test, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let all: Vec<&String> = a.labeled_ids.iter().chain(&a.unlabeled_ids).chain(&a.val_ids).chain(&a.test_ids).collect();
            let set: BTreeSet<&String> = all.iter().copied().collect();
            prop_assert_eq!(set.len(), n);
            prop_assert_eq!(all.len(), n);
            let pool = n - val - test;
            prop_assert_eq!(a.labeled_ids.len(), pool / fraction.denominator());
        }
    }
}
