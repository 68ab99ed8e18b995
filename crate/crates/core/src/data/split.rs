use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Rng;

/// How classes are partitioned into seen (training) and unseen (test).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitProtocol {
    /// `k` classes drawn uniformly at random are held out.
    RandomK { k: usize },
    /// An explicit held-out list, e.g. classes absent from a pretraining set.
    HeldoutList { classes: Vec<usize> },
}

impl SplitProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            SplitProtocol::RandomK { .. } => "random_k",
            SplitProtocol::HeldoutList { .. } => "heldout_list",
        }
    }
}

/// A disjoint, exhaustive partition of the class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub protocol: String,
    pub seed: u64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl SplitSpec {
    pub fn is_seen(&self, class_id: usize) -> bool {
        self.seen.binary_search(&class_id).is_ok()
    }

    pub fn is_unseen(&self, class_id: usize) -> bool {
        self.unseen.binary_search(&class_id).is_ok()
    }

    /// Position of a seen class in the classification head.
    pub fn seen_index(&self, class_id: usize) -> Option<usize> {
        self.seen.binary_search(&class_id).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(Error::Config("split needs both seen and unseen classes".into()));
        }
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.seen) || !sorted(&self.unseen) {
            return Err(Error::Config(
                "split class lists must be sorted and unique".into(),
            ));
        }
        if self.seen.iter().any(|c| self.is_unseen(*c)) {
            return Err(Error::Config("seen and unseen classes overlap".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: SplitSpec = serde_json::from_str(&text)?;
        split.validate()?;
        Ok(split)
    }
}

pub fn make_split(classes: &[usize], protocol: &SplitProtocol, seed: u64) -> Result<SplitSpec> {
    let all: BTreeSet<usize> = classes.iter().copied().collect();
    let unseen: BTreeSet<usize> = match protocol {
        SplitProtocol::RandomK { k } => {
            if *k == 0 || *k >= all.len() {
                return Err(Error::Config(format!(
                    "random_k needs 0 < k < {}, got {k}",
                    all.len()
                )));
            }
            let mut pool: Vec<usize> = all.iter().copied().collect();
            let mut rng = Rng::new(seed);
            rng.shuffle(&mut pool);
            pool.into_iter().take(*k).collect()
        }
        SplitProtocol::HeldoutList { classes: held } => {
            let held: BTreeSet<usize> = held.iter().copied().collect();
            if let Some(c) = held.iter().find(|c| !all.contains(c)) {
                return Err(Error::Config(format!("held-out class {c} is not in the dataset")));
            }
            held
        }
    };
    let split = SplitSpec {
        protocol: protocol.name().to_string(),
        seed,
        seen: all.difference(&unseen).copied().collect(),
        unseen: unseen.into_iter().collect(),
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn random_25_of_125() {
        let classes: Vec<usize> = (0..125).collect();
        let s = make_split(&classes, &SplitProtocol::RandomK { k: 25 }, 3).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (100, 25));
        assert_eq!(
            s,
            make_split(&classes, &SplitProtocol::RandomK { k: 25 }, 3).unwrap()
        );
        assert_ne!(
            s.unseen,
            make_split(&classes, &SplitProtocol::RandomK { k: 25 }, 4)
                .unwrap()
                .unseen
        );
    }

    #[test]
    fn heldout_21_of_125() {
        let classes: Vec<usize> = (0..125).collect();
        let held: Vec<usize> = (0..21).map(|i| i * 5).collect();
        let s = make_split(
            &classes,
            &SplitProtocol::HeldoutList {
                classes: held.clone(),
            },
            0,
        )
        .unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (104, 21));
        assert_eq!(s.unseen, held);
        assert_eq!(s.protocol, "heldout_list");
    }

    #[test]
    fn empty_sides_rejected() {
        let classes: Vec<usize> = (0..5).collect();
        let all = SplitProtocol::HeldoutList {
            classes: classes.clone(),
        };
        assert!(matches!(make_split(&classes, &all, 0), Err(Error::Config(_))));
        let none = SplitProtocol::HeldoutList { classes: vec![] };
        assert!(make_split(&classes, &none, 0).is_err());
        assert!(make_split(&classes, &SplitProtocol::RandomK { k: 5 }, 0).is_err());
        let foreign = SplitProtocol::HeldoutList { classes: vec![9] };
        assert!(make_split(&classes, &foreign, 0).is_err());
    }

    #[test]
    fn json_shape() {
        let s = make_split(&[0, 1, 2], &SplitProtocol::RandomK { k: 1 }, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        for key in ["protocol", "seed", "seen", "unseen"] {
            assert!(v.get(key).is_some());
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 2usize..60, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let classes: Vec<usize> = (0..n).map(|c| c * 3 + 1).collect();
            let k = 1 + ((n - 2) as f64 * k_frac) as usize;
            let s = make_split(&classes, &SplitProtocol::RandomK { k }, seed).unwrap();
            prop_assert_eq!(s.unseen.len(), k);
            let mut union: Vec<usize> = s.seen.iter().chain(&s.unseen).copied().collect();
            union.sort();
            prop_assert_eq!(union, classes);
        }
    }
}
