//! Two-domain datasets: items, TSV I/O, synthetic generation, seen/unseen
//! splits and the quadruplet sampler.

mod sampler;
mod split;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampler::{Quadruplet, QuadrupletSampler};
pub use split::{make_split, SplitProtocol, SplitSpec};
pub use synth::{generate, SketchMap, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Photo,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Sketch => "sketch",
            Domain::Photo => "photo",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sketch" => Ok(Domain::Sketch),
            "photo" => Ok(Domain::Photo),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub domain: Domain,
    pub class_id: usize,
    pub features: Vec<f64>,
}

/// A validated collection of items: unique ids and one feature length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        let feature_dim = items.first().map_or(0, |i| i.features.len());
        let mut ids = BTreeSet::new();
        for item in &items {
            if item.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "item {} has {} features, expected {feature_dim}",
                    item.id,
                    item.features.len()
                )));
            }
            if item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("item {} has non-finite features", item.id)));
            }
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Data(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(Dataset { items, feature_dim })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.items.iter().map(|i| i.class_id).collect();
        set.into_iter().collect()
    }

    pub fn count(&self, class_id: usize, domain: Domain) -> usize {
        self.items
            .iter()
            .filter(|i| i.class_id == class_id && i.domain == domain)
            .count()
    }

    /// Serialises as `id<TAB>domain<TAB>class_id<TAB>f0,f1,...`, features in
    /// 17-significant-digit scientific notation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&item.id);
            out.push('\t');
            out.push_str(&item.domain.to_string());
            out.push('\t');
            out.push_str(&item.class_id.to_string());
            out.push('\t');
            out.push_str(&join_floats(&item.features));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let parse_err = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            if fields[0].is_empty() {
                return Err(parse_err("empty id".into()));
            }
            let domain: Domain = fields[1].parse().map_err(parse_err)?;
            let class_id: usize = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad class id {:?}", fields[2])))?;
            let features = parse_floats(fields[3]).map_err(parse_err)?;
            match dim {
                None => dim = Some(features.len()),
                Some(d) if d != features.len() => {
                    return Err(Error::Data(format!(
                        "line {lineno}: {} features, earlier rows have {d}",
                        features.len()
                    )))
                }
                _ => {}
            }
            items.push(DatasetItem {
                id: fields[0].to_string(),
                domain,
                class_id,
                features,
            });
        }
        Dataset::new(items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

pub(crate) fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn parse_floats(field: &str) -> std::result::Result<Vec<f64>, String> {
    field
        .split(',')
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite number {s:?}"))
            }
        })
        .collect()
}
