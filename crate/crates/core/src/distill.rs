//! Frozen teacher and the one-time, class-level soft-label extraction.
//!
//! Soft labels are computed from photo items only and indexed by class, so a
//! sketch receives the same target as a photo of its class.

use std::collections::BTreeMap;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetItem, Domain};
use crate::encoder::{relu, relu_backward, Dense};
use crate::error::{Error, Result};
use crate::losses::validate_distribution;
use crate::ndcore::{argmax, log_softmax, softmax, Rng};

/// Row-sum tolerance for a soft-label table.
pub const TABLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden_dim: usize,
    pub teacher_class_count: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Proxy validation accuracy at which pretraining stops.
    pub target_accuracy: f64,
    /// Fraction of photos per class held out for the proxy validation.
    pub holdout_fraction: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden_dim: 32,
            teacher_class_count: 20,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            target_accuracy: 0.9,
            holdout_fraction: 0.1,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.teacher_class_count == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher dims and batch size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "teacher needs lr > 0 and momentum in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One ReLU hidden layer and a classification output. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherNetwork {
    hidden: Dense,
    output: Dense,
}

impl TeacherNetwork {
    pub fn from_layers(hidden: Dense, output: Dense) -> Result<Self> {
        if hidden.output_dim() != output.input_dim() {
            return Err(Error::Shape("teacher layers do not chain".into()));
        }
        Ok(TeacherNetwork { hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.output.output_dim()
    }

    /// Pre-softmax activations.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.output.forward(&relu(&self.hidden.forward(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.activations(x)?).expect("at least one class"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    pub proxy_accuracy: f64,
}

fn require_photos(items: &[DatasetItem]) -> Result<()> {
    match items.iter().find(|i| i.domain != Domain::Photo) {
        Some(item) => Err(Error::Domain(format!(
            "teacher only sees photos; {} is a {}",
            item.id, item.domain
        ))),
        None => Ok(()),
    }
}

/// Trains the teacher with softmax cross-entropy on a proxy labelling of the
/// photos (`proxy_labels[class_id]`), then freezes it.
pub fn pretrain_teacher(
    photo_items: &[DatasetItem],
    proxy_labels: &BTreeMap<usize, usize>,
    cfg: &TeacherConfig,
    rng: &mut Rng,
) -> Result<(TeacherNetwork, PretrainReport)> {
    cfg.validate()?;
    require_photos(photo_items)?;
    if photo_items.is_empty() {
        return Err(Error::Data("no photos to pretrain the teacher on".into()));
    }
    let mut labelled = Vec::with_capacity(photo_items.len());
    for item in photo_items {
        let label = *proxy_labels
            .get(&item.class_id)
            .ok_or_else(|| Error::Key(format!("no proxy label for class {}", item.class_id)))?;
        if label >= cfg.teacher_class_count {
            return Err(Error::Config(format!(
                "proxy label {label} exceeds teacher_class_count {}",
                cfg.teacher_class_count
            )));
        }
        labelled.push((item.features.as_slice(), label));
    }

    // Stratified hold-out by source class.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, item) in photo_items.iter().enumerate() {
        by_class.entry(item.class_id).or_default().push(idx);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (_, mut idxs) in by_class {
        rng.shuffle(&mut idxs);
        let held = if idxs.len() >= 2 {
            ((idxs.len() as f64 * cfg.holdout_fraction).round() as usize).min(idxs.len() - 1)
        } else {
            0
        };
        val_idx.extend_from_slice(&idxs[..held]);
        train_idx.extend_from_slice(&idxs[held..]);
    }
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }

    let input_dim = photo_items[0].features.len();
    let mut hidden = Dense::glorot(input_dim, cfg.hidden_dim, rng);
    let mut output = Dense::glorot(cfg.hidden_dim, cfg.teacher_class_count, rng);
    let mut vel_h = Dense::zeros(input_dim, cfg.hidden_dim);
    let mut vel_o = Dense::zeros(cfg.hidden_dim, cfg.teacher_class_count);

    let accuracy = |hidden: &Dense, output: &Dense| -> Result<f64> {
        let net = TeacherNetwork {
            hidden: hidden.clone(),
            output: output.clone(),
        };
        let mut correct = 0usize;
        for &i in &val_idx {
            let (x, y) = labelled[i];
            if net.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / val_idx.len() as f64)
    };

    let mut acc = accuracy(&hidden, &output)?;
    let mut epochs = 0;
    while epochs < cfg.max_epochs && acc < cfg.target_accuracy {
        rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let mut g_h = Dense::zeros(input_dim, cfg.hidden_dim);
            let mut g_o = Dense::zeros(cfg.hidden_dim, cfg.teacher_class_count);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (x, y) = labelled[i];
                let pre = hidden.forward(x)?;
                let h = relu(&pre);
                let logits = output.forward(&h)?;
                let mut d: Vec<f64> = log_softmax(&logits)?.iter().map(|lp| lp.exp() * scale).collect();
                d[y] -= scale;
                let dh = output.backward(&mut g_o, &h, &d)?;
                hidden.backward(&mut g_h, x, &relu_backward(&pre, &dh))?;
            }
            for (param, (vel, grad)) in [
                (&mut hidden, (&mut vel_h, &g_h)),
                (&mut output, (&mut vel_o, &g_o)),
            ] {
                let p = param.weights.data_mut().iter_mut().chain(param.bias.iter_mut());
                let v = vel.weights.data_mut().iter_mut().chain(vel.bias.iter_mut());
                let g = grad.weights.data().iter().chain(grad.bias.iter());
                for ((p, v), g) in p.zip(v).zip(g) {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.learning_rate * *v;
                }
            }
        }
        epochs += 1;
        acc = accuracy(&hidden, &output)?;
        debug!("teacher epoch {epochs}: proxy accuracy {acc:.4}");
    }
    if [&hidden, &output]
        .iter()
        .any(|l| l.weights.data().iter().chain(&l.bias).any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric("teacher diverged".into()));
    }
    Ok((
        TeacherNetwork { hidden, output },
        PretrainReport {
            epochs,
            proxy_accuracy: acc,
        },
    ))
}

/// How per-photo teacher outputs are pooled into one class target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelMode {
    /// softmax(mean of logits)
    #[default]
    LogitMean,
    /// mean of softmax(logits)
    ProbabilityMean,
}

/// Per-class teacher targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelTable {
    width: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SoftLabelTable {
    pub fn new(rows: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let width = rows.values().next().map_or(0, Vec::len);
        for (class_id, row) in &rows {
            if row.len() != width {
                return Err(Error::Data(format!(
                    "soft label for class {class_id} has length {}, expected {width}",
                    row.len()
                )));
            }
            validate_distribution(row, TABLE_TOLERANCE)
                .map_err(|e| Error::Data(format!("class {class_id}: {e}")))?;
        }
        Ok(SoftLabelTable { width, rows })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.rows.get(&class_id).map(Vec::as_slice)
    }

    /// The class-level target for an item of either domain.
    pub fn lookup(&self, item: &DatasetItem) -> Result<&[f64]> {
        self.get(item.class_id)
            .ok_or_else(|| Error::Key(format!("no soft label for class {}", item.class_id)))
    }

    /// `class_id<TAB>p_0,p_1,...`, 17 significant digits.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (class_id, row) in &self.rows {
            out.push_str(&format!("{class_id}\t{}\n", crate::data::join_floats(row)));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            let (class, probs) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected class_id<TAB>probabilities".into()))?;
            let class_id: usize = class
                .parse()
                .map_err(|_| parse_err(format!("bad class id {class:?}")))?;
            let row = crate::data::parse_floats(probs).map_err(parse_err)?;
            if rows.insert(class_id, row).is_some() {
                return Err(parse_err(format!("duplicate class {class_id}")));
            }
        }
        Self::new(rows)
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

/// Builds one soft label per class in `classes` from the photos of that class.
/// Photos of other classes are ignored; a sketch anywhere in the input is an
/// error.
pub fn extract_soft_labels(
    teacher: &TeacherNetwork,
    photo_items: &[DatasetItem],
    classes: &[usize],
    mode: SoftLabelMode,
) -> Result<SoftLabelTable> {
    require_photos(photo_items)?;
    let width = teacher.class_count();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> =
        classes.iter().map(|&c| (c, (vec![0.0; width], 0))).collect();
    for item in photo_items {
        let Some((acc, count)) = sums.get_mut(&item.class_id) else {
            continue;
        };
        let act = teacher.activations(&item.features)?;
        let contribution = match mode {
            SoftLabelMode::LogitMean => act,
            SoftLabelMode::ProbabilityMean => softmax(&act)?,
        };
        for (a, v) in acc.iter_mut().zip(contribution) {
            *a += v;
        }
        *count += 1;
    }
    let mut rows = BTreeMap::new();
    for (class_id, (acc, count)) in sums {
        if count == 0 {
            return Err(Error::Data(format!("class {class_id} has no photos")));
        }
        let mean: Vec<f64> = acc.iter().map(|v| v / count as f64).collect();
        let row = match mode {
            SoftLabelMode::LogitMean => softmax(&mean)?,
            SoftLabelMode::ProbabilityMean => mean,
        };
        rows.insert(class_id, row);
    }
    SoftLabelTable::new(rows)
}
