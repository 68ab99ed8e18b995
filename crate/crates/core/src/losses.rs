//! Training objectives and their exact gradients.
//!
//! All distances are squared L2. Hinge terms use subgradient 0 at the kink.
//! The cross-entropy terms are the ordinary non-negative forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{log_softmax, sq_euclidean};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Tolerance on soft-label normalisation accepted by [`knowledge_loss`].
pub const SOFT_LABEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin_alpha: f64,
    /// Quadruplet (true) or triplet baseline (false) similarity loss.
    pub enable_quadruplet: bool,
    pub enable_cls: bool,
    pub enable_knowledge: bool,
    /// L2-normalise embeddings before the similarity loss.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_alpha: DEFAULT_MARGIN,
            enable_quadruplet: true,
            enable_cls: true,
            enable_knowledge: true,
            normalize_embeddings: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_alpha >= 0.0 && self.margin_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "margin_alpha must be finite and >= 0, got {}",
                self.margin_alpha
            )));
        }
        Ok(())
    }

    /// Triplet similarity loss only.
    pub fn baseline() -> Self {
        LossConfig {
            enable_quadruplet: false,
            enable_cls: false,
            enable_knowledge: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrupletDistances {
    pub delta_plus: f64,
    pub delta_neg_photo: f64,
    pub delta_neg_sketch: f64,
}

impl QuadrupletDistances {
    pub fn compute(
        anchor: &[f64],
        positive: &[f64],
        negative_photo: &[f64],
        negative_sketch: &[f64],
    ) -> Result<Self> {
        Ok(QuadrupletDistances {
            delta_plus: sq_euclidean(anchor, positive)?,
            delta_neg_photo: sq_euclidean(anchor, negative_photo)?,
            delta_neg_sketch: sq_euclidean(anchor, negative_sketch)?,
        })
    }

    /// `(max(δ⁺ − δp⁻ + α, 0) + max(δ⁺ − δs⁻ + α, 0)) / 2`.
    pub fn quadruplet_term(&self, margin: f64) -> f64 {
        0.5 * (hinge(self.delta_plus - self.delta_neg_photo + margin)
            + hinge(self.delta_plus - self.delta_neg_sketch + margin))
    }
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Value of a similarity loss and its gradient with respect to every input
/// embedding, grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLoss {
    pub value: f64,
    pub d_anchor: Vec<Vec<f64>>,
    pub d_positive: Vec<Vec<f64>>,
    pub d_negative_photo: Vec<Vec<f64>>,
    /// Empty for the triplet loss.
    pub d_negative_sketch: Vec<Vec<f64>>,
}

fn check_batch(name: &str, n: usize, batches: &[&[&[f64]]]) -> Result<usize> {
    if n == 0 {
        return Err(Error::Argument(format!("{name}: empty batch")));
    }
    if batches.iter().any(|b| b.len() != n) {
        return Err(Error::Shape(format!("{name}: batch sizes differ")));
    }
    let dim = batches[0][0].len();
    if batches.iter().flat_map(|b| b.iter()).any(|e| e.len() != dim) {
        return Err(Error::Shape(format!("{name}: embedding dims differ")));
    }
    Ok(dim)
}

/// Adds the gradient of `scale · (‖a−p‖² − ‖a−n‖²)` into the three buffers.
fn add_hinge_grad(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    scale: f64,
    da: &mut [f64],
    dp: &mut [f64],
    dn: &mut [f64],
) {
    for k in 0..a.len() {
        let ap = 2.0 * scale * (a[k] - p[k]);
        let an = 2.0 * scale * (a[k] - n[k]);
        da[k] += ap - an;
        dp[k] -= ap;
        dn[k] += an;
    }
}

/// Batch-mean triplet hinge `1/N Σ max(δ⁺ − δp⁻ + α, 0)`.
pub fn triplet_loss(
    anchors: &[&[f64]],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<SimilarityLoss> {
    let n = anchors.len();
    let dim = check_batch("triplet_loss", n, &[anchors, positives, negatives])?;
    let scale = 1.0 / n as f64;
    let mut out = SimilarityLoss {
        value: 0.0,
        d_anchor: vec![vec![0.0; dim]; n],
        d_positive: vec![vec![0.0; dim]; n],
        d_negative_photo: vec![vec![0.0; dim]; n],
        d_negative_sketch: Vec::new(),
    };
    for i in 0..n {
        let (a, p, neg) = (anchors[i], positives[i], negatives[i]);
        let t = sq_euclidean(a, p)? - sq_euclidean(a, neg)? + margin;
        if t > 0.0 {
            out.value += t * scale;
            add_hinge_grad(
                a,
                p,
                neg,
                scale,
                &mut out.d_anchor[i],
                &mut out.d_positive[i],
                &mut out.d_negative_photo[i],
            );
        }
    }
    Ok(out)
}

/// Domain-aware quadruplet loss:
/// `1/(2N) Σ [max(δ⁺ − δp⁻ + α, 0) + max(δ⁺ − δs⁻ + α, 0)]`, with δs⁻
/// measured between the anchor sketch and the negative sketch.
pub fn quadruplet_loss(
    anchors: &[&[f64]],
    positives: &[&[f64]],
    negative_photos: &[&[f64]],
    negative_sketches: &[&[f64]],
    margin: f64,
) -> Result<SimilarityLoss> {
    let n = anchors.len();
    let dim = check_batch(
        "quadruplet_loss",
        n,
        &[anchors, positives, negative_photos, negative_sketches],
    )?;
    let scale = 1.0 / (2 * n) as f64;
    let mut out = SimilarityLoss {
        value: 0.0,
        d_anchor: vec![vec![0.0; dim]; n],
        d_positive: vec![vec![0.0; dim]; n],
        d_negative_photo: vec![vec![0.0; dim]; n],
        d_negative_sketch: vec![vec![0.0; dim]; n],
    };
    for i in 0..n {
        let (a, p, np, ns) = (anchors[i], positives[i], negative_photos[i], negative_sketches[i]);
        let d = QuadrupletDistances::compute(a, p, np, ns)?;
        let photo_term = d.delta_plus - d.delta_neg_photo + margin;
        let sketch_term = d.delta_plus - d.delta_neg_sketch + margin;
        if photo_term > 0.0 {
            out.value += photo_term * scale;
            add_hinge_grad(
                a,
                p,
                np,
                scale,
                &mut out.d_anchor[i],
                &mut out.d_positive[i],
                &mut out.d_negative_photo[i],
            );
        }
        if sketch_term > 0.0 {
            out.value += sketch_term * scale;
            add_hinge_grad(
                a,
                p,
                ns,
                scale,
                &mut out.d_anchor[i],
                &mut out.d_positive[i],
                &mut out.d_negative_sketch[i],
            );
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over all items; gradient rows are
/// `(softmax − one_hot) / M`.
pub fn classification_loss(logits: &[&[f64]], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = logits.len();
    if m == 0 {
        return Err(Error::Argument("classification_loss: empty batch".into()));
    }
    if labels.len() != m {
        return Err(Error::Shape(format!(
            "classification_loss: {m} logit rows but {} labels",
            labels.len()
        )));
    }
    let scale = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(m);
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                row.len()
            )));
        }
        let logp = log_softmax(row)?;
        value -= logp[label] * scale;
        let mut g: Vec<f64> = logp.iter().map(|lp| lp.exp() * scale).collect();
        g[label] -= scale;
        grads.push(g);
    }
    Ok((value, grads))
}

/// Mean soft-label cross-entropy `−Σₖ qₖ ln σ(z)ₖ`; gradient rows are
/// `(σ(z) − q) / M`.
pub fn knowledge_loss(logits: &[&[f64]], soft_labels: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = logits.len();
    if m == 0 {
        return Err(Error::Argument("knowledge_loss: empty batch".into()));
    }
    if soft_labels.len() != m {
        return Err(Error::Shape(format!(
            "knowledge_loss: {m} logit rows but {} soft labels",
            soft_labels.len()
        )));
    }
    let scale = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(m);
    for (row, q) in logits.iter().zip(soft_labels) {
        if q.len() != row.len() {
            return Err(Error::Shape(format!(
                "soft label of length {} for {} logits",
                q.len(),
                row.len()
            )));
        }
        validate_distribution(q, SOFT_LABEL_TOLERANCE)?;
        let logp = log_softmax(row)?;
        value -= scale * q.iter().zip(&logp).map(|(qk, lp)| qk * lp).sum::<f64>();
        grads.push(
            logp.iter()
                .zip(q.iter())
                .map(|(lp, qk)| (lp.exp() - qk) * scale)
                .collect(),
        );
    }
    Ok((value, grads))
}

pub(crate) fn validate_distribution(q: &[f64], tol: f64) -> Result<()> {
    if q.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Data("soft label has entries outside [0, 1]".into()));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::Data(format!("soft label sums to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Per-term values of the composed objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sim: f64,
    pub l_cls: f64,
    pub l_knowledge: f64,
    pub total: f64,
}

/// Unit-weight sum of the enabled terms; disabled classification or
/// knowledge terms contribute exactly zero. The similarity term is always
/// active (triplet or quadruplet).
pub fn combine(l_sim: f64, l_cls: f64, l_knowledge: f64, cfg: &LossConfig) -> LossReport {
    let l_cls = if cfg.enable_cls { l_cls } else { 0.0 };
    let l_knowledge = if cfg.enable_knowledge { l_knowledge } else { 0.0 };
    LossReport {
        l_sim,
        l_cls,
        l_knowledge,
        total: l_knowledge + l_cls + l_sim,
    }
}

/// `v / ‖v‖` and the norm (clamped away from zero).
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Pulls a gradient on `v / ‖v‖` back to `v`: `(g − u (u·g)) / ‖v‖`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let ug: f64 = unit.iter().zip(g).map(|(u, gi)| u * gi).sum();
    unit.iter().zip(g).map(|(u, gi)| (gi - u * ug) / norm).collect()
}
