//! SGD with momentum and L2 weight decay, a step learning-rate schedule and
//! early stopping on a seen-class validation metric.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetItem, Domain, Quadruplet, QuadrupletSampler, SplitSpec};
use crate::distill::SoftLabelTable;
use crate::encoder::{EncoderNetwork, EncoderParams, ForwardRecord};
use crate::error::{Error, Result};
use crate::evalrank::{map_from_rankings, rank_all, ApNormalizer, Cutoff, EmbeddingSet};
use crate::losses::{
    classification_loss, combine, knowledge_loss, l2_normalize, l2_normalize_backward, quadruplet_loss,
    triplet_loss, LossConfig, LossReport,
};
use crate::ndcore::{argmax, derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Seen-class accuracy of the classification head.
    #[default]
    ClsAccuracy,
    /// mAP@all of held-out seen sketches against held-out seen photos.
    RetrievalMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_quads: usize,
    /// Share of each seen (class, domain) group held out for validation.
    pub val_fraction: f64,
    pub validation: ValidationMode,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 10.0,
            lr_decay_every_epochs: 10,
            max_epochs: 25,
            early_stop_patience: 5,
            batch_quads: 16,
            val_fraction: 0.1,
            validation: ValidationMode::ClsAccuracy,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr0 == 0 is accepted: it freezes the network.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan()
            || self.weight_decay < 0.0
            || self.lr_decay_factor.is_nan()
            || self.lr_decay_factor <= 0.0
        {
            return Err(Error::Config(
                "weight_decay >= 0 and lr_decay_factor > 0 required".into(),
            ));
        }
        if self.early_stop_patience < 1 || self.lr_decay_every_epochs < 1 || self.batch_quads < 1 {
            return Err(Error::Config(
                "patience, decay interval and batch size must be >= 1".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `lr0 / factor^⌊epoch / every⌋`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_decay_every_epochs) as i32;
        self.lr0 / self.lr_decay_factor.powi(drops)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_sim: f64,
    pub l_cls: f64,
    pub l_knowledge: f64,
    pub total: f64,
    pub val_metric: f64,
}

pub fn metrics_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub velocity: EncoderParams,
    pub best_val_metric: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(net: &EncoderNetwork) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            velocity: net.params.zeros_like(),
            best_val_metric: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }
}

/// `v ← μv + (g + λp)`, `p ← p − lr·v`, then clears the gradients. Decay
/// applies to weights and biases alike.
pub fn sgd_step(net: &mut EncoderNetwork, state: &mut TrainState, cfg: &OptimizerConfig) -> Result<()> {
    for (t, g) in net.grads.tensors().iter().enumerate() {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {} (tensor {t}, entry {k}: {})",
                state.step, g[k]
            )));
        }
    }
    let lr = cfg.lr_at(state.epoch);
    let grads = net
        .grads
        .tensors()
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect::<Vec<_>>();
    for ((p, v), g) in net
        .params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(&grads)
    {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
            *p -= lr * *v;
        }
    }
    net.zero_grads();
    state.step += 1;
    Ok(())
}

/// Forward/backward over one batch of quadruplets: returns the loss terms and
/// accumulates their gradients into `net.grads`. Classification and
/// knowledge terms average over all `4N` images.
pub fn accumulate_batch(
    net: &mut EncoderNetwork,
    items: &[DatasetItem],
    quads: &[Quadruplet],
    split: &SplitSpec,
    soft_labels: Option<&SoftLabelTable>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let slots: Vec<&DatasetItem> = quads.iter().flat_map(|q| q.slots()).map(|i| &items[i]).collect();
    let records = slots
        .iter()
        .map(|item| net.forward(&item.features))
        .collect::<Result<Vec<ForwardRecord>>>()?;
    let m = records.len();
    let cfg_net = net.config();

    let normalized: Vec<(Vec<f64>, f64)> = if cfg.normalize_embeddings {
        records.iter().map(|r| l2_normalize(&r.embedding)).collect()
    } else {
        Vec::new()
    };
    let emb = |i: usize| -> &[f64] {
        if cfg.normalize_embeddings {
            &normalized[i].0
        } else {
            &records[i].embedding
        }
    };
    let role = |slot: usize| -> Vec<&[f64]> { (0..quads.len()).map(|q| emb(4 * q + slot)).collect() };
    let (a, p, np, ns) = (role(0), role(1), role(2), role(3));

    let mut d_emb = vec![vec![0.0; cfg_net.embed_dim]; m];
    let sim = if cfg.enable_quadruplet {
        quadruplet_loss(&a, &p, &np, &ns, cfg.margin_alpha)?
    } else {
        triplet_loss(&a, &p, &np, cfg.margin_alpha)?
    };
    let by_role = [
        &sim.d_anchor,
        &sim.d_positive,
        &sim.d_negative_photo,
        &sim.d_negative_sketch,
    ];
    for (slot, grads) in by_role.iter().enumerate() {
        for (q, g) in grads.iter().enumerate() {
            d_emb[4 * q + slot] = if cfg.normalize_embeddings {
                let (unit, norm) = &normalized[4 * q + slot];
                l2_normalize_backward(unit, *norm, g)
            } else {
                g.clone()
            };
        }
    }

    let (l_cls, d_cls) = if cfg.enable_cls {
        let labels = slots
            .iter()
            .map(|item| {
                split
                    .seen_index(item.class_id)
                    .ok_or_else(|| Error::Data(format!("item {} is not from a seen class", item.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<&[f64]> = records.iter().map(|r| r.cls_logits.as_slice()).collect();
        classification_loss(&logits, &labels)?
    } else {
        (0.0, vec![vec![0.0; cfg_net.num_seen_classes]; m])
    };

    let (l_know, d_soft) = if cfg.enable_knowledge {
        let table = soft_labels
            .ok_or_else(|| Error::Config("knowledge loss enabled without a soft-label table".into()))?;
        let targets = slots
            .iter()
            .map(|item| table.lookup(item))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<&[f64]> = records.iter().map(|r| r.soft_logits.as_slice()).collect();
        knowledge_loss(&logits, &targets)?
    } else {
        (0.0, vec![vec![0.0; cfg_net.teacher_class_count]; m])
    };

    for (i, rec) in records.iter().enumerate() {
        net.backward(rec, &d_emb[i], &d_cls[i], &d_soft[i])?;
    }
    let report = combine(sim.value, l_cls, l_know, cfg);
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    Ok(report)
}

/// Accuracy of the classification head (ties toward the lowest class index)
/// or held-out retrieval mAP, depending on `mode`.
pub fn validation_metric(
    net: &EncoderNetwork,
    val_items: &[DatasetItem],
    split: &SplitSpec,
    mode: ValidationMode,
) -> Result<f64> {
    if val_items.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    match mode {
        ValidationMode::ClsAccuracy => {
            let mut correct = 0usize;
            for item in val_items {
                let want = split.seen_index(item.class_id).ok_or_else(|| {
                    Error::Data(format!("validation item {} is not from a seen class", item.id))
                })?;
                let logits = net.forward(&item.features)?.cls_logits;
                if argmax(&logits) == Some(want) {
                    correct += 1;
                }
            }
            Ok(correct as f64 / val_items.len() as f64)
        }
        ValidationMode::RetrievalMap => {
            let set = EmbeddingSet::from_items(val_items, |x| net.apply_embedding_only(x))?;
            let queries = set.filter(|i| set.domain(i) == Domain::Sketch);
            let gallery = set.filter(|i| set.domain(i) == Domain::Photo);
            if queries.is_empty() || gallery.is_empty() {
                return Err(Error::Config(
                    "retrieval validation needs held-out sketches and photos".into(),
                ));
            }
            let rankings = rank_all(&queries, &gallery)?;
            Ok(map_from_rankings(&rankings, Cutoff::All, ApNormalizer::TotalRelevant, false)?.mean)
        }
    }
}

/// Splits seen-class items into train and validation, stratified by
/// (class, domain). Groups of one item stay in training.
pub fn split_train_val(
    items: &[DatasetItem],
    val_fraction: f64,
    rng: &mut Rng,
) -> (Vec<DatasetItem>, Vec<DatasetItem>) {
    let mut groups: BTreeMap<(usize, Domain), Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry((item.class_id, item.domain)).or_default().push(i);
    }
    let mut val = vec![false; items.len()];
    for (_, mut idxs) in groups {
        if idxs.len() < 2 {
            continue;
        }
        rng.shuffle(&mut idxs);
        let held = ((idxs.len() as f64 * val_fraction).round() as usize).clamp(1, idxs.len() - 1);
        for &i in &idxs[..held] {
            val[i] = true;
        }
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (item, is_val) in items.iter().zip(val) {
        if is_val {
            held.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    (train, held)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The network at the best validation epoch.
    pub network: EncoderNetwork,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn log(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

/// Full training run on the seen classes of `dataset`.
pub fn train(
    mut net: EncoderNetwork,
    dataset: &Dataset,
    split: &SplitSpec,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
    soft_labels: Option<&SoftLabelTable>,
) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    opt.validate()?;
    split.validate()?;
    let ncfg = net.config().clone();
    if ncfg.input_dim != dataset.feature_dim() {
        return Err(Error::Shape(format!(
            "encoder input_dim {} vs dataset feature dim {}",
            ncfg.input_dim,
            dataset.feature_dim()
        )));
    }
    if ncfg.num_seen_classes != split.seen.len() {
        return Err(Error::Shape(format!(
            "classification head has {} outputs for {} seen classes",
            ncfg.num_seen_classes,
            split.seen.len()
        )));
    }
    if loss_cfg.enable_knowledge {
        let table = soft_labels
            .ok_or_else(|| Error::Config("knowledge loss enabled without a soft-label table".into()))?;
        if table.width() != ncfg.teacher_class_count {
            return Err(Error::Shape(format!(
                "soft labels have width {}, FC_soft has {}",
                table.width(),
                ncfg.teacher_class_count
            )));
        }
        if let Some(c) = split.seen.iter().find(|&&c| table.get(c).is_none()) {
            return Err(Error::Key(format!("no soft label for seen class {c}")));
        }
    }

    let seen: Vec<DatasetItem> = dataset
        .items()
        .iter()
        .filter(|i| split.is_seen(i.class_id))
        .cloned()
        .collect();
    let mut split_rng = Rng::new(derive_seed(opt.seed, "validation-split"));
    let (train_items, val_items) = split_train_val(&seen, opt.val_fraction, &mut split_rng);
    let sampler = QuadrupletSampler::new(&train_items)?;
    let batches = sampler.sketch_count().div_ceil(opt.batch_quads);
    let mut rng = Rng::new(derive_seed(opt.seed, "sampler"));
    info!(
        "training on {} items ({} held out), {batches} batches/epoch",
        train_items.len(),
        val_items.len()
    );

    let mut state = TrainState::new(&net);
    let mut best = net.clone();
    while state.epoch < opt.max_epochs {
        let lr = opt.lr_at(state.epoch);
        let mut sums = LossReport::default();
        for _ in 0..batches {
            let quads = sampler.sample_batch(opt.batch_quads, &mut rng)?;
            let r = accumulate_batch(&mut net, &train_items, &quads, split, soft_labels, loss_cfg)?;
            sgd_step(&mut net, &mut state, opt)?;
            sums.l_sim += r.l_sim;
            sums.l_cls += r.l_cls;
            sums.l_knowledge += r.l_knowledge;
            sums.total += r.total;
        }
        let val_metric = validation_metric(&net, &val_items, split, opt.validation)?;
        let n = batches as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            lr,
            l_sim: sums.l_sim / n,
            l_cls: sums.l_cls / n,
            l_knowledge: sums.l_knowledge / n,
            total: sums.total / n,
            val_metric,
        };
        debug!("{record:?}");
        state.history.push(record);
        if val_metric > state.best_val_metric {
            state.best_val_metric = val_metric;
            state.best_epoch = Some(state.epoch);
            state.epochs_since_improvement = 0;
            best = net.clone();
        } else {
            state.epochs_since_improvement += 1;
        }
        state.epoch += 1;
        if state.epochs_since_improvement >= opt.early_stop_patience {
            info!("early stop after {} epochs", state.epoch);
            break;
        }
    }
    best.zero_grads();
    Ok(TrainOutcome { network: best, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_split, SplitProtocol, SynthConfig};
    use crate::distill::{extract_soft_labels, pretrain_teacher, SoftLabelMode, TeacherConfig};
    use crate::encoder::EncoderConfig;

    fn scalar_net() -> EncoderNetwork {
        let cfg = EncoderConfig {
            input_dim: 1,
            hidden_dims: vec![],
            embed_dim: 1,
            num_seen_classes: 1,
            teacher_class_count: 1,
            init_seed: 0,
        };
        EncoderNetwork::init_seeded(cfg).unwrap()
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut net = scalar_net();
        let mut values = net.params.flatten();
        values.iter_mut().for_each(|v| *v = 1.0);
        net.params.assign_flat(&values).unwrap();
        let cfg = OptimizerConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = TrainState::new(&net);
        for _ in 0..2 {
            for t in net.grads.tensors_mut() {
                t.fill(1.0);
            }
            sgd_step(&mut net, &mut state, &cfg).unwrap();
        }
        for w in net.params.flatten() {
            assert!((w - 0.71).abs() < 1e-15);
        }
        assert!(net.grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let mut net = scalar_net();
        let before = net.params.flatten();
        let cfg = OptimizerConfig {
            lr0: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        for t in net.grads.tensors_mut() {
            t.fill(0.2);
        }
        let mut st = TrainState::new(&net);
        sgd_step(&mut net, &mut st, &cfg).unwrap();
        for (a, b) in before.iter().zip(net.params.flatten()) {
            assert!((a - 0.1 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_shifts_update_by_lr_decay_param() {
        let mut rng = Rng::new(1);
        let base = EncoderNetwork::init_seeded(EncoderConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            embed_dim: 2,
            num_seen_classes: 2,
            teacher_class_count: 2,
            init_seed: 4,
        })
        .unwrap();
        let grads: Vec<f64> = (0..base.param_count()).map(|_| rng.normal()).collect();
        let run = |decay: f64| {
            let mut net = base.clone();
            net.grads.assign_flat(&grads).unwrap();
            let cfg = OptimizerConfig {
                lr0: 0.01,
                weight_decay: decay,
                ..Default::default()
            };
            let mut st = TrainState::new(&net);
            sgd_step(&mut net, &mut st, &cfg).unwrap();
            net.params.flatten()
        };
        let (with, without) = (run(5e-4), run(0.0));
        for ((w, wo), p) in with.iter().zip(&without).zip(base.params.flatten()) {
            assert!((wo - w - 0.01 * 5e-4 * p).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut net = scalar_net();
        net.grads.tensors_mut()[0][0] = f64::NAN;
        let mut st = TrainState::new(&net);
        let err = sgd_step(&mut net, &mut st, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn schedule_matches_reference_recipe() {
        let cfg = OptimizerConfig::default();
        for e in 0..25 {
            let want = match e {
                0..=9 => 1e-4,
                10..=19 => 1e-5,
                _ => 1e-6,
            };
            assert_eq!(cfg.lr_at(e), want, "epoch {e}");
        }
    }

    #[test]
    fn accuracy_edge_cases() {
        let split = SplitSpec {
            protocol: "heldout_list".into(),
            seed: 0,
            seen: vec![0, 1, 2],
            unseen: vec![3],
        };
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![],
            embed_dim: 1,
            num_seen_classes: 3,
            teacher_class_count: 1,
            init_seed: 0,
        };
        // identity classifier: logits == input
        let mut params = EncoderNetwork::init_seeded(cfg.clone()).unwrap().params;
        params.head_cls.weights = crate::ndcore::Matrix::identity(3);
        let net = EncoderNetwork::from_params(cfg, params).unwrap();
        let item = |c: usize, x: Vec<f64>| DatasetItem {
            id: format!("i{c}{}", x[0]),
            domain: Domain::Photo,
            class_id: c,
            features: x,
        };
        let perfect = vec![item(0, vec![5.0, 0.0, 0.0]), item(2, vec![0.0, 1.0, 3.0])];
        assert_eq!(
            validation_metric(&net, &perfect, &split, ValidationMode::ClsAccuracy).unwrap(),
            1.0
        );
        let ties = vec![item(0, vec![1.0, 1.0, 1.0]), item(1, vec![0.0, 0.0, 0.0])];
        assert_eq!(
            validation_metric(&net, &ties, &split, ValidationMode::ClsAccuracy).unwrap(),
            0.5
        );
        assert!(matches!(
            validation_metric(&net, &[], &split, ValidationMode::ClsAccuracy),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let c = 5;
        let ds = generate(
            &SynthConfig {
                num_classes: c,
                sketches_per_class: 200,
                photos_per_class: 200,
                feature_dim: 8,
                ..Default::default()
            },
            &mut Rng::new(2),
        )
        .unwrap();
        let split = SplitSpec {
            protocol: "heldout_list".into(),
            seed: 0,
            seen: (0..c).collect(),
            unseen: vec![99],
        };
        // Average over several random initialisations: any single random
        // head can be biased toward one class.
        let mut total = 0.0;
        let inits = 20;
        for seed in 0..inits {
            let net = EncoderNetwork::init_seeded(EncoderConfig {
                input_dim: 8,
                hidden_dims: vec![8],
                embed_dim: 4,
                num_seen_classes: c,
                teacher_class_count: 2,
                init_seed: seed,
            })
            .unwrap();
            total += validation_metric(&net, ds.items(), &split, ValidationMode::ClsAccuracy).unwrap();
        }
        let mean = total / inits as f64;
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / inits as f64).sqrt();
        assert!((mean - p).abs() < 3.0 * sigma, "mean accuracy {mean}");
    }

    fn fixture() -> (Dataset, SplitSpec, SoftLabelTable) {
        let ds = generate(
            &SynthConfig {
                num_classes: 6,
                sketches_per_class: 12,
                photos_per_class: 12,
                feature_dim: 6,
                class_separation: 1.5,
                ..Default::default()
            },
            &mut Rng::new(3),
        )
        .unwrap();
        let split = make_split(&ds.classes(), &SplitProtocol::RandomK { k: 2 }, 1).unwrap();
        let photos: Vec<DatasetItem> = ds
            .items()
            .iter()
            .filter(|i| i.domain == Domain::Photo)
            .cloned()
            .collect();
        let proxy = (0..6).map(|c| (c, c)).collect();
        let tcfg = TeacherConfig {
            hidden_dim: 8,
            teacher_class_count: 6,
            ..Default::default()
        };
        let (teacher, _) = pretrain_teacher(&photos, &proxy, &tcfg, &mut Rng::new(0)).unwrap();
        let table = extract_soft_labels(&teacher, &photos, &split.seen, SoftLabelMode::LogitMean).unwrap();
        (ds, split, table)
    }

    fn fixture_net(split: &SplitSpec) -> EncoderNetwork {
        EncoderNetwork::init_seeded(EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![8],
            embed_dim: 4,
            num_seen_classes: split.seen.len(),
            teacher_class_count: 6,
            init_seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn total_loss_decreases_on_a_fixed_batch() {
        let (ds, split, table) = fixture();
        let seen: Vec<DatasetItem> = ds
            .items()
            .iter()
            .filter(|i| split.is_seen(i.class_id))
            .cloned()
            .collect();
        let sampler = QuadrupletSampler::new(&seen).unwrap();
        let quads = sampler.sample_batch(8, &mut Rng::new(6)).unwrap();
        let mut net = fixture_net(&split);
        let cfg = LossConfig::default();
        let opt = OptimizerConfig {
            lr0: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = TrainState::new(&net);
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let r = accumulate_batch(&mut net, &seen, &quads, &split, Some(&table), &cfg).unwrap();
            assert!(r.total <= last, "{} > {last}", r.total);
            last = r.total;
            sgd_step(&mut net, &mut state, &opt).unwrap();
        }
    }

    #[test]
    fn frozen_network_stops_after_patience() {
        let (ds, split, table) = fixture();
        for (patience, epochs) in [(1, 2), (5, 6)] {
            let opt = OptimizerConfig {
                lr0: 0.0,
                early_stop_patience: patience,
                ..Default::default()
            };
            let out = train(
                fixture_net(&split),
                &ds,
                &split,
                &LossConfig::default(),
                &opt,
                Some(&table),
            )
            .unwrap();
            assert_eq!(out.state.epoch, epochs);
            assert_eq!(out.log().len(), epochs);
            assert_eq!(out.state.best_epoch, Some(0));
        }
    }

    #[test]
    fn training_is_deterministic_and_returns_best() {
        let (ds, split, table) = fixture();
        let opt = OptimizerConfig {
            lr0: 0.01,
            max_epochs: 6,
            batch_quads: 4,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            train(
                fixture_net(&split),
                &ds,
                &split,
                &LossConfig::default(),
                &opt,
                Some(&table),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(metrics_jsonl(a.log()).unwrap(), metrics_jsonl(b.log()).unwrap());
        assert_eq!(a.network.params, b.network.params);
        let max = a
            .log()
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.state.best_val_metric, max);

        // the returned network reproduces the best epoch's metric
        let seen: Vec<DatasetItem> = ds
            .items()
            .iter()
            .filter(|i| split.is_seen(i.class_id))
            .cloned()
            .collect();
        let (_, val) = split_train_val(
            &seen,
            opt.val_fraction,
            &mut Rng::new(derive_seed(opt.seed, "validation-split")),
        );
        let replay = validation_metric(&a.network, &val, &split, opt.validation).unwrap();
        assert_eq!(replay, max);
    }

    #[test]
    fn knowledge_without_table_is_rejected() {
        let (ds, split, _) = fixture();
        let err = train(
            fixture_net(&split),
            &ds,
            &split,
            &LossConfig::default(),
            &OptimizerConfig::default(),
            None,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn validation_split_is_stratified() {
        let (ds, split, _) = fixture();
        let seen: Vec<DatasetItem> = ds
            .items()
            .iter()
            .filter(|i| split.is_seen(i.class_id))
            .cloned()
            .collect();
        let (train_items, val) = split_train_val(&seen, 0.1, &mut Rng::new(0));
        assert_eq!(train_items.len() + val.len(), seen.len());
        for &c in &split.seen {
            for d in [Domain::Sketch, Domain::Photo] {
                assert_eq!(val.iter().filter(|i| i.class_id == c && i.domain == d).count(), 1);
            }
        }
    }
}
