//! End-to-end experiment wiring: config document, per-stage seeds and the
//! data → split → soft labels → train → eval pipeline, plus the loss
//! ablation.
//!
//! Every stage draws from its own generator, seeded with
//! `derive_seed(seed, "<stage>")`, so stages can be rerun independently.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate, make_split, Dataset, DatasetItem, Domain, SplitProtocol, SplitSpec, SynthConfig,
};
use crate::distill::{
    extract_soft_labels, pretrain_teacher, PretrainReport, SoftLabelMode, SoftLabelTable, TeacherConfig,
};
use crate::encoder::{EncoderConfig, EncoderNetwork};
use crate::error::{Error, Result};
use crate::evalrank::{
    build_gallery, query_set, rank_all, report_from_rankings, top_k_lines, ApNormalizer, Cutoff,
    EmbeddingSet, EvalReport, GalleryMode, MetricConfig, RankedRetrieval,
};
use crate::losses::{l2_normalize, LossConfig};
use crate::ndcore::{derive_seed, Rng};
use crate::trainer::{train, OptimizerConfig, TrainOutcome};

pub mod stage {
    pub const DATA: &str = "data";
    pub const SPLIT: &str = "split";
    pub const TEACHER: &str = "teacher";
    pub const ENCODER_INIT: &str = "encoder-init";
    pub const TRAIN: &str = "train";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthConfig),
    /// Dataset TSV, e.g. precomputed features of real images.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            hidden_dims: vec![64],
            embed_dim: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherScope {
    /// Pretrain on photos of every class (a pretraining set that overlaps
    /// the test classes).
    #[default]
    AllClasses,
    /// Pretrain on seen-class photos only.
    SeenClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    pub teacher: TeacherConfig,
    pub teacher_scope: TeacherScope,
    pub soft_label_mode: SoftLabelMode,
    /// Where `soft-labels` writes and `train` reads the table; defaults to
    /// `<output_dir>/soft_labels.tsv`.
    pub soft_label_path: Option<PathBuf>,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            teacher: TeacherConfig::default(),
            teacher_scope: TeacherScope::AllClasses,
            soft_label_mode: SoftLabelMode::LogitMean,
            soft_label_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k_values: Vec<usize>,
    pub map_mode: Cutoff,
    pub ap_normalizers: Vec<ApNormalizer>,
    pub gallery_modes: Vec<GalleryMode>,
    pub score_empty_as_zero: bool,
    /// Write the top-K list file with this many entries per query.
    pub top_k_list: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k_values: vec![100, 200],
            map_mode: Cutoff::All,
            ap_normalizers: vec![ApNormalizer::TotalRelevant, ApNormalizer::MinKRelevant],
            gallery_modes: vec![GalleryMode::ZeroShot, GalleryMode::Generalized],
            score_empty_as_zero: false,
            top_k_list: None,
        }
    }
}

impl EvalSettings {
    pub fn metric_configs(&self) -> Vec<MetricConfig> {
        let mut out = Vec::new();
        for &gallery_mode in &self.gallery_modes {
            for &ap_normalizer in &self.ap_normalizers {
                out.push(MetricConfig {
                    k_values: self.k_values.clone(),
                    map_mode: self.map_mode,
                    ap_normalizer,
                    gallery_mode,
                    score_empty_as_zero: self.score_empty_as_zero,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Seeds shared by every row; empty means the top-level seed only.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub split: SplitProtocol,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub losses: LossConfig,
    /// `optimizer.seed` is replaced by a sub-seed of the top-level seed.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub distill: DistillSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder widths must be >= 1".into()));
        }
        self.losses.validate()?;
        self.optimizer.validate()?;
        self.distill.teacher.validate()?;
        for m in self.eval.metric_configs() {
            m.validate()?;
        }
        if self.eval.gallery_modes.is_empty() || self.eval.ap_normalizers.is_empty() {
            return Err(Error::Config(
                "eval needs at least one gallery mode and normalizer".into(),
            ));
        }
        Ok(())
    }

    pub fn soft_label_path(&self) -> PathBuf {
        self.distill
            .soft_label_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join(files::SOFT_LABELS))
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}

/// File names inside `output_dir`.
pub mod files {
    pub const DATASET: &str = "dataset.tsv";
    pub const SPLIT: &str = "split.json";
    pub const SOFT_LABELS: &str = "soft_labels.tsv";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const RESULTS: &str = "results.json";
    pub const TOP_K: &str = "topk.tsv";
    pub const ABLATION: &str = "ablation.csv";
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synth(s) => generate(s, &mut Rng::new(derive_seed(seed, stage::DATA))),
        DataSource::Path(p) => Dataset::load(p),
    }
}

pub fn build_split(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<SplitSpec> {
    make_split(&dataset.classes(), &cfg.split, derive_seed(seed, stage::SPLIT))
}

/// Proxy labelling for teacher pretraining: `class_id mod T`.
pub fn proxy_labels(classes: &[usize], teacher_class_count: usize) -> BTreeMap<usize, usize> {
    classes.iter().map(|&c| (c, c % teacher_class_count)).collect()
}

pub fn photos_of(dataset: &Dataset, keep: impl Fn(usize) -> bool) -> Vec<DatasetItem> {
    dataset
        .items()
        .iter()
        .filter(|i| i.domain == Domain::Photo && keep(i.class_id))
        .cloned()
        .collect()
}

/// Pretrains the teacher and extracts seen-class soft labels.
pub fn distill_stage(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    seed: u64,
) -> Result<(SoftLabelTable, PretrainReport)> {
    let teacher_photos = match cfg.distill.teacher_scope {
        TeacherScope::AllClasses => photos_of(dataset, |_| true),
        TeacherScope::SeenClasses => photos_of(dataset, |c| split.is_seen(c)),
    };
    let proxy = proxy_labels(&dataset.classes(), cfg.distill.teacher.teacher_class_count);
    let mut rng = Rng::new(derive_seed(seed, stage::TEACHER));
    let (teacher, report) = pretrain_teacher(&teacher_photos, &proxy, &cfg.distill.teacher, &mut rng)?;
    let seen_photos = photos_of(dataset, |c| split.is_seen(c));
    let table = extract_soft_labels(&teacher, &seen_photos, &split.seen, cfg.distill.soft_label_mode)?;
    Ok((table, report))
}

pub fn encoder_config(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    seed: u64,
) -> EncoderConfig {
    EncoderConfig {
        input_dim: dataset.feature_dim(),
        hidden_dims: cfg.encoder.hidden_dims.clone(),
        embed_dim: cfg.encoder.embed_dim,
        num_seen_classes: split.seen.len(),
        teacher_class_count: cfg.distill.teacher.teacher_class_count,
        init_seed: derive_seed(seed, stage::ENCODER_INIT),
    }
}

pub fn train_stage(
    cfg: &ExperimentConfig,
    losses: &LossConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    soft_labels: Option<&SoftLabelTable>,
    seed: u64,
) -> Result<TrainOutcome> {
    let net = EncoderNetwork::init_seeded(encoder_config(cfg, dataset, split, seed))?;
    let opt = OptimizerConfig {
        seed: derive_seed(seed, stage::TRAIN),
        ..cfg.optimizer.clone()
    };
    train(net, dataset, split, losses, &opt, soft_labels)
}

/// Retrieval embeddings for every item, normalised when training normalised.
pub fn embed_dataset(net: &EncoderNetwork, dataset: &Dataset, losses: &LossConfig) -> Result<EmbeddingSet> {
    EmbeddingSet::from_items(dataset.items(), |x| {
        let e = net.apply_embedding_only(x)?;
        Ok(if losses.normalize_embeddings {
            l2_normalize(&e).0
        } else {
            e
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: EvalSettings,
    pub split: SplitSpec,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: ResultsFile,
    /// Rankings per gallery mode, in `gallery_modes` order.
    pub rankings: Vec<(GalleryMode, Vec<RankedRetrieval>)>,
    pub queries: EmbeddingSet,
    pub galleries: Vec<(GalleryMode, EmbeddingSet)>,
}

pub fn eval_stage(
    cfg: &ExperimentConfig,
    net: &EncoderNetwork,
    dataset: &Dataset,
    split: &SplitSpec,
) -> Result<Evaluation> {
    if net.config().input_dim != dataset.feature_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, dataset has {}",
            net.config().input_dim,
            dataset.feature_dim()
        )));
    }
    let set = embed_dataset(net, dataset, &cfg.losses)?;
    let queries = query_set(&set, split)?;
    let mut rankings = Vec::new();
    let mut galleries = Vec::new();
    let mut reports = Vec::new();
    for &mode in &cfg.eval.gallery_modes {
        let gallery = build_gallery(&set, split, mode)?;
        let ranked = rank_all(&queries, &gallery)?;
        for mc in cfg
            .eval
            .metric_configs()
            .iter()
            .filter(|m| m.gallery_mode == mode)
        {
            reports.push(report_from_rankings(&ranked, gallery.len(), mc)?);
        }
        rankings.push((mode, ranked));
        galleries.push((mode, gallery));
    }
    Ok(Evaluation {
        results: ResultsFile {
            config: cfg.eval.clone(),
            split: split.clone(),
            reports,
        },
        rankings,
        queries,
        galleries,
    })
}

impl Evaluation {
    pub fn top_k(&self, k: usize) -> String {
        self.rankings
            .first()
            .map(|(_, r)| top_k_lines(r, k))
            .unwrap_or_default()
    }

    /// Metrics of the first configured gallery mode and normaliser.
    pub fn primary(&self) -> &EvalReport {
        &self.results.reports[0]
    }
}

/// The five loss configurations of the ablation, in order.
pub fn ablation_rows(base: &LossConfig) -> Vec<(&'static str, LossConfig)> {
    let row = |quad, cls, know| LossConfig {
        enable_quadruplet: quad,
        enable_cls: cls,
        enable_knowledge: know,
        ..base.clone()
    };
    vec![
        ("baseline", row(false, false, false)),
        ("quad", row(true, false, false)),
        ("quad+id", row(true, true, false)),
        ("quad+know", row(true, false, true)),
        ("quad+id+know", row(true, true, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub losses: LossConfig,
    /// Primary-report metrics per seed, in seed order.
    pub per_seed: Vec<BTreeMap<String, f64>>,
}

impl AblationRow {
    pub fn mean(&self, metric: &str) -> f64 {
        self.per_seed.iter().map(|m| m[metric]).sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Runs every ablation row on every seed. Data, split and soft labels are
/// shared by all rows of a seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let seeds = cfg.ablation_seeds();
    let configs = ablation_rows(&cfg.losses);
    let mut rows: Vec<AblationRow> = configs
        .iter()
        .map(|(name, losses)| AblationRow {
            name: name.to_string(),
            losses: losses.clone(),
            per_seed: Vec::new(),
        })
        .collect();
    for &seed in &seeds {
        let dataset = load_dataset(cfg, seed)?;
        let split = build_split(cfg, &dataset, seed)?;
        let (table, _) = distill_stage(cfg, &dataset, &split, seed)?;
        for row in rows.iter_mut() {
            let outcome = train_stage(cfg, &row.losses, &dataset, &split, Some(&table), seed)?;
            let run_cfg = ExperimentConfig {
                losses: row.losses.clone(),
                ..cfg.clone()
            };
            let eval = eval_stage(&run_cfg, &outcome.network, &dataset, &split)?;
            log::info!("seed {seed} {}: {:?}", row.name, eval.primary().metrics);
            row.per_seed.push(eval.primary().metrics.clone());
        }
    }
    Ok(AblationTable { seeds, rows })
}

impl AblationTable {
    /// CSV with a `# seeds=...` header line, one row per configuration and
    /// one column per metric (mean over seeds) plus per-seed mAP@all.
    pub fn to_csv(&self) -> String {
        let metrics: Vec<String> = self
            .rows
            .first()
            .and_then(|r| r.per_seed.first())
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# seeds={}\n", seeds.join(","));
        let mut header = vec!["config".to_string(), "quad".into(), "id".into(), "know".into()];
        header.extend(metrics.iter().cloned());
        header.extend(self.seeds.iter().map(|s| format!("mAP@all_seed{s}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let flag = |b: bool| if b { "1" } else { "0" }.to_string();
            let mut cells = vec![
                row.name.clone(),
                flag(row.losses.enable_quadruplet),
                flag(row.losses.enable_cls),
                flag(row.losses.enable_knowledge),
            ];
            cells.extend(metrics.iter().map(|m| format!("{:.6}", row.mean(m))));
            cells.extend(row.per_seed.iter().map(|m| format!("{:.6}", m["mAP@all"])));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
