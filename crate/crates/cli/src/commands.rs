use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use zsrl_core::data::{Dataset, Domain, SplitSpec};
use zsrl_core::distill::SoftLabelTable;
use zsrl_core::encoder::Checkpoint;
use zsrl_core::evalrank::{brute_force, Cutoff};
use zsrl_core::experiment::{self, files, ExperimentConfig};
use zsrl_core::trainer::metrics_jsonl;
use zsrl_core::Error;

use crate::{Common, Failure};

type Outcome = Result<Vec<String>, Failure>;

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(&c.config).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read config {}: {e}", c.config.display()),
    })?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Failure {
        code: 1,
        message: format!("cannot create {}: {e}", cfg.output_dir.display()),
    })?;
    Ok(cfg)
}

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn write(path: &Path, contents: &str) -> Result<String, Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })?;
    Ok(path.display().to_string())
}

/// Dataset and split from `output_dir` when `gen-data` already wrote them,
/// otherwise regenerated from the config (and written).
fn dataset_and_split(cfg: &ExperimentConfig) -> Result<(Dataset, SplitSpec), Failure> {
    let (dp, sp) = (out(cfg, files::DATASET), out(cfg, files::SPLIT));
    if dp.exists() && sp.exists() {
        info!("reusing {} and {}", dp.display(), sp.display());
        return Ok((Dataset::load(&dp)?, SplitSpec::load(&sp)?));
    }
    let dataset = experiment::load_dataset(cfg, cfg.seed)?;
    let split = experiment::build_split(cfg, &dataset, cfg.seed)?;
    dataset.save(&dp)?;
    split.save(&sp)?;
    Ok((dataset, split))
}

pub fn gen_data(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let dataset = experiment::load_dataset(&cfg, cfg.seed)?;
    let split = experiment::build_split(&cfg, &dataset, cfg.seed)?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for item in dataset.items() {
        let e = counts.entry(item.class_id).or_default();
        match item.domain {
            Domain::Sketch => e.0 += 1,
            Domain::Photo => e.1 += 1,
        }
    }
    eprintln!("class\tsketches\tphotos\tsplit");
    for (class, (s, p)) in &counts {
        let side = if split.is_seen(*class) { "seen" } else { "unseen" };
        eprintln!("{class}\t{s}\t{p}\t{side}");
    }
    let (s, p) = counts.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    eprintln!(
        "total: {} classes ({} seen, {} unseen), {s} sketches, {p} photos",
        counts.len(),
        split.seen.len(),
        split.unseen.len()
    );
    let (dp, sp) = (out(&cfg, files::DATASET), out(&cfg, files::SPLIT));
    dataset.save(&dp)?;
    split.save(&sp)?;
    Ok(vec![dp.display().to_string(), sp.display().to_string()])
}

pub fn soft_labels(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let (dataset, split) = dataset_and_split(&cfg)?;
    let (table, report) = experiment::distill_stage(&cfg, &dataset, &split, cfg.seed)?;
    eprintln!(
        "teacher: {} epochs, proxy accuracy {:.4}",
        report.epochs, report.proxy_accuracy
    );
    let path = cfg.soft_label_path();
    table.save(&path)?;
    Ok(vec![path.display().to_string()])
}

pub fn train(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let (dataset, split) = dataset_and_split(&cfg)?;
    let table = if cfg.losses.enable_knowledge {
        let path = cfg.soft_label_path();
        if !path.exists() {
            return Err(Failure {
                code: 3,
                message: format!(
                    "knowledge loss is enabled but the soft-label file {} is missing (run soft-labels first)",
                    path.display()
                ),
            });
        }
        Some(SoftLabelTable::load(&path)?)
    } else {
        None
    };
    let outcome = experiment::train_stage(&cfg, &cfg.losses, &dataset, &split, table.as_ref(), cfg.seed)?;
    let ckpt = out(&cfg, files::CHECKPOINT);
    outcome.network.save(&ckpt)?;
    let metrics = write(&out(&cfg, files::METRICS), &metrics_jsonl(outcome.log())?)?;
    Ok(vec![ckpt.display().to_string(), metrics])
}

pub fn eval(c: &Common, checkpoint: Option<PathBuf>, oracle_check: bool) -> Outcome {
    let cfg = load_config(c)?;
    let (dataset, split) = dataset_and_split(&cfg)?;
    let ckpt = checkpoint.unwrap_or_else(|| out(&cfg, files::CHECKPOINT));
    let net = Checkpoint::load(&ckpt)?.into_network()?;
    let evaluation = experiment::eval_stage(&cfg, &net, &dataset, &split)?;
    for r in &evaluation.results.reports {
        eprintln!(
            "{:?}/{:?} gallery={} queries={}: {:?}",
            r.gallery_mode, r.ap_normalizer, r.gallery_size, r.query_count, r.metrics
        );
    }
    if oracle_check {
        oracle_check_reports(&cfg, &evaluation)?;
        eprintln!("oracle check passed");
    }
    let mut outputs = vec![write(
        &out(&cfg, files::RESULTS),
        &serde_json::to_string_pretty(&evaluation.results).map_err(Error::from)?,
    )?];
    if let Some(k) = cfg.eval.top_k_list {
        outputs.push(write(&out(&cfg, files::TOP_K), &evaluation.top_k(k))?);
    }
    Ok(outputs)
}

/// Recomputes every mAP in the report with the pairwise-counting oracle.
fn oracle_check_reports(cfg: &ExperimentConfig, evaluation: &experiment::Evaluation) -> Result<(), Failure> {
    if cfg.eval.score_empty_as_zero {
        return Err(Failure {
            code: 2,
            message: "--oracle-check assumes queries without relevant items are excluded".into(),
        });
    }
    for report in &evaluation.results.reports {
        let gallery = evaluation
            .galleries
            .iter()
            .find(|(m, _)| *m == report.gallery_mode)
            .map(|(_, g)| g)
            .expect("every reported mode has a gallery");
        let mut cutoffs = vec![("mAP@all".to_string(), None)];
        cutoffs.extend(cfg.eval.k_values.iter().map(|&k| (format!("mAP@{k}"), Some(k))));
        if let Cutoff::At(k) = cfg.eval.map_mode {
            cutoffs.push((format!("mAP@{k}"), Some(k)));
        }
        for (key, k) in cutoffs {
            let expected = brute_force::mean_ap(&evaluation.queries, gallery, k, report.ap_normalizer);
            let got = report.metrics.get(&key).copied();
            let agree = match (expected, got) {
                (Some(e), Some(g)) => (e - g).abs() <= 1e-12,
                _ => false,
            };
            if !agree {
                return Err(Failure {
                    code: 1,
                    message: format!(
                        "oracle mismatch for {key} ({:?}/{:?}): oracle {expected:?}, reported {got:?}",
                        report.gallery_mode, report.ap_normalizer
                    ),
                });
            }
        }
    }
    Ok(())
}

pub fn ablate(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let table = experiment::run_ablation(&cfg)?;
    eprint!("{}", table.to_csv());
    Ok(vec![write(&out(&cfg, files::ABLATION), &table.to_csv())?])
}
