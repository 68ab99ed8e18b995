//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use zsrl_core::data::{
    generate, make_split, Dataset, DatasetItem, Domain, QuadrupletSampler, SplitProtocol, SplitSpec,
    SynthConfig,
};
use zsrl_core::distill::{
    extract_soft_labels, pretrain_teacher, SoftLabelMode, SoftLabelTable, TeacherConfig, TeacherNetwork,
};
use zsrl_core::encoder::{Dense, EncoderConfig, EncoderNetwork};
use zsrl_core::evalrank::{
    average_precision, map_from_rankings, precision_at_k, rank, ApNormalizer, Cutoff, EmbeddingSet,
    RankedRetrieval,
};
use zsrl_core::experiment::{
    build_split, distill_stage, eval_stage, load_dataset, run_ablation, train_stage, ExperimentConfig,
};
use zsrl_core::losses::{
    classification_loss, combine, entropy, knowledge_loss, quadruplet_loss, triplet_loss, LossConfig,
    QuadrupletDistances,
};
use zsrl_core::ndcore::{derive_seed, softmax, Matrix, Rng};
use zsrl_core::trainer::{
    accumulate_batch, metrics_jsonl, split_train_val, train, validation_metric, OptimizerConfig,
    ValidationMode,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const DESK_CONFIG: &str = include_str!("../../../configs/desk_ablation.json");

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("loss identities", identities),
        ("worked values", worked_values),
        ("metric oracle equivalence", oracle),
        ("sampler contract", sampler),
        ("soft-label contract", soft_labels),
        ("schedule and early stop", schedule),
        ("desk-scale learning experiment", desk_experiment),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {}. {name} ({secs:.2}s): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name} ({secs:.2}s): {why}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn random_rows(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.normal() * scale).collect())
        .collect()
}

fn random_distribution(rng: &mut Rng, d: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|_| rng.normal() * 1.5).collect();
    softmax(&raw).unwrap()
}

/// `‖a − f‖ / max(‖a‖, ‖f‖)` over the whole gradient vector.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

const FD_STEP: f64 = 1e-6;
const KINK_GAP: f64 = 1e-3;

/// Central differences of `f` over every coordinate of `x`.
fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + FD_STEP;
            let up = f(&probe);
            probe[j] = x[j] - FD_STEP;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Splits a flat vector into `groups` row-blocks of `n × d`.
fn unflatten(x: &[f64], groups: usize, n: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..groups)
        .map(|g| {
            (0..n)
                .map(|i| x[(g * n + i) * d..(g * n + i + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

fn hinges_clear(a: &[Vec<f64>], p: &[Vec<f64>], negs: &[&[Vec<f64>]], margin: f64) -> bool {
    (0..a.len()).all(|i| {
        let dp = zsrl_core::ndcore::sq_euclidean(&a[i], &p[i]).unwrap();
        negs.iter().all(|n| {
            let dn = zsrl_core::ndcore::sq_euclidean(&a[i], &n[i]).unwrap();
            (dp - dn + margin).abs() > KINK_GAP
        })
    })
}

// ------------------------------------------------------------ criterion 1

fn gradients() -> Outcome {
    const POINTS: usize = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = Rng::new(derive_seed(1, "gradients"));
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    let (n, d, c) = (3, 4, 5);

    let mut accepted = 0;
    while accepted < POINTS {
        let x: Vec<f64> = (0..3 * n * d).map(|_| rng.normal()).collect();
        let g = unflatten(&x, 3, n, d);
        if !hinges_clear(&g[0], &g[1], &[&g[2]], 0.2) {
            continue;
        }
        let eval = |x: &[f64]| {
            let g = unflatten(x, 3, n, d);
            triplet_loss(&rows(&g[0]), &rows(&g[1]), &rows(&g[2]), 0.2).unwrap()
        };
        let l = eval(&x);
        let analytic: Vec<f64> = [l.d_anchor, l.d_positive, l.d_negative_photo].concat().concat();
        record(
            "triplet",
            relative_error(&analytic, &numeric_gradient(&x, |p| eval(p).value)),
        );
        accepted += 1;
    }

    accepted = 0;
    while accepted < POINTS {
        let x: Vec<f64> = (0..4 * n * d).map(|_| rng.normal()).collect();
        let g = unflatten(&x, 4, n, d);
        if !hinges_clear(&g[0], &g[1], &[&g[2], &g[3]], 0.2) {
            continue;
        }
        let eval = |x: &[f64]| {
            let g = unflatten(x, 4, n, d);
            quadruplet_loss(&rows(&g[0]), &rows(&g[1]), &rows(&g[2]), &rows(&g[3]), 0.2).unwrap()
        };
        let l = eval(&x);
        let analytic: Vec<f64> = [l.d_anchor, l.d_positive, l.d_negative_photo, l.d_negative_sketch]
            .concat()
            .concat();
        record(
            "quadruplet",
            relative_error(&analytic, &numeric_gradient(&x, |p| eval(p).value)),
        );
        accepted += 1;
    }

    for _ in 0..POINTS {
        let m = 6;
        let x: Vec<f64> = (0..m * c).map(|_| rng.normal() * 2.0).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.below(c)).collect();
        let eval = |x: &[f64]| {
            let l = unflatten(x, 1, m, c).remove(0);
            classification_loss(&rows(&l), &labels).unwrap()
        };
        let analytic = eval(&x).1.concat();
        record(
            "classification",
            relative_error(&analytic, &numeric_gradient(&x, |p| eval(p).0)),
        );

        let q: Vec<Vec<f64>> = (0..m).map(|_| random_distribution(&mut rng, c)).collect();
        let eval = |x: &[f64]| {
            let l = unflatten(x, 1, m, c).remove(0);
            knowledge_loss(&rows(&l), &rows(&q)).unwrap()
        };
        let analytic = eval(&x).1.concat();
        record(
            "knowledge",
            relative_error(&analytic, &numeric_gradient(&x, |p| eval(p).0)),
        );
    }

    // Composed objective through a small encoder, w.r.t. every parameter.
    let enc = EncoderConfig {
        input_dim: 4,
        hidden_dims: vec![6],
        embed_dim: 4,
        num_seen_classes: 3,
        teacher_class_count: 4,
        init_seed: 0,
    };
    let items: Vec<DatasetItem> = (0..3)
        .flat_map(|class_id| {
            [Domain::Sketch, Domain::Photo]
                .into_iter()
                .flat_map(move |domain| (0..2).map(move |k| (class_id, domain, k)))
        })
        .map(|(class_id, domain, k)| DatasetItem {
            id: format!("{domain}{class_id}_{k}"),
            domain,
            class_id,
            features: vec![0.0; 4],
        })
        .collect();
    let split = SplitSpec {
        protocol: "heldout_list".into(),
        seed: 0,
        seen: vec![0, 1, 2],
        unseen: vec![3],
    };
    let table = SoftLabelTable::new((0..3).map(|c| (c, random_distribution(&mut rng, 4))).collect())
        .map_err(|e| e.to_string())?;
    let full = LossConfig::default();
    let triplet_only = LossConfig::baseline();
    let mut param_count = 0;
    for (name, losses) in [("composed", &full), ("composed-triplet", &triplet_only)] {
        accepted = 0;
        while accepted < POINTS {
            let mut items = items.clone();
            for it in items.iter_mut() {
                it.features = (0..4).map(|_| rng.normal()).collect();
            }
            let net = EncoderNetwork::init(enc.clone(), &mut rng).map_err(|e| e.to_string())?;
            param_count = net.param_count();
            let sampler = QuadrupletSampler::new(&items).map_err(|e| e.to_string())?;
            let quads = sampler.sample_batch(2, &mut rng).map_err(|e| e.to_string())?;

            let records: Vec<_> = quads
                .iter()
                .flat_map(|q| q.slots())
                .map(|i| net.forward(&items[i].features).unwrap())
                .collect();
            let relu_clear = records
                .iter()
                .all(|r| r.pre_activations.iter().flatten().all(|z| z.abs() > KINK_GAP));
            let emb: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
            let (a, p, np, ns): (Vec<_>, Vec<_>, Vec<_>, Vec<_>) = (
                emb.iter().step_by(4).cloned().collect(),
                emb.iter().skip(1).step_by(4).cloned().collect(),
                emb.iter().skip(2).step_by(4).cloned().collect(),
                emb.iter().skip(3).step_by(4).cloned().collect(),
            );
            if !relu_clear || !hinges_clear(&a, &p, &[&np, &ns], 0.2) {
                continue;
            }

            let value_at = |flat: &[f64]| {
                let mut probe = net.clone();
                probe.params.assign_flat(flat).unwrap();
                probe.zero_grads();
                accumulate_batch(&mut probe, &items, &quads, &split, Some(&table), losses)
                    .unwrap()
                    .total
            };
            let mut analytic_net = net.clone();
            analytic_net.zero_grads();
            accumulate_batch(&mut analytic_net, &items, &quads, &split, Some(&table), losses)
                .map_err(|e| e.to_string())?;
            let analytic = analytic_net.grads.flatten();
            let numeric = numeric_gradient(&net.params.flatten(), value_at);
            record(name, relative_error(&analytic, &numeric));
            accepted += 1;
        }
    }

    let elapsed = start.elapsed();
    check!(param_count <= 200, "encoder has {param_count} parameters");
    for (name, err) in &worst {
        check!(*err < TOL, "{name}: worst relative error {err:.3e} >= {TOL:e}");
    }
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!(
        "{POINTS} points each, {param_count}-parameter encoder, worst rel err: {}",
        summary.join(", ")
    ))
}

// ------------------------------------------------------------ criterion 2

fn identities() -> Outcome {
    let mut rng = Rng::new(derive_seed(2, "identities"));
    let mut worst_decomposition: f64 = 0.0;
    let mut worst_row_sum: f64 = 0.0;
    let mut worst_gibbs_gap = f64::INFINITY;
    let mut worst_equality: f64 = 0.0;
    for _ in 0..200 {
        let (n, d) = (1 + rng.below(8), 1 + rng.below(6));
        let scale = 0.2 + rng.next_f64();
        let [a, p, np, ns] = [0, 1, 2, 3].map(|_| random_rows(&mut rng, n, d, scale));
        let quad = quadruplet_loss(&rows(&a), &rows(&p), &rows(&np), &rows(&ns), 0.2)
            .map_err(|e| e.to_string())?
            .value;
        let photo = triplet_loss(&rows(&a), &rows(&p), &rows(&np), 0.2)
            .map_err(|e| e.to_string())?
            .value;
        let sketch = triplet_loss(&rows(&a), &rows(&p), &rows(&ns), 0.2)
            .map_err(|e| e.to_string())?
            .value;
        worst_decomposition = worst_decomposition.max((2.0 * quad - (photo + sketch)).abs());

        let c = 2 + rng.below(6);
        let logits = random_rows(&mut rng, n, c, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let (_, grads) = classification_loss(&rows(&logits), &labels).map_err(|e| e.to_string())?;
        for g in &grads {
            worst_row_sum = worst_row_sum.max(g.iter().sum::<f64>().abs());
        }

        let q = random_distribution(&mut rng, c);
        let z: Vec<f64> = (0..c).map(|_| rng.normal() * 2.0).collect();
        let (value, _) = knowledge_loss(&[&z], &[&q]).map_err(|e| e.to_string())?;
        worst_gibbs_gap = worst_gibbs_gap.min(value - entropy(&q));
        let logq: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        let (at_q, _) = knowledge_loss(&[&logq], &[&q]).map_err(|e| e.to_string())?;
        worst_equality = worst_equality.max((at_q - entropy(&q)).abs());
    }
    check!(
        worst_decomposition <= 1e-12,
        "2·quad vs hinge sum differs by {worst_decomposition:e}"
    );
    check!(
        worst_row_sum <= 1e-10,
        "gradient row sums reach {worst_row_sum:e}"
    );
    check!(
        worst_gibbs_gap >= -1e-9,
        "knowledge loss below entropy by {:e}",
        -worst_gibbs_gap
    );
    check!(worst_equality <= 1e-9, "equality case off by {worst_equality:e}");
    Ok(format!(
        "200 batches: decomposition {worst_decomposition:.1e}, row sum {worst_row_sum:.1e}, \
         min(H(q,p)-H(q)) {worst_gibbs_gap:.1e}, equality {worst_equality:.1e}"
    ))
}

// ------------------------------------------------------------ criterion 3

fn worked_values() -> Outcome {
    let d = QuadrupletDistances {
        delta_plus: 0.1,
        delta_neg_photo: 0.5,
        delta_neg_sketch: 0.2,
    };
    let quad = d.quadruplet_term(0.2);
    check!((quad - 0.05).abs() < 1e-12, "quadruplet example gave {quad}");

    let logits = [3f64.ln(), 1f64.ln()];
    let (ce, _) = classification_loss(&[&logits], &[0]).map_err(|e| e.to_string())?;
    check!((ce - 0.287682).abs() < 1e-6, "cross-entropy example gave {ce}");

    let (know, _) = knowledge_loss(&[&[0.0, 0.0]], &[&[0.5, 0.5]]).map_err(|e| e.to_string())?;
    check!((know - 2f64.ln()).abs() < 1e-9, "knowledge example gave {know}");

    let ranked = |flags: &[bool], total: usize| RankedRetrieval {
        query_id: "q".into(),
        gallery_ids: (0..flags.len()).map(|i| format!("g{i}")).collect(),
        relevance: flags.to_vec(),
        total_relevant: total,
    };
    let ap = average_precision(
        &ranked(&[true, false, true], 2),
        Cutoff::At(3),
        ApNormalizer::TotalRelevant,
    )
    .ok_or("AP example excluded")?;
    check!((ap - 5.0 / 6.0).abs() < 1e-12, "AP example gave {ap}");

    let r = ranked(&[true], 10);
    let total = average_precision(&r, Cutoff::At(1), ApNormalizer::TotalRelevant).ok_or("excluded")?;
    let min_k = average_precision(&r, Cutoff::At(1), ApNormalizer::MinKRelevant).ok_or("excluded")?;
    check!((total - 0.1).abs() < 1e-12, "total_relevant gave {total}");
    check!((min_k - 1.0).abs() < 1e-12, "min_k_relevant gave {min_k}");

    let total_loss = combine(0.05, 0.3, 0.7, &LossConfig::default()).total;
    check!(
        (total_loss - 1.05).abs() < 1e-12,
        "combined total gave {total_loss}"
    );
    Ok(format!(
        "quad {quad}, CE {ce:.6}, know {know:.9}, AP {ap:.12}, divergence {total} vs {min_k}"
    ))
}

// ------------------------------------------------------------ criterion 4

/// Independent oracle: rank by counting how many items precede each one,
/// then score by re-counting prefixes.
mod reference {
    pub fn ranking(dist: &[f64], ids: &[String]) -> Vec<usize> {
        let n = dist.len();
        let mut order = vec![usize::MAX; n];
        for i in 0..n {
            let ahead = (0..n)
                .filter(|&j| dist[j] < dist[i] || (dist[j] == dist[i] && ids[j] < ids[i]))
                .count();
            order[ahead] = i;
        }
        order
    }

    pub fn precision(rel: &[bool], k: usize) -> f64 {
        let mut hits = 0;
        for &r in rel.iter().take(k) {
            if r {
                hits += 1;
            }
        }
        hits as f64 / k as f64
    }

    pub fn ap(rel: &[bool], total: usize, k: usize, min_k: bool) -> Option<f64> {
        let norm = if min_k { total.min(k) } else { total };
        if norm == 0 {
            return None;
        }
        let mut sum = 0.0;
        for i in 1..=k.min(rel.len()) {
            if rel[i - 1] {
                sum += precision(rel, i);
            }
        }
        Some(sum / norm as f64)
    }
}

fn oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(derive_seed(4, "oracle"));
    let mut checked = 0usize;
    for instance in 0..200 {
        let g = 1 + rng.below(50);
        let classes = 1 + rng.below(5);
        let d = 1 + rng.below(4);
        // Coarse integer coordinates so distance ties actually occur.
        let point = |rng: &mut Rng| (0..d).map(|_| rng.below(4) as f64).collect::<Vec<f64>>();
        let mut ids: Vec<String> = (0..g).map(|i| format!("g{i:03}")).collect();
        rng.shuffle(&mut ids);
        let class_ids: Vec<usize> = (0..g).map(|_| rng.below(classes)).collect();
        let points: Vec<Vec<f64>> = (0..g).map(|_| point(&mut rng)).collect();
        let gallery = EmbeddingSet::new(
            ids.clone(),
            class_ids.clone(),
            vec![Domain::Photo; g],
            Matrix::from_rows(&points).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;

        let queries = 1 + rng.below(6);
        let mut rankings = Vec::new();
        let mut reference_rel = Vec::new();
        for q in 0..queries {
            let qp = point(&mut rng);
            let qc = rng.below(classes + 1);
            let r = rank(&format!("q{q}"), qc, &qp, &gallery).map_err(|e| e.to_string())?;
            let dist: Vec<f64> = points
                .iter()
                .map(|p| p.iter().zip(&qp).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let order = reference::ranking(&dist, &ids);
            let rel: Vec<bool> = order.iter().map(|&i| class_ids[i] == qc).collect();
            let total = rel.iter().filter(|&&x| x).count();
            let ordered_ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
            check!(
                r.gallery_ids == ordered_ids,
                "instance {instance}: ranking differs"
            );
            check!(
                r.relevance == rel && r.total_relevant == total,
                "instance {instance}: relevance differs"
            );
            for k in 1..=g + 2 {
                let got = precision_at_k(&r, k).map_err(|e| e.to_string())?;
                check!(
                    got == reference::precision(&rel, k),
                    "instance {instance}: P@{k} differs"
                );
                for (norm, min_k) in [
                    (ApNormalizer::TotalRelevant, false),
                    (ApNormalizer::MinKRelevant, true),
                ] {
                    let got = average_precision(&r, Cutoff::At(k), norm);
                    check!(
                        got == reference::ap(&rel, total, k, min_k),
                        "instance {instance}: AP@{k} ({norm:?}) {got:?} differs"
                    );
                }
                checked += 3;
            }
            rankings.push(r);
            reference_rel.push((rel, total));
        }
        for (norm, min_k) in [
            (ApNormalizer::TotalRelevant, false),
            (ApNormalizer::MinKRelevant, true),
        ] {
            for (cutoff, k) in [(Cutoff::All, g), (Cutoff::At(g.div_ceil(2)), g.div_ceil(2))] {
                let aps: Vec<f64> = reference_rel
                    .iter()
                    .filter_map(|(rel, total)| reference::ap(rel, *total, k, min_k))
                    .collect();
                let engine = map_from_rankings(&rankings, cutoff, norm, false);
                match (aps.is_empty(), engine) {
                    (true, Err(_)) => {}
                    (false, Ok(m)) => {
                        let want = aps.iter().sum::<f64>() / aps.len() as f64;
                        check!(m.mean == want, "instance {instance}: mAP {} vs {want}", m.mean);
                    }
                    (empty, other) => {
                        return Err(format!(
                            "instance {instance}: oracle empty={empty}, engine {other:?}"
                        ))
                    }
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("200 instances, {checked} metric values identical"))
}

// ------------------------------------------------------------ criterion 5

fn sampler() -> Outcome {
    let dataset = generate(
        &SynthConfig {
            num_classes: 6,
            sketches_per_class: 7,
            photos_per_class: 5,
            feature_dim: 3,
            ..Default::default()
        },
        &mut Rng::new(5),
    )
    .map_err(|e| e.to_string())?;
    let items = dataset.items();
    let sampler = QuadrupletSampler::new(items).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(derive_seed(5, "sampler"));
    let mut total = 0;
    while total < 10_000 {
        let batch = sampler.sample_batch(16, &mut rng).map_err(|e| e.to_string())?;
        check!(batch.len() == 16, "batch of {}", batch.len());
        let (mut sketches, mut photos) = (0, 0);
        for q in &batch {
            q.check(items).map_err(|e| format!("quadruplet {total}: {e}"))?;
            let [a, p, np, ns] = q.slots().map(|i| &items[i]);
            check!(
                a.domain == Domain::Sketch && ns.domain == Domain::Sketch,
                "sketch slots wrong"
            );
            check!(
                p.domain == Domain::Photo && np.domain == Domain::Photo,
                "photo slots wrong"
            );
            check!(a.class_id == p.class_id, "positive class differs from anchor");
            check!(
                np.class_id != a.class_id && ns.class_id != a.class_id,
                "negative shares the anchor class"
            );
            for item in [a, p, np, ns] {
                match item.domain {
                    Domain::Sketch => sketches += 1,
                    Domain::Photo => photos += 1,
                }
            }
            total += 1;
        }
        check!(
            sketches == 32 && photos == 32,
            "batch had {sketches} sketches, {photos} photos"
        );
    }
    Ok(format!(
        "{total} quadruplets valid; every 16-quad batch had 32 sketches and 32 photos"
    ))
}

// ------------------------------------------------------------ criterion 6

fn soft_labels() -> Outcome {
    let synth = SynthConfig {
        num_classes: 8,
        sketches_per_class: 4,
        photos_per_class: 12,
        feature_dim: 6,
        class_separation: 2.0,
        ..Default::default()
    };
    let dataset = generate(&synth, &mut Rng::new(6)).map_err(|e| e.to_string())?;
    let photos: Vec<DatasetItem> = dataset
        .items()
        .iter()
        .filter(|i| i.domain == Domain::Photo)
        .cloned()
        .collect();
    let proxy: BTreeMap<usize, usize> = (0..8).map(|c| (c, c % 5)).collect();
    let cfg = TeacherConfig {
        hidden_dim: 10,
        teacher_class_count: 5,
        max_epochs: 30,
        ..Default::default()
    };
    let (teacher, _) =
        pretrain_teacher(&photos, &proxy, &cfg, &mut Rng::new(60)).map_err(|e| e.to_string())?;
    let classes: Vec<usize> = (0..8).collect();
    let mut worst_sum: f64 = 0.0;
    for mode in [SoftLabelMode::LogitMean, SoftLabelMode::ProbabilityMean] {
        let table = extract_soft_labels(&teacher, &photos, &classes, mode).map_err(|e| e.to_string())?;
        for c in table.classes() {
            let row = table.get(c).ok_or("missing row")?;
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let again = extract_soft_labels(&teacher, &photos, &classes, mode).map_err(|e| e.to_string())?;
        check!(again == table, "{mode:?} extraction is not idempotent");
        let reparsed = SoftLabelTable::from_tsv(&table.to_tsv()).map_err(|e| e.to_string())?;
        check!(
            reparsed == table,
            "{mode:?} table does not survive its file format"
        );
    }
    check!(worst_sum <= 1e-9, "row sums off by {worst_sum:e}");

    // Sketches in the input are rejected, and sketch features never reach
    // the pipeline's table.
    let mut mixed = photos.clone();
    mixed.push(
        dataset
            .items()
            .iter()
            .find(|i| i.domain == Domain::Sketch)
            .cloned()
            .unwrap(),
    );
    check!(
        extract_soft_labels(&teacher, &mixed, &classes, SoftLabelMode::LogitMean).is_err(),
        "a sketch item was accepted"
    );
    let cfg = ExperimentConfig::from_json(
        r#"{"data": {"synth": {"num_classes": 6, "sketches_per_class": 3, "photos_per_class": 4,
            "feature_dim": 5}}, "split": {"protocol": "random_k", "k": 2},
            "distill": {"teacher": {"hidden_dim": 6, "teacher_class_count": 4, "max_epochs": 5}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let ds = load_dataset(&cfg, 3).map_err(|e| e.to_string())?;
    let split = build_split(&cfg, &ds, 3).map_err(|e| e.to_string())?;
    let (base, _) = distill_stage(&cfg, &ds, &split, 3).map_err(|e| e.to_string())?;
    let scrambled = Dataset::new(
        ds.items()
            .iter()
            .cloned()
            .map(|mut i| {
                if i.domain == Domain::Sketch {
                    i.features.iter_mut().for_each(|f| *f = 1e3 - *f * 7.0);
                }
                i
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let (other, _) = distill_stage(&cfg, &scrambled, &split, 3).map_err(|e| e.to_string())?;
    check!(base == other, "changing sketch features changed the soft labels");

    // Asymmetric pair: the two aggregation orders disagree.
    let identity = TeacherNetwork::from_layers(
        Dense {
            weights: Matrix::identity(2),
            bias: vec![0.0; 2],
        },
        Dense {
            weights: Matrix::identity(2),
            bias: vec![0.0; 2],
        },
    )
    .map_err(|e| e.to_string())?;
    let pair: Vec<DatasetItem> = [vec![2.0, 0.0], vec![0.0, 0.0]]
        .into_iter()
        .enumerate()
        .map(|(k, features)| DatasetItem {
            id: format!("p{k}"),
            domain: Domain::Photo,
            class_id: 0,
            features,
        })
        .collect();
    let logit =
        extract_soft_labels(&identity, &pair, &[0], SoftLabelMode::LogitMean).map_err(|e| e.to_string())?;
    let prob = extract_soft_labels(&identity, &pair, &[0], SoftLabelMode::ProbabilityMean)
        .map_err(|e| e.to_string())?;
    let (l, p) = (logit.get(0).unwrap()[0], prob.get(0).unwrap()[0]);
    check!(
        (l - p).abs() > 1e-3,
        "modes agree on the asymmetric pair ({l} vs {p})"
    );
    Ok(format!(
        "row sums within {worst_sum:.1e}, idempotent, sketch-independent; asymmetric pair {l:.4} vs {p:.4}"
    ))
}

// ------------------------------------------------------------ criterion 7

fn small_problem(seed: u64) -> (Dataset, SplitSpec) {
    let ds = generate(
        &SynthConfig {
            num_classes: 6,
            sketches_per_class: 12,
            photos_per_class: 12,
            feature_dim: 8,
            class_separation: 2.0,
            ..Default::default()
        },
        &mut Rng::new(seed),
    )
    .unwrap();
    let split = make_split(&ds.classes(), &SplitProtocol::RandomK { k: 2 }, seed).unwrap();
    (ds, split)
}

fn small_encoder(split: &SplitSpec, seed: u64) -> EncoderNetwork {
    EncoderNetwork::init_seeded(EncoderConfig {
        input_dim: 8,
        hidden_dims: vec![12],
        embed_dim: 6,
        num_seen_classes: split.seen.len(),
        teacher_class_count: 4,
        init_seed: seed,
    })
    .unwrap()
}

fn schedule() -> Outcome {
    let opt = OptimizerConfig::default();
    for epoch in 0..25 {
        let want = match epoch {
            0..=9 => 1e-4,
            10..=19 => 1e-5,
            _ => 1e-6,
        };
        check!(
            opt.lr_at(epoch) == want,
            "lr at epoch {epoch} is {}",
            opt.lr_at(epoch)
        );
    }

    let (ds, split) = small_problem(7);
    let losses = LossConfig {
        enable_knowledge: false,
        ..Default::default()
    };
    let frozen = OptimizerConfig {
        lr0: 0.0,
        early_stop_patience: 5,
        seed: 7,
        ..Default::default()
    };
    let out =
        train(small_encoder(&split, 1), &ds, &split, &losses, &frozen, None).map_err(|e| e.to_string())?;
    check!(
        out.state.epoch == 6 && out.log().len() == 6,
        "frozen run stopped after {} epochs",
        out.state.epoch
    );

    let learning = OptimizerConfig {
        lr0: 0.01,
        max_epochs: 15,
        early_stop_patience: 4,
        validation: ValidationMode::RetrievalMap,
        seed: 8,
        ..Default::default()
    };
    let out =
        train(small_encoder(&split, 2), &ds, &split, &losses, &learning, None).map_err(|e| e.to_string())?;
    let max = out
        .log()
        .iter()
        .map(|r| r.val_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    check!(
        out.state.best_val_metric == max,
        "best {} vs log max {max}",
        out.state.best_val_metric
    );
    // The returned network really is the best one.
    let seen: Vec<DatasetItem> = ds
        .items()
        .iter()
        .filter(|i| split.is_seen(i.class_id))
        .cloned()
        .collect();
    let (_, val) = split_train_val(
        &seen,
        learning.val_fraction,
        &mut Rng::new(derive_seed(learning.seed, "validation-split")),
    );
    let replay =
        validation_metric(&out.network, &val, &split, learning.validation).map_err(|e| e.to_string())?;
    check!(
        replay == max,
        "returned network scores {replay}, best logged {max}"
    );
    Ok(format!(
        "lr exact on epochs 0-24; frozen run halted after 6 epochs; best checkpoint {max:.4} = log max over {} epochs",
        out.log().len()
    ))
}

// ------------------------------------------------------------ criterion 8

fn desk_experiment() -> Outcome {
    const CHANCE: f64 = 1.0 / 6.0;
    let start = Instant::now();
    let cfg = ExperimentConfig::from_json(DESK_CONFIG).map_err(|e| e.to_string())?;
    check!(
        cfg.ablation_seeds().len() == 3,
        "desk config pins {} seeds",
        cfg.ablation_seeds().len()
    );
    let table = run_ablation(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut floor = f64::INFINITY;
    for row in &table.rows {
        for (seed, metrics) in table.seeds.iter().zip(&row.per_seed) {
            let map = metrics["mAP@all"];
            floor = floor.min(map);
            check!(
                map >= 3.0 * CHANCE,
                "{} seed {seed}: mAP@all {map:.4} below 3x chance",
                row.name
            );
        }
    }
    let mean = |name: &str| {
        table
            .rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.mean("mAP@all"))
            .unwrap_or(f64::NAN)
    };
    let (full, baseline) = (mean("quad+id+know"), mean("baseline"));
    check!(
        full >= baseline,
        "full loss {full:.4} below baseline {baseline:.4}"
    );
    check!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "min mAP@all {floor:.4} (3x chance = 0.5); full {full:.4} vs baseline {baseline:.4} over seeds {:?}",
        table.seeds
    ))
}

// ------------------------------------------------------------ criterion 9

fn pipeline_outputs(cfg: &ExperimentConfig) -> Result<(String, String), String> {
    let e = |e: zsrl_core::Error| e.to_string();
    let ds = load_dataset(cfg, cfg.seed).map_err(e)?;
    let split = build_split(cfg, &ds, cfg.seed).map_err(e)?;
    let (table, _) = distill_stage(cfg, &ds, &split, cfg.seed).map_err(e)?;
    let outcome = train_stage(cfg, &cfg.losses, &ds, &split, Some(&table), cfg.seed).map_err(e)?;
    let jsonl = metrics_jsonl(outcome.log()).map_err(e)?;
    let eval = eval_stage(cfg, &outcome.network, &ds, &split).map_err(e)?;
    let results = serde_json::to_string_pretty(&eval.results).map_err(|e| e.to_string())?;
    Ok((jsonl, results))
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::from_json(
        r#"{"seed": 11, "data": {"synth": {"num_classes": 8, "sketches_per_class": 10,
            "photos_per_class": 10, "feature_dim": 8}}, "split": {"protocol": "random_k", "k": 3},
            "encoder": {"hidden_dims": [16], "embed_dim": 8},
            "optimizer": {"lr0": 0.01, "max_epochs": 6},
            "distill": {"teacher": {"hidden_dim": 8, "teacher_class_count": 8, "max_epochs": 10}},
            "eval": {"k_values": [5, 10]}}"#,
    )
    .map_err(|e| e.to_string())?;
    let first = pipeline_outputs(&cfg)?;
    let second = pipeline_outputs(&cfg)?;
    check!(first.0 == second.0, "metrics JSONL differs between runs");
    check!(first.1 == second.1, "results JSON differs between runs");
    let other = pipeline_outputs(&ExperimentConfig { seed: 12, ..cfg })?;
    check!(other.0 != first.0, "a different seed gave the same log");
    Ok(format!(
        "two runs byte-identical ({} JSONL bytes, {} results bytes)",
        first.0.len(),
        first.1.len()
    ))
}
