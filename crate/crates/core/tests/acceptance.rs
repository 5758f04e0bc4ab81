//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use moad::attention::{compute_attention, pool_slide, GatedAttention, SlideEmbedding, SlideProjection};
use moad::encoders::{EncodedOmic, PatchBag};
use moad::fusion::{moab_shapes, outer_op, Aggregator, FusionConfig, LateFusion};
use moad::gradcheck::run_suite;
use moad::harness::config::ModelDims;
use moad::harness::cv::run_cv;
use moad::harness::heatmap::export_heatmap;
use moad::harness::metrics::auroc;
use moad::harness::model::{Model, ModelSpec};
use moad::harness::synth::{write_synthetic, SyntheticSpec};
use moad::harness::train::{train, TrainedModel};
use moad::harness::{Dataset, FusionMode, RunConfig};
use moad::numeric::{Graph, OuterKind, ParamStore, SeededRng, Tensor};
use moad::survival::{concordance_index, hazards_and_survival, nll_loss, SurvivalBatch, SurvivalLabel};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { name, passed, detail }
}

/// Training settings for the synthetic experiment.
fn synthetic_config(seed: u64, fusion: FusionMode) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        fusion,
        aggregator: Aggregator::Moab,
        dims: ModelDims {
            omic_dim: 32,
            snn_hidden: 64,
            fuse_hidden: 64,
            attn_hidden: 32,
            ..ModelDims::default()
        },
        epochs: 80,
        grad_clip: Some(1.0),
        ..RunConfig::default()
    };
    cfg.optimizer.learning_rate = 3e-4;
    cfg
}

fn gradient_suite() -> Outcome {
    let required = [
        "matmul",
        "tanh",
        "sigmoid",
        "elu",
        "relu",
        "leaky_relu",
        "softmax",
        "conv2d",
        "alpha_dropout_eval",
        "outer_product",
        "outer_division",
        "outer_addition",
        "outer_subtraction",
        "moab_fuse",
        "gated_attention_pool",
        "survival_nll",
    ];
    let start = Instant::now();
    let report = match run_suite(0, 10) {
        Ok(r) => r,
        Err(e) => return outcome("gradient suite", false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !report.cases.iter().any(|c| c.name == *n))
        .collect();
    let worst = report.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let few = report.cases.iter().any(|c| c.instances < 10);
    let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    outcome(
        "gradient suite",
        missing.is_empty() && failed.is_empty() && !few && worst < 1e-4 && secs < 60.0,
        format!(
            "{} cases, worst rel err {worst:.2e} (< 1e-4), {secs:.2}s (< 60s), failed {failed:?}, missing {missing:?}",
            report.cases.len()
        ),
    )
}

fn outer_oracle() -> Outcome {
    let mut rng = SeededRng::new(11);
    let eps = 1e-8;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let w: Vec<f64> = (0..8).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let o: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.2, 2.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 }).collect();
        for kind in OuterKind::ALL {
            let c = match kind {
                OuterKind::Product | OuterKind::Division => 1.0,
                OuterKind::Addition | OuterKind::Subtraction => 0.0,
            };
            let wc: Vec<f64> = std::iter::once(c).chain(w.iter().copied()).collect();
            let oc: Vec<f64> = std::iter::once(c).chain(o.iter().copied()).collect();
            let got = outer_op(&wc, &oc, kind, eps).unwrap();
            for (i, &a) in wc.iter().enumerate() {
                for (j, &b) in oc.iter().enumerate() {
                    let expect = match kind {
                        OuterKind::Product => a * b,
                        OuterKind::Division => a / (b + eps),
                        OuterKind::Addition => a + b,
                        OuterKind::Subtraction => a - b,
                    };
                    worst = worst.max((got.data()[i * 9 + j] - expect).abs());
                }
            }
        }
    }
    outcome("outer-op oracle", worst <= 1e-12, format!("max abs err {worst:.2e} (<= 1e-12) over 20 draws × 4 ops"))
}

fn embedding_preservation() -> Outcome {
    let mut rng = SeededRng::new(12);
    let w: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
    let o: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
    let fusion = LateFusion::new(FusionConfig::new(Aggregator::Moab, 256, 256, 4)).unwrap();
    let mut g = Graph::new();
    let wv = g.constant(Tensor::vector(w.clone()));
    let ov = g.constant(Tensor::vector(o.clone()));
    let stacked = fusion.interaction_tensor(&mut g, wv, ov).unwrap();
    let t = g.value(stacked);
    let product = &t.data()[..257 * 257];
    let row0 = &product[..257];
    let col0: Vec<f64> = (0..257).map(|i| product[i * 257]).collect();
    let expect_row: Vec<f64> = std::iter::once(1.0).chain(o).collect();
    let expect_col: Vec<f64> = std::iter::once(1.0).chain(w).collect();
    let ok = row0 == expect_row.as_slice() && col0 == expect_col;
    outcome("embedding preservation", ok, "product row 0 == [1;o], column 0 == [1;W], exact".into())
}

fn shape_ledger() -> Outcome {
    let cfg = FusionConfig::new(Aggregator::Moab, 256, 256, 4);
    let fusion = LateFusion::new(cfg).unwrap();
    let mut store = ParamStore::new();
    fusion.init(&mut store, &mut SeededRng::new(13));
    let mut rng = SeededRng::new(14);
    let w = SlideEmbedding((0..256).map(|_| rng.normal()).collect());
    let o = EncodedOmic((0..256).map(|_| rng.normal()).collect());
    let shapes = moab_shapes(&cfg, &store, &w, &o).unwrap();

    let mut run = RunConfig {
        fusion: FusionMode::LateOnly,
        aggregator: Aggregator::Kp,
        ..RunConfig::default()
    };
    run.dims.omic_dim = 256;
    let kp = Model::new(ModelSpec::resolve(&run, 100, 64, 4).unwrap()).unwrap();
    let kp_width = kp.late_fusion().unwrap().cfg.head_input_width();

    let ok = shapes.interaction == [4, 257, 257]
        && shapes.reduced == [1, 257, 257]
        && shapes.head_input == 66049
        && shapes.logits == 4
        && kp_width == 66049;
    outcome(
        "shape ledger",
        ok,
        format!(
            "{:?} -> {:?} -> {} (kp late_only head {kp_width}), expect 4×257×257 -> 1×257×257 -> 66049",
            shapes.interaction, shapes.reduced, shapes.head_input
        ),
    )
}

fn single_nll(logits: &[f64], label: SurvivalLabel) -> f64 {
    nll_loss(&SurvivalBatch {
        logits: Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap(),
        labels: vec![label],
    })
    .unwrap()
}

fn survival_closed_forms() -> Outcome {
    let (hazard, surv) = hazards_and_survival(&[0.0; 4]);
    let mut err: f64 = 0.0;
    for (h, s, e) in hazard.iter().zip(&surv).zip([0.5, 0.25, 0.125, 0.0625]).map(|((h, s), e)| (h, s, e)) {
        err = err.max((h - 0.5).abs()).max((s - e).abs());
    }
    let ln2 = std::f64::consts::LN_2;
    let uncensored = single_nll(&[0.0; 4], SurvivalLabel { time: 1.0, censored: false, bin: 0 });
    let censored = single_nll(&[0.0; 4], SurvivalLabel { time: 1.0, censored: true, bin: 1 });
    err = err.max((uncensored - ln2).abs()).max((censored - 2.0 * ln2).abs());

    // Batched loss against per-patient losses.
    let mut rng = SeededRng::new(15);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..16 {
        rows.push((0..4).map(|_| rng.normal() * 2.0).collect::<Vec<f64>>());
        labels.push(SurvivalLabel {
            time: 1.0,
            censored: rng.bernoulli(0.4),
            bin: rng.int_inclusive(0, 3),
        });
    }
    let batched = nll_loss(&SurvivalBatch {
        logits: Tensor::from_rows(&rows).unwrap(),
        labels: labels.clone(),
    })
    .unwrap();
    let mean = rows.iter().zip(&labels).map(|(r, l)| single_nll(r, *l)).sum::<f64>() / 16.0;
    let batch_err = (batched - mean).abs();
    outcome(
        "survival closed forms",
        err <= 1e-9 && batch_err <= 1e-12,
        format!("closed-form err {err:.2e} (<= 1e-9), batched vs mean {batch_err:.2e} (<= 1e-12)"),
    )
}

fn c_index_sanity() -> Outcome {
    let perfect = concordance_index(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[false; 3]).unwrap();
    let tied = concordance_index(&[0.7; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[false; 5]).unwrap();
    let mut rng = SeededRng::new(16);
    let n = 10_000;
    let risks: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let times: Vec<f64> = (0..n).map(|_| rng.uniform() * 100.0).collect();
    let random = concordance_index(&risks, &times, &vec![false; n]).unwrap();
    outcome(
        "c-index sanity",
        perfect == 1.0 && tied == 0.5 && (random - 0.5).abs() <= 0.05,
        format!("anti-ordered {perfect}, tied {tied}, random 10^4 {random:.4} (0.5 ± 0.05)"),
    )
}

fn mil_invariance() -> Outcome {
    let mut rng = SeededRng::new(17);
    let (n, d) = (37, 24);
    let attn = GatedAttention { in_dim: d, hidden: 16 };
    let proj = SlideProjection {
        in_dim: 16,
        out: 12,
        dropout: 0.1,
    };
    let mut store = ParamStore::new();
    attn.init(&mut store, &mut rng);
    proj.init(&mut store, &mut rng);
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let bag = PatchBag::new("s", Tensor::matrix(n, d, data).unwrap(), None).unwrap();
    let embed = |b: &PatchBag| {
        let scores = compute_attention(&attn, &store, &b.embeddings).unwrap();
        pool_slide(&proj, &store, &scores, false, &mut SeededRng::new(0)).unwrap()
    };
    let base = embed(&bag);
    let mut order: Vec<usize> = (0..n).collect();
    let mut all_perm = true;
    for _ in 0..10 {
        rng.shuffle(&mut order);
        all_perm &= embed(&bag.permuted(&order)).0 == base.0;
    }
    let doubled: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
    let dup = embed(&bag.permuted(&doubled)).0 == base.0;
    outcome(
        "MIL invariance",
        all_perm && dup,
        format!("10 permutations bit-identical: {all_perm}, duplication bit-identical: {dup}"),
    )
}

struct SyntheticOutcome {
    separation: Outcome,
    heatmap: Outcome,
}

fn synthetic_experiment() -> SyntheticOutcome {
    let start = Instant::now();
    let modes = [
        FusionMode::OmicOnly,
        FusionMode::WsiOnly,
        FusionMode::EarlyOnly,
        FusionMode::LateOnly,
        FusionMode::Dual,
    ];
    let mut f1: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut aurocs = Vec::new();
    let mut csv_sums = Vec::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let data = write_synthetic(
            &SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
            dir.path(),
        )
        .unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for mode in modes {
            let out = run_cv(&synthetic_config(seed, mode), &ds).unwrap();
            f1.entry(mode.name()).or_default().push(out.report.mean["f1_macro"]);
            if mode != FusionMode::Dual {
                continue;
            }
            let mut per_slide = Vec::new();
            for fold in &out.folds {
                for (k, &i) in fold.test.iter().enumerate() {
                    let a = fold.evaluation.predictions[k].attention.as_ref().unwrap();
                    let planted = &data.signal[&ds.samples[i].slide_id];
                    let truth: Vec<bool> = (0..a.len()).map(|j| planted.contains(&j)).collect();
                    per_slide.push(auroc(a, &truth).unwrap());
                }
            }
            aurocs.push(per_slide.iter().sum::<f64>() / per_slide.len() as f64);

            let fold = &out.folds[0];
            let sample = &ds.samples[fold.test[0]];
            let csv = dir.path().join("heatmap.csv");
            export_heatmap(&fold.model, sample, &csv, true).unwrap();
            let text = std::fs::read_to_string(&csv).unwrap();
            let sum: f64 = text
                .lines()
                .skip(1)
                .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
                .sum();
            let rows = text.lines().count() - 1;
            csv_sums.push((sum, rows == sample.bag.len()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |k: &str| f1[k].iter().sum::<f64>() / f1[k].len() as f64;
    let unimodal_ok = f1["omic_only"].iter().chain(&f1["wsi_only"]).all(|&v| v <= 0.6);
    let dual_ok = f1["dual"].iter().all(|&v| v >= 0.9);
    let order_ok = mean("dual") >= mean("early_only") - 0.02 && mean("dual") >= mean("late_only") - 0.02;
    let fmt = |k: &str| f1[k].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
    let separation = outcome(
        "synthetic separation",
        unimodal_ok && dual_ok && order_ok && secs < 900.0,
        format!(
            "F1 per seed: omic_only {} wsi_only {} (<= 0.6); dual {} (>= 0.9); means dual {:.3} early {:.3} late {:.3} (dual >= each - 0.02); {secs:.0}s (< 900s)",
            fmt("omic_only"),
            fmt("wsi_only"),
            fmt("dual"),
            mean("dual"),
            mean("early_only"),
            mean("late_only")
        ),
    );
    let auroc_ok = aurocs.iter().all(|&a| a >= 0.8);
    let csv_ok = csv_sums.iter().all(|&(s, rows)| (s - 1.0).abs() <= 1e-6 && rows);
    let heatmap = outcome(
        "heatmap fidelity",
        auroc_ok && csv_ok,
        format!(
            "dual attention AUROC per seed {} (>= 0.8); CSV sums {} (1 ± 1e-6), row counts match: {}",
            aurocs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/"),
            csv_sums.iter().map(|v| format!("{:.9}", v.0)).collect::<Vec<_>>().join("/"),
            csv_sums.iter().all(|v| v.1)
        ),
    );
    SyntheticOutcome { separation, heatmap }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        slides: 24,
        min_patches: 10,
        max_patches: 30,
        seed: 5,
        ..SyntheticSpec::default()
    };
    write_synthetic(&spec, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let mut cfg = synthetic_config(3, FusionMode::Dual);
    cfg.epochs = 3;
    let run = |out: &std::path::Path| {
        let cv = run_cv(&cfg, &ds).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let (model, log) = train(&cfg, &ds, &all).unwrap();
        model.save(out).unwrap();
        (cv.report, log.final_loss)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, la) = run(a.path());
    let (rb, lb) = run(b.path());
    let bits = |r: &moad::harness::MetricsReport| {
        r.per_fold
            .iter()
            .flat_map(|f| f.values().map(|v| v.to_bits()))
            .collect::<Vec<u64>>()
    };
    let same_files = ["params.bin", "model.json", "config.json"]
        .iter()
        .all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap());
    let reloaded = TrainedModel::load(a.path()).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let replay = reloaded.evaluate(&ds, &all).unwrap().metrics
        == TrainedModel::load(b.path()).unwrap().evaluate(&ds, &all).unwrap().metrics;
    outcome(
        "determinism",
        bits(&ra) == bits(&rb) && la.to_bits() == lb.to_bits() && same_files && replay,
        format!(
            "metrics bit-identical: {}, final loss bit-identical: {}, checkpoint bytes identical: {same_files}",
            bits(&ra) == bits(&rb),
            la.to_bits() == lb.to_bits()
        ),
    )
}

fn main() {
    let mut results = vec![
        gradient_suite(),
        outer_oracle(),
        embedding_preservation(),
        shape_ledger(),
        survival_closed_forms(),
        c_index_sanity(),
        mil_invariance(),
    ];
    let synthetic = synthetic_experiment();
    results.push(synthetic.separation);
    results.push(synthetic.heatmap);
    results.push(determinism());

    let mut failed = 0;
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
