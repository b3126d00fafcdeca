//! Acceptance criteria. Each test writes one `[PASS]`/`[FAIL]` line straight
//! to stderr, so the lines appear even when test output is captured.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ovit_core::autograd::{finite_diff_check, Tape, Var};
use ovit_core::data::{synth_dataset, SynthSpec};
use ovit_core::eval::{
    extract_embeddings, make_pairs, overlap_comparisons, percentage_variation, read_csv,
    repeat_eval, roc_auc, score_pairs, to_csv, EmbeddingSet, EvalRow, PvReport, RepeatSummary,
};
use ovit_core::margin::{cosface_loss, init_prototypes, sample_classes, ClassSubset, MarginSpec};
use ovit_core::train::{train, TrainConfig, TrainSet};
use ovit_core::vit::{forward_embeddings, stack_patches, ModelVars};
use ovit_core::{patch_count, Checkpoint, ModelParams, PatchGridSpec, Tensor, ViTConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[{status}] criterion {id:>2} {name}: {detail} ({:.2}s)\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Windows along one side, counted by sliding a window in steps of `s`.
/// `None` when the last window falls short of the far edge.
fn brute_force_windows(w: usize, p: usize, s: usize) -> Option<usize> {
    let mut count = 0;
    let mut x = 0;
    let mut last_end = 0;
    while x + p <= w {
        count += 1;
        last_end = x + p;
        x += s;
    }
    (last_end == w).then_some(count)
}

#[test]
fn criterion_01_patch_count() {
    let t = Instant::now();
    let fig = patch_count(112, 56, 56).ok() == Some(4) && patch_count(112, 56, 28).ok() == Some(9);
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for w in 1..=64 {
        for p in 1..=w {
            for s in 1..=p {
                checked += 1;
                let expected = brute_force_windows(w, p, s).map(|n| n * n);
                if patch_count(w, p, s).ok() != expected {
                    mismatches.push((w, p, s));
                }
            }
        }
    }
    let pass = fig && mismatches.is_empty() && t.elapsed() < Duration::from_secs(1);
    report(
        1,
        "patch count",
        pass,
        &format!(
            "112/56/56 -> 4, 112/56/28 -> 9: {fig}; {checked} (W,P,S) triples, {} mismatches",
            mismatches.len()
        ),
        t.elapsed(),
    );
    assert!(pass, "mismatches: {mismatches:?}");
}

#[test]
fn criterion_02_percentage_variation() {
    let t = Instant::now();
    let pv = percentage_variation(0.6966, 0.6330).unwrap();
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/table2_auc.csv");
    let rows: Vec<EvalRow> = read_csv(&table).unwrap();
    let reports = overlap_comparisons(&rows).unwrap();
    let wins = reports.iter().filter(|r| r.pv_percent > 0.0).count();
    let pass = (pv - 10.05).abs() <= 0.01
        && rows.len() == 96
        && reports.len() == 48
        && wins == 44
        && t.elapsed() < Duration::from_secs(1);
    report(
        2,
        "percentage variation",
        pass,
        &format!(
            "PV(0.6966, 0.6330) = {pv:.4}%; S=P/2 wins {wins} of {} comparisons",
            reports.len()
        ),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_check() {
    let t = Instant::now();
    let grid = PatchGridSpec::new(8, 4, 2).unwrap();
    let cfg = ViTConfig::custom(1, 8, 2, 2.0, grid, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ModelParams::init(&cfg, &mut rng);
    let mut params: Vec<Tensor> = model.iter().map(|(_, t)| t.clone()).collect();
    params.push(init_prototypes(4, cfg.embed_dim, &mut rng));
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let labels = [1, 3];
    let patches = stack_patches(images.iter(), &grid).unwrap();
    let spec = MarginSpec::default();
    let loss = |tape: &mut Tape, vars: &[Var]| {
        let (protos, leaves) = vars.split_last().unwrap();
        let model_vars = ModelVars::from_vars(leaves);
        let x = tape.constant(patches.clone());
        let emb = forward_embeddings(tape, &cfg, &model_vars, x, 2)?;
        cosface_loss(tape, emb, &labels, *protos, &spec, &ClassSubset::all(4))
    };
    let eps = 1e-5;
    let check = finite_diff_check(loss, &params, eps).unwrap();
    let pass = check.max_rel_error < 1e-3 && t.elapsed() < Duration::from_secs(30);

    // A central difference cannot resolve a gradient much finer than
    // ulp(f) / eps. Elements below that floor are checked again with a
    // wider step, and the worst element must sit within the floor.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let value = loss(&mut tape, &vars).unwrap();
    let f = tape.value(value).data()[0];
    let ulp = f64::from_bits(f.abs().to_bits() + 1) - f.abs();
    let floor = ulp / eps;
    let gap = (check.analytic - check.numeric).abs();
    let wide = finite_diff_check(loss, &params, 1e-4).unwrap();
    report(
        3,
        "gradient correctness",
        pass,
        &format!(
            "max relative error {:.3e} at eps {eps:e} over {} scalars; worst {:?} has \
             gradient {:.3e}, |analytic - numeric| = {gap:.2e} vs roundoff floor {floor:.2e}; \
             max relative error at eps 1e-4 = {:.3e}",
            check.max_rel_error,
            params.iter().map(Tensor::numel).sum::<usize>(),
            check.worst.unwrap(),
            check.analytic,
            wide.max_rel_error,
        ),
        t.elapsed(),
    );
    assert!(
        gap <= 4.0 * floor,
        "{check:?} exceeds the roundoff floor {floor:e}"
    );
    assert!(wide.max_rel_error < 1e-3, "{wide:?}");
}

fn mann_whitney(g: &[f64], i: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in g {
        for &b in i {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (g.len() * i.len()) as f64
}

#[test]
fn criterion_04_auc_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ng = rng.random_range(1..=25);
        let ni = rng.random_range(1..=(50 - ng).min(25));
        let coarse = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(-4..=4) as f64 / 4.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let g: Vec<f64> = (0..ng).map(|_| draw(&mut rng)).collect();
        let mut i: Vec<f64> = (0..ni).map(|_| draw(&mut rng)).collect();
        // Copy a few genuine scores across so ties occur between classes.
        for _ in 0..rng.random_range(0..=ni.min(3)) {
            let k = rng.random_range(0..ni);
            i[k] = g[rng.random_range(0..ng)];
        }
        let auc = roc_auc(&g, &i).unwrap().auc;
        worst = worst.max((auc - mann_whitney(&g, &i)).abs());
    }
    let pass = worst <= 1e-12 && t.elapsed() < Duration::from_secs(10);
    report(
        4,
        "AUC oracle equivalence",
        pass,
        &format!("1000 score sets, max |AUC - Mann-Whitney| = {worst:.2e}"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_05_loss_reduction() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = MarginSpec::new(1.0, 0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let batch = rng.random_range(1..=8);
        let classes = rng.random_range(2..=20);
        let dim = rng.random_range(2..=16);
        let emb = unit_rows(batch, dim, &mut rng);
        let protos: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let mut tape = ovit_core::Tape::new();
        let e = tape.constant(Tensor::matrix(batch, dim, emb.concat()).unwrap());
        let w = tape.constant(Tensor::matrix(classes, dim, protos.concat()).unwrap());
        let loss =
            cosface_loss(&mut tape, e, &labels, w, &spec, &ClassSubset::all(classes)).unwrap();
        let got = tape.value(loss).data()[0];

        let mut total = 0.0;
        for (row, &y) in emb.iter().zip(&labels) {
            let logits: Vec<f64> = protos
                .iter()
                .map(|p| {
                    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                    row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / norm
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[y];
        }
        let expected = total / batch as f64;
        worst = worst.max((got - expected).abs());
    }
    let pass = worst <= 1e-12 && t.elapsed() < Duration::from_secs(5);
    report(
        5,
        "loss reduction identity",
        pass,
        &format!("100 instances, max |CosFace(m=0,s=1) - CE| = {worst:.2e}"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_06_sampling_contract() {
    let t = Instant::now();
    let mut bad_size = 0;
    let mut missing_positive = 0;
    let all: Vec<usize> = (0..1000).collect();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = all.clone();
        pool.shuffle(&mut rng);
        let labels = &pool[..32];
        let subset = sample_classes(1000, labels, 0.3, &mut rng).unwrap();
        if subset.len() != 300 {
            bad_size += 1;
        }
        if !labels.iter().all(|&l| subset.contains(l)) {
            missing_positive += 1;
        }
    }
    let pass = bad_size == 0 && missing_positive == 0 && t.elapsed() < Duration::from_secs(5);
    report(
        6,
        "sampling contract",
        pass,
        &format!("1000 seeds: {bad_size} wrong sizes, {missing_positive} missing positives"),
        t.elapsed(),
    );
    assert!(pass);
}

/// One desk-scale run: 8 identities × 16 images at 32 px, a two-block
/// 64-wide encoder, 75 epochs of 4 steps, evaluated on the training set.
struct ToyRun {
    checkpoint: Checkpoint,
    embeddings: EmbeddingSet,
    summary: RepeatSummary,
    eval_csv: String,
    row: EvalRow,
    seconds: f64,
}

const TOY_EPOCHS: usize = 75;
const TOY_REPEATS: usize = 5;

fn run_toy(stride: usize, seed: u64) -> ToyRun {
    let t = Instant::now();
    let ds = synth_dataset(&SynthSpec {
        num_ids: 8,
        imgs_per_id: 16,
        image_size: 32,
        noise_std: 0.05,
        seed,
    })
    .unwrap();
    let grid = PatchGridSpec::new(32, 8, stride).unwrap();
    let model = ViTConfig::custom(2, 64, 4, 4.0, grid, 1).unwrap();
    let cfg = TrainConfig {
        epochs: TOY_EPOCHS,
        warmup_epochs: 1,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    let set = TrainSet::new(ds.images.clone(), ds.index.labels(), 8).unwrap();
    let outcome = train(&model, &cfg, &MarginSpec::default(), &set).unwrap();
    assert_eq!(outcome.steps.len(), 300);
    let embeddings = extract_embeddings(&outcome.checkpoint, &ds.index, &ds.images).unwrap();
    let summary = repeat_eval(&embeddings, TOY_REPEATS, seed, 10.0).unwrap();
    let row = EvalRow {
        model_label: model.label(),
        dataset: "synthetic".into(),
        patch: 8,
        stride,
        mean_auc: summary.mean,
        std_auc: summary.std,
    };
    let eval_csv = to_csv(std::slice::from_ref(&row)).unwrap();
    ToyRun {
        checkpoint: outcome.checkpoint,
        embeddings,
        summary,
        eval_csv,
        row,
        seconds: t.elapsed().as_secs_f64(),
    }
}

const STRIDES: [usize; 2] = [4, 8];
const SEEDS: [u64; 3] = [0, 1, 2];

/// Runs are shared between criteria; each is computed at most once.
fn toy(stride: usize, seed: u64) -> &'static ToyRun {
    static RUNS: [OnceLock<ToyRun>; 6] = [const { OnceLock::new() }; 6];
    let s = STRIDES.iter().position(|&x| x == stride).unwrap();
    let k = SEEDS.iter().position(|&x| x == seed).unwrap();
    RUNS[s * SEEDS.len() + k].get_or_init(|| run_toy(stride, seed))
}

#[test]
fn criterion_07_toy_overfit() {
    let t = Instant::now();
    let run = toy(4, 0);
    let pass = run.summary.mean >= 0.99;
    report(
        7,
        "toy overfit p8_s4",
        pass,
        &format!(
            "AUC {} over {TOY_REPEATS} repeats after 300 steps (run {:.1}s)",
            run.summary, run.seconds
        ),
        t.elapsed(),
    );
    assert!(pass, "{:?}", run.summary);
}

#[test]
fn criterion_08_overlap_vs_partition() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut all_trained = true;
    let mut rows = Vec::new();
    for stride in STRIDES {
        let runs: Vec<&ToyRun> = SEEDS.iter().map(|&s| toy(stride, s)).collect();
        let aucs: Vec<f64> = runs.iter().map(|r| r.summary.mean).collect();
        all_trained &= aucs.iter().all(|&a| a >= 0.95);
        let across = RepeatSummary::from_aucs(aucs.clone()).unwrap();
        lines.push(format!("p8_s{stride} {across} (seeds {aucs:.4?})"));
        rows.push(EvalRow {
            mean_auc: across.mean,
            std_auc: across.std,
            ..runs[0].row.clone()
        });
    }
    let pv: Result<Vec<PvReport>, _> = overlap_comparisons(&rows);
    let pv_ok = matches!(&pv, Ok(r) if r.len() == 1);
    if let Ok(r) = &pv {
        if let Some(r) = r.first() {
            lines.push(format!(
                "PV {} vs {} = {:+.4}%",
                r.setting_a, r.setting_b, r.pv_percent
            ));
        }
    }
    let pass = all_trained && pv_ok;
    report(
        8,
        "overlap vs partition",
        pass,
        &lines.join("; "),
        t.elapsed(),
    );
    assert!(pass, "{lines:?} {pv:?}");
}

#[test]
fn criterion_09_determinism() {
    let t = Instant::now();
    let first = toy(4, 0);
    let again = run_toy(4, 0);
    let same_ckpt = first.checkpoint.to_bytes() == again.checkpoint.to_bytes();
    let same_csv = first.eval_csv == again.eval_csv;
    let pass = same_ckpt && same_csv;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "checkpoint identical: {same_ckpt} ({} bytes); eval CSV identical: {same_csv}",
            first.checkpoint.to_bytes().len()
        ),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_10_embedding_contract() {
    let t = Instant::now();
    let run = toy(4, 0);
    let set = &run.embeddings;
    let wrong_dim = set
        .entries()
        .iter()
        .filter(|e| e.vector.len() != 512)
        .count();
    let worst_norm = set
        .entries()
        .iter()
        .map(|e| (e.vector.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    // Every pair scored in any repeat, checked both clamped and raw.
    let mut scored = 0;
    let mut out_of_range = 0;
    let mut raw_excess = 0.0f64;
    for r in 0..TOY_REPEATS as u64 {
        let pairs = make_pairs(set, 10.0, r).unwrap();
        let s = score_pairs(set, &pairs);
        for &v in s.genuine.iter().chain(&s.impostor) {
            scored += 1;
            out_of_range += usize::from(!(-1.0..=1.0).contains(&v));
        }
        for &(i, j) in pairs.genuine.iter().chain(&pairs.impostor) {
            let raw: f64 = set
                .get(i)
                .vector
                .iter()
                .zip(&set.get(j).vector)
                .map(|(a, b)| a * b)
                .sum();
            raw_excess = raw_excess.max(raw.abs() - 1.0);
        }
    }
    let pass = wrong_dim == 0 && worst_norm <= 1e-9 && out_of_range == 0 && raw_excess <= 1e-12;
    report(
        10,
        "embedding contract",
        pass,
        &format!(
            "{} embeddings, {wrong_dim} not 512-d, max |norm-1| = {worst_norm:.1e}; \
             {scored} scores, {out_of_range} outside [-1, 1], raw overshoot {raw_excess:.1e}",
            set.len()
        ),
        t.elapsed(),
    );
    assert!(pass);
}
