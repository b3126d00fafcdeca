use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ovit_core::data::{load_dataset, write_synth_dataset};
use ovit_core::eval::{
    extract_embeddings, overlap_comparisons, read_csv, repeat_eval, to_csv, EmbeddingSet, EvalRow,
    PvReport,
};
use ovit_core::io::atomic_write;
use ovit_core::train::{log_csv, train_with, TrainSet};
use ovit_core::{Checkpoint, PatchGridSpec};
use serde::Serialize;

use crate::config::{Invalid, RunConfig};

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EVAL_FILE: &str = "eval.csv";
pub const REPEATS_FILE: &str = "eval_repeats.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
/// Present in a run directory whose last command stopped part-way.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub struct GridReport {
    pub grid: PatchGridSpec,
    pub min_multiplicity: usize,
    pub max_multiplicity: usize,
    /// Fraction of pixels covered by more than one window.
    pub overlap_fraction: f64,
}

pub fn grid_report(image_size: usize, patch_size: usize, stride: usize) -> Result<GridReport> {
    let grid = PatchGridSpec::new(image_size, patch_size, stride)?;
    let coverage = grid.coverage();
    let shared = coverage.iter().filter(|&&c| c > 1).count();
    Ok(GridReport {
        grid,
        min_multiplicity: *coverage.iter().min().expect("grid has pixels"),
        max_multiplicity: *coverage.iter().max().expect("grid has pixels"),
        overlap_fraction: shared as f64 / coverage.len() as f64,
    })
}

pub fn grid_info(image_size: usize, patch_size: usize, stride: usize) -> Result<()> {
    let r = grid_report(image_size, patch_size, stride)?;
    println!("grid {}", r.grid);
    println!("N={}", r.grid.num_patches());
    println!("per_side={}", r.grid.per_side());
    println!(
        "multiplicity min={} max={}",
        r.min_multiplicity, r.max_multiplicity
    );
    println!("overlap_fraction={:.6}", r.overlap_fraction);
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let spec = cfg.synth_spec()?;
    let root = out.map_or_else(|| cfg.data_root(), Path::to_path_buf);
    let ds = write_synth_dataset(&root, &spec)?;
    println!(
        "wrote {} images of {} identities to {}",
        ds.index.len(),
        ds.index.num_identities(),
        root.display()
    );
    Ok(())
}

fn load_images(cfg: &RunConfig, root: &Path) -> Result<ovit_core::data::LoadedDataset> {
    let loaded = load_dataset(root, &cfg.layout()?)
        .with_context(|| format!("loading images from {}", root.display()))?;
    for (path, err) in &loaded.failures {
        eprintln!("skipped {}: {err}", path.display());
    }
    Ok(loaded)
}

/// Runs `body` with an incomplete-run marker in `dir`, removed on success.
fn guarded<T>(dir: &Path, what: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    let marker = dir.join(INCOMPLETE_MARKER);
    atomic_write(
        &marker,
        format!("{what} started and has not finished\n").as_bytes(),
    )?;
    match body() {
        Ok(v) => {
            fs::remove_file(&marker).with_context(|| format!("removing {}", marker.display()))?;
            Ok(v)
        }
        Err(e) => {
            let note = format!("{what} failed: {e:#}\noutputs in this directory are partial\n");
            // Best effort; the original error matters more.
            let _ = atomic_write(&marker, note.as_bytes());
            Err(e)
        }
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let model = cfg.vit()?;
    let train_cfg = cfg.train_config()?;
    let margin = cfg.margin()?;
    let run_dir = cfg.run_dir()?;
    let loaded = load_images(cfg, &cfg.data_root())?;
    let set = TrainSet::new(
        loaded.images,
        loaded.index.labels(),
        loaded.index.num_identities(),
    )?;
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    atomic_write(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    guarded(&run_dir, "train", || {
        let outcome = train_with(&model, &train_cfg, &margin, &set, |end| {
            end.checkpoint.save(&run_dir.join("last.ckpt"))?;
            if end.is_best {
                end.checkpoint.save(&run_dir.join("best.ckpt"))?;
            }
            eprintln!(
                "epoch {:>4}  loss {:.6}{}",
                end.record.epoch,
                end.record.mean_loss,
                if end.is_best { "  best" } else { "" }
            );
            Ok(())
        })?;
        atomic_write(
            &run_dir.join(TRAIN_LOG_FILE),
            log_csv(&outcome.steps).as_bytes(),
        )?;
        println!(
            "trained {} on {} images ({} steps); outputs in {}",
            model.label(),
            set.len(),
            outcome.steps.len(),
            run_dir.display()
        );
        Ok(())
    })
}

pub fn embed(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let run_dir = cfg.run_dir()?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => run_dir.join(cfg.eval_settings()?.checkpoint.file_name()),
    };
    let ck = Checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let root = cfg.eval_data_root();
    let mut loaded = load_images(cfg, &root)?;
    // Image ids are stored relative to the dataset root.
    for r in &mut loaded.index.records {
        if let Ok(rel) = r.path.strip_prefix(&root) {
            r.path = rel.to_path_buf();
        }
    }
    let set = extract_embeddings(&ck, &loaded.index, &loaded.images)?;
    let out = run_dir.join(EMBEDDINGS_FILE);
    set.save(&out)?;
    println!(
        "wrote {} embeddings ({}-d) to {}",
        set.len(),
        set.dim(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RepeatRow {
    repeat: usize,
    seed: u64,
    auc: f64,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalRow> {
    let settings = cfg.eval_settings()?;
    let model = cfg.vit()?;
    let run_dir = cfg.run_dir()?;
    let path = run_dir.join(EMBEDDINGS_FILE);
    let set = EmbeddingSet::load(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary = repeat_eval(
        &set,
        settings.repeats,
        settings.seed,
        settings.impostor_ratio,
    )?;
    let row = EvalRow {
        model_label: model.label(),
        dataset: cfg.data.name.clone(),
        patch: model.grid.patch_size(),
        stride: model.grid.stride(),
        mean_auc: summary.mean,
        std_auc: summary.std,
    };
    let repeats: Vec<RepeatRow> = summary
        .aucs
        .iter()
        .enumerate()
        .map(|(r, &auc)| RepeatRow {
            repeat: r,
            seed: settings.seed.wrapping_add(r as u64),
            auc,
        })
        .collect();
    atomic_write(&run_dir.join(REPEATS_FILE), to_csv(&repeats)?.as_bytes())?;
    atomic_write(
        &run_dir.join(EVAL_FILE),
        to_csv(std::slice::from_ref(&row))?.as_bytes(),
    )?;
    println!(
        "{} on {}: AUC {summary} over {} repeats",
        row.model_label, row.dataset, settings.repeats
    );
    Ok(row)
}

fn single_row(path: &Path) -> Result<EvalRow> {
    let rows: Vec<EvalRow> = read_csv(path)?;
    match rows.as_slice() {
        [row] => Ok(row.clone()),
        _ => bail!(Invalid(format!(
            "{} must hold exactly one eval row, found {}",
            path.display(),
            rows.len()
        ))),
    }
}

/// PV of `a` over `b`, or every overlap comparison in `table`.
pub fn pv(a: Option<&Path>, b: Option<&Path>, table: Option<&Path>) -> Result<Vec<PvReport>> {
    match (a, b, table) {
        (Some(a), Some(b), None) => Ok(vec![PvReport::new(&single_row(a)?, &single_row(b)?)?]),
        (None, None, Some(t)) => {
            let rows: Vec<EvalRow> = read_csv(t)?;
            let reports = overlap_comparisons(&rows)?;
            if reports.is_empty() {
                bail!(Invalid(format!(
                    "{} has no S = P/2 row with an S = P partner",
                    t.display()
                )));
            }
            Ok(reports)
        }
        _ => bail!(Invalid(
            "pv takes two eval CSV files, or --table alone".into()
        )),
    }
}

pub fn write_pv(reports: &[PvReport], out: Option<&PathBuf>) -> Result<()> {
    let text = to_csv(reports)?;
    match out {
        Some(p) => atomic_write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    let wins = reports.iter().filter(|r| r.pv_percent > 0.0).count();
    eprintln!("{wins} of {} comparisons favour setting A", reports.len());
    Ok(())
}
