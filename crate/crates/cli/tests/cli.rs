use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ovit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

const TINY: &str = r#"
version = 1
out_dir = "runs"

[data]
root = "data"
name = "tiny"

[model]
variant = "custom"
depth = 1
width = 16
heads = 2
mlp_ratio = 2.0

[grid]
image_size = 16
patch_size = 8
stride = 4

[train]
epochs = 3
warmup_epochs = 1
batch_size = 8
seed = 5

[eval]
repeats = 3
impostor_ratio = 2.0

[synth]
num_ids = 4
imgs_per_id = 4
noise_std = 0.05
seed = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn pipeline(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, TINY);
    for cmd in ["synth", "train", "embed", "eval"] {
        let o = ovit(&[cmd, "--config", &cfg]);
        assert!(o.status.success(), "{cmd} failed: {}", stderr(&o));
    }
    dir.join("runs/ViT_C_p8_s4")
}

#[test]
fn grid_info_reports_counts() {
    let o = ovit(&["grid-info", "112", "56", "28"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("N=9\n"), "{text}");
    assert!(text.contains("multiplicity min=1 max=4"), "{text}");
    let o = ovit(&["grid-info", "112", "28", "14"]);
    assert!(stdout(&o).contains("N=49\n"));
    let o = ovit(&["grid-info", "112", "56", "56"]);
    assert!(stdout(&o).contains("overlap_fraction=0.000000"));
}

#[test]
fn invalid_grid_exits_with_validation_code() {
    let o = ovit(&["grid-info", "112", "30", "14"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not divisible"), "{}", stderr(&o));
}

#[test]
fn bad_configs_name_the_key_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("[train]", "[train]\nlr = 0.5"));
    let o = ovit(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));

    let cfg = write_config(
        dir.path(),
        &TINY.replace("batch_size = 8", "batch_size = 0"),
    );
    let o = ovit(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), TINY);
    let o = ovit(&["train", "--config", &cfg, "--stride", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ovit(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = ovit(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_a = pipeline(a.path());
    let run_b = pipeline(b.path());
    for file in [
        "last.ckpt",
        "best.ckpt",
        "train_log.csv",
        "eval.csv",
        "eval_repeats.csv",
        "embeddings.bin",
    ] {
        let x = fs::read(run_a.join(file)).unwrap();
        let y = fs::read(run_b.join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }
    assert!(!run_a.join("INCOMPLETE").exists());

    let log = fs::read_to_string(run_a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,loss\n"));
    // 16 images in batches of 8 for 3 epochs.
    assert_eq!(log.lines().count(), 1 + 6);
    let eval = fs::read_to_string(run_a.join("eval.csv")).unwrap();
    assert!(
        eval.starts_with(
            "model_label,dataset,patch,stride,mean_auc,std_auc\nViT_C_p8_s4,tiny,8,4,"
        ),
        "{eval}"
    );

    // The saved config reloads to the same effective settings.
    let saved = run_a.join("config.toml");
    let o = ovit(&[
        "eval",
        "--config",
        saved.to_str().unwrap(),
        "--out",
        run_a.parent().unwrap().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run_a.join("eval.csv")).unwrap(), eval);

    // A seed override changes only the impostor samples.
    let cfg = a.path().join("run.toml");
    let o = ovit(&["eval", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read_to_string(run_a.join("eval_repeats.csv")).unwrap(),
        fs::read_to_string(run_b.join("eval_repeats.csv")).unwrap()
    );

    let same = ovit(&[
        "pv",
        run_a.join("eval.csv").to_str().unwrap(),
        run_b.join("eval.csv").to_str().unwrap(),
    ]);
    assert!(same.status.success(), "{}", stderr(&same));
    let text = stdout(&same);
    assert!(
        text.starts_with("setting_a,setting_b,auc_a,auc_b,pv_percent\n"),
        "{text}"
    );
    assert!(text.trim_end().ends_with(",0.0"), "{text}");
}

#[test]
fn grid_override_gives_separate_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 3", "epochs = 1"));
    assert!(ovit(&["synth", "--config", &cfg]).status.success());
    let o = ovit(&["train", "--config", &cfg, "--stride", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("runs/ViT_C_p8_s8/last.ckpt").exists());
    assert!(!dir.path().join("runs/ViT_C_p8_s4").exists());
}

#[test]
fn pv_table_reproduces_published_comparison_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pv.csv");
    let table = repo_file("data/table2_auc.csv");
    let o = ovit(&[
        "pv",
        "--table",
        table.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("44 of 48"), "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 49);
    assert!(
        text.contains(
            "ViT_T_p56_s28@EarVN1.0,ViT_T_p56_s56@EarVN1.0,0.6966,0.633,10.0473933649289"
        ),
        "{text}"
    );
}
