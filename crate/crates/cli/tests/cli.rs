use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmnet_core::data::image;
use mmnet_core::metrics::EvalReport;
use mmnet_core::RunConfig;

fn mmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmnet")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mmnet-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &["--synth-subjects", "3", "--synth-classes", "2", "--epochs", "1", "--batch-size", "4"];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    mmnet(&args)
}

#[test]
fn config_prints_defaults_and_overrides() {
    let o = mmnet(&["config"]);
    assert!(o.status.success());
    let cfg = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.lr0, 0.0008);
    assert_eq!((cfg.train.batch_size, cfg.train.epochs), (32, 70));
    assert_eq!((cfg.model.num_layers, cfg.model.num_heads), (2, 4));

    let o = mmnet(&["config", "--no-pc", "--attn-mode", "independent", "--num-heads", "8", "--seed", "7"]);
    let cfg = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert!(!cfg.model.use_pc && cfg.model.use_ca);
    assert_eq!(cfg.model.attn_mode.to_string(), "independent");
    assert_eq!((cfg.model.num_heads, cfg.seed), (8, 7));
}

#[test]
fn ablation_flags_cover_the_four_rows() {
    let rows = [(&[][..], true, true), (&["--no-pc"][..], true, false), (&["--no-ca"][..], false, true), (&["--no-ca", "--no-pc"][..], false, false)];
    for (flags, ca, pc) in rows {
        let mut args = vec!["config"];
        args.extend_from_slice(flags);
        let cfg = RunConfig::from_toml(&stdout(&mmnet(&args))).unwrap();
        assert_eq!((cfg.model.use_ca, cfg.model.use_pc), (ca, pc));
    }
}

#[test]
fn bad_config_is_a_one_line_diagnostic() {
    let o = mmnet(&["config", "--num-heads", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("mmnet: config error"));

    let o = mmnet(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn train_writes_fold_and_pooled_artifacts_then_eval_and_export_use_them() {
    let dir = scratch("train");
    let o = train_tiny(&dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("pooled accuracy"));
    let cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    let mut fold_samples = 0;
    for s in ["s00", "s01", "s02"] {
        let fold = dir.join("folds").join(s);
        assert!(fold.join("checkpoint.bin").is_file());
        let log = std::fs::read_to_string(fold.join("train.log")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert!(log.starts_with("epoch=0 lr=8e-4 loss="));
        let r = EvalReport::from_toml(&std::fs::read_to_string(fold.join("report.toml")).unwrap()).unwrap();
        assert_eq!(r.config_digest, cfg.digest_hex());
        fold_samples += r.samples;
    }
    let pooled = EvalReport::from_toml(&std::fs::read_to_string(dir.join("pooled_report.toml")).unwrap()).unwrap();
    assert_eq!(pooled.samples, fold_samples);
    assert_eq!(pooled.scope, "pooled");

    let config = dir.join("config.toml");
    let ckpt = dir.join("folds/s00/checkpoint.bin");
    let o = mmnet(&["eval", "--config", config.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--subject", "s00"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::from_toml(&stdout(&o)).unwrap();
    let fold = EvalReport::from_toml(&std::fs::read_to_string(dir.join("folds/s00/report.toml")).unwrap()).unwrap();
    assert_eq!(r.confusion, fold.confusion);

    let maps = dir.join("maps");
    let o = mmnet(&[
        "export-attn",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sample",
        "s00_happiness_0",
        "--out-dir",
        maps.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (i, size) in [112, 56, 28, 14].into_iter().enumerate() {
        let map = image::load(&maps.join(format!("attn_block{}.pgm", i + 1))).unwrap();
        assert_eq!(map.shape(), [1, size, size]);
        let overlay = image::load(&maps.join(format!("overlay_block{}.ppm", i + 1))).unwrap();
        assert_eq!(overlay.shape(), [3, 224, 224]);
    }

    // a config that differs from the one the checkpoint was trained with
    let other = dir.join("other.toml");
    let mut changed = cfg.clone();
    changed.seed += 1;
    changed.save(&other).unwrap();
    let o = mmnet(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("digest"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn training_replays_byte_for_byte() {
    let a = scratch("replay-a");
    let b = scratch("replay-b");
    assert!(train_tiny(&a, &["--seed", "5"]).status.success());
    assert!(train_tiny(&b, &["--seed", "5"]).status.success());
    for rel in ["pooled_report.toml", "folds/s01/checkpoint.bin", "folds/s01/train.log", "folds/s02/report.toml"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    std::fs::remove_dir_all(&a).unwrap();
    std::fs::remove_dir_all(&b).unwrap();
}

#[test]
fn synth_then_train_from_index() {
    let dir = scratch("index");
    let data = dir.join("data");
    let o = mmnet(&["synth", "--subjects", "2", "--classes", "2", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let index = data.join("index.txt");
    assert!(index.is_file());
    let run = dir.join("run");
    let o = mmnet(&[
        "train",
        "--index",
        index.to_str().unwrap(),
        "--num-classes",
        "2",
        "--epochs",
        "0",
        "--output-dir",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("folds/s01/report.toml").is_file());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let o = mmnet(&["gradcheck", "--instances", "3", "--ops-only"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = mmnet(&["gradcheck", "--instances", "3", "--ops-only", "--corrupt", "sigmoid"]);
    assert!(!o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("sigmoid") && l.ends_with("FAIL")));
    assert!(stderr(&o).contains("sigmoid"));
}

#[test]
fn full_model_gradcheck_is_quick() {
    let start = std::time::Instant::now();
    let o = mmnet(&["gradcheck", "--instances", "1", "--params", "10"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("model ") && l.ends_with(" ok")));
    assert!(start.elapsed().as_secs() < 60);
}
