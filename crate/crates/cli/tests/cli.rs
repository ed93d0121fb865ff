use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "data.height=32",
    "data.width=32",
    "data.train_size=8",
    "data.val_size=3",
    "schedule.steps=4",
    "train.batch_size=4",
    "eval.batch=3",
];

fn condiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condiff")).args(args).output().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn every_config_problem_is_reported_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "schedule.steps = 0\nnot.a.key = 3\noptim.lr = fast\nsample.consensus = vote\n").unwrap();
    let out = condiff(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let report = stderr_json(&out);
    assert_eq!(report["error"], "validation");
    let keys: Vec<&str> = report["diagnostics"].as_array().unwrap().iter().filter_map(|d| d["key"].as_str()).collect();
    for k in ["schedule.steps", "not.a.key", "optim.lr", "sample.consensus"] {
        assert!(keys.contains(&k), "{k} missing from {keys:?}");
    }
}

#[test]
fn missing_data_path_is_a_single_validation_error() {
    let out = condiff(&["train", "--data", "/definitely/not/here.cdds"]);
    assert_eq!(out.status.code(), Some(2));
    let diags = stderr_json(&out)["diagnostics"].as_array().unwrap().clone();
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0]["key"], "data.path");
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(condiff(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(condiff(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_sample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let o = out_dir.to_str().unwrap();
    let st = condiff(&with_small(&["train", "--data", "synthetic", "--epochs", "1", "--seed", "3", "--out", o]));
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["model.ckpt", "config.txt", "train_log.jsonl", "train_summary.json"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let cfg_text = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(condiff::config::RunConfig::parse(&cfg_text).is_ok());

    let ev = condiff(&with_small(&["eval", "--out", o, "--seed", "3", "eval.export_masks=true"]));
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_report.json")).unwrap()).unwrap();
    let protocols = report["protocols"].as_array().unwrap();
    assert_eq!(protocols.iter().map(|p| p["n"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 4]);
    for p in protocols {
        assert_eq!(p["dice_per_class"].as_array().unwrap().len(), 4);
        assert!(p["mean_dice"].as_f64().unwrap() >= 0.0);
        assert!(p["mean_iou"].as_f64().is_some());
    }
    assert!(protocols[1]["mean_dice"].as_f64().unwrap() >= protocols[0]["mean_dice"].as_f64().unwrap());
    assert!(out_dir.join("eval_report.txt").is_file());
    check_masks(&out_dir.join("masks"), 3, 4);

    let sa = condiff(&with_small(&["sample", "--out", o, "--limit", "2"]));
    assert!(sa.status.success(), "{}", String::from_utf8_lossy(&sa.stderr));
    check_masks(&out_dir.join("samples"), 2, 4);
}

fn check_masks(dir: &Path, expected: usize, classes: u8) {
    let pngs: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), expected);
    for e in pngs {
        let img = image::open(e.path()).unwrap();
        let gray = img.as_luma8().expect("8-bit grayscale");
        assert_eq!(gray.dimensions(), (32, 32));
        assert!(gray.pixels().all(|p| p.0[0] < classes));
    }
    let names = std::fs::read_to_string(dir.join("classes.txt")).unwrap();
    assert_eq!(names.lines().next(), Some("0 background"));
    assert_eq!(names.lines().count(), classes as usize);
}

#[test]
fn oracle_evaluation_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let ev = condiff(&with_small(&["eval", "--oracle", "--out", o]));
    assert!(ev.status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["protocols"][0]["mean_dice"], 1.0);
    assert_eq!(report["protocols"][0]["mean_iou"], 1.0);
}

#[test]
fn mismatched_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert!(condiff(&with_small(&["train", "--epochs", "1", "--out", o])).status.success());
    let ev = condiff(&with_small(&["eval", "--out", o, "denoiser.widths=16,64,160,256", "adapter.dims=16,64,160,256"]));
    assert_eq!(ev.status.code(), Some(2), "{}", String::from_utf8_lossy(&ev.stderr));
    let missing = condiff(&with_small(&["eval", "--out", o, "--checkpoint", "/no/such.ckpt"]));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    std::fs::write(&ck, b"CDCK garbage").unwrap();
    let ev = condiff(&with_small(&["eval", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(ev.status.code(), Some(3));
    assert_eq!(stderr_json(&ev)["error"], "runtime");
}

#[test]
fn ablation_table_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let ab = condiff(&with_small(&["ablate", "--epochs", "1", "--out", o, "ablate.seeds=0", "eval.best_of=1"]));
    assert!(ab.status.success(), "{}", String::from_utf8_lossy(&ab.stderr));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    let variants: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, vec!["none", "concat", "additive"]);
    let table = std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("F-1") && table.contains("mIoU"));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn profile_report_lists_all_quantities() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let pr = condiff(&["profile", "--out", o, "profile.iters=2", "profile.warmup=1", "profile.resolution=32"]);
    assert!(pr.status.success(), "{}", String::from_utf8_lossy(&pr.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("profile.json")).unwrap()).unwrap();
    for k in ["trainable_params", "reserved_memory_mb", "typical_memory_mb", "train_ms_per_step", "infer_ms_per_image"] {
        assert!(r.get(k).is_some(), "{k}");
    }
    assert_eq!(r["train_ms_per_step"]["samples"], 2);
}

#[test]
fn gen_data_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert!(condiff(&with_small(&["gen-data", "--out", o])).status.success());
    let train = condiff::data::load_dataset(&dir.path().join("train.cdds")).unwrap();
    let val = condiff::data::load_dataset(&dir.path().join("val.cdds")).unwrap();
    assert_eq!((train.len(), val.len()), (8, 3));
    assert_eq!((train.height, train.width, train.classes), (32, 32, 4));
}
