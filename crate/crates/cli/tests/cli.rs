use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meat_cli::inspect::{parse_pgm, parse_text};
use meat_core::meat::{backbone_bytes, individual_storage_bytes, LayerBits, TaskMaskSet};
use meat_core::vit::{Head, ViTConfig};

const TINY: &str = r#"
[model]
image_size = 16
patch_size = 8
channels = 3
embed_dim = 8
heads = 2
layers = 1
ffn_hidden = 16

[train]
epochs = 2
batch_size = 8
optimizer = "adam"
backbone_lr_base = 0.128
head_lr_base = 0.128
mask_lr_base = 6.4
__EXTRA__

[[tasks]]
task_id = 0
kind = "oriented-bars"
num_classes = 4
n_train = 16
n_test = 8

[[tasks]]
task_id = 1
kind = "color-grid"
num_classes = 2
n_train = 8
n_test = 4
shift = { palette = "warm" }
"#;

fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 3,
        embed_dim: 8,
        heads: 2,
        layers: 1,
        ffn_hidden: 16,
    }
}

const DESK_MODEL: &str = r#"
[model]
image_size = 32
patch_size = 8
channels = 3
embed_dim = 64
heads = 4
layers = 4
ffn_hidden = 128

[[tasks]]
task_id = 0
kind = "oriented-bars"
num_classes = 2
n_train = 2
n_test = 2
"#;

fn meat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meat"))
        .args(args)
        .env("MEAT_LOG", "error")
        .output()
        .unwrap()
}

fn write_plan(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, TINY.replace("__EXTRA__", extra)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            out.extend(files_under(&p).into_iter().map(|f| format!("{name}/{f}")));
        } else {
            out.push(p.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    out.sort();
    out
}

#[test]
fn run_plan_artifacts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), "plan.toml", "");
    let run = tmp.path().join("run");
    let out = meat(&["run-plan", "--config", s(&plan), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        files_under(&run),
        vec![
            "manifest.txt",
            "metrics.csv",
            "plan.toml",
            "seed-0/model.meatvit",
            "seed-0/task-1.meatmsk",
            "summary.txt"
        ]
    );
    let header = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with(meat_core::continual::CSV_HEADER));

    // refuses to overwrite, then replaces with --force
    let again = meat(&["run-plan", "--config", s(&plan), "--out", s(&run)]);
    assert_eq!(again.status.code(), Some(1));
    let mask = fs::read(run.join("seed-0/task-1.meatmsk")).unwrap();
    let forced = meat(&["run-plan", "--config", s(&plan), "--out", s(&run), "--force"]);
    assert!(forced.status.success());
    assert_eq!(fs::read(run.join("seed-0/task-1.meatmsk")).unwrap(), mask);

    let other = tmp.path().join("run2");
    assert!(meat(&["run-plan", "--config", s(&plan), "--out", s(&other)]).status.success());
    assert_eq!(fs::read(other.join("seed-0/task-1.meatmsk")).unwrap(), mask);
    assert_eq!(
        fs::read(other.join("seed-0/model.meatvit")).unwrap(),
        fs::read(run.join("seed-0/model.meatvit")).unwrap()
    );
    assert!(!tmp.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains("partial")));
}

#[test]
fn report_shows_zero_forgetting_and_detects_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), "plan.toml", "methods = [\"meat\", \"classifier-only\", \"individual\"]");
    let run = tmp.path().join("run");
    assert!(meat(&["run-plan", "--config", s(&plan), "--out", s(&run)]).status.success());
    let out = meat(&["report", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let meat_row = text.lines().find(|l| l.starts_with("meat ") && l.contains("x")).unwrap();
    assert!(meat_row.contains("(0.00)"), "{text}");
    let individual = text.lines().find(|l| l.starts_with("individual") && l.contains("x")).unwrap();
    // one extra backbone plus a two-class head for the single new task
    let cfg = tiny_config();
    let want = individual_storage_bytes(&cfg, &[2]) as f64 / backbone_bytes(&cfg) as f64;
    assert!(want > 2.0);
    assert!(individual.trim_end().ends_with(&format!("{want:.2}x")), "{individual}");
    assert!(text.contains("bit-identical after every stage: yes"));

    fs::remove_file(run.join("seed-0/task-1.meatmsk")).unwrap();
    let out = meat(&["report", s(&run)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task-1.meatmsk"));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(meat(&["report", s(&empty)]).status.code(), Some(4));
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, TINY.replace("__EXTRA__", "").replace("embed_dim = 8\n", "")).unwrap();
    let out = meat(&["run-plan", "--config", s(&path), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed_dim"));
    assert!(!tmp.path().join("r").exists());

    let missing = meat(&["run-plan", "--config", s(&tmp.path().join("none.toml")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("__EXTRA__", "")
        .replace("optimizer = \"adam\"", "optimizer = \"sgd\"")
        .replace("backbone_lr_base = 0.128", "backbone_lr_base = 1e300");
    let path = tmp.path().join("plan.toml");
    fs::write(&path, text).unwrap();
    let run = tmp.path().join("run");
    let out = meat(&["run-plan", "--config", s(&path), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // partial results stay behind and are reported as incomplete
    assert!(run.join("manifest.txt").exists());
    assert_eq!(meat(&["report", s(&run)]).status.code(), Some(4));
}

#[test]
fn step_by_step_commands_match_run_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), "plan.toml", "");
    let run = tmp.path().join("run");
    assert!(meat(&["run-plan", "--config", s(&plan), "--out", s(&run)]).status.success());

    let out = tmp.path().join("manual");
    let base = meat(&["train-base", "--config", s(&plan), "--out", s(&out)]);
    assert!(base.status.success(), "{}", String::from_utf8_lossy(&base.stderr));
    let model = out.join("model.meatvit");
    assert_eq!(fs::read(&model).unwrap(), fs::read(run.join("seed-0/model.meatvit")).unwrap());
    assert_eq!(meat(&["train-base", "--config", s(&plan), "--out", s(&out)]).status.code(), Some(1));

    let task = meat(&["train-task", "--config", s(&plan), "--model", s(&model), "--task", "1", "--out", s(&out)]);
    assert!(task.status.success(), "{}", String::from_utf8_lossy(&task.stderr));
    assert_eq!(
        fs::read(out.join("task-1.meatmsk")).unwrap(),
        fs::read(run.join("seed-0/task-1.meatmsk")).unwrap()
    );
    let zero = meat(&["train-task", "--config", s(&plan), "--model", s(&model), "--task", "0", "--out", s(&out)]);
    assert_eq!(zero.status.code(), Some(1));

    let eval = meat(&["eval", "--config", s(&plan), "--model", s(&model)]);
    assert!(eval.status.success());
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.contains("task 0: accuracy") && text.contains("task 1: accuracy"), "{text}");
    let lookup = meat(&["eval", "--config", s(&plan), "--model", s(&model), "--masks", s(tmp.path()), "--task", "1"]);
    assert_eq!(lookup.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&lookup.stderr).contains("no mask set for task 1"));
}

fn all_active_desk_file(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = ViTConfig::desk();
    let set = TaskMaskSet::new(&cfg, 3, vec![LayerBits::ones(&cfg); 4], Head::new(64, 5, 0), 7, 30).unwrap();
    let masks = dir.join("task-3.meatmsk");
    set.save(&masks).unwrap();
    let plan = dir.join("desk.toml");
    fs::write(&plan, DESK_MODEL).unwrap();
    (masks, plan)
}

#[test]
fn inspect_all_active_grid_and_pgm_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (masks, plan) = all_active_desk_file(tmp.path());
    let out = meat(&["inspect-masks", s(&masks), "--config", s(&plan), "--layer", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let grid: Vec<&str> = text.lines().filter(|l| l.chars().all(|c| c == '0' || c == '1') && !l.is_empty()).collect();
    assert_eq!(grid, vec!["1111"; 4]);
    assert!(text.contains("    3  1.0000  1.0000  1.0000"), "{text}");

    let pgm = tmp.path().join("l2.pgm");
    assert!(meat(&["inspect-masks", s(&masks), "--config", s(&plan), "--layer", "2", "--format", "pgm", "--out", s(&pgm)])
        .status
        .success());
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(parse_pgm(&bytes).unwrap(), parse_text(&grid.join("\n")).unwrap());

    assert_eq!(meat(&["inspect-masks", s(&masks), "--config", s(&plan), "--layer", "9"]).status.code(), Some(1));
}

#[test]
fn inspect_rejects_foreign_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (masks, _) = all_active_desk_file(tmp.path());
    let plan = write_plan(tmp.path(), "tiny.toml", "");
    let out = meat(&["inspect-masks", s(&masks), "--config", s(&plan)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}
