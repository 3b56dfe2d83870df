//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn galnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const SMALL_CFG: &str = "\
variant = gal-j
m = 4
input_h = 16
input_w = 16
backbone = 8,16
branch_channels = 8
projection_channels = 4
batch_size = 8
max_steps = 40
eval_every = 20
k = 2
factor_map = 0,0,1,1
n_train = 120
n_eval = 40
seed = 3
";

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL_CFG).unwrap();

    let out = galnet(
        &["gen-data", "--config", "run.cfg", "--split", "eval", "--out-images", "eval.bin", "--out-annotations", "eval.txt"],
        dir.path(),
    );
    assert!(out.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("eval.bin").exists());
    assert!(dir.path().join("eval.txt").exists());

    let out = galnet(
        &["train", "--config", "run.cfg", "--checkpoint-out", "model.json"],
        dir.path(),
    );
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("step,lr,l_f,l_c,mean_acc_f,mean_acc_c"));
    assert_eq!(stdout.lines().count(), 41, "header + one line per step");

    // evaluate on the generated file pair and on the synthetic split
    let out = galnet(
        &["eval", "--checkpoint", "model.json", "--images", "eval.bin", "--annotations", "eval.txt"],
        dir.path(),
    );
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Average"));
    assert!(table.contains("Acc-F") && table.contains("Acc-C"));
    assert!(table.contains("samples: 40"));

    let out = galnet(
        &["eval", "--checkpoint", "model.json", "--config", "run.cfg", "--split", "eval"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        table,
        "file-pair and synthetic-split evaluations must agree"
    );

    let out = galnet(
        &["export-affinity", "--checkpoint", "model.json", "--config", "run.cfg", "--out-csv", "aff.csv", "--out-pgm", "aff.pgm"],
        dir.path(),
    );
    assert!(out.status.success(), "export failed: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("aff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header + 4 rows");
    let pgm = std::fs::read_to_string(dir.path().join("aff.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n4 4\n255\n"));
}

#[test]
fn training_is_reproducible_at_the_binary_level() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL_CFG).unwrap();
    let run = |name: &str| {
        let out = galnet(
            &["train", "--config", "run.cfg", "--checkpoint-out", name],
            dir.path(),
        );
        assert!(out.status.success());
        out.stdout
    };
    let s1 = run("a.json");
    let s2 = run("b.json");
    assert_eq!(s1, s2, "metrics streams differ between identical runs");
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "checkpoints differ between identical runs");
}

#[test]
fn gal_c_requires_a_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL_CFG).unwrap();
    let out = galnet(
        &["train", "--config", "run.cfg", "--variant", "gal-c", "--checkpoint-out", "x.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "missing --init-from must be a config error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init-from"));
}

#[test]
fn gal_c_trains_from_a_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL_CFG).unwrap();
    let out = galnet(
        &["train", "--config", "run.cfg", "--variant", "baseline", "--checkpoint-out", "base.json"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = galnet(
        &["train", "--config", "run.cfg", "--variant", "gal-c", "--init-from", "base.json", "--checkpoint-out", "galc.json"],
        dir.path(),
    );
    assert!(out.status.success(), "gal-c failed: {}", String::from_utf8_lossy(&out.stderr));
    // the frozen feature net must match the baseline checkpoint bitwise
    let base = galnet::checkpoint::read_file(dir.path().join("base.json")).unwrap();
    let galc = galnet::checkpoint::read_file(dir.path().join("galc.json")).unwrap();
    use galnet::model::ParamTag;
    for rec in &galc.params {
        if matches!(rec.tag, ParamTag::Fln | ParamTag::HeadF) {
            let src = base.params.iter().find(|p| p.name == rec.name).unwrap();
            let same = rec
                .values
                .iter()
                .zip(&src.values)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "frozen parameter {} drifted from the baseline", rec.name);
        }
    }
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "nonsense_key = 1\n").unwrap();
    let out = galnet(
        &["train", "--config", "bad.cfg", "--checkpoint-out", "x.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense_key"));
}

#[test]
fn missing_files_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = galnet(
        &["eval", "--checkpoint", "absent.json", "--config", "also-absent.cfg"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
}
