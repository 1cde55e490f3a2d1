use std::path::Path;

use clap::Parser;
use mmtm::cli::{execute, Cli};
use mmtm::Error;

const SMALL: &str = r#"seeds = [0, 1]

[task]
train_size = 96
val_size = 32
test_size = 48

[streams]
conv_channels = [4, 8]
dense_widths = [8, 8]

[training]
max_epochs = 2
"#;

fn run(args: &[&str]) -> mmtm::Result<Vec<String>> {
    let mut full = vec!["mmtm"];
    full.extend_from_slice(args);
    execute(&Cli::try_parse_from(full).expect("valid arguments"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gen_train_eval_reproduces_the_recorded_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let root = dir.path().display().to_string();
    let data_dir = format!("{root}/gen-data");
    let train_dir = format!("{root}/train");
    let eval_dir = format!("{root}/eval");
    run(&["gen-data", "--config", &cfg, "--out", &data_dir]).unwrap();
    let data = format!("{data_dir}/dataset.mmfz");
    run(&["train", "--config", &cfg, "--data", &data, "--out", &train_dir, "--seed", "3"]).unwrap();
    run(&["eval", "--config", &cfg, "--data", &data, "--out", &eval_dir]).unwrap();

    let record = std::fs::read_to_string(format!("{train_dir}/run.jsonl")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(record.lines().last().unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{eval_dir}/eval.json")).unwrap())
            .unwrap();
    assert_eq!(summary["test_accuracy"], eval["test_accuracy"]);
    assert_eq!(summary["test_loss"], eval["test_loss"]);
    assert_eq!(summary["seed"], 3);
}

#[test]
fn count_costs_sees_one_more_mmtm() {
    let dir = tempfile::tempdir().unwrap();
    let one = write(dir.path(), "one.toml", &format!("{SMALL}\n[fusion]\nnum_points = 1\n"));
    let two = write(dir.path(), "two.toml", &format!("{SMALL}\n[fusion]\nnum_points = 2\n"));
    let total = |lines: Vec<String>| -> (u64, u64) {
        let t = lines.iter().find(|l| l.starts_with("total,")).unwrap();
        let f: Vec<u64> = t.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        (f[0], f[1])
    };
    let out = dir.path().join("costs").display().to_string();
    let a = total(run(&["count-costs", "--config", &one, "--out", &out]).unwrap());
    let b = total(run(&["count-costs", "--config", &two, "--out", &out]).unwrap());
    assert!(b.0 > a.0 && b.1 > a.1, "{a:?} -> {b:?}");
    let csv = std::fs::read_to_string(dir.path().join("costs/costs.csv")).unwrap();
    assert!(csv.starts_with("component,params,macs\n"));
}

#[test]
fn missing_config_is_a_usage_error_with_an_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    for args in [
        vec!["train", "--out", &out],
        vec!["train", "--out", &out, "--config", "/nonexistent/cfg.toml"],
    ] {
        match run(&args) {
            Err(Error::Usage(m)) => assert!(m.contains("[training]"), "{m}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().display().to_string();
    let err = run(&["ablate", "--config", &cfg, "--out", &out, "--variants", "late,gmu"]).unwrap_err();
    assert!(matches!(err, Error::Usage(ref m) if m.contains("se_late")), "{err}");
}

#[test]
fn gradcheck_passes_on_every_applicable_variant() {
    let dir = tempfile::tempdir().unwrap();
    let aligned = format!(
        "{}\n",
        SMALL.replace("[task]\n", "[task]\nshapes = [[6, 6, 1], [6, 6, 1]]\n")
    );
    let cfg = write(dir.path(), "aligned.toml", &aligned);
    let out = dir.path().join("gc").display().to_string();
    let lines = run(&["gradcheck", "--config", &cfg, "--out", &out]).unwrap();
    assert_eq!(lines.len(), 6, "{lines:?}");
    assert!(lines.iter().all(|l| l.ends_with(" ok")), "{lines:?}");
}

#[test]
fn ablate_and_sweep_write_sorted_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("ab").display().to_string();
    run(&["ablate", "--config", &cfg, "--out", &out, "--variants", "se_late,late"]).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["late", "se_late"]);

    let out = dir.path().join("sw").display().to_string();
    run(&["sweep", "--config", &cfg, "--out", &out, "--max-points", "1"]).unwrap();
    let sweep = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    let j0 = sweep.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    let late = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    assert_eq!(j0, late);
}
