use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dit_core::report::{parse_metrics_csv, parse_pgm, STATS_HEADER};

const TINY: &str = "\
# two levels, three columns
levels = 2
columns = 3
dims = 8,16
heads = 1,2
image_size = 16x16
steps = 4
batch_size = 2
warmup_steps = 1
eval_every = 2
test_size = 12
";

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dit-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn dit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dit")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(dir: &Path, extra: &str) -> String {
    let cfg = config(dir, extra);
    ok(dit(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()]));
    dir.join("checkpoint.ditc").to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = scratch("unknown");
    let cfg = config(&dir, "learning_rate = 0.1\n");
    let out = dit(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line 12"), "{err}");
}

#[test]
fn bad_flag_value_exits_with_code_two() {
    let out = dit(&["flops-report", "--routing-mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_training_writes_identical_metrics() {
    let a = scratch("repeat-a");
    let b = scratch("repeat-b");
    train(&a, "");
    train(&b, "");
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(parse_metrics_csv(&ma).unwrap().len(), 2);
    assert_eq!(fs::read(a.join("checkpoint.ditc")).unwrap(), fs::read(b.join("checkpoint.ditc")).unwrap());
}

#[test]
fn eval_reproduces_the_final_metrics_row() {
    let dir = scratch("eval");
    let ck = train(&dir, "");
    let rows = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap();
    let line = ok(dit(&["eval", "--checkpoint", &ck]));
    let last = rows.last().unwrap();
    assert!(line.starts_with(&format!("acc={} ratio={} ", last.acc, last.ratio)), "{line}");
}

#[test]
fn checkpoint_with_a_different_config_is_rejected() {
    let dir = scratch("mismatch");
    let ck = train(&dir, "");
    let out = dit(&["eval", "--checkpoint", &ck, "--lambda-c", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_c"));
}

#[test]
fn fully_mode_reports_ratio_of_at_least_one() {
    let dir = scratch("fully");
    train(&dir, "routing_mode = fully\n");
    let rows = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.ratio >= 1.0));
}

#[test]
fn masks_are_white_when_every_row_is_closed() {
    let dir = scratch("masks-closed");
    let ck = train(&dir, "");
    let out = dir.join("masks");
    ok(dit(&[
        "viz-masks",
        "--checkpoint",
        &ck,
        "--count",
        "2",
        "--force-row",
        "closed",
        "--out",
        out.to_str().unwrap(),
    ]));
    let mut seen = 0;
    for entry in fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let (w, h, px) = parse_pgm(&fs::read(&path).unwrap()).unwrap();
            assert_eq!(px.len(), w * h);
            assert!(px.iter().all(|&p| p == 255), "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen > 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(" written ")).count(), seen);
}

#[test]
fn masks_are_black_in_fully_mode() {
    let dir = scratch("masks-fully");
    let ck = train(&dir, "routing_mode = fully\n");
    let out = dir.join("masks");
    ok(dit(&["viz-masks", "--checkpoint", &ck, "--count", "1", "--out", out.to_str().unwrap()]));
    // level 0 has stages at columns 0 and 1, level 1 at column 1
    for (name, pixels) in [("sample0_L0_C0.pgm", 16), ("sample0_L0_C1.pgm", 16), ("sample0_L1_C1.pgm", 4)] {
        let (w, h, px) = parse_pgm(&fs::read(out.join(name)).unwrap()).unwrap();
        assert_eq!(w * h, pixels, "{name}");
        assert!(px.iter().all(|&p| p == 0), "{name}");
    }
}

#[test]
fn stats_strata_cover_the_test_set() {
    let dir = scratch("stats");
    let ck = train(&dir, "");
    let csv = ok(dit(&["stats", "--checkpoint", &ck, "--gating", "sample", "--out", dir.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(dir.join("stats.csv")).unwrap(), csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(STATS_HEADER));
    let mut per_bin_total = 0;
    let mut all_total = None;
    for line in lines {
        // the quoted bin label itself contains a comma
        let close = line[1..].find('"').unwrap() + 2;
        let bin = &line[..close];
        let fields: Vec<&str> = line[close + 1..].split(',').collect();
        let (level, column): (usize, usize) = (fields[0].parse().unwrap(), fields[1].parse().unwrap());
        if let Ok(skip) = fields[2].parse::<f64>() {
            assert!((0.0..=1.0).contains(&skip), "{line}");
        }
        if (level, column) != (0, 0) {
            continue;
        }
        let n: usize = fields[4].parse().unwrap();
        if bin == "\"all\"" {
            all_total = Some(n);
        } else {
            per_bin_total += n;
        }
    }
    assert_eq!(all_total, Some(12));
    assert_eq!(per_bin_total, 12);
}

#[test]
fn flops_report_for_a_single_level_grid_has_ratio_one() {
    let dir = scratch("flops");
    let cfg = dir.join("one.cfg");
    fs::write(&cfg, "levels = 1\ncolumns = 3\ndims = 8\nheads = 1\nimage_size = 16x16\n").unwrap();
    let table = ok(dit(&["flops-report", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]));
    assert!(table.contains("(ratio 1.0000)"), "{table}");
    assert!(dir.join("flops.csv").exists());
}

#[test]
fn flops_report_on_the_desk_grid() {
    let table = ok(dit(&["flops-report"]));
    assert!(table.contains("C_base  = 2724352"), "{table}");
    assert!(table.contains("fully-open C_space = 6795776 (ratio 2.4945)"), "{table}");
}
