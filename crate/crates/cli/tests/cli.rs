use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// A configuration small enough to train in a couple of seconds.
const TINY: &str = "\
seed=7
train_vae=6
train_reg_normal=4
train_reg_anomaly=4
test_per_digit=2
vae_channels=2,2,2,2
latent_dim=4
vae_epochs=1
vae_batch=3
reg_channels=2,2,2
reg_epochs=2
reg_batch=4
m_trials=2
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_spader"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn gen(&self, data: &str) {
        self.ok(&["gen-data", "--config", "tiny.cfg", "--data-dir", data]);
    }

    fn train(&self, data: &str, weights: &str) {
        self.ok(&["train", "--config", "tiny.cfg", "--data-dir", data, "--weights-dir", weights]);
    }

    fn score(&self, data: &str, weights: &str, out: &str, extra: &[&str]) {
        let mut args = vec!["score", "--config", "tiny.cfg", "--data-dir", data, "--weights-dir", weights, "--out", out];
        args.extend_from_slice(extra);
        self.ok(&args);
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let ws = Workspace::new();
    ws.gen("a");
    ws.gen("b");
    assert_eq!(files(&ws.path("a")), files(&ws.path("b")));
    let rows = csv_rows(&ws.path("a/manifest.csv"));
    assert_eq!(rows.len(), 6 + 4 + 4 + 10 * 2);
    for row in &rows {
        let digit: u8 = row[1].parse().unwrap();
        let expected = match digit {
            0 => "NORMAL",
            1 => "KNOWN_ANOMALY",
            _ => "UNKNOWN_ANOMALY",
        };
        assert_eq!(row[2], expected);
    }
}

#[test]
fn missing_idx_files_are_named() {
    let ws = Workspace::new();
    fs::write(ws.path("idx.cfg"), format!("{TINY}idx_images=nowhere/images\nidx_labels=nowhere/labels\n")).unwrap();
    let err = ws.fails(&["gen-data", "--config", "idx.cfg", "--data-dir", "d"]);
    assert!(err.contains("nowhere/images"), "{err}");
    assert!(!ws.path("d").exists());
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w1");
    ws.train("data", "w2");
    assert_eq!(files(&ws.path("w1")), files(&ws.path("w2")));
    let log = fs::read_to_string(ws.path("w1/train.log")).unwrap();
    assert!(log.contains("vae_train_images=6 roles: NORMAL=6"), "{log}");
    assert!(log.contains("KNOWN_ANOMALY=4") && log.contains("NORMAL=4"), "{log}");
    assert_eq!(csv_rows(&ws.path("w1/vae_loss.csv")).len(), 1);
    assert_eq!(csv_rows(&ws.path("w1/reg_loss.csv")).len(), 2);

    ws.score("data", "w1", "s1.csv", &[]);
    ws.score("data", "w1", "s2.csv", &[]);
    let s1 = fs::read(ws.path("s1.csv")).unwrap();
    assert_eq!(s1, fs::read(ws.path("s2.csv")).unwrap());
    let rows = csv_rows(&ws.path("s1.csv"));
    assert_eq!(rows.len(), 20 * 7);
    assert!(String::from_utf8(s1).unwrap().starts_with("image_id,digit,role,strategy,score\n"));
}

#[test]
fn regressor_score_needs_no_vae_file() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w");
    ws.score("data", "w", "full.csv", &[]);
    fs::remove_file(ws.path("w/vae.w")).unwrap();
    ws.score("data", "w", "reg.csv", &["--strategies", "CNN_REG"]);
    let full: Vec<_> = csv_rows(&ws.path("full.csv")).into_iter().filter(|r| r[3] == "CNN_REG").collect();
    assert_eq!(full, csv_rows(&ws.path("reg.csv")));
    let err = ws.fails(&[
        "score", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--out", "x.csv", "--strategies", "SPADER",
    ]);
    assert!(err.contains("vae.w"), "{err}");
    assert!(!ws.path("x.csv").exists());
}

#[test]
fn weights_version_mismatch_is_reported() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w");
    let path = ws.path("w/reg.w");
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let err = ws.fails(&[
        "score", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--out", "x.csv", "--strategies", "CNN_REG",
    ]);
    assert!(err.contains("version 2") && err.contains("version 1"), "{err}");
    assert!(!ws.path("x.csv").exists());
}

#[test]
fn corrupt_manifest_stops_training() {
    let ws = Workspace::new();
    ws.gen("data");
    fs::write(ws.path("data/manifest.csv"), "id,digit\n1,2\n").unwrap();
    ws.fails(&["train", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w"]);
    assert!(!ws.path("w").exists());
}

fn perfect_scores(seed_offset: f64) -> String {
    let mut s = String::from("image_id,digit,role,strategy,score\n");
    for (id, digit, role) in [(1, 0, "NORMAL"), (2, 0, "NORMAL"), (3, 1, "KNOWN_ANOMALY"), (4, 7, "UNKNOWN_ANOMALY")] {
        for strategy in ["SPADER", "VAE", "SPADE"] {
            let score = if role == "NORMAL" { 1.0 + seed_offset } else { -1.0 - id as f64 };
            s.push_str(&format!("{id},{digit},{role},{strategy},{score}\n"));
        }
    }
    s
}

#[test]
fn eval_summarises_trials_in_strategy_order() {
    let ws = Workspace::new();
    fs::write(ws.path("t1.csv"), perfect_scores(0.0)).unwrap();
    fs::write(ws.path("t2.csv"), perfect_scores(0.5)).unwrap();
    let out = ws.ok(&["eval", "t1.csv", "t2.csv", "--out", "summary"]);
    let rows = csv_rows(&ws.path("summary/summary.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["VAE", "SPADE", "SPADER"]);
    for r in &rows {
        assert_eq!((r[1].as_str(), r[2].as_str(), r[3].as_str(), r[4].as_str()), ("1", "2", "1.000000", "0.000000"));
    }
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table, fs::read_to_string(ws.path("summary/summary.txt")).unwrap());
    assert!(table.lines().nth(2).unwrap().starts_with("VAE"));
}

#[test]
fn eval_recomputes_mean_and_std() {
    let ws = Workspace::new();
    // One normal and two anomalies; the anomaly ranks give AUROC 1, 1/2 and 0.
    let trial = |a: f64, b: f64| {
        format!("image_id,digit,role,strategy,score\n1,0,NORMAL,VAE,0.5\n2,1,KNOWN_ANOMALY,VAE,{a}\n3,2,UNKNOWN_ANOMALY,VAE,{b}\n")
    };
    fs::write(ws.path("t1.csv"), trial(0.1, 0.2)).unwrap();
    fs::write(ws.path("t2.csv"), trial(0.1, 0.9)).unwrap();
    fs::write(ws.path("t3.csv"), trial(0.8, 0.9)).unwrap();
    ws.ok(&["eval", "t1.csv", "t2.csv", "t3.csv", "--out", "s"]);
    let row = &csv_rows(&ws.path("s/summary.csv"))[0];
    let std = ((0.25f64 + 0.0 + 0.25) / 3.0).sqrt();
    assert_eq!(row[3], "0.500000");
    assert_eq!(row[4], format!("{std:.6}"));
    assert_eq!(row[5], "1.000000;0.500000;0.000000");
}

#[test]
fn eval_rejects_single_class_scores() {
    let ws = Workspace::new();
    fs::write(ws.path("t.csv"), "image_id,digit,role,strategy,score\n1,0,NORMAL,VAE,0.5\n2,0,NORMAL,VAE,0.1\n").unwrap();
    ws.fails(&["eval", "t.csv", "--out", "s"]);
    assert!(!ws.path("s").exists());
}

fn pgm_payload(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let header = b"P5\n84 84\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 84 * 84);
    bytes[header.len()..].to_vec()
}

fn first_test_id(ws: &Workspace, data: &str) -> String {
    csv_rows(&ws.path(&format!("{data}/manifest.csv")))
        .into_iter()
        .find(|r| r[3] == "test" && r[2] == "NORMAL")
        .map(|r| r[0].clone())
        .unwrap()
}

#[test]
fn visualize_writes_heatmaps() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w");
    let id = first_test_id(&ws, "data");
    ws.ok(&["visualize", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--image-id", &id, "--out", "v"]);
    for name in ["input", "reconstruction", "loss", "cam", "weighted_loss"] {
        pgm_payload(&ws.path(&format!("v/{name}.pgm")));
    }
    assert_eq!(csv_rows(&ws.path("v/maps.csv")).len(), 84 * 84);

    ws.ok(&[
        "visualize", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--image-id", &id, "--out", "ident",
        "--identity-reconstruction",
    ]);
    assert!(pgm_payload(&ws.path("ident/loss.pgm")).iter().all(|&b| b == 0));
    assert!(pgm_payload(&ws.path("ident/weighted_loss.pgm")).iter().all(|&b| b == 0));
    assert_eq!(pgm_payload(&ws.path("ident/input.pgm")), pgm_payload(&ws.path("ident/reconstruction.pgm")));
}

#[test]
fn weighting_moves_loss_mass_into_the_cam_region() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w");
    let id = first_test_id(&ws, "data");
    ws.ok(&["visualize", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--image-id", &id, "--out", "v"]);
    let rows: Vec<Vec<f64>> = csv_rows(&ws.path("v/maps.csv"))
        .iter()
        .map(|r| r.iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    // Columns: row, col, input, reconstruction, loss, cam, weighted_loss.
    let mut cams: Vec<f64> = rows.iter().map(|r| r[5]).collect();
    cams.sort_by(f64::total_cmp);
    let median = cams[cams.len() / 2];
    let outside = |col: usize| {
        let total: f64 = rows.iter().map(|r| r[col]).sum();
        rows.iter().filter(|r| r[5] < median).map(|r| r[col]).sum::<f64>() / total
    };
    assert!(outside(6) < outside(4), "weighted {} vs raw {}", outside(6), outside(4));
}

#[test]
fn unknown_image_id_is_an_error() {
    let ws = Workspace::new();
    ws.gen("data");
    ws.train("data", "w");
    let err = ws.fails(&[
        "visualize", "--config", "tiny.cfg", "--data-dir", "data", "--weights-dir", "w", "--image-id", "123456789", "--out", "v",
    ]);
    assert!(err.contains("123456789"), "{err}");
    assert!(!ws.path("v").exists());
}
