use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use poar::config::{LossMode, TrainConfig};

fn poar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poar"))
        .args(args)
        .env("POAR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64, holdout: &str) -> Output {
    poar(&[
        "gen-data",
        "--out",
        p(dir),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--holdout",
        holdout,
    ])
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn smoke_config(dir: &Path, edit: impl FnOnce(&mut TrainConfig)) -> PathBuf {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.eval_every = 1;
    edit(&mut cfg);
    let path = dir.join("smoke.conf");
    fs::write(&path, cfg.to_conf_string("smoke")).unwrap();
    path
}

#[test]
fn gen_data_with_zero_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), 0, 1, "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(tmp.path().join("train.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(tmp.path().join("test.jsonl")).unwrap(), "");
    assert!(tmp.path().join("run.json").exists());
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    assert!(gen(&dir, 12, 7, "Hair:white").status.success());
    let first = files(&dir);
    fs::remove_dir_all(&dir).unwrap();
    assert!(gen(&dir, 12, 7, "Hair:white").status.success());
    assert_eq!(first.len(), 12 + 3 + 5);
    assert!(first == files(&dir));
}

#[test]
fn gen_data_rejects_unknown_holdout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), 4, 1, "unknown:attr");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown:attr"));
}

#[test]
fn train_rejects_missing_config_key() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(&tmp.path().join("data"), 4, 1, "").status.success());
    let text: String = TrainConfig::desk()
        .to_conf_string("x")
        .lines()
        .filter(|l| !l.starts_with("tau"))
        .map(|l| format!("{l}\n"))
        .collect();
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, text).unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = poar(&["train", "--data", p(&tmp.path().join("data")), "--config", p(&conf), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`tau`"));
}

#[test]
fn train_eval_and_attnmap_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 4, 3, "").status.success());
    let conf = smoke_config(tmp.path(), |_| {});
    let ckpt = tmp.path().join("m.ckpt");
    let start = Instant::now();
    let out = poar(&["train", "--data", p(&data), "--config", p(&conf), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let log = String::from_utf8(out.stdout).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["epoch"], 1);
    assert!(line["loss"].as_f64().unwrap().is_finite());
    assert!(ckpt.exists());
    assert!(tmp.path().join("m.ckpt.run.json").exists());

    // evaluation: i2t and open agree when nothing is held out
    let mut metrics = Vec::new();
    for mode in ["i2t", "open"] {
        let report = tmp.path().join(format!("{mode}.json"));
        let out = poar(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--mode", mode, "--report", p(&report)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("R@1"));
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert!(report.with_extension("csv").exists());
        v.as_object_mut().unwrap().remove("mode");
        metrics.push(v);
    }
    assert_eq!(metrics[0], metrics[1]);
    assert!(metrics[0]["i2t"]["unseen"].is_null());

    // attention maps
    let maps = tmp.path().join("maps");
    let image = data.join("images/test_00000.ppm");
    let out = poar(&["attnmap", "--ckpt", p(&ckpt), "--image", p(&image), "--out", p(&maps)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = TrainConfig::desk();
    let csvs: Vec<_> = files(&maps)
        .into_iter()
        .filter(|(f, _)| f.extension().is_some_and(|e| e == "csv"))
        .collect();
    let pgms = files(&maps).iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(csvs.len(), 8 * cfg.model.layers);
    assert_eq!(pgms, 8 * cfg.model.layers);
    for (name, bytes) in &csvs {
        let grid: Vec<Vec<f64>> = String::from_utf8(bytes.clone())
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(grid.len(), 4);
        let total: f64 = grid.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-9, "{name:?} sums to {total}");
        if name.to_str().unwrap().starts_with("attn_Hair_") {
            assert!(grid[0].iter().all(|&v| v > 0.0));
            assert!(grid[1..].iter().flatten().all(|&v| v == 0.0), "{grid:?}");
        }
    }
}

#[test]
fn otoc_preset_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 4, 5, "").status.success());
    let conf = smoke_config(tmp.path(), |c| c.loss = LossMode::Otoc);
    let ckpt = tmp.path().join("m.ckpt");
    let out = poar(&["train", "--data", p(&data), "--config", p(&conf), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = tmp.path().join("r.json");
    let out = poar(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_3_and_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 4, 6, "").status.success());
    let conf = smoke_config(tmp.path(), |c| {
        c.lr = 1e300;
        c.epochs = 3;
    });
    let ckpt = tmp.path().join("m.ckpt");
    let out = poar(&["train", "--data", p(&data), "--config", p(&conf), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(poar::checkpoint::Checkpoint::load(&ckpt).is_ok());
}

#[test]
fn eval_rejects_foreign_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 4, 8, "").status.success());
    let conf = smoke_config(tmp.path(), |_| {});
    let ckpt = tmp.path().join("m.ckpt");
    assert!(poar(&["train", "--data", p(&data), "--config", p(&conf), "--out", p(&ckpt)]).status.success());

    // same images, catalog with an extra attribute
    let other = tmp.path().join("other");
    assert!(gen(&other, 4, 8, "").status.success());
    let cat = fs::read_to_string(other.join("catalog.jsonl")).unwrap();
    fs::write(other.join("catalog.jsonl"), cat.replacen("\"long\"", "\"long\",\"curly\"", 1)).unwrap();
    let report = tmp.path().join("r.json");
    let out = poar(&["eval", "--ckpt", p(&ckpt), "--data", p(&other), "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = poar(&["eval", "--ckpt", p(&ckpt), "--data", p(&other), "--report", p(&report), "--transfer"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // truncated checkpoint
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let out = poar(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let out = poar(&["gradcheck", "--samples", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let worst = report["worst"].as_array().unwrap();
    assert!(worst.iter().any(|w| w["name"] == "text.token_embedding" && w["analytic"] != 0.0));
    assert!(worst.iter().all(|w| w["coord"].is_u64() && w["rel_error"].is_f64()));

    let out = poar(&["gradcheck", "--samples", "2", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(5));
}
