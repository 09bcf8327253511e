mod common;

use std::path::Path;

use common::{gaitcraft, tree, Run, TINY_RUN_CONFIG};
use gaitcraft::data::load_dataset;
use gaitcraft::eval::read_embedding_table;
use gaitcraft::trainer::checkpoint::read_header;

fn ok(r: Run) -> Run {
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    r
}

fn synth(out: &Path, seed: &str) -> Run {
    gaitcraft(
        &[
            "synth-data", "--out", out.to_str().unwrap(), "--ids", "2", "--seqs", "2", "--seed", seed,
            "--frame-size", "8", "--frames", "6", "--clip-length", "4",
        ],
        &[],
    )
}

fn single_error_line(r: &Run, kind: &str, code: i32) {
    assert_eq!(r.code, code, "stderr: {}", r.stderr);
    let lines: Vec<&str> = r.stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {}", r.stderr);
    assert!(lines[0].starts_with(&format!("error[{kind}]: ")), "{}", lines[0]);
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(synth(&a, "7"));
    ok(synth(&b, "7"));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 1);
    assert_eq!(ta, tb);
    ok(synth(&dir.path().join("c"), "8"));
    assert_ne!(tree(&dir.path().join("c")), ta);
}

#[test]
fn zero_step_training_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(synth(&data, "1"));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY_RUN_CONFIG).unwrap();
    let out = dir.path().join("run");
    let r = ok(gaitcraft(
        &[
            "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out",
            out.to_str().unwrap(), "--steps", "0",
        ],
        &[],
    ));
    let ckpt = Path::new(r.stdout.trim());
    assert!(ckpt.is_file());
    assert_eq!(read_header(ckpt).unwrap().step, 0);
    assert!(out.join("loss_curve.png").is_file());
}

#[test]
fn config_layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(synth(&data, "1"));
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!("dataset = {:?}\n{TINY_RUN_CONFIG}", data.to_str().unwrap()).replace("batch_size = 2", "batch_size = 3"),
    )
    .unwrap();
    let out = dir.path().join("run");
    // file from the environment, one value overridden by --set and one by a named flag
    let r = ok(gaitcraft(
        &["train", "--out", out.to_str().unwrap(), "--set", "train.learning_rate=0.5", "--steps", "2", "--seed", "9"],
        &[("GAITCRAFT_CONFIG", cfg.to_str().unwrap())],
    ));
    let train = read_header(Path::new(r.stdout.trim())).unwrap().train.unwrap();
    assert_eq!(train.batch_size, 3);
    assert_eq!(train.learning_rate, 0.5);
    assert_eq!(train.total_steps, 2);
    assert_eq!(train.seed, 9);
    assert_eq!(train.log_every, 0);
    // a named flag beats --set for the same key
    let r = ok(gaitcraft(
        &["train", "--out", dir.path().join("run2").to_str().unwrap(), "--set", "train.total_steps=5", "--steps", "1"],
        &[("GAITCRAFT_CONFIG", cfg.to_str().unwrap())],
    ));
    assert_eq!(read_header(Path::new(r.stdout.trim())).unwrap().step, 1);
}

#[test]
fn errors_are_single_lines_with_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    single_error_line(&gaitcraft(&["generate", "--checkpoint", "x", "--out", "y"], &[]), "usage", 2);
    single_error_line(
        &gaitcraft(&["train", "--data", "nowhere", "--out", "o", "--set", "train.batchsize=2"], &[]),
        "config",
        2,
    );
    let missing = dir.path().join("missing");
    single_error_line(
        &gaitcraft(&["train", "--data", missing.to_str().unwrap(), "--out", "o"], &[]),
        "load",
        3,
    );
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    single_error_line(
        &gaitcraft(&["generate", "--checkpoint", junk.to_str().unwrap(), "--out", "o", "--seed", "1", "--id", "0"], &[]),
        "checkpoint",
        13,
    );
    let help = ok(gaitcraft(&["--help"], &[]));
    assert!(help.stdout.contains("Exit codes:"));
    assert!(help.stdout.contains("13  checkpoint"));
}

#[test]
fn short_pipeline_outputs_validate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(synth(&dir.path().join("data"), "3"));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY_RUN_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    ok(gaitcraft(&["train", "--config", c, "--data", &p("data"), "--out", &p("run"), "--steps", "3"], &[]));
    let resumed = ok(gaitcraft(
        &["train", "--config", c, "--data", &p("data"), "--out", &p("run"), "--steps", "5", "--resume", &p("run")],
        &[],
    ));
    assert_eq!(read_header(Path::new(resumed.stdout.trim())).unwrap().step, 5);

    ok(gaitcraft(
        &["generate", "--checkpoint", &p("run"), "--out", &p("gen"), "--seed", "4", "--id", "1", "--variations", "2", "--binarize", "0.5"],
        &[],
    ));
    let gen = load_dataset(p("gen")).unwrap();
    assert_eq!(gen.entries.len(), 2);
    assert!(gen.entries.iter().all(|e| e.identity_index == 1 && e.frame_count == 4));

    ok(gaitcraft(
        &["generate", "--checkpoint", &p("run"), "--out", &p("mix"), "--seed", "4", "--mix-ids", "0,1", "--export-trajectory"],
        &[],
    ));
    let mix = load_dataset(p("mix")).unwrap();
    assert_eq!(mix.n_ids, 3);
    let seq = &mix.entries[0].sequence_id;
    let traj = dir.path().join("mix/trajectory").join(seq);
    for f in ["strip.png", "histogram.png", "histogram.json", "level_020.png", "level_000.png"] {
        assert!(traj.join(f).is_file(), "{f}");
    }
    let hist: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(traj.join("histogram.json")).unwrap()).unwrap();
    let records = hist.as_array().unwrap();
    assert_eq!(records[0]["level"], 20);
    assert_eq!(records.last().unwrap()["final_sample"], true);

    let report = ok(gaitcraft(&["eval-gbs", "--real", &p("data"), "--synthetic", &p("gen"), "--pairing", "shifted"], &[]));
    let report: serde_json::Value = serde_json::from_str(&report.stdout).unwrap();
    let score = report["overall_score"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&score));
    assert_eq!(report["embedder_name"], "gei");

    ok(gaitcraft(&["export-embeddings", "--data", &p("data"), "--synthetic", &p("gen"), "--out", &p("emb.csv")], &[]));
    let rows = read_embedding_table(&dir.path().join("emb.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.is_synthetic).count(), 2);
    assert!(rows.iter().all(|r| r.vector.values.len() == 64));

    ok(gaitcraft(
        &["augment", "--checkpoint", &p("run"), "--data", &p("data"), "--out", &p("aug"), "--seed", "2", "--variations", "1"],
        &[],
    ));
    let aug = load_dataset(p("aug")).unwrap();
    assert_eq!(aug.n_ids, 3);
    assert_eq!(aug.entries.len(), 4 + 2 + 1);
    assert!(dir.path().join("aug/provenance.json").is_file());

    ok(gaitcraft(&["split", "--data", &p("data"), "--out", &p("split"), "--seed", "1", "--fraction", "0.5"], &[]));
    let (train, test) = (load_dataset(p("split/train")).unwrap(), load_dataset(p("split/test")).unwrap());
    assert_eq!(train.entries.len() + test.entries.len(), 4);
    assert_eq!(test.present_ids().len(), 2);
}
