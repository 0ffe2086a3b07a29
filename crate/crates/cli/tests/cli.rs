mod common;

use std::fs;

use common::*;
use serde_json::Value;

#[test]
fn build_bank_writes_bank_and_sidecar() {
    let d = tempfile::tempdir().unwrap();
    let bank = build_bank(d.path());
    assert!(bank.exists());
    let meta: Value = serde_json::from_slice(&fs::read(d.path().join("b.rafb.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["tool"], "raf");
    assert_eq!(meta["config"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(meta["config"]["settings"]["per_identity"], 20);
    assert_eq!(meta["stats"]["entry_count"], 8 * 20);
}

#[test]
fn every_subcommand_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let bank = build_bank(dir);
    let (bank, csv) = (p(&bank).to_string(), p(&bank_csv(dir)).to_string());
    let train = p(&subject_csv(dir, "train.csv", 0.0)).to_string();
    let test = p(&subject_csv(dir, "test.csv", 0.4)).to_string();
    let cfg = dir.join("toy.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let cfg = p(&cfg).to_string();
    let gen_cfg = dir.join("gen.json");
    fs::write(&gen_cfg, GEN_CONFIG).unwrap();
    let gen_cfg = p(&gen_cfg).to_string();

    assert_deterministic(&[
        "build-bank",
        "--input",
        &csv,
        "--dim",
        "4",
        "--per-identity",
        "10",
        "--seed",
        "3",
        "--out",
        "{out}.rafb",
    ]);
    assert_deterministic(&[
        "query",
        "--bank",
        &bank,
        "--query-csv",
        &train,
        "--k",
        "3",
        "--exclude-identity",
        "id1",
        "--out",
        "{out}.csv",
    ]);
    assert_deterministic(&[
        "query",
        "--bank",
        &bank,
        "--query-csv",
        &train,
        "--k",
        "5",
        "--mode",
        "top5",
        "--seed",
        "4",
        "--out",
        "{out}.csv",
    ]);
    assert_deterministic(&[
        "coverage",
        "--train",
        &train,
        "--test",
        &test,
        "--bank",
        &bank,
        "--pca-dims",
        "2",
        "--seed",
        "2",
        "--out",
        "{out}.json",
    ]);
    assert_deterministic(&[
        "plan",
        "--frames",
        &train,
        "--bank",
        &bank,
        "--subject",
        "subject",
        "--epoch",
        "3",
        "--seed",
        "5",
        "--out",
        "{out}.jsonl",
    ]);
    assert_deterministic(&["plan", "--frames", &train, "--augment", "noise", "--seed", "5", "--out", "{out}.jsonl"]);
    assert_deterministic(&["pca-export", "--bank", &bank, "--queries", &train, "--k", "4", "--out", "{out}.csv"]);
    assert_deterministic(&["--config", &gen_cfg, "toy-gen", "--seed", "2", "--out", "{out}"]);
    assert_deterministic(&[
        "--config",
        &cfg,
        "toy-train",
        "--augment",
        "raf",
        "--mode",
        "top5",
        "--seed",
        "1",
        "--out",
        "{out}",
    ]);
}

#[test]
fn toy_eval_reproduces_training_evaluation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("toy.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let run = d.path().join("run");
    ok(&raf(&["--config", p(&cfg), "toy-train", "--augment", "noise", "--seed", "7", "--out", p(&run)]));
    let eval_out = d.path().join("eval.json");
    ok(&raf(&["toy-eval", "--model", p(&run.join("model.bin")), "--split", "heldout", "--out", p(&eval_out)]));
    let a: Value = serde_json::from_slice(&fs::read(run.join("eval.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&fs::read(&eval_out).unwrap()).unwrap();
    assert_eq!(a["mean_point_rmse"], b["mean_point_rmse"]);
    assert_eq!(a["mean_image_loss"], b["mean_image_loss"]);
    assert_eq!(a["per_frame"], b["per_frame"]);
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("# raf "));
    let body: Vec<&str> = curve.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "epoch,train_loss");
    assert_eq!(body.len(), 1 + 4);
}

#[test]
fn toy_train_reads_world_from_toy_gen() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("toy.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let gen_cfg = d.path().join("gen.json");
    fs::write(&gen_cfg, GEN_CONFIG).unwrap();
    let world = d.path().join("world");
    ok(&raf(&["--config", p(&gen_cfg), "toy-gen", "--seed", "6", "--out", p(&world)]));
    for f in ["world.json", "train.csv", "heldout.csv", "bank.rafb"] {
        assert!(world.join(f).exists(), "{f}");
    }
    let run = d.path().join("run");
    ok(&raf(&["--config", p(&cfg), "toy-train", "--world", p(&world.join("world.json")), "--out", p(&run)]));
    let eval: Value = serde_json::from_slice(&fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["config"]["settings"]["experiment"]["seed"], 6);
    assert_eq!(eval["per_frame"].as_array().unwrap().len(), 6);
}

#[test]
fn artifacts_embed_version_and_resolved_settings() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let bank = build_bank(dir);
    let train = subject_csv(dir, "train.csv", 0.0);
    let test = subject_csv(dir, "test.csv", 0.4);
    let report = dir.join("report.json");
    ok(&raf(&[
        "coverage",
        "--train",
        p(&train),
        "--test",
        p(&test),
        "--bank",
        p(&bank),
        "--pca-dims",
        "2",
        "--out",
        p(&report),
    ]));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["config"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["config"]["command"], "coverage");
    assert_eq!(v["config"]["settings"]["pca_dims"], 2);
    assert_eq!(v["config"]["settings"]["fraction"], 0.5);
    for side in ["vanilla", "raf"] {
        for m in ["mmd", "kl", "b2t"] {
            assert!(v[side][m].is_number(), "{side}.{m}");
        }
    }
    let q = dir.join("q.csv");
    ok(&raf(&["query", "--bank", p(&bank), "--query-csv", p(&train), "--k", "2", "--out", p(&q)]));
    let text = fs::read_to_string(&q).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# raf {}", env!("CARGO_PKG_VERSION")));
    let prov: Value = serde_json::from_str(lines.next().unwrap().trim_start_matches("# ")).unwrap();
    assert_eq!(prov["settings"]["k"], 2);
    assert_eq!(lines.next().unwrap(), "query_row,rank,identity_id,frame_id,distance");
    assert_eq!(lines.count(), 20 * 2);
}

#[test]
fn usage_errors_exit_2_without_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let csv = bank_csv(d.path());
    let out = d.path().join("x.rafb");
    let r = raf(&["build-bank", "--input", p(&csv), "--dim", "4", "--bogus", "1", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
    assert_eq!(code(&raf(&["frobnicate"])), 2);
    assert_eq!(code(&raf(&[])), 2);
    // missing required setting
    let r = raf(&["build-bank", "--input", p(&csv), "--dim", "4"]);
    assert_eq!(code(&r), 2);
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.starts_with("raf: error[usage]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    // unknown key in a config file
    let cfg = d.path().join("c.json");
    fs::write(&cfg, r#"{"dim": 4, "colour": "red"}"#).unwrap();
    assert_eq!(code(&raf(&["--config", p(&cfg), "build-bank", "--input", p(&csv), "--out", p(&out)])), 2);
    assert!(!out.exists());
    assert_eq!(code(&raf(&["--help"])), 0);
}

#[test]
fn failures_map_to_categories_and_leave_no_partial_output() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let bank = build_bank(dir);
    let out = dir.join("o.csv");

    let missing = raf(&[
        "query",
        "--bank",
        p(&dir.join("nope.rafb")),
        "--query-csv",
        p(&bank_csv(dir)),
        "--k",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&missing), 6);
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("raf: error[io]: "));

    let bad = dir.join("bad.csv");
    fs::write(&bad, "identity_id,frame_id,f0,f1,f2,f3\na,0,1,2,x,4\n").unwrap();
    let r = raf(&["build-bank", "--input", p(&bad), "--dim", "4", "--out", p(&dir.join("bad.rafb"))]);
    assert_eq!(code(&r), 3);
    assert!(!dir.join("bad.rafb").exists());

    let trunc = dir.join("t.rafb");
    let bytes = fs::read(&bank).unwrap();
    fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(
        code(&raf(&[
            "query",
            "--bank",
            p(&trunc),
            "--query-csv",
            p(&subject_csv(dir, "s.csv", 0.0)),
            "--k",
            "1",
            "--out",
            p(&out)
        ])),
        3
    );

    // more neighbors than admissible bank entries
    let r = raf(&[
        "query",
        "--bank",
        p(&bank),
        "--query-csv",
        p(&subject_csv(dir, "s.csv", 0.0)),
        "--k",
        "1000",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&r), 4);
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("raf: error[retrieval]: "));
    assert!(!out.exists());

    // a directory run fails as a whole: none of its files appear
    let run = dir.join("run");
    let cfg = dir.join("toy.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let r = raf(&["--config", p(&cfg), "toy-train", "--lr", "-1", "--out", p(&run)]);
    assert_ne!(code(&r), 0);
    assert!(!run.exists());

    let leftovers: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn inputs_are_not_modified() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let bank = build_bank(dir);
    let train = subject_csv(dir, "train.csv", 0.0);
    let before = (fs::read(&bank).unwrap(), fs::read(&train).unwrap());
    ok(&raf(&[
        "plan",
        "--frames",
        p(&train),
        "--bank",
        p(&bank),
        "--subject",
        "subject",
        "--out",
        p(&dir.join("plan.jsonl")),
    ]));
    ok(&raf(&["pca-export", "--bank", p(&bank), "--queries", p(&train), "--out", p(&dir.join("scatter.csv"))]));
    assert_eq!(before, (fs::read(&bank).unwrap(), fs::read(&train).unwrap()));
}

#[test]
fn seed_precedence_is_flag_then_config_then_environment() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let csv = bank_csv(dir);
    let cfg = dir.join("c.json");
    fs::write(&cfg, r#"{"seed": 20}"#).unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| -> Value {
        let out = dir.join("s.rafb");
        let mut argv = vec!["build-bank", "--input", p(&csv), "--dim", "4", "--per-identity", "5", "--out", p(&out)];
        argv.extend_from_slice(args);
        ok(&raf_env(&argv, env));
        let meta: Value = serde_json::from_slice(&fs::read(dir.join("s.rafb.meta.json")).unwrap()).unwrap();
        meta["config"]["settings"]["seed"].clone()
    };
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("10")), 10);
    assert_eq!(seed_of(&["--config", p(&cfg)], Some("10")), 20);
    assert_eq!(seed_of(&["--config", p(&cfg), "--seed", "30"], Some("10")), 30);
    let bad = raf_env(&["build-bank", "--input", p(&csv), "--dim", "4", "--out", p(&dir.join("z.rafb"))], Some("abc"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn plan_lines_follow_the_schema() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let bank = build_bank(dir);
    let train = subject_csv(dir, "train.csv", 0.0);
    let out = dir.join("plan.jsonl");
    ok(&raf(&[
        "plan",
        "--frames",
        p(&train),
        "--bank",
        p(&bank),
        "--subject",
        "subject",
        "--p",
        "1",
        "--out",
        p(&out),
    ]));
    let lines: Vec<Value> =
        fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 20);
    for l in &lines {
        assert_eq!(l["source"], "retrieved");
        assert_ne!(l["neighbor"]["identity_id"], "subject");
        assert_eq!(l["conditioning"].as_array().unwrap().len(), 4);
    }
    let meta: Value = serde_json::from_slice(&fs::read(dir.join("plan.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["settings"]["p"], 1.0);
}

#[test]
fn suite_csv_has_run_rows_and_mean_rows() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("suite.json");
    let toy: Value = serde_json::from_str(TOY_CONFIG).unwrap();
    let suite = serde_json::json!({"suite": {"experiment": toy["experiment"], "params": toy["params"], "coverage": {"pca_dims": 2}}});
    fs::write(&cfg, suite.to_string()).unwrap();
    let out = d.path().join("suite.csv");
    ok(&raf(&["--config", p(&cfg), "suite", "--seeds", "2", "--epochs", "3", "--out", p(&out)]));
    let text = fs::read_to_string(&out).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "condition");
    assert_eq!(&header[1], "seed");
    assert!(header.iter().any(|h| h == "heldout_point_rmse"));
    assert!(header.iter().any(|h| h.contains("b2t")));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let conditions = ["vanilla", "noise", "raf_top1", "raf_top5", "raf_half_bank"];
    assert_eq!(rows.len(), conditions.len() * 3);
    for c in conditions {
        let seeds: Vec<&str> = rows.iter().filter(|r| &r[0] == c).map(|r| r.get(1).unwrap()).collect();
        assert_eq!(seeds, ["0", "1", "mean"], "{c}");
    }
}
