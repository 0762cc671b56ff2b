mod common;

use std::fs;

use common::*;
use tempfile::tempdir;
use ttpose_cli::commands::PredictionFile;

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let a = t.path().join("a");
    let b = t.path().join("b");
    let out = ok(&["gen", "--config", s(&cfg), "--seed", "1", "--data-dir", s(&a)]);
    assert!(out.contains("2 train + 2 test subjects"), "{out}");
    ok(&["gen", "--config", s(&cfg), "--seed", "1", "--data-dir", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    assert!(a.join("manifest.json").exists());

    let again = ttpose(&["gen", "--config", s(&cfg), "--seed", "1", "--data-dir", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    ok(&[
        "gen",
        "--config",
        s(&cfg),
        "--seed",
        "2",
        "--data-dir",
        s(&a),
        "--force",
    ]);
    assert_ne!(snapshot(&a), snapshot(&b));
}

#[test]
fn default_gen_config_has_eight_train_and_four_test_subjects() {
    let out = ok(&["--print-config", "gen"]);
    assert!(out.contains("n_train = 8") && out.contains("n_test = 4"), "{out}");
    assert!(out.contains("vis_threshold = 0.1"), "{out}");
}

#[test]
fn invalid_joint_counts_fail_before_writing() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let data = t.path().join("data");
    let o = ttpose(&["gen", "--config", s(&cfg), "--k-sup", "8", "--k-self", "6"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("k_sup"));
    assert!(!data.exists());
}

#[test]
fn config_files_reject_unknown_keys_and_accept_json() {
    let t = tempdir().unwrap();
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    assert_eq!(
        ttpose(&["--config", s(&bad), "--print-config", "train"]).status.code(),
        Some(2)
    );
    let json = t.path().join("cfg.json");
    fs::write(&json, r#"{"train": {"steps": 17}, "ttp": {"lr": 0.002}}"#).unwrap();
    let out = ok(&["--config", s(&json), "--print-config", "ttp"]);
    assert!(out.contains("steps = 17") && out.contains("lr = 0.002"), "{out}");
}

#[test]
fn seed_precedence_is_flag_then_file_then_environment() {
    let t = tempdir().unwrap();
    let with_seed = t.path().join("s.toml");
    fs::write(&with_seed, "seed = 5\n").unwrap();
    let env = [("TTPK_SEED", "9")];
    let seed_of = |args: &[&str]| {
        let o = ttpose_env(args, &env);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o).lines().next().unwrap().to_string()
    };
    assert_eq!(seed_of(&["--print-config", "gen"]), "seed = 9");
    assert_eq!(
        seed_of(&["--config", s(&with_seed), "--print-config", "gen"]),
        "seed = 5"
    );
    assert_eq!(
        seed_of(&["--config", s(&with_seed), "--seed", "3", "--print-config", "gen"]),
        "seed = 3"
    );
    let bad = ttpose_env(&["--print-config", "gen"], &[("TTPK_SEED", "x")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_reports_lambda_and_resumes_bitwise() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    ok(&["gen", "--config", s(&cfg)]);
    let out = ok(&["train", "--config", s(&cfg), "--variant", "baseline"]);
    assert!(out.contains("lambda = 0e0"), "{out}");
    let out = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--variant",
        "feat_shared",
        "--lambda",
        "0.5",
    ]);
    assert!(out.contains("lambda = 5e-1"), "{out}");

    let whole = t.path().join("whole");
    let split = t.path().join("split");
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&whole)]);
    ok(&["train", "--config", s(&cfg), "--out-dir", s(&split), "--steps", "2"]);
    let out = ok(&["train", "--config", s(&cfg), "--out-dir", s(&split), "--resume"]);
    assert!(out.contains("resuming transformer from step 2"), "{out}");
    let ck = "models/transformer/checkpoint.ttpk";
    assert_eq!(fs::read(whole.join(ck)).unwrap(), fs::read(split.join(ck)).unwrap());
    let m = "models/transformer/metrics.csv";
    assert_eq!(fs::read(whole.join(m)).unwrap(), fs::read(split.join(m)).unwrap());
}

#[test]
fn train_divergence_exits_with_numeric_code() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    ok(&["gen", "--config", s(&cfg)]);
    let o = ttpose(&["train", "--config", s(&cfg), "--variant", "baseline", "--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at step"), "{}", stderr(&o));
    assert!(t.path().join("run/models/baseline/last_good.ttpk").exists());
}

#[test]
fn missing_inputs_are_data_errors() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    assert_eq!(ttpose(&["train", "--config", s(&cfg)]).status.code(), Some(3));
    ok(&["gen", "--config", s(&cfg)]);
    assert_eq!(ttpose(&["eval", "--config", s(&cfg)]).status.code(), Some(3));
    assert_eq!(ttpose(&["ttp", "--config", s(&cfg)]).status.code(), Some(3));
}

#[test]
fn ttp_eval_and_vis_pipeline() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let run = t.path().join("run");
    ok(&["gen", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--variant", "transformer"]);
    ok(&["train", "--config", s(&cfg), "--variant", "baseline"]);

    // a zero learning rate reproduces plain inference
    ok(&["ttp", "--config", s(&cfg), "--scenario", "online", "--lr", "0"]);
    let pred = run.join("predictions");
    let none = PredictionFile::load(&pred.join("transformer_none.json")).unwrap();
    let online = PredictionFile::load(&pred.join("transformer_online.json")).unwrap();
    assert_eq!(none.subjects, online.subjects);
    let report = ok(&["eval", "--config", s(&cfg)]);
    let rows: Vec<&str> = report.lines().collect();
    let mpck = |scenario: &str| {
        rows.iter()
            .find(|l| l.starts_with(&format!("transformer,{scenario},")))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .to_string()
    };
    assert_eq!(mpck("none"), mpck("online"));

    ok(&["ttp", "--config", s(&cfg), "--variant", "baseline"]);
    ok(&["ttp", "--config", s(&cfg), "--scenario", "offline", "--lr", "1e-3"]);
    let trace = fs::read_to_string(run.join("traces/transformer_offline/ttp_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 6);
    assert!(trace.starts_with("subject,frame,loss_self,pck_before_update,pck\n"));

    let out = ok(&[
        "ttp",
        "--config",
        s(&cfg),
        "--lr",
        "1e-3",
        "--ablate-iters",
        "--video-length",
        "1,3,6",
    ]);
    let table = fs::read_to_string(run.join("report/ablate_iters_transformer_online.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.starts_with("iters,mpck\n1,") && out.contains(&table));
    let vl = fs::read_to_string(run.join("report/video_length_transformer.csv")).unwrap();
    assert_eq!(
        vl.lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect::<Vec<_>>(),
        ["1", "3", "6"]
    );
    let too_long = ttpose(&["ttp", "--config", s(&cfg), "--video-length", "7"]);
    assert_eq!(too_long.status.code(), Some(2));

    let report = ok(&["eval", "--config", s(&cfg), "--smooth"]);
    let head = report.lines().next().unwrap();
    assert_eq!(
        head,
        "variant,scenario,mpck,delta_vs_baseline,mpck_smoothed,delta_smoothing"
    );
    for key in [
        "baseline,none,",
        "transformer,none,",
        "transformer,online,",
        "transformer,offline,",
    ] {
        assert!(report.contains(key), "{key} missing from\n{report}");
    }
    assert_eq!(fs::read_to_string(run.join("report/report.csv")).unwrap(), report);
    assert!(run.join("report/curve_transformer_online.csv").exists());
    assert!(run.join("report/curve_transformer_offline.csv").exists());

    let out = ok(&["vis", "--config", s(&cfg), "--frame", "2"]);
    assert!(out.contains("above 0.1"), "{out}");
    let png = fs::read_dir(run.join("vis"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.path().extension().is_some_and(|x| x == "png"));
    let png = png.expect("a png was written").path();
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
    let csv = fs::read_to_string(png.with_extension("affinity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    ok(&[
        "vis",
        "--config",
        s(&cfg),
        "--variant",
        "baseline",
        "--threshold",
        "0.5",
    ]);
}

#[test]
fn ttp_rejects_a_checkpoint_with_other_joints() {
    let t = tempdir().unwrap();
    let cfg = tiny_config(t.path());
    ok(&["gen", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg)]);
    ok(&["gen", "--config", s(&cfg), "--k-sup", "5", "--force"]);
    let o = ttpose(&["ttp", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("predicts 4 joints but the dataset labels 5"),
        "{}",
        stderr(&o)
    );
}
