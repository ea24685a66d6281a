//! End-to-end tests against the built binary: flag contracts, config-file
//! precedence, determinism per seed, and artifact emission.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lavaman_core::training::{load_checkpoint, CheckpointKind};

fn lavaman() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lavaman"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn lavaman");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Asserts failure with exactly one machine-readable stderr line.
fn run_err(cmd: &mut Command) -> String {
    let out: Output = cmd.output().expect("spawn lavaman");
    assert!(!out.status.success(), "expected failure, got success");
    let stderr = String::from_utf8(out.stderr).expect("utf8 stderr");
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr is not one line: {stderr:?}");
    let parsed: serde_json::Value = serde_json::from_str(lines[0]).expect("stderr line is JSON");
    assert!(parsed["error"]["code"].is_string(), "missing error code: {stderr}");
    lines[0].to_string()
}

fn hash_dir(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                entries.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    pretext: PathBuf,
    affordance: PathBuf,
}

/// One tiny corpus + pretext + affordance checkpoint, built once through
/// the binary and shared by the read-only tests.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let pretext = dir.path().join("pre.ckpt");
        let affordance = dir.path().join("aff.ckpt");
        run_ok(lavaman().args([
            "gen-data",
            "--out",
            corpus.to_str().unwrap(),
            "--episodes",
            "3",
            "--seen",
            "2",
            "--intra",
            "1",
            "--inter",
            "1",
            "--seed",
            "11",
        ]));
        run_ok(lavaman().args([
            "pretrain",
            "--data",
            corpus.to_str().unwrap(),
            "--out",
            pretext.to_str().unwrap(),
            "--steps",
            "2",
            "--batch-size",
            "1",
            "--seed",
            "11",
        ]));
        run_ok(lavaman().args([
            "finetune",
            "--data",
            corpus.to_str().unwrap(),
            "--checkpoint",
            pretext.to_str().unwrap(),
            "--out",
            affordance.to_str().unwrap(),
            "--steps",
            "2",
            "--batch-size",
            "1",
            "--seed",
            "11",
        ]));
        Fixture { _dir: dir, corpus, pretext, affordance }
    })
}

#[test]
fn help_enumerates_every_flag_with_defaults() {
    let top = run_ok(lavaman().arg("--help"));
    for sub in ["gen-data", "pretrain", "finetune", "eval", "ablate-mask", "predict"] {
        assert!(top.contains(sub), "top help missing {sub}");
    }

    let expected: &[(&str, &[&str], usize)] = &[
        (
            "gen-data",
            &[
                "--out", "--episodes", "--seen", "--intra", "--inter", "--task", "--image-size",
                "--split-config", "--workers", "--force", "--seed", "--config",
            ],
            9,
        ),
        (
            "pretrain",
            &[
                "--data", "--out", "--steps", "--batch-size", "--lr", "--weight-decay",
                "--warmup-frac", "--clip-norm", "--mask-ratio", "--loss-scope", "--preset",
                "--log", "--seed", "--config",
            ],
            12,
        ),
        (
            "finetune",
            &[
                "--data", "--checkpoint", "--scratch", "--head", "--out", "--steps",
                "--batch-size", "--lr", "--weight-decay", "--warmup-frac", "--clip-norm",
                "--freeze-backbone", "--preset", "--log", "--seed", "--config",
            ],
            11,
        ),
        (
            "eval",
            &["--data", "--checkpoint", "--out", "--splits", "--rot-tol", "--workers", "--seed", "--config"],
            5,
        ),
        (
            "ablate-mask",
            &[
                "--data", "--out-dir", "--ratios", "--pretext-steps", "--finetune-steps",
                "--batch-size", "--eval-split", "--limit-train", "--limit-eval", "--preset",
                "--seed", "--config",
            ],
            9,
        ),
        (
            "predict",
            &["--image", "--instruction", "--checkpoint", "--out-dir", "--seed", "--config"],
            2,
        ),
    ];
    for (sub, flags, min_defaults) in expected {
        let help = run_ok(lavaman().args([sub, "--help"]));
        for flag in *flags {
            assert!(help.contains(flag), "{sub} help missing {flag}\n{help}");
        }
        let defaults = help.matches("[default:").count();
        assert!(
            defaults >= *min_defaults,
            "{sub} help documents {defaults} defaults, expected at least {min_defaults}\n{help}"
        );
    }
}

#[test]
fn gen_data_is_deterministic_and_guards_nonempty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let args = |out: &Path, seed: &str| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--episodes".into(),
            "2".into(),
            "--seed".into(),
            seed.into(),
        ]
    };
    let stdout = run_ok(lavaman().args(args(&a, "5")));
    assert!(stdout.contains("wrote 2 episodes"), "{stdout}");
    run_ok(lavaman().args(args(&b, "5")));
    assert_eq!(hash_dir(&a), hash_dir(&b), "same seed must give identical corpora");
    run_ok(lavaman().args(args(&c, "6")));
    assert_ne!(hash_dir(&a), hash_dir(&c), "different seed must change the corpus");

    let err = run_err(lavaman().args(args(&a, "5")));
    assert!(err.contains("not empty"), "{err}");
    let mut forced = args(&a, "5");
    forced.push("--force".into());
    run_ok(lavaman().args(forced));

    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["episodes"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_task_flag_pins_every_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grp");
    run_ok(lavaman().args([
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--episodes",
        "3",
        "--task",
        "packing_grp",
        "--seed",
        "2",
    ]));
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    let episodes = index["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), 3);
    for ep in episodes {
        assert_eq!(ep["task"], "packing_grp");
    }
}

#[test]
fn unknown_flags_and_config_keys_are_rejected() {
    let err = run_err(lavaman().args(["gen-data", "--bogus", "x"]));
    assert!(err.contains("--bogus"), "{err}");

    let err = run_err(lavaman().args(["pretrain", "--steps", "not-a-number"]));
    assert!(err.contains("invalid"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"bogus_key": 1}"#).unwrap();
    let err = run_err(lavaman().args(["pretrain", "--config", cfg.to_str().unwrap()]));
    assert!(err.contains("bogus_key"), "{err}");

    let err = run_err(&mut lavaman());
    assert!(err.contains("subcommand"), "{err}");
}

#[test]
fn flags_override_config_file_values() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("from_cfg.ckpt");
    let from_flag = dir.path().join("from_flag.ckpt");
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "data": fx.corpus,
            "out": from_cfg,
            "steps": 3,
            "batch_size": 1,
            "seed": 4,
        })
        .to_string(),
    )
    .unwrap();

    run_ok(lavaman().args(["pretrain", "--config", cfg.to_str().unwrap()]));
    let (header, _, bag) = load_checkpoint::<f32>(&from_cfg).unwrap();
    bag.finish().unwrap();
    assert_eq!(header.step, 3, "config-file steps should apply");
    assert_eq!(header.kind, CheckpointKind::Pretext);

    run_ok(lavaman().args([
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "2",
        "--out",
        from_flag.to_str().unwrap(),
    ]));
    let (header, _, bag) = load_checkpoint::<f32>(&from_flag).unwrap();
    bag.finish().unwrap();
    assert_eq!(header.step, 2, "flag must beat the config file");
}

#[test]
fn pretrain_is_reproducible_per_seed() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let c = dir.path().join("c.ckpt");
    let run = |out: &Path, seed: &str| {
        run_ok(lavaman().args([
            "pretrain",
            "--data",
            fx.corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "2",
            "--batch-size",
            "1",
            "--seed",
            seed,
        ]));
    };
    run(&a, "7");
    run(&b, "7");
    run(&c, "8");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("vocab.txt")).unwrap(),
        std::fs::read(b.with_extension("vocab.txt")).unwrap()
    );
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn finetune_requires_a_weight_source_and_rejects_both() {
    let fx = fixture();
    let err = run_err(lavaman().args(["finetune", "--data", fx.corpus.to_str().unwrap()]));
    assert!(err.contains("--checkpoint") && err.contains("--scratch"), "{err}");

    let err = run_err(lavaman().args([
        "finetune",
        "--data",
        fx.corpus.to_str().unwrap(),
        "--checkpoint",
        fx.pretext.to_str().unwrap(),
        "--scratch",
    ]));
    assert!(err.contains("mutually exclusive"), "{err}");
}

#[test]
fn scratch_finetune_trains_the_no_pretraining_control() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scratch.ckpt");
    let stdout = run_ok(lavaman().args([
        "finetune",
        "--data",
        fx.corpus.to_str().unwrap(),
        "--scratch",
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "2",
        "--batch-size",
        "1",
        "--seed",
        "3",
    ]));
    assert!(stdout.contains("checkpoint"), "{stdout}");
    let (header, _, bag) = load_checkpoint::<f32>(&out).unwrap();
    assert_eq!(header.kind, CheckpointKind::Affordance);
    assert!(header.tensors.iter().any(|t| t.name.starts_with("affordance.")));
    drop(bag);
}

#[test]
fn eval_writes_a_report_and_rejects_unknown_splits() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let stdout = run_ok(lavaman().args([
        "eval",
        "--data",
        fx.corpus.to_str().unwrap(),
        "--checkpoint",
        fx.affordance.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--splits",
        "seen,intra",
        "--workers",
        "2",
    ]));
    assert!(stdout.contains("seen:"), "{stdout}");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["overall"]["n"], 3);
    assert_eq!(parsed["splits"].as_array().unwrap().len(), 2);
    assert!(parsed["checkpoint_sha256"].is_string());

    let err = run_err(lavaman().args([
        "eval",
        "--data",
        fx.corpus.to_str().unwrap(),
        "--checkpoint",
        fx.affordance.to_str().unwrap(),
        "--splits",
        "bogus",
    ]));
    assert!(err.contains("unknown split"), "{err}");
}

#[test]
fn predict_emits_artifacts_and_a_snapped_action() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("pred");
    let episode = std::fs::read_dir(&fx.corpus)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("corpus has episode dirs");
    run_ok(lavaman().args([
        "predict",
        "--image",
        episode.join("start.png").to_str().unwrap(),
        "--instruction",
        "move the red disc into the gray zone",
        "--checkpoint",
        fx.affordance.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));
    for name in ["goal_pred.png", "affordance_pick.png", "affordance_place.png", "action.json"] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let action: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("action.json")).unwrap())
            .unwrap();
    for pose in ["pick", "place"] {
        let theta = action[pose]["theta_deg"].as_u64().unwrap();
        assert_eq!(theta % 10, 0, "{pose} theta {theta} not a bin multiple");
        assert!(theta < 360);
    }

    let err = run_err(lavaman().args([
        "predict",
        "--image",
        episode.join("start.png").to_str().unwrap(),
        "--instruction",
        "x",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
    ]));
    assert!(err.contains("io"), "{err}");
}

#[test]
fn lavaman_cache_relocates_intermediates() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = dir.path().join("cached.ckpt");
    run_ok(
        lavaman()
            .env("LAVAMAN_CACHE", &cache)
            .args([
                "pretrain",
                "--data",
                fx.corpus.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--steps",
                "2",
                "--batch-size",
                "1",
            ]),
    );
    assert!(cache.join("cached.log.jsonl").is_file(), "default log not under LAVAMAN_CACHE");
    let log = std::fs::read_to_string(cache.join("cached.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "grad_norm", "elapsed_s"] {
        assert!(first.get(key).is_some(), "log line missing {key}: {first}");
    }

    let ablate_out = dir.path().join("ablate");
    run_ok(
        lavaman()
            .env("LAVAMAN_CACHE", &cache)
            .args([
                "ablate-mask",
                "--data",
                fx.corpus.to_str().unwrap(),
                "--out-dir",
                ablate_out.to_str().unwrap(),
                "--ratios",
                "0.5,1.0",
                "--pretext-steps",
                "1",
                "--finetune-steps",
                "1",
                "--batch-size",
                "1",
                "--limit-train",
                "2",
                "--limit-eval",
                "1",
            ]),
    );
    assert!(ablate_out.join("ablation.json").is_file());
    assert!(ablate_out.join("ablation.png").is_file());
    assert!(cache.join("ablate").join("pretext_r050.ckpt").is_file());
    assert!(cache.join("ablate").join("affordance_r100.ckpt").is_file());
}
