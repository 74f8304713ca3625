//! Black-box tests of the `zoforge` binary: exit codes, file outputs,
//! determinism, and the replay contract, all via real process invocations.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zoforge(args: &[&str], envs: &[(&str, &str)], dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zoforge"));
    cmd.args(args).current_dir(dir).env_remove("ZOFORGE_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const GOLDEN: &str = r#"
[run]
seed = 11
steps = 2000
eval_every = 500

[optimizer]
algo = "sgd"
lr = 0.25

[objective]
kind = "quadratic"
dim = 16
rank = 2
"#;

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoforge(&["train", "--config", "absent.toml"], &[], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.toml"), "{}", stderr(&out));
}

#[test]
fn bad_usage_exits_one_but_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoforge(&["train"], &[], dir.path()); // missing required --config
    assert_eq!(code(&out), 1);
    let out = zoforge(&["--help"], &[], dir.path());
    assert_eq!(code(&out), 0);
    let out = zoforge(&["train", "--help"], &[], dir.path());
    assert_eq!(code(&out), 0);
    // The train help is the config-format reference: every section and a
    // sampling of keys with defaults must appear.
    let text = stdout(&out);
    for needle in [
        "[run]", "[optimizer]", "[estimator]", "[objective]", "[trajectory]",
        "epsilon", "1e-3", "weight_decay", "probe_schedule", "precision", "bf16",
        "batch_size", "eval_every", "couple_lr_to_probes", "scale_refresh_every",
    ] {
        assert!(text.contains(needle), "train --help lacks {needle}");
    }
}

#[test]
fn golden_config_converges_and_repeats_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    let run = |traj: &str, csv: &str| {
        let out = zoforge(
            &[
                "train",
                "--config",
                "golden.toml",
                "--out-trajectory",
                traj,
                "--metrics",
                csv,
            ],
            &[],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("final_loss="));
    };
    run("a.traj", "a.csv");
    run("b.traj", "b.csv");

    let metrics = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let loss: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(loss < 1e-6, "golden run final loss {loss}");

    assert_eq!(
        fs::read(dir.path().join("a.traj")).unwrap(),
        fs::read(dir.path().join("b.traj")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("a.csv")).unwrap(),
        fs::read(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn replay_reproduces_training_export_bitwise_with_zero_forward_passes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    let out = zoforge(
        &[
            "train",
            "--config",
            "golden.toml",
            "--out-trajectory",
            "run.traj",
            "--out-params",
            "final.mzop",
            "--out-init-params",
            "init.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = zoforge(
        &[
            "replay",
            "--trajectory",
            "run.traj",
            "--init-params",
            "init.mzop",
            "--out-params",
            "replayed.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("forward_passes=0"), "{}", stdout(&out));
    assert_eq!(
        fs::read(dir.path().join("final.mzop")).unwrap(),
        fs::read(dir.path().join("replayed.mzop")).unwrap()
    );
}

#[test]
fn adam_reconstruct_run_replays_bitwise_through_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
        [run]
        seed = 4
        steps = 300
        batch_size = 8

        [optimizer]
        algo = "adam"
        lr = 0.02
        history = "reconstruct"

        [estimator]
        probes = 2

        [objective]
        kind = "mlp"
        examples = 24
        in_dim = 3
        hidden = 4
    "#;
    fs::write(dir.path().join("mlp.toml"), config).unwrap();
    let out = zoforge(
        &[
            "train",
            "--config",
            "mlp.toml",
            "--out-trajectory",
            "run.traj",
            "--out-params",
            "final.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Rebuild the initial parameters from the config (same seeded
    // initializer) and replay with the config-supplied history mode.
    let out = zoforge(
        &[
            "replay",
            "--trajectory",
            "run.traj",
            "--init-seed",
            "2",
            "--config",
            "mlp.toml",
            "--out-params",
            "replayed.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("forward_passes=0"));
    assert_eq!(
        fs::read(dir.path().join("final.mzop")).unwrap(),
        fs::read(dir.path().join("replayed.mzop")).unwrap()
    );
}

#[test]
fn layout_mismatch_exits_one_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    fs::write(
        dir.path().join("other.toml"),
        "[objective]\nkind = \"quadratic\"\ndim = 8\nrank = 2\n",
    )
    .unwrap();
    let out = zoforge(
        &["train", "--config", "golden.toml", "--out-trajectory", "run.traj"],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let out = zoforge(
        &["train", "--config", "other.toml", "--out-init-params", "other-init.mzop"],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0);

    let out = zoforge(
        &[
            "replay",
            "--trajectory",
            "run.traj",
            "--init-params",
            "other-init.mzop",
            "--out-params",
            "x.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    // Two distinct 16-hex-digit hashes must be printed.
    let hashes: Vec<&str> =
        err.split(|c: char| !c.is_ascii_hexdigit() && c != 'x').filter(|t| t.starts_with("0x") && t.len() == 18).collect();
    assert!(hashes.len() >= 2, "expected both hashes in: {err}");
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn corrupted_header_exits_one_with_checksum_message() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    let out = zoforge(
        &[
            "train",
            "--config",
            "golden.toml",
            "--out-trajectory",
            "run.traj",
            "--out-init-params",
            "init.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let mut bytes = fs::read(dir.path().join("run.traj")).unwrap();
    bytes[20] ^= 0xFF; // inside the checksummed header region
    fs::write(dir.path().join("run.traj"), &bytes).unwrap();

    let out = zoforge(
        &[
            "replay",
            "--trajectory",
            "run.traj",
            "--init-params",
            "init.mzop",
            "--out-params",
            "x.mzop",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).to_lowercase().contains("checksum"), "{}", stderr(&out));
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    let train = |name: &str, extra: &[&str], envs: &[(&str, &str)]| {
        let mut args = vec!["train", "--config", "golden.toml", "--out-trajectory", name];
        args.extend_from_slice(extra);
        let out = zoforge(&args, envs, dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(dir.path().join(name)).unwrap()
    };

    let by_flag = train("flag.traj", &["--seed", "5"], &[]);
    let by_env = train("env.traj", &[], &[("ZOFORGE_SEED", "5")]);
    let flag_beats_env = train("both.traj", &["--seed", "5"], &[("ZOFORGE_SEED", "9")]);
    let by_config = train("config.traj", &[], &[]);
    let env_nine = train("nine.traj", &[], &[("ZOFORGE_SEED", "9")]);

    assert_eq!(by_flag, by_env);
    assert_eq!(by_flag, flag_beats_env);
    assert_ne!(by_flag, by_config); // config seed is 11
    assert_ne!(by_flag, env_nine);

    let out = zoforge(
        &["train", "--config", "golden.toml"],
        &[("ZOFORGE_SEED", "not-a-number")],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ZOFORGE_SEED"));
}

#[test]
fn validate_all_is_seed_deterministic_and_writes_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |csv: &str| {
        let out = zoforge(
            &["validate", "--suite", "all", "--seed", "7", "--csv", csv, "--workers", "2"],
            &[],
            dir.path(),
        );
        (code(&out), stdout(&out))
    };
    let (code_a, text_a) = run("ev-a");
    let (code_b, text_b) = run("ev-b");
    assert_eq!(code_a, 0, "{text_a}");
    assert_eq!(code_b, 0);
    assert_eq!(text_a, text_b, "summary text must repeat identically");
    assert_eq!(text_a.lines().filter(|l| l.starts_with("SUITE ")).count(), 7);

    // The norm-ratio suite's evidence includes the d=10, n=1 sphere case
    // with its predicted value of exactly (d + n - 1) / n = 10.
    assert!(
        text_a.contains("row=ratio_sphere_d10_n1 PASS") && text_a.contains("predicted=10 "),
        "{text_a}"
    );
    for suite in
        ["unbiasedness", "normratio", "gausscov", "descent", "rankscaling", "sigmatrace", "sgdbaseline"]
    {
        for d in ["ev-a", "ev-b"] {
            assert!(dir.path().join(d).join(format!("{suite}.csv")).is_file());
        }
    }
    // Evidence files are byte-identical across repeats and worker counts.
    let out = zoforge(
        &["validate", "--suite", "all", "--seed", "7", "--csv", "ev-c", "--workers", "5"],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    for d in ["ev-a", "ev-b", "ev-c"] {
        for entry in fs::read_dir(dir.path().join(d)).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let bytes = fs::read(&path).unwrap();
            match files.get(&name) {
                Some(prev) => assert_eq!(prev, &bytes, "{d}/{name} differs"),
                None => {
                    files.insert(name, bytes);
                }
            }
        }
    }
}

#[test]
fn unknown_suite_exits_one_and_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoforge(&["validate", "--suite", "bogus"], &[], dir.path());
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for name in ["normratio", "gausscov", "descent", "rankscaling"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn divergent_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("hot.toml"),
        r#"
            [run]
            seed = 1
            steps = 5000

            [optimizer]
            lr = 0.03

            [objective]
            kind = "quadratic"
            dim = 100
        "#,
    )
    .unwrap();
    let out = zoforge(&["train", "--config", "hot.toml"], &[], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.toml"), "[objective]\nkind = \"quadratic\"\ndim = 4\n\n[run]\nstep = 5\n").unwrap();
    let out = zoforge(&["train", "--config", "typo.toml"], &[], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("step"), "{}", stderr(&out));
}

#[test]
fn inspect_prints_header_fields() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("golden.toml"), GOLDEN).unwrap();
    let out = zoforge(
        &["train", "--config", "golden.toml", "--out-trajectory", "run.traj"],
        &[],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let out = zoforge(&["inspect", "--trajectory", "run.traj"], &[], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in ["steps=2000", "n_probes=1", "master_seed=11", "layout_hash=", "file_bytes="] {
        assert!(text.contains(needle), "{text}");
    }
}
