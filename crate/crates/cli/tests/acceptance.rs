//! Acceptance check for the command-line tool: every command, run twice
//! with the same configuration and seed, must produce byte-identical CSV
//! bodies. Lines starting with `#` are metadata (generation stamp, wall
//! times) and are excluded; everything else, including every formatted
//! float, must match exactly. The two runs also use different
//! `DF_LAB_THREADS` settings so thread count provably cannot leak into the
//! numbers.

use std::path::{Path, PathBuf};
use std::process::Command;

fn run(dir: &Path, args: &[&str], out_name: &str, threads: &str) -> PathBuf {
    let out = dir.join(out_name);
    let output = Command::new(env!("CARGO_BIN_EXE_df-lab"))
        .args(args)
        .arg("--out")
        .arg(&out)
        .env("DF_LAB_THREADS", threads)
        .output()
        .expect("spawn df-lab");
    assert!(
        output.status.success(),
        "df-lab {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    out
}

/// CSV body with metadata comment lines stripped.
fn body(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_11_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let train_cfg = dir.join("train.json");
    std::fs::write(
        &train_cfg,
        r#"{"data": "chessboard", "data_n": 128, "schedule": "vp",
            "train": {"n_steps": 40, "batch_size": 32, "hidden": [8, 8]}}"#,
    )
    .unwrap();
    let train_cfg = train_cfg.to_str().unwrap().to_owned();

    let cases: Vec<(&str, Vec<&str>)> = vec![
        (
            "gen-data",
            vec!["gen-data", "--data", "chessboard", "--n", "64", "--seed", "3"],
        ),
        (
            "fisher-check",
            vec![
                "fisher-check",
                "--data",
                "nonaffine3",
                "--schedule",
                "vp",
                "--n-x",
                "4",
                "--n-t",
                "3",
                "--seed",
                "1",
            ],
        ),
        (
            "trace-bench",
            vec![
                "trace-bench",
                "--data",
                "nonaffine3",
                "--schedule",
                "ve",
                "--t-grid",
                "0.4,0.8",
                "--n-points",
                "8",
                "--probes",
                "51",
                "--seed",
                "2",
            ],
        ),
        (
            "nll",
            vec![
                "nll",
                "--data",
                "nonaffine3",
                "--schedule",
                "vp",
                "--steps",
                "60",
                "--trace-method",
                "hutchinson",
                "--probes",
                "11",
                "--seed",
                "2",
            ],
        ),
        (
            "adjoint-sim",
            vec![
                "adjoint-sim",
                "--data",
                "nonaffine3",
                "--schedule",
                "ve",
                "--op",
                "df-ea",
                "--steps",
                "40",
                "--n-traj",
                "2",
                "--seed",
                "4",
            ],
        ),
        (
            "ot-test",
            vec![
                "ot-test", "--data", "affine3", "--m", "50", "--n-traj", "3", "--seed", "5",
            ],
        ),
    ];

    let mut checked = 0;
    for (name, args) in &cases {
        let a = run(dir, args, &format!("{name}-a.csv"), "1");
        let b = run(dir, args, &format!("{name}-b.csv"), "2");
        let (a, b) = (body(&a), body(&b));
        assert!(!a.trim().is_empty(), "{name}: empty output body");
        assert_eq!(a, b, "{name}: CSV bodies differ between identical runs");
        checked += 1;
    }

    // The train command writes a binary checkpoint plus a loss curve; the
    // checkpoint must be bit-identical and the loss CSV body must match.
    let targs = vec!["train", "--net", "eps", "--config", &*train_cfg, "--seed", "6"];
    let a = run(dir, &targs, "ckpt-a", "1");
    let b = run(dir, &targs, "ckpt-b", "2");
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "train: checkpoints differ"
    );
    let (la, lb) = (
        body(&dir.join("ckpt-a.loss.csv")),
        body(&dir.join("ckpt-b.loss.csv")),
    );
    assert!(!la.trim().is_empty(), "train: empty loss curve");
    assert_eq!(la, lb, "train: loss curves differ");
    checked += 1;

    println!(
        "[PASS] criterion 11: determinism - {checked} commands byte-identical across reruns and thread counts"
    );
}
