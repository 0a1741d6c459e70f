use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[train]
epochs = 4
[distill]
iterations = 30
ipc = 4
eval_iterations = 40
[experiment]
seeds = [0]
distill_iterations = 30
eval_iterations = 40
"#;

fn forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .current_dir(dir)
        .env_remove("FORGE_SEED")
        .args(args)
        .output()
        .expect("spawn forge")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = forge(dir, args);
    assert!(
        out.status.success(),
        "forge {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_seed(path: &Path) -> u64 {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["gen-data", "--out", "data"]);
    ok(
        d,
        &[
            "--config",
            "small.toml",
            "init",
            "repo",
            "--strategy",
            "fusion",
        ],
    );

    let mut commits = Vec::new();
    for task in ["B-toy", "L-toy", "M-toy"] {
        let plugin = format!("{task}.fgm");
        let distilled = format!("{task}.fgd");
        let common = ["--task", task, "--data", "data", "--repo", "repo"];
        let mut args = vec!["--config", "small.toml", "train-branch"];
        args.extend(common);
        args.extend(["--out", &plugin]);
        ok(d, &args);
        assert!(d.join(format!("{plugin}.meta.json")).exists());
        let mut args = vec!["--config", "small.toml", "distill"];
        args.extend(common);
        args.extend(["--out", &distilled]);
        ok(d, &args);
        let id = ok(
            d,
            &[
                "commit",
                "repo",
                "--plugin",
                &plugin,
                "--distilled",
                &distilled,
                "--author",
                "ann",
            ],
        );
        let again = ok(
            d,
            &[
                "commit",
                "repo",
                "--plugin",
                &plugin,
                "--distilled",
                &distilled,
                "--task",
                task,
                "--author",
                "ann",
            ],
        );
        assert_eq!(id, again, "identical re-commit must deduplicate");
        commits.push(id.trim().to_string());
    }

    // Explicit order, then the rest in queue order.
    ok(d, &["merge", "repo", "--commit", &commits[2]]);
    let out = ok(d, &["merge", "repo", "--next"]);
    assert!(out.contains("B-toy"), "{out}");
    ok(d, &["merge", "repo", "--all"]);
    assert!(ok(d, &["merge", "repo"]).contains("nothing to merge"));

    ok(d, &["eval", "repo", "--out", "report.json"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 3);
    assert_eq!(report["metadata"]["round"], 3);
    assert_eq!(report["metadata"]["repo_config"]["strategy"], "fusion");
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("B-toy.fgm.meta.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["train"]["epochs"], 4);
    let avg = report["avg_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));

    ok(
        d,
        &[
            "eval", "repo", "--data", "data", "--round", "0", "--tasks", "L-toy",
        ],
    );
    ok(d, &["checkout", "repo", "--round", "2", "--out", "r2.fgi"]);
    assert!(d.join("r2.fgi.meta.json").exists());
    assert!(ok(d, &["status", "repo", "--verify"]).contains("replayed 3 rounds"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(forge(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(forge(d, &["--help"]).status.code(), Some(0));

    std::fs::write(d.join("bad.toml"), "[train]\nepochz = 2\n").unwrap();
    assert_eq!(
        forge(d, &["--config", "bad.toml", "gen-data", "--out", "x"])
            .status
            .code(),
        Some(1)
    );

    ok(d, &["init", "repo"]);
    // Out-of-range round is a validation failure.
    assert_eq!(
        forge(d, &["checkout", "repo", "--round", "4", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    // Re-initialising a non-empty directory conflicts.
    assert_eq!(forge(d, &["init", "repo"]).status.code(), Some(2));
    assert_eq!(forge(d, &["status", "absent"]).status.code(), Some(2));
    // An unwritable output location is a runtime failure.
    std::fs::write(d.join("plain"), "").unwrap();
    assert_eq!(
        forge(d, &["gen-data", "--out", "plain/sub"]).status.code(),
        Some(3)
    );
    assert!(ok(d, &["merge", "repo", "--next"]).contains("nothing to merge"));
    assert_eq!(
        forge(d, &["merge", "repo", "--commit", "feed"])
            .status
            .code(),
        Some(2)
    );

    // A tampered object fails verification.
    let objects = d.join("repo/objects");
    let shard = std::fs::read_dir(&objects)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let obj = std::fs::read_dir(&shard)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&obj).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&obj, bytes).unwrap();
    assert_eq!(
        forge(d, &["status", "repo", "--verify"]).status.code(),
        Some(2)
    );
}

#[test]
fn seed_precedence_flag_then_file_then_env() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("s.toml"), "seed = 11\n").unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_forge"));
        cmd.current_dir(d).env_remove("FORGE_SEED").args(args);
        if let Some(v) = env {
            cmd.env("FORGE_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&["gen-data", "--out", "a"], None);
    assert_eq!(manifest_seed(&d.join("a/manifest.json")), 0);
    run(&["gen-data", "--out", "b"], Some("7"));
    assert_eq!(manifest_seed(&d.join("b/manifest.json")), 7);
    run(&["--config", "s.toml", "gen-data", "--out", "c"], Some("7"));
    assert_eq!(manifest_seed(&d.join("c/manifest.json")), 11);
    run(
        &[
            "--config", "s.toml", "--seed", "5", "gen-data", "--out", "e",
        ],
        Some("7"),
    );
    assert_eq!(manifest_seed(&d.join("e/manifest.json")), 5);

    let out = Command::new(env!("CARGO_BIN_EXE_forge"))
        .current_dir(d)
        .env("FORGE_SEED", "seven")
        .args(["gen-data", "--out", "f"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn commit_rejects_mismatched_task_and_unknown_task() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["gen-data", "--out", "data"]);
    ok(d, &["init", "repo"]);
    let t = ["--config", "small.toml"];
    let mut a = t.to_vec();
    a.extend([
        "train-branch",
        "--task",
        "B-toy",
        "--data",
        "data",
        "--repo",
        "repo",
        "--out",
        "b.fgm",
    ]);
    ok(d, &a);
    let mut a = t.to_vec();
    a.extend([
        "distill", "--task", "M-toy", "--data", "data", "--repo", "repo", "--out", "m.fgd",
    ]);
    ok(d, &a);
    let out = forge(
        d,
        &[
            "commit",
            "repo",
            "--plugin",
            "b.fgm",
            "--distilled",
            "m.fgd",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = forge(
        d,
        &[
            "train-branch",
            "--task",
            "Z-toy",
            "--data",
            "data",
            "--out",
            "z.fgm",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_writes_timestamped_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let out = ok(
        d,
        &[
            "--config",
            "small.toml",
            "experiment",
            "orders",
            "work",
            "--strategies",
            "mixture",
        ],
    );
    assert!(out.contains("mixture B→L→M"), "{out}");
    let files: Vec<_> = std::fs::read_dir(d.join("reports/orders"))
        .unwrap()
        .collect();
    assert_eq!(files.len(), 1);
    let text = std::fs::read_to_string(files[0].as_ref().unwrap().path()).unwrap();
    // 6 orderings × 1 seed.
    assert_eq!(text.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(
        first["report"]["metadata"]["config"]["distill"]["iterations"],
        30
    );
}
