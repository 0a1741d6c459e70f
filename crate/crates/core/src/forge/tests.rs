use super::*;
use crate::numerics::{SeededRng, Tensor};

fn small_options(strategy: MergeStrategy) -> InitOptions {
    InitOptions {
        encoder: EncoderConfig {
            widths: vec![16, 8, 4],
            temperature: 0.07,
        },
        adapter: AdapterConfig {
            rank: 2,
            alpha: 2.0,
            ..AdapterConfig::default()
        },
        ..InitOptions::new(strategy, 7)
    }
}

fn task(name: &str, classes: usize) -> TaskSpec {
    let labels: Vec<String> = (0..classes).map(|c| format!("{name}-{c}")).collect();
    let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    TaskSpec::new(name, &refs, vec![4, 4], false).unwrap()
}

fn artifacts(repo: &Repository, spec: &TaskSpec, seed: u64) -> (PluginModule, DistilledDataset) {
    let base = repo.base().unwrap();
    let mut rng = SeededRng::new(seed);
    let mut plugin = PluginModule::fresh(&base, &repo.config().adapter, &mut rng).unwrap();
    for a in plugin.adapters_mut() {
        let n = a.b.numel();
        a.b.data_mut().copy_from_slice(&rng.normal_vec(n, 0.0, 0.2));
    }
    let c = spec.num_classes();
    let ipc = 3;
    let inputs = Tensor::matrix(c * ipc, 16, rng.normal_vec(c * ipc * 16, 0.0, 1.0)).unwrap();
    let labels = (0..c).flat_map(|k| std::iter::repeat_n(k, ipc)).collect();
    let distilled = DistilledDataset::new(&spec.name, c, ipc, vec![4, 4], inputs, labels).unwrap();
    (plugin, distilled)
}

fn contribute(repo: &Repository, author: &str, spec: &TaskSpec, seed: u64) -> String {
    let (plugin, distilled) = artifacts(repo, spec, seed);
    let c = repo
        .stage(
            spec,
            &plugin,
            &distilled,
            serde_json::json!({ "seed": seed }),
        )
        .unwrap();
    repo.commit(author, c).unwrap()
}

#[test]
fn init_layout_and_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("repo");
    let repo = Repository::init(&path, &small_options(MergeStrategy::Fusion)).unwrap();
    for p in [
        "config.json",
        "refs/main",
        "log/merges.jsonl",
        "queue",
        "objects",
    ] {
        assert!(path.join(p).exists(), "{p}");
    }
    assert_eq!(repo.main_ref().unwrap().round, 0);
    assert!(matches!(
        Repository::init(&path, &small_options(MergeStrategy::Fusion)),
        Err(ForgeError::Conflict(_))
    ));
    let other = dir.path().join("other");
    let repo2 = Repository::init(&other, &small_options(MergeStrategy::Mixture)).unwrap();
    assert_eq!(repo.config().base_id, repo2.config().base_id);
    assert_eq!(repo.base().unwrap().hash(), repo.config().base_id);
    assert!(Repository::open(dir.path()).is_err());
}

#[test]
fn fresh_repo_behaves_as_base() {
    for strategy in [MergeStrategy::Fusion, MergeStrategy::Mixture] {
        let dir = tempfile::tempdir().unwrap();
        let repo = Repository::init(dir.path(), &small_options(strategy)).unwrap();
        let base = repo.base().unwrap();
        let x = Tensor::matrix(2, 16, SeededRng::new(1).normal_vec(32, 0.0, 1.0)).unwrap();
        let y = repo.main_item().unwrap().embed(&base, &x).unwrap();
        let y0 = crate::model::forward(&base, None, &x).unwrap();
        assert_eq!(y.data(), y0.data());
        assert_eq!(repo.checkout(0).unwrap().id(), repo.config().genesis_item);
    }
}

#[test]
fn recommit_is_idempotent_and_new_work_chains() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Mixture)).unwrap();
    let spec = task("t", 2);
    let c1 = contribute(&repo, "alice", &spec, 3);
    let objects = repo.object_ids().unwrap();
    assert_eq!(contribute(&repo, "alice", &spec, 3), c1);
    assert_eq!(repo.object_ids().unwrap(), objects);
    assert_eq!(repo.queue().unwrap().len(), 1);

    let c2 = contribute(&repo, "alice", &spec, 4);
    assert_ne!(c1, c2);
    assert_eq!(
        repo.load_commit(&c2).unwrap().parent.as_deref(),
        Some(c1.as_str())
    );
    // same artifacts from another author: shared objects, separate commit
    let c3 = contribute(&repo, "bob", &spec, 4);
    assert_ne!(c3, c2);
    assert_eq!(repo.queue().unwrap().len(), 3);
    assert_eq!(repo.main_ref().unwrap().round, 0);
}

#[test]
fn tampered_or_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    let spec = task("t", 2);
    let (plugin, distilled) = artifacts(&repo, &spec, 1);
    let c = repo
        .stage(&spec, &plugin, &distilled, serde_json::Value::Null)
        .unwrap();

    let path = repo.object_path(&c.plugin_id);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        repo.commit("bob", c.clone()),
        Err(ForgeError::Integrity(_))
    ));
    assert!(matches!(repo.verify(), Err(ForgeError::Integrity(_))));

    fs::remove_file(&path).unwrap();
    assert!(matches!(
        repo.commit("bob", c),
        Err(ForgeError::Integrity(_))
    ));
}

#[test]
fn validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    let spec = task("t", 2);
    let (plugin, distilled) = artifacts(&repo, &spec, 1);
    let three = task("t", 3);
    assert!(matches!(
        repo.stage(&three, &plugin, &distilled, serde_json::Value::Null),
        Err(ForgeError::Validation(_))
    ));
    let wide = TaskSpec::new("w", &["a", "b"], vec![5, 5], false).unwrap();
    assert!(matches!(
        repo.stage(&wide, &plugin, &distilled, serde_json::Value::Null),
        Err(ForgeError::Validation(_))
    ));
    let c = repo
        .stage(&spec, &plugin, &distilled, serde_json::Value::Null)
        .unwrap();
    assert!(matches!(
        repo.commit("main", c.clone()),
        Err(ForgeError::Input(_))
    ));
    assert!(matches!(repo.commit("../x", c), Err(ForgeError::Input(_))));
}

#[test]
fn same_task_name_with_other_labels_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    contribute(&repo, "a", &task("t", 2), 1);
    let other = TaskSpec::new("t", &["x", "y"], vec![4, 4], false).unwrap();
    let (plugin, distilled) = artifacts(&repo, &other, 2);
    let c = repo
        .stage(&other, &plugin, &distilled, serde_json::Value::Null)
        .unwrap();
    assert!(matches!(repo.commit("a", c), Err(ForgeError::Conflict(_))));
}

#[test]
fn heterogeneous_class_counts_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    contribute(&repo, "a", &task("b", 2), 1);
    contribute(&repo, "b", &task("m", 2), 2);
    contribute(&repo, "c", &task("l", 3), 3);
    let records = repo.merge_all().unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(
        records.iter().map(|r| r.task.as_str()).collect::<Vec<_>>(),
        ["b", "m", "l"]
    );
    assert_eq!(records[2].guidance.len(), 3);
    assert!(records
        .iter()
        .all(|r| r.best_objective <= r.initial_objective));
    assert!(matches!(repo.merge_next(), Err(ForgeError::NothingToMerge)));

    let live = repo.main_item().unwrap();
    assert_eq!(repo.verify_replay().unwrap().to_bytes(), live.to_bytes());
    assert_eq!(repo.checkout(1).unwrap().id(), records[0].item);
    assert_eq!(repo.checkout(3).unwrap().id(), records[2].item);
    assert!(matches!(repo.checkout(4), Err(ForgeError::Range(_))));
    assert_eq!(repo.history().unwrap().len(), 3);
    repo.verify().unwrap();

    let head = repo.main_ref().unwrap().head.unwrap();
    let CommitPayload::Merge(m) = repo.load_commit(&head).unwrap().payload else {
        panic!("head is not a merge commit")
    };
    assert_eq!(m, records[2]);
}

#[test]
fn mixture_single_merge_entries() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Mixture)).unwrap();
    let spec = task("t", 2);
    let (plugin, _) = artifacts(&repo, &spec, 4);
    contribute(&repo, "a", &spec, 4);
    let record = repo.merge_next().unwrap();
    let ForgeState::Mixture(slots) = repo.main_item().unwrap().state else {
        panic!("expected mixture")
    };
    assert_eq!(slots.len(), 1);
    assert_eq!(slots[0].plugin.id(), plugin.id());
    assert_eq!(slots[0].coeff, record.w_branch);
    // merging never rewrites the committed plugin
    assert_eq!(repo.get_object(&plugin.id()).unwrap(), plugin.to_bytes());
}

#[test]
fn explicit_merge_order() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Mixture)).unwrap();
    let first = contribute(&repo, "a", &task("x", 2), 1);
    let second = contribute(&repo, "b", &task("y", 2), 2);
    let r = repo.merge_commit(&second).unwrap();
    assert_eq!(r.contribution, second);
    assert_eq!(repo.queue().unwrap()[0].commit, first);
    assert!(matches!(
        repo.merge_commit(&second),
        Err(ForgeError::Input(_))
    ));
}

#[test]
fn merge_lock_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    contribute(&repo, "a", &task("t", 2), 1);
    let held = repo.lock().unwrap();
    let err = repo.merge_next().unwrap_err();
    assert!(matches!(err, ForgeError::Locked(_)));
    assert!(err.to_string().contains("retry"));
    drop(held);
    repo.merge_next().unwrap();
}

#[test]
fn tampered_log_breaks_replay() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path(), &small_options(MergeStrategy::Fusion)).unwrap();
    contribute(&repo, "a", &task("t", 2), 1);
    repo.merge_next().unwrap();
    let path = dir.path().join("log/merges.jsonl");
    let mut entries = repo.history().unwrap();
    entries[0].record.w_branch += 0.125;
    let text: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    fs::write(&path, text).unwrap();
    assert!(matches!(
        repo.verify_replay(),
        Err(ForgeError::Integrity(_))
    ));
}
