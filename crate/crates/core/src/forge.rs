//! Content-addressed registry: contributors commit plugin modules and
//! distilled datasets, merges fold them one at a time into the main branch.
//!
//! Layout under the repository root:
//!
//! ```text
//! config.json            repository settings, base encoder id, genesis item id
//! objects/<2hex>/<hash>  artifacts, named by the SHA-256 of their bytes
//! refs/main              current forge item id, round and head merge commit
//! refs/authors/<tag>     last contribution commit of each author
//! log/merges.jsonl       one merge record per round
//! queue/<seq>.json       pending contributions, FIFO by seq
//! index/tasks/<name>     task specs seen so far
//! index/guidance.json    distilled datasets retained as merge guidance
//! ```
//!
//! Object writes are idempotent (temp file + rename) and need no lock; merges
//! hold `log/main.lock`. Raw training data is never written here.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::datasets::TaskSpec;
use crate::distill::DistilledDataset;
use crate::error::{ForgeError, Result};
use crate::merge::{
    apply_fusion, apply_mixture, guidance_metrics, merge_round_fusion, merge_round_mixture,
    CoeffOptimConfig, ForgeItem, ForgeState, GuidanceMetric, GuidanceSet, MergeCoefficients,
    MergeStrategy, TracePoint,
};
use crate::model::{AdapterConfig, BaseEncoder, EncoderConfig, LabelEmbeddingTable, PluginModule};

pub const REPO_FORMAT: u32 = 1;
const MAIN_AUTHOR: &str = "main";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoConfig {
    pub format: u32,
    pub strategy: MergeStrategy,
    pub base_seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub merge: CoeffOptimConfig,
    pub base_id: String,
    pub genesis_item: String,
}

/// Settings fixed at `init`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitOptions {
    pub strategy: MergeStrategy,
    pub base_seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub merge: CoeffOptimConfig,
}

impl InitOptions {
    pub fn new(strategy: MergeStrategy, base_seed: u64) -> Self {
        Self {
            strategy,
            base_seed,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            merge: CoeffOptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchContribution {
    pub task: TaskSpec,
    pub plugin_id: String,
    pub distilled_id: String,
    /// Training configuration echo; never hashed into artifact ids.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Outcome of one merge round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub round: u32,
    pub strategy: MergeStrategy,
    pub contribution: String,
    pub task: String,
    pub plugin_id: String,
    pub guidance: Vec<String>,
    pub w_main: f64,
    pub w_branch: f64,
    /// Factor by which the previous main delta is scaled: `w²` under fusion,
    /// `w` under mixture.
    pub main_delta_scale: f64,
    pub branch_delta_scale: f64,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub trace: Vec<TracePoint>,
    pub pre: Vec<GuidanceMetric>,
    pub post: Vec<GuidanceMetric>,
    pub prev_item: String,
    pub item: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CommitPayload {
    Contribution(BranchContribution),
    Merge(MergeRecord),
}

/// Stored as canonical JSON; the id is the hash of those bytes, so no
/// timestamp is part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub parent: Option<String>,
    pub author: String,
    pub payload: CommitPayload,
}

impl Commit {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("commit serialization is infallible")
    }

    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainRef {
    pub item: String,
    pub round: u32,
    pub head: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub seq: u64,
    pub commit: String,
    pub author: String,
    pub timestamp_ms: u64,
}

/// One line of `log/merges.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub commit: String,
    pub timestamp_ms: u64,
    pub record: MergeRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct GuidanceIndex {
    /// `(task name, distilled id)` in retention order.
    entries: Vec<(String, String)>,
}

#[derive(Debug)]
pub struct Repository {
    root: PathBuf,
    config: RepoConfig,
}

struct MainLock(PathBuf);

impl MainLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(ForgeError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for MainLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn is_hex_id(id: &str) -> bool {
    id.len() == 64
        && id
            .bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Writes via a uniquely named temp file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let dir = path
        .parent()
        .ok_or_else(|| ForgeError::Input(format!("no parent for {}", path.display())))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

impl Repository {
    /// Creates the layout, stores the seeded base encoder and the round-0
    /// item. `path` must be absent or an empty directory.
    pub fn init(path: &Path, options: &InitOptions) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() || fs::read_dir(path)?.next().is_some() {
                return Err(ForgeError::Conflict(format!(
                    "{} exists and is not an empty directory",
                    path.display()
                )));
            }
        }
        options.merge.validate()?;
        let base = BaseEncoder::seeded(options.base_seed, &options.encoder)?;
        let genesis = ForgeItem::initial(options.strategy, &base, &options.adapter)?;
        for dir in ["objects", "refs/authors", "log", "queue", "index/tasks"] {
            fs::create_dir_all(path.join(dir))?;
        }
        let mut repo = Self {
            root: path.to_path_buf(),
            config: RepoConfig {
                format: REPO_FORMAT,
                strategy: options.strategy,
                base_seed: options.base_seed,
                encoder: options.encoder.clone(),
                adapter: options.adapter.clone(),
                merge: options.merge.clone(),
                base_id: String::new(),
                genesis_item: String::new(),
            },
        };
        repo.config.base_id = repo.put_object(&base.to_bytes())?;
        repo.config.genesis_item = repo.put_object(&genesis.to_bytes())?;
        write_json(&path.join("config.json"), &repo.config)?;
        write_json(&path.join("index/guidance.json"), &GuidanceIndex::default())?;
        fs::write(path.join("log/merges.jsonl"), b"")?;
        repo.write_main(&MainRef {
            item: repo.config.genesis_item.clone(),
            round: 0,
            head: None,
        })?;
        log::info!(
            "initialised {} ({} strategy, base {})",
            path.display(),
            options.strategy,
            &repo.config.base_id[..12]
        );
        Ok(repo)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let config_path = path.join("config.json");
        if !config_path.is_file() {
            return Err(ForgeError::Input(format!(
                "{} is not a forge repository",
                path.display()
            )));
        }
        let config: RepoConfig = read_json(&config_path)?;
        if config.format != REPO_FORMAT {
            return Err(ForgeError::Format(format!(
                "unsupported repository format {} (this build reads format {REPO_FORMAT})",
                config.format
            )));
        }
        Ok(Self {
            root: path.to_path_buf(),
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RepoConfig {
        &self.config
    }

    fn object_path(&self, id: &str) -> PathBuf {
        self.root.join("objects").join(&id[..2]).join(id)
    }

    /// Stores `bytes` under their hash. Existing objects are left untouched.
    pub fn put_object(&self, bytes: &[u8]) -> Result<String> {
        let id = sha256_hex(bytes);
        let path = self.object_path(&id);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    pub fn has_object(&self, id: &str) -> bool {
        is_hex_id(id) && self.object_path(id).is_file()
    }

    /// Reads an object and re-hashes it.
    pub fn get_object(&self, id: &str) -> Result<Vec<u8>> {
        if !is_hex_id(id) {
            return Err(ForgeError::Input(format!("malformed object id {id:?}")));
        }
        let bytes = match fs::read(self.object_path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(ForgeError::Integrity(format!("missing object {id}")))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != id {
            return Err(ForgeError::Integrity(format!(
                "object {id} re-hashes to {actual}"
            )));
        }
        Ok(bytes)
    }

    /// All object ids, sorted.
    pub fn object_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for shard in fs::read_dir(self.root.join("objects"))? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if is_hex_id(&name) {
                    ids.push(name);
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Re-hashes every object; returns how many were checked.
    pub fn verify(&self) -> Result<usize> {
        let ids = self.object_ids()?;
        for id in &ids {
            self.get_object(id)?;
        }
        Ok(ids.len())
    }

    pub fn base(&self) -> Result<BaseEncoder> {
        BaseEncoder::from_bytes(&self.get_object(&self.config.base_id)?)
    }

    pub fn load_plugin(&self, id: &str) -> Result<PluginModule> {
        PluginModule::from_bytes(&self.get_object(id)?)
    }

    pub fn load_distilled(&self, id: &str) -> Result<DistilledDataset> {
        DistilledDataset::from_bytes(&self.get_object(id)?)
    }

    pub fn load_commit(&self, id: &str) -> Result<Commit> {
        Ok(serde_json::from_slice(&self.get_object(id)?)?)
    }

    pub fn load_item(&self, id: &str) -> Result<ForgeItem> {
        ForgeItem::from_bytes(&self.get_object(id)?, |pid| self.load_plugin(pid))
    }

    pub fn label_table(&self, task: &TaskSpec) -> Result<LabelEmbeddingTable> {
        LabelEmbeddingTable::for_labels(&task.name, &task.labels, self.config.encoder.embed_dim())
    }

    /// Writes the artifacts of a contribution and returns the record that
    /// [`commit`](Self::commit) expects.
    pub fn stage(
        &self,
        task: &TaskSpec,
        plugin: &PluginModule,
        distilled: &DistilledDataset,
        metadata: serde_json::Value,
    ) -> Result<BranchContribution> {
        let contribution = BranchContribution {
            task: task.clone(),
            plugin_id: plugin.id(),
            distilled_id: distilled.id(),
            metadata,
        };
        self.validate_artifacts(task, plugin, distilled)?;
        self.put_object(&plugin.to_bytes())?;
        self.put_object(&distilled.to_bytes())?;
        Ok(contribution)
    }

    fn validate_artifacts(
        &self,
        task: &TaskSpec,
        plugin: &PluginModule,
        distilled: &DistilledDataset,
    ) -> Result<()> {
        task.validate()?;
        let base = self.base()?;
        if task.input_dim() != base.input_dim() {
            return Err(ForgeError::Validation(format!(
                "task {} inputs have {} values, base encoder takes {}",
                task.name,
                task.input_dim(),
                base.input_dim()
            )));
        }
        plugin
            .validate_against(&base)
            .map_err(|e| ForgeError::Validation(format!("plugin for {}: {e}", task.name)))?;
        let reference = PluginModule::zeros(&base, &self.config.adapter)?;
        reference
            .check_compatible(plugin)
            .map_err(|e| ForgeError::Validation(format!("plugin for {}: {e}", task.name)))?;
        if distilled.task != task.name {
            return Err(ForgeError::Validation(format!(
                "distilled set is for task {}, contribution is for {}",
                distilled.task, task.name
            )));
        }
        if distilled.num_classes != task.num_classes() {
            return Err(ForgeError::Validation(format!(
                "distilled set has {} classes, task {} has {}",
                distilled.num_classes,
                task.name,
                task.num_classes()
            )));
        }
        if distilled.input_shape != task.input_shape {
            return Err(ForgeError::Validation(format!(
                "distilled inputs {:?} vs task inputs {:?}",
                distilled.input_shape, task.input_shape
            )));
        }
        Ok(())
    }

    /// Records a contribution whose artifacts are already in the store and
    /// queues it for merging. The main branch is untouched. Repeating the
    /// author's latest contribution returns its commit id unchanged.
    pub fn commit(&self, author: &str, contribution: BranchContribution) -> Result<String> {
        if author.is_empty()
            || author == MAIN_AUTHOR
            || !author
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            || author.starts_with('.')
        {
            return Err(ForgeError::Input(format!(
                "author tag {author:?} must be [A-Za-z0-9._-]+, not starting with '.', and not {MAIN_AUTHOR:?}"
            )));
        }
        let plugin = self.load_plugin(&contribution.plugin_id)?;
        let distilled = self.load_distilled(&contribution.distilled_id)?;
        self.validate_artifacts(&contribution.task, &plugin, &distilled)?;
        self.register_task(&contribution.task)?;

        let author_ref = self.root.join("refs/authors").join(author);
        let parent = match fs::read_to_string(&author_ref) {
            Ok(s) => Some(s.trim().to_string()),
            Err(e) if e.kind() == ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        // Re-committing the author's head contribution is a no-op.
        if let Some(head) = &parent {
            if let CommitPayload::Contribution(prev) = self.load_commit(head)?.payload {
                if prev == contribution {
                    return Ok(head.clone());
                }
            }
        }
        let commit = Commit {
            parent,
            author: author.to_string(),
            payload: CommitPayload::Contribution(contribution),
        };
        let id = self.put_object(&commit.to_bytes())?;
        write_atomic(&author_ref, format!("{id}\n").as_bytes())?;
        self.enqueue(&id, author)?;
        log::info!("committed {} by {author}", &id[..12]);
        Ok(id)
    }

    /// Task names are global: a second spec under a used name must match.
    fn register_task(&self, task: &TaskSpec) -> Result<()> {
        if task.name.is_empty() || task.name.starts_with('.') || task.name.contains(['/', '\\']) {
            return Err(ForgeError::Validation(format!(
                "task name {:?} cannot be used as a file name",
                task.name
            )));
        }
        let path = self.root.join("index/tasks").join(&task.name);
        match read_json::<TaskSpec>(&path) {
            Ok(existing) if existing == *task => Ok(()),
            Ok(existing) => Err(ForgeError::Conflict(format!(
                "task {} already registered with labels {:?} and shape {:?}",
                task.name, existing.labels, existing.input_shape
            ))),
            Err(ForgeError::Io(e)) if e.kind() == ErrorKind::NotFound => write_json(&path, task),
            Err(e) => Err(e),
        }
    }

    pub fn task_spec(&self, name: &str) -> Result<TaskSpec> {
        read_json(&self.root.join("index/tasks").join(name))
            .map_err(|_| ForgeError::Input(format!("task {name} is not registered")))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let mut names: Vec<String> = fs::read_dir(self.root.join("index/tasks"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        names.iter().map(|n| self.task_spec(n)).collect()
    }

    fn enqueue(&self, commit: &str, author: &str) -> Result<()> {
        let dir = self.root.join("queue");
        let mut seq = self.queue()?.last().map_or(1, |e| e.seq + 1);
        loop {
            let entry = QueueEntry {
                seq,
                commit: commit.to_string(),
                author: author.to_string(),
                timestamp_ms: now_ms(),
            };
            let path = dir.join(format!("{seq:012}.json"));
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(&serde_json::to_vec(&entry)?)?;
                    return Ok(());
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => seq += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Pending contributions, oldest first.
    pub fn queue(&self) -> Result<Vec<QueueEntry>> {
        let mut entries = Vec::new();
        for e in fs::read_dir(self.root.join("queue"))? {
            let path = e?.path();
            if path.extension().is_some_and(|x| x == "json") {
                match read_json::<QueueEntry>(&path) {
                    Ok(q) => entries.push(q),
                    // A writer may still be filling the file in.
                    Err(ForgeError::Json(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        entries.sort_by_key(|q| q.seq);
        Ok(entries)
    }

    fn queue_path(&self, seq: u64) -> PathBuf {
        self.root.join("queue").join(format!("{seq:012}.json"))
    }

    pub fn main_ref(&self) -> Result<MainRef> {
        read_json(&self.root.join("refs/main"))
    }

    fn write_main(&self, main: &MainRef) -> Result<()> {
        write_json(&self.root.join("refs/main"), main)
    }

    pub fn main_item(&self) -> Result<ForgeItem> {
        self.load_item(&self.main_ref()?.item)
    }

    /// Distilled datasets retained as guidance, in merge order.
    pub fn guidance_ids(&self) -> Result<Vec<(String, String)>> {
        Ok(read_json::<GuidanceIndex>(&self.root.join("index/guidance.json"))?.entries)
    }

    pub fn guidance_sets(&self, ids: &[(String, String)]) -> Result<Vec<GuidanceSet>> {
        ids.iter()
            .map(|(task, id)| {
                let spec = self.task_spec(task)?;
                GuidanceSet::from_distilled(&self.load_distilled(id)?, &self.label_table(&spec)?)
            })
            .collect()
    }

    /// Merges the oldest queued contribution.
    pub fn merge_next(&self) -> Result<MergeRecord> {
        let _lock = self.lock()?;
        let first = self
            .queue()?
            .into_iter()
            .next()
            .ok_or(ForgeError::NothingToMerge)?;
        self.merge_entry(&first)
    }

    /// Merges a specific queued contribution, bypassing FIFO order.
    pub fn merge_commit(&self, commit: &str) -> Result<MergeRecord> {
        let _lock = self.lock()?;
        let entry = self
            .queue()?
            .into_iter()
            .find(|q| q.commit == commit)
            .ok_or_else(|| ForgeError::Input(format!("commit {commit} is not queued")))?;
        self.merge_entry(&entry)
    }

    /// Drains the queue in FIFO order.
    pub fn merge_all(&self) -> Result<Vec<MergeRecord>> {
        let mut out = Vec::new();
        loop {
            match self.merge_next() {
                Ok(r) => out.push(r),
                Err(ForgeError::NothingToMerge) => return Ok(out),
                Err(e) => return Err(e),
            }
        }
    }

    fn lock(&self) -> Result<MainLock> {
        MainLock::acquire(self.root.join("log/main.lock"))
    }

    fn merge_entry(&self, entry: &QueueEntry) -> Result<MergeRecord> {
        let commit = self.load_commit(&entry.commit)?;
        let CommitPayload::Contribution(contribution) = commit.payload else {
            return Err(ForgeError::Integrity(format!(
                "queued commit {} is not a contribution",
                entry.commit
            )));
        };
        let base = self.base()?;
        let main = self.main_ref()?;
        let item = self.load_item(&main.item)?;
        let branch = self.load_plugin(&contribution.plugin_id)?;

        let mut retained = self.guidance_ids()?;
        let pair = (
            contribution.task.name.clone(),
            contribution.distilled_id.clone(),
        );
        if !retained.contains(&pair) {
            retained.push(pair);
        }
        let guidance = self.guidance_sets(&retained)?;
        let pre = guidance_metrics(&base, &item.entries(), &guidance)?;
        let outcome = match item.state {
            ForgeState::Fused(_) => {
                merge_round_fusion(&base, &item, &branch, &guidance, &self.config.merge)?
            }
            ForgeState::Mixture(_) => {
                merge_round_mixture(&base, &item, &branch, &guidance, &self.config.merge)?
            }
        };
        let post = guidance_metrics(&base, &outcome.item.entries(), &guidance)?;
        let item_id = self.put_object(&outcome.item.to_bytes())?;
        let (w, v) = (outcome.coeffs.w_main, outcome.coeffs.w_branch);
        let (main_scale, branch_scale) = match item.strategy() {
            MergeStrategy::Fusion => (w * w, v * v),
            MergeStrategy::Mixture => (w, v),
        };
        let record = MergeRecord {
            round: outcome.item.round,
            strategy: item.strategy(),
            contribution: entry.commit.clone(),
            task: contribution.task.name.clone(),
            plugin_id: contribution.plugin_id.clone(),
            guidance: retained.iter().map(|(_, id)| id.clone()).collect(),
            w_main: w,
            w_branch: v,
            main_delta_scale: main_scale,
            branch_delta_scale: branch_scale,
            initial_objective: outcome.optim.initial_value,
            best_objective: outcome.optim.best_value,
            trace: outcome.optim.trace.clone(),
            pre,
            post,
            prev_item: main.item.clone(),
            item: item_id.clone(),
        };
        let merge_commit = Commit {
            parent: main.head.clone(),
            author: MAIN_AUTHOR.to_string(),
            payload: CommitPayload::Merge(record.clone()),
        };
        let commit_id = self.put_object(&merge_commit.to_bytes())?;
        let log_entry = LogEntry {
            commit: commit_id.clone(),
            timestamp_ms: now_ms(),
            record: record.clone(),
        };
        let mut line = serde_json::to_vec(&log_entry)?;
        line.push(b'\n');
        OpenOptions::new()
            .append(true)
            .open(self.root.join("log/merges.jsonl"))?
            .write_all(&line)?;
        write_json(
            &self.root.join("index/guidance.json"),
            &GuidanceIndex { entries: retained },
        )?;
        self.write_main(&MainRef {
            item: item_id,
            round: record.round,
            head: Some(commit_id),
        })?;
        fs::remove_file(self.queue_path(entry.seq))?;
        log::info!(
            "round {} merged {} (w = {w:.4}, w' = {v:.4}, objective {:.4} -> {:.4})",
            record.round,
            contribution.task.name,
            record.initial_objective,
            record.best_objective
        );
        Ok(record)
    }

    /// Merge records in round order, read from the log.
    pub fn history(&self) -> Result<Vec<LogEntry>> {
        let text = fs::read_to_string(self.root.join("log/merges.jsonl"))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<LogEntry>(l).map_err(ForgeError::from))
            .collect::<Result<Vec<_>>>()?;
        for (i, e) in entries.iter().enumerate() {
            if e.record.round as usize != i + 1 {
                return Err(ForgeError::Integrity(format!(
                    "merge log line {} holds round {}",
                    i + 1,
                    e.record.round
                )));
            }
        }
        Ok(entries)
    }

    /// Rebuilds the item as of `round` from the genesis item and the logged
    /// coefficients, checking every intermediate id against the log.
    pub fn checkout(&self, round: u32) -> Result<ForgeItem> {
        let history = self.history()?;
        if round as usize > history.len() {
            return Err(ForgeError::Range(format!(
                "round {round} requested, history has {} rounds",
                history.len()
            )));
        }
        let mut item = self.load_item(&self.config.genesis_item)?;
        for entry in &history[..round as usize] {
            let r = &entry.record;
            if item.id() != r.prev_item {
                return Err(ForgeError::Integrity(format!(
                    "round {} starts from {}, replay reached {}",
                    r.round,
                    r.prev_item,
                    item.id()
                )));
            }
            let branch = self.load_plugin(&r.plugin_id)?;
            let coeffs = MergeCoefficients::new(r.w_main, r.w_branch)?;
            item = match item.state {
                ForgeState::Fused(_) => apply_fusion(&item, &branch, coeffs)?,
                ForgeState::Mixture(_) => apply_mixture(&item, &branch, coeffs)?,
            };
            if item.id() != r.item {
                return Err(ForgeError::Integrity(format!(
                    "replay of round {} gives {}, log says {}",
                    r.round,
                    item.id(),
                    r.item
                )));
            }
        }
        Ok(item)
    }

    /// Replays the full history and compares it with `refs/main`.
    pub fn verify_replay(&self) -> Result<ForgeItem> {
        let main = self.main_ref()?;
        let item = self.checkout(main.round)?;
        let stored = self.get_object(&main.item)?;
        if item.to_bytes() != stored {
            return Err(ForgeError::Integrity(format!(
                "replayed item {} differs from main {}",
                item.id(),
                main.item
            )));
        }
        Ok(item)
    }

    /// Ids of every contribution commit reachable from the author refs.
    pub fn contribution_commits(&self) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for e in fs::read_dir(self.root.join("refs/authors"))? {
            let path = e?.path();
            if path
                .file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with('.'))
            {
                continue;
            }
            let mut next = Some(fs::read_to_string(&path)?.trim().to_string());
            while let Some(id) = next {
                next = self.load_commit(&id)?.parent;
                out.insert(id);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
