use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use forge_core::datasets::{
    class_histogram, generate_tasks, read_manifest, read_task, write_tasks, GeneratedTask, TaskSpec,
};
use forge_core::distill::{distill, eval_distilled, DistilledDataset};
use forge_core::eval::experiment::{prepare, run_baselines_experiment, run_order_experiment};
use forge_core::eval::{evaluate_task, MetricsReport};
use forge_core::forge::{InitOptions, MergeRecord, Repository};
use forge_core::merge::{ForgeState, MergeStrategy, MixtureSlot};
use forge_core::model::{
    train_plugin, AdapterConfig, BaseEncoder, LabelEmbeddingTable, MixtureEntry, PluginModule,
};
use forge_core::ForgeError;

use crate::config::RunConfig;
use crate::{Cli, Command, ExperimentKind, TaskArgs, UsageError};

/// `<artifact>.meta.json`, written next to every trained plugin and distilled
/// set. Its contents travel into the commit as metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: String,
    pub artifact_id: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub base_id: String,
    pub config: Value,
    pub metrics: Value,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn read_sidecar(artifact: &Path) -> Result<Option<Sidecar>> {
    let path = sidecar_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let sidecar = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("sidecar {}: {e}", path.display())))?;
    Ok(Some(sidecar))
}

fn write_sidecar(artifact: &Path, sidecar: &Sidecar) -> Result<()> {
    fs::write(sidecar_path(artifact), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::GenData { out } => gen_data(&out, seed),
        Command::Init { repo, strategy } => init(&repo, strategy.into(), seed, &cfg),
        Command::TrainBranch { task, out } => train_branch(&task, &out, seed, &cfg),
        Command::Distill {
            task,
            ipc,
            iters,
            out,
        } => {
            if let Some(n) = ipc {
                cfg.distill.ipc = n;
            }
            if let Some(n) = iters {
                cfg.distill.iterations = n;
            }
            distill_task(&task, &out, seed, &cfg)
        }
        Command::Commit {
            repo,
            plugin,
            distilled,
            task,
            data,
            author,
        } => commit(
            &repo,
            &plugin,
            &distilled,
            task.as_deref(),
            data.as_deref(),
            &author,
        ),
        Command::Merge {
            repo,
            all: _,
            next,
            commit,
        } => merge(&repo, next, &commit),
        Command::Eval {
            repo,
            data,
            tasks,
            round,
            out,
        } => eval(&repo, &data, &tasks, round, out.as_deref()),
        Command::Checkout { repo, round, out } => checkout(&repo, round, &out),
        Command::Status { repo, verify } => status(&repo, verify),
        Command::Experiment {
            kind,
            workdir,
            reports,
            strategies,
            seeds,
        } => {
            if !seeds.is_empty() {
                cfg.experiment.seeds = seeds;
            }
            let strategies: Vec<MergeStrategy> = strategies.into_iter().map(Into::into).collect();
            experiment(kind, &workdir, &reports, &strategies, &cfg)
        }
    }
}

fn gen_data(out: &Path, seed: u64) -> Result<()> {
    let tasks = generate_tasks(seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_tasks(out, seed, &tasks)?;
    for t in &tasks {
        println!(
            "{:<10} classes {:?} train {} test {}{}",
            t.spec.name,
            class_histogram(&t.spec, &t.train),
            t.train.len(),
            t.test.len(),
            if t.spec.grouped { " (grouped)" } else { "" }
        );
    }
    println!("wrote {} tasks to {}", tasks.len(), out.display());
    Ok(())
}

fn init(path: &Path, strategy: MergeStrategy, seed: u64, cfg: &RunConfig) -> Result<()> {
    let options = InitOptions {
        strategy,
        base_seed: seed,
        encoder: cfg.encoder.clone(),
        adapter: cfg.adapter.clone(),
        merge: cfg.merge.clone(),
    };
    let repo = Repository::init(path, &options)?;
    println!(
        "initialized {strategy} registry at {} (base {})",
        path.display(),
        repo.config().base_id
    );
    Ok(())
}

struct TaskContext {
    task: GeneratedTask,
    base: BaseEncoder,
    adapter: AdapterConfig,
    table: LabelEmbeddingTable,
}

/// Without a registry the base encoder is drawn from the run seed and the
/// configured encoder shape; a branch meant for a registry should pass
/// `--repo` so its base matches.
fn load_task(args: &TaskArgs, seed: u64, cfg: &RunConfig) -> Result<TaskContext> {
    let manifest = read_manifest(&args.data)
        .with_context(|| format!("reading data manifest in {}", args.data.display()))?;
    let spec = manifest
        .tasks
        .iter()
        .find(|t| t.name == args.task)
        .ok_or_else(|| {
            usage(format!(
                "task {:?} not in {}",
                args.task,
                args.data.display()
            ))
        })?;
    let task = read_task(&args.data, spec)?;
    let (base, adapter) = match &args.repo {
        Some(path) => {
            let repo = Repository::open(path)?;
            (repo.base()?, repo.config().adapter.clone())
        }
        None => (
            BaseEncoder::seeded(seed, &cfg.encoder)?,
            cfg.adapter.clone(),
        ),
    };
    let table = LabelEmbeddingTable::for_labels(&spec.name, &spec.labels, base.embed_dim())?;
    Ok(TaskContext {
        task,
        base,
        adapter,
        table,
    })
}

fn train_branch(args: &TaskArgs, out: &Path, seed: u64, cfg: &RunConfig) -> Result<()> {
    let ctx = load_task(args, seed, cfg)?;
    let train_cfg = cfg.train_config(&ctx.adapter, seed);
    let plugin = train_plugin(&ctx.base, &ctx.table, &ctx.task.train, &train_cfg)?;
    let metrics = evaluate_task(
        &ctx.base,
        &[MixtureEntry::new(&plugin, 1.0)],
        &ctx.table,
        &ctx.task.test,
    )?;
    fs::write(out, plugin.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    write_sidecar(
        out,
        &Sidecar {
            kind: "plugin".into(),
            artifact_id: plugin.id(),
            task: ctx.task.spec.clone(),
            seed,
            base_id: ctx.base.hash(),
            config: json!({ "train": cfg.train, "adapter": ctx.adapter }),
            metrics: serde_json::to_value(&metrics)?,
        },
    )?;
    println!(
        "{}: test acc {:.4} auc {:.4}; plugin {} -> {}",
        ctx.task.spec.name,
        metrics.acc,
        metrics.auc,
        plugin.id(),
        out.display()
    );
    Ok(())
}

fn distill_task(args: &TaskArgs, out: &Path, seed: u64, cfg: &RunConfig) -> Result<()> {
    let ctx = load_task(args, seed, cfg)?;
    let distill_cfg = cfg.distill_config(&ctx.adapter, seed);
    let outcome = distill(
        &ctx.task.train,
        &ctx.table,
        &ctx.base,
        &ctx.task.spec.input_shape,
        &distill_cfg,
    )?;
    let eval_cfg = cfg.distilled_eval_config(&ctx.adapter, seed);
    let (_, metrics) = eval_distilled(
        &outcome.dataset,
        &ctx.base,
        &ctx.table,
        &ctx.task.test,
        &eval_cfg,
    )?;
    outcome
        .dataset
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let final_loss = outcome.losses.last().copied().unwrap_or(f32::NAN);
    write_sidecar(
        out,
        &Sidecar {
            kind: "distilled".into(),
            artifact_id: outcome.dataset.id(),
            task: ctx.task.spec.clone(),
            seed,
            base_id: ctx.base.hash(),
            config: json!({ "distill": cfg.distill, "adapter": ctx.adapter }),
            metrics: json!({
                "distilled_only": metrics,
                "final_matching_loss": final_loss,
            }),
        },
    )?;
    println!(
        "{}: {} synthetic items, matching loss {:.5}, distilled-only acc {:.4}; -> {}",
        ctx.task.spec.name,
        outcome.dataset.len(),
        final_loss,
        metrics.acc,
        out.display()
    );
    Ok(())
}

fn commit(
    path: &Path,
    plugin_path: &Path,
    distilled_path: &Path,
    task: Option<&str>,
    data: Option<&Path>,
    author: &str,
) -> Result<()> {
    let repo = Repository::open(path)?;
    let plugin = PluginModule::from_bytes(
        &fs::read(plugin_path).with_context(|| format!("reading {}", plugin_path.display()))?,
    )?;
    let distilled = DistilledDataset::load(distilled_path)
        .with_context(|| format!("reading {}", distilled_path.display()))?;
    let plugin_meta = read_sidecar(plugin_path)?;
    let distilled_meta = read_sidecar(distilled_path)?;

    let spec = match (task, data) {
        (Some(name), Some(dir)) => read_manifest(dir)?
            .tasks
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| usage(format!("task {name:?} not in {}", dir.display())))?,
        (Some(name), None) => match &plugin_meta {
            Some(m) if m.task.name == name => m.task.clone(),
            _ => repo.task_spec(name).map_err(|_| {
                usage(format!(
                    "task {name:?} is not registered and has no sidecar; pass --data"
                ))
            })?,
        },
        (None, _) => match &plugin_meta {
            Some(m) => m.task.clone(),
            None => {
                return Err(usage(format!(
                    "{} has no sidecar; pass --task and --data",
                    plugin_path.display()
                )))
            }
        },
    };
    for meta in [&plugin_meta, &distilled_meta].into_iter().flatten() {
        if meta.task.name != spec.name {
            return Err(ForgeError::Validation(format!(
                "{} artifact was produced for task {}, committing as {}",
                meta.kind, meta.task.name, spec.name
            ))
            .into());
        }
    }
    let metadata = json!({ "plugin": plugin_meta, "distilled": distilled_meta });
    let contribution = repo.stage(&spec, &plugin, &distilled, metadata)?;
    let id = repo.commit(author, contribution)?;
    println!("{id}");
    Ok(())
}

fn print_record(r: &MergeRecord) {
    println!(
        "round {:>3} {:<10} w_main {:.4} w_branch {:.4} objective {:.4} -> {:.4} item {}",
        r.round, r.task, r.w_main, r.w_branch, r.initial_objective, r.best_objective, r.item
    );
}

fn merge(path: &Path, next: bool, commits: &[String]) -> Result<()> {
    let repo = Repository::open(path)?;
    let records = if !commits.is_empty() {
        commits
            .iter()
            .map(|c| repo.merge_commit(c))
            .collect::<Result<Vec<_>, _>>()?
    } else if next {
        match repo.merge_next() {
            Ok(r) => vec![r],
            Err(ForgeError::NothingToMerge) => Vec::new(),
            Err(e) => return Err(e.into()),
        }
    } else {
        repo.merge_all()?
    };
    if records.is_empty() {
        println!("nothing to merge");
    }
    records.iter().for_each(print_record);
    Ok(())
}

fn eval(
    path: &Path,
    data: &Path,
    only: &[String],
    round: Option<u32>,
    out: Option<&Path>,
) -> Result<()> {
    let repo = Repository::open(path)?;
    let (item, round) = match round {
        Some(r) => (repo.checkout(r)?, r),
        None => {
            let main = repo.main_ref()?;
            (repo.main_item()?, main.round)
        }
    };
    let known = repo.tasks()?;
    let specs: Vec<TaskSpec> = if only.is_empty() {
        known
    } else {
        only.iter()
            .map(|name| {
                known
                    .iter()
                    .find(|t| &t.name == name)
                    .cloned()
                    .ok_or_else(|| usage(format!("registry has no task {name:?}")))
            })
            .collect::<Result<_>>()?
    };
    if specs.is_empty() {
        return Err(usage(
            "registry has no tasks yet; commit a contribution first",
        ));
    }
    let manifest = read_manifest(data)?;
    let base = repo.base()?;
    let entries = item.entries();
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in &specs {
        if !manifest.tasks.contains(spec) {
            return Err(ForgeError::Validation(format!(
                "task {} in {} differs from the registry definition",
                spec.name,
                data.display()
            ))
            .into());
        }
        let task = read_task(data, spec)?;
        let table = repo.label_table(spec)?;
        tasks.push(evaluate_task(&base, &entries, &table, &task.test)?);
    }
    let report = MetricsReport::from_tasks(tasks)?
        .with_meta("round", round)
        .with_meta("item", item.id())
        .with_meta("strategy", item.strategy().to_string())
        .with_meta("repo_config", serde_json::to_value(repo.config())?);
    print!("{}", report.render());
    if let Some(out) = out {
        fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn checkout(path: &Path, round: u32, out: &Path) -> Result<()> {
    let repo = Repository::open(path)?;
    let item = repo.checkout(round)?;
    fs::write(out, item.to_bytes())?;
    let meta = json!({
        "kind": "item",
        "artifact_id": item.id(),
        "round": round,
        "strategy": item.strategy().to_string(),
        "plugins": item.referenced_plugins(),
        "repo_config": repo.config(),
    });
    fs::write(sidecar_path(out), serde_json::to_vec_pretty(&meta)?)?;
    println!("round {round}: item {} -> {}", item.id(), out.display());
    Ok(())
}

fn status(path: &Path, verify: bool) -> Result<()> {
    let repo = Repository::open(path)?;
    let main = repo.main_ref()?;
    println!("strategy {}", repo.config().strategy);
    println!("main     round {} item {}", main.round, main.item);
    match repo.main_item()?.state {
        ForgeState::Fused(_) => {}
        ForgeState::Mixture(slots) => {
            for MixtureSlot { plugin, coeff } in &slots {
                println!("         slot {} coeff {coeff:.4}", plugin.id());
            }
        }
    }
    let tasks = repo.tasks()?;
    println!(
        "tasks    {}",
        tasks
            .iter()
            .map(|t| t.name.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    for q in repo.queue()? {
        println!("queued   #{} {} by {}", q.seq, q.commit, q.author);
    }
    for e in repo.history()? {
        print_record(&e.record);
    }
    if verify {
        let n = repo.verify()?;
        repo.verify_replay()?;
        println!("verified {n} objects and replayed {} rounds", main.round);
    }
    Ok(())
}

fn experiment(
    kind: ExperimentKind,
    workdir: &Path,
    reports: &Path,
    strategies: &[MergeStrategy],
    cfg: &RunConfig,
) -> Result<()> {
    let config = cfg.experiment_config();
    fs::create_dir_all(workdir)?;
    let artifacts = prepare(&config)?;
    let mut table = match kind {
        ExperimentKind::Orders => run_order_experiment(&artifacts, strategies, workdir, &config)?,
        ExperimentKind::Baselines => run_baselines_experiment(&artifacts, workdir, &config)?,
    };
    let echo = serde_json::to_value(&config)?;
    for run in table.rows.iter_mut().flat_map(|r| r.runs.iter_mut()) {
        run.metadata.insert("config".into(), echo.clone());
    }
    print!("{}", table.render());
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)?
        .as_secs()
        .to_string();
    let path = table.write_jsonl(reports, &ts)?;
    println!("wrote {}", path.display());
    Ok(())
}
