//! Command implementations behind the `step` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use step_core::decompose::{ContextMode, DecompositionPolicy, RecipeTable, ScriptedPolicy};
use step_core::eval::{
    attach_oracle_lengths, classify_error, compute_metrics, emit_report, load_suite, oracle_lengths, oracle_search,
    ReportFormat, SuiteResult, TaskSpec, ORACLE_DEPTH,
};
use step_core::llm::{
    Cassette, EndpointConfig, LlmClient, LlmJudge, LlmPolicy, ScribeJudge, ScribePolicy, TransportMode,
};
use step_core::planner::{EpisodeTrace, PlannerConfig};
use step_core::terminate::{CongruenceJudge, ScriptedJudge};

#[derive(Debug, Parser)]
#[command(name = "step", version, about = "Subgoal-tree task planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every task of a suite and write traces and reports.
    Run(RunArgs),
    /// Print a shortest plan for one task.
    Oracle {
        task: PathBuf,
        #[arg(long, default_value_t = ORACLE_DEPTH)]
        depth: usize,
    },
    /// Print the error class of a finished trace.
    Classify { trace: PathBuf, task: PathBuf },
    /// Write a replay cassette whose answers reproduce the scripted backend.
    SynthCassette {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        recipes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Live,
    Record,
    Replay,
}

impl From<Transport> for TransportMode {
    fn from(t: Transport) -> Self {
        match t {
            Transport::Live => TransportMode::Live,
            Transport::Record => TransportMode::Record,
            Transport::Replay => TransportMode::Replay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Full,
    NoTree,
    NoSubgoalTree,
    Flat,
}

impl From<Mode> for ContextMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => ContextMode::FullStep,
            Mode::NoTree => ContextMode::NoTreeStructure,
            Mode::NoSubgoalTree => ContextMode::NoSubgoalTree,
            Mode::Flat => ContextMode::FlatBaseline,
        }
    }
}

/// Flags of `step run`. Every flag also has a config-file field; flags win.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub transport: Option<Transport>,
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// Defaults to `recipes.json` next to the suite's task directory.
    #[arg(long)]
    pub recipes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_replans: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// JSON file with any of the fields of a run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully resolved configuration of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite_path: PathBuf,
    pub backend: Backend,
    pub mode: ContextMode,
    pub transport: Transport,
    pub cassette: Option<PathBuf>,
    pub recipes: PathBuf,
    pub out_path: PathBuf,
    pub seed: u64,
    pub max_depth: usize,
    pub max_replans_per_node: usize,
    pub max_total_steps: usize,
    pub parallelism: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    suite_path: Option<PathBuf>,
    backend: Option<Backend>,
    mode: Option<ContextMode>,
    transport: Option<Transport>,
    cassette: Option<PathBuf>,
    recipes: Option<PathBuf>,
    out_path: Option<PathBuf>,
    seed: Option<u64>,
    max_depth: Option<usize>,
    max_replans_per_node: Option<usize>,
    max_total_steps: Option<usize>,
    parallelism: Option<usize>,
}

/// Where recipes live by default: beside the suite's `tasks/` directory.
fn default_recipes(suite: &Path) -> PathBuf {
    let root = if suite.is_file() {
        suite.parent().and_then(Path::parent).unwrap_or(Path::new("."))
    } else if suite.file_name().is_some_and(|n| n == "tasks") {
        suite.parent().unwrap_or(Path::new("."))
    } else {
        suite
    };
    root.join("recipes.json")
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file: ConfigFile = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ConfigFile::default(),
        };
        let defaults = PlannerConfig::default();
        let suite_path = args.suite.clone().or(file.suite_path).context("missing --suite")?;
        if !suite_path.exists() {
            bail!("suite path {} does not exist", suite_path.display());
        }
        let out_path = args.out.clone().or(file.out_path).context("missing --out")?;
        let backend = args.backend.or(file.backend).unwrap_or(Backend::Scripted);
        let transport = args.transport.or(file.transport).unwrap_or(Transport::Replay);
        let cassette = args.cassette.clone().or(file.cassette);
        if backend == Backend::Llm && transport == Transport::Replay && cassette.is_none() {
            bail!("--backend llm with --transport replay needs --cassette");
        }
        let recipes = args.recipes.clone().or(file.recipes).unwrap_or_else(|| default_recipes(&suite_path));
        let cfg = RunConfig {
            backend,
            mode: args.mode.map(ContextMode::from).or(file.mode).unwrap_or(ContextMode::FullStep),
            transport,
            cassette,
            recipes,
            out_path,
            seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
            max_depth: args.max_depth.or(file.max_depth).unwrap_or(defaults.max_depth),
            max_replans_per_node: args
                .max_replans
                .or(file.max_replans_per_node)
                .unwrap_or(defaults.max_replans_per_node),
            max_total_steps: args.max_steps.or(file.max_total_steps).unwrap_or(defaults.max_total_steps),
            parallelism: args.parallelism.or(file.parallelism).unwrap_or(1),
            suite_path,
        };
        cfg.planner().validate()?;
        if cfg.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        Ok(cfg)
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            max_depth: self.max_depth,
            max_replans_per_node: self.max_replans_per_node,
            max_total_steps: self.max_total_steps,
            mode: self.mode,
            seed: self.seed,
            ..PlannerConfig::default()
        }
    }
}

type Backends = (Box<dyn DecompositionPolicy>, Box<dyn CongruenceJudge>, Option<(Arc<Cassette>, PathBuf)>);

fn build_backend(cfg: &RunConfig) -> Result<Backends> {
    match cfg.backend {
        Backend::Scripted => {
            let table = RecipeTable::load(&cfg.recipes)?;
            Ok((Box::new(ScriptedPolicy::new(table.clone())), Box::new(ScriptedJudge::new(table)), None))
        }
        Backend::Llm => {
            let mode = TransportMode::from(cfg.transport);
            let cassette = match (&cfg.cassette, mode) {
                (Some(p), TransportMode::Replay) => Arc::new(Cassette::load(p)?),
                (Some(p), TransportMode::Record) if p.exists() => Arc::new(Cassette::load(p)?),
                _ => Arc::new(Cassette::new()),
            };
            let endpoint = match mode {
                TransportMode::Replay => None,
                _ => Some(EndpointConfig { seed: cfg.seed, ..EndpointConfig::from_env()? }),
            };
            let client = Arc::new(LlmClient::new(mode, endpoint, cassette.clone())?);
            let save = match (mode, &cfg.cassette) {
                (TransportMode::Record, Some(p)) => Some((cassette, p.clone())),
                (TransportMode::Record, None) => bail!("--transport record needs --cassette"),
                _ => None,
            };
            Ok((Box::new(LlmPolicy::new(client.clone())), Box::new(LlmJudge::new(client)), save))
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub traces: Vec<EpisodeTrace>,
    pub result: SuiteResult,
}

pub fn method_name(mode: ContextMode) -> &'static str {
    match mode {
        ContextMode::FullStep => "STEP",
        ContextMode::NoTreeStructure => "STEP without tree structure",
        ContextMode::NoSubgoalTree => "STEP without subgoal tree",
        ContextMode::FlatBaseline => "Flat baseline",
    }
}

/// Runs the suite and writes `traces/<task>.jsonl` plus `report.{json,csv,md}` under the output path.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    let tasks = load_suite(&cfg.suite_path)?;
    let (policy, judge, save) = build_backend(cfg)?;
    let traces = step_core::eval::run_suite(&tasks, policy.as_ref(), judge.as_ref(), &cfg.planner(), cfg.parallelism)?;
    if let Some((cassette, path)) = save {
        cassette.save(&path)?;
    }
    let mut result = compute_metrics(&traces, &tasks)?;
    result.method = method_name(cfg.mode).to_string();
    let lengths: BTreeMap<String, usize> =
        oracle_lengths(&tasks).into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
    if lengths.len() == tasks.len() && tasks.len() >= 10 {
        attach_oracle_lengths(&mut result, &lengths)?;
    }

    let trace_dir = cfg.out_path.join("traces");
    fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
    for t in &traces {
        let p = trace_dir.join(format!("{}.jsonl", t.task_id));
        fs::write(&p, t.to_jsonl()).with_context(|| format!("writing {}", p.display()))?;
    }
    for (name, format) in
        [("report.json", ReportFormat::Json), ("report.csv", ReportFormat::Csv), ("report.md", ReportFormat::Markdown)]
    {
        let p = cfg.out_path.join(name);
        fs::write(&p, emit_report(&result, format)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(RunOutput { traces, result })
}

/// Plan text for `step oracle`, or `None` when no plan exists within `depth`.
pub fn cmd_oracle(task_path: &Path, depth: usize) -> Result<Option<String>> {
    let task = TaskSpec::load(task_path)?;
    Ok(oracle_search(&task, depth).map(|plan| {
        let mut s = String::new();
        for (i, a) in plan.iter().enumerate() {
            s.push_str(&format!("{}. {a}\n", i + 1));
        }
        s.push_str(&format!("length: {}\n", plan.len()));
        s
    }))
}

/// `success` or the error class name.
pub fn cmd_classify(trace_path: &Path, task_path: &Path) -> Result<String> {
    let text = fs::read_to_string(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = EpisodeTrace::from_jsonl(&text).with_context(|| format!("reading trace {}", trace_path.display()))?;
    let task = TaskSpec::load(task_path)?;
    Ok(classify_error(&trace, &task).map_or_else(|| "success".to_string(), |c| c.to_string()))
}

/// Cassette whose answers make the LLM backend replay the scripted one on `tasks`.
pub fn synthesize_cassette(tasks: &[TaskSpec], table: &RecipeTable, config: &PlannerConfig) -> Result<Arc<Cassette>> {
    let cassette = Arc::new(Cassette::new());
    let policy = ScribePolicy::new(ScriptedPolicy::new(table.clone()), cassette.clone());
    let judge = ScribeJudge::new(ScriptedJudge::new(table.clone()), cassette.clone());
    step_core::eval::run_suite(tasks, &policy, &judge, config, 1)?;
    Ok(cassette)
}

pub fn cmd_synth_cassette(suite: &Path, recipes: Option<&Path>, out: &Path) -> Result<usize> {
    let tasks = load_suite(suite)?;
    let table = RecipeTable::load(&recipes.map_or_else(|| default_recipes(suite), Path::to_path_buf))?;
    let cassette = synthesize_cassette(&tasks, &table, &PlannerConfig::default())?;
    cassette.save(out)?;
    Ok(cassette.len())
}
