//! Command-line surface.
//!
//! Exit codes: 0 success, 1 validation or analysis failure, 2 usage error,
//! 3 provider or transport failure. Results go to stdout, diagnostics to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_config, parse_config, validate_config, StudyConfig};
use crate::context::{generate_narrative, sample_profiles, EnvironmentConfig, ProfileDistribution};
use crate::engine::{run_study, RunOptions, StudyProviders};
use crate::error::{Error, Result};
use crate::evalpipe::{
    aggregate, load_original_findings, read_similarity_csv, score_docs, simulated_text,
    summarize_docs, write_similarity_csv, FindingsDoc, GroupBy, RQResult,
};
use crate::leakage::{
    builtin_cutoffs, continuation_probe, method1_test, method2_score, method2_test, strip_numerals,
    temporal_split, write_report, LeakageMethod, Method2Score, CONTINUATION_RUNS,
};
use crate::metrics::report::{analyze_run, write_table};
use crate::provider::{
    builtin_identities, ChatProvider, Embedder, HashEmbedder, HttpProvider, ProviderIdentity,
    RetryPolicy, ScriptedChat, WireLog,
};
use crate::trace::{self, load_run, write_json, Durability};

pub const RUNS_DIR_ENV: &str = "GIDEA_RUNS_DIR";
const HASH_EMBEDDER: &str = "hash";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "studysim",
    version,
    about = "Replicate interaction studies with simulated participants"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct ProviderArgs {
    /// Provider id (see --providers); live providers read their key from the environment.
    #[arg(long)]
    provider: Option<String>,
    /// JSON list of provider identities, merged over the built-in ones.
    #[arg(long)]
    providers: Option<PathBuf>,
    /// Use the deterministic scripted backend with this script file.
    #[arg(long)]
    scripted: Option<PathBuf>,
    /// Record live request/response bodies to wire.jsonl in the output directory.
    #[arg(long)]
    trace_wire: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a study config against its schema.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample avatar profiles and print them as JSON.
    Personas {
        #[arg(long)]
        distribution: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a narrative for each profile.
        #[arg(long)]
        narratives: bool,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Run a study and write its run directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 15)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        distribution: Option<PathBuf>,
        #[arg(long)]
        environment: Option<PathBuf>,
        /// Parent directory for runs. Defaults to $GIDEA_RUNS_DIR, then ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        assistant_provider: Option<String>,
        #[arg(long)]
        avatar_provider: Option<String>,
        /// fsync less often; faster but less crash-safe.
        #[arg(long)]
        no_sync: bool,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Summarize and revise original and simulated findings per research question.
    Summarize {
        #[arg(long)]
        run: PathBuf,
        /// Directory holding <study_id>/rq<k>.original.txt.
        #[arg(long)]
        findings: PathBuf,
        /// Output directory. Defaults to <run>/analysis.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Score summarized runs and print similarity means.
    Evaluate {
        /// Run directories already processed by `summarize`.
        #[arg(long)]
        run: Vec<PathBuf>,
        /// Existing similarity CSVs to include.
        #[arg(long)]
        results: Vec<PathBuf>,
        /// Embedder id, or `hash` for the built-in deterministic embedder.
        #[arg(long, default_value = "all-mpnet-base-v2")]
        embedder: String,
        /// Write the combined similarity.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Data-leakage tests for one model.
    Leakage {
        #[arg(long)]
        model: String,
        #[arg(long, value_enum, default_value_t = MethodArg::Temporal)]
        method: MethodArg,
        /// Directory of study configs, used for publication dates.
        #[arg(long)]
        studies: PathBuf,
        /// Knowledge cutoff; defaults to the model's built-in cutoff.
        #[arg(long)]
        cutoff: Option<NaiveDate>,
        /// JSON scores: study -> RQ scores (temporal) or study -> average (continuation),
        /// optionally nested under model ids.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Continuation only: directory of <study_id>.txt excerpts to probe live.
        #[arg(long)]
        excerpts: Option<PathBuf>,
        /// Continuation only: original findings directory, as for `summarize`.
        #[arg(long)]
        findings: Option<PathBuf>,
        #[arg(long, default_value = "hash")]
        embedder: String,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Behavioral metric tables for a run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Output directory. Defaults to <run>/analysis.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Temporal,
    Continuation,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Provider(_) => EXIT_PROVIDER,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

struct Io<'a> {
    out: &'a mut dyn Write,
}

impl Io<'_> {
    fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", text.as_ref());
    }
}

fn identities(args: &ProviderArgs) -> Result<Vec<ProviderIdentity>> {
    let mut ids = builtin_identities();
    if let Some(path) = &args.providers {
        let extra: Vec<ProviderIdentity> = trace::read_json(path)?;
        for id in extra {
            ids.retain(|x| x.id != id.id);
            ids.push(id);
        }
    }
    Ok(ids)
}

struct Providers {
    wire: WireLog,
    trace_wire: bool,
}

impl Providers {
    fn new(args: &ProviderArgs) -> Self {
        Self {
            wire: WireLog::new(),
            trace_wire: args.trace_wire,
        }
    }

    fn live(&self, args: &ProviderArgs, id: &str) -> std::result::Result<HttpProvider, Failure> {
        let identity = identities(args)?
            .into_iter()
            .find(|x| x.id == id)
            .ok_or_else(|| usage(format!("unknown provider `{id}`")))?;
        let p = HttpProvider::from_env(identity).map_err(Error::from)?;
        Ok(if self.trace_wire {
            p.with_wire_log(self.wire.clone())
        } else {
            p
        })
    }

    fn chat(
        &self,
        args: &ProviderArgs,
        id: Option<&str>,
    ) -> std::result::Result<Box<dyn ChatProvider>, Failure> {
        if let Some(path) = &args.scripted {
            return Ok(Box::new(ScriptedChat::from_file(path)?));
        }
        let id = id.or(args.provider.as_deref()).unwrap_or("gpt-4o");
        Ok(Box::new(self.live(args, id)?))
    }

    fn embedder(
        &self,
        args: &ProviderArgs,
        id: &str,
    ) -> std::result::Result<Box<dyn Embedder>, Failure> {
        if id == HASH_EMBEDDER {
            return Ok(Box::new(HashEmbedder::new()));
        }
        Ok(Box::new(self.live(args, id)?))
    }

    fn policy(&self, args: &ProviderArgs) -> RetryPolicy {
        if args.scripted.is_some() {
            RetryPolicy::immediate()
        } else {
            RetryPolicy::default()
        }
    }

    fn flush(&self, dir: &Path) -> Result<()> {
        let records = self.wire.records();
        if !self.trace_wire || records.is_empty() {
            return Ok(());
        }
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).expect("wire records serialize") + "\n")
            .collect();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trace::write_bytes(&dir.join("wire.jsonl"), text.as_bytes())
    }
}

fn cmd_validate(config: &Path, io: &mut Io) -> CmdResult {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let (id, violations) = match serde_json::from_str::<StudyConfig>(&text) {
        Ok(cfg) => (cfg.study_id.clone(), validate_config(&cfg)),
        Err(_) => {
            // Fall back to the parser's own diagnosis for syntax and type errors.
            let e = parse_config(&text).expect_err("raw parse failed");
            io.line(e.to_string());
            return Ok(EXIT_FAILURE);
        }
    };
    for v in &violations {
        io.line(format!("{}: {}", v.field, v.rule));
    }
    if violations.is_empty() {
        io.line(format!("{id}: ok"));
        return Ok(EXIT_OK);
    }
    Ok(EXIT_FAILURE)
}

fn distribution(path: Option<&Path>) -> Result<ProfileDistribution> {
    match path {
        Some(p) => ProfileDistribution::load(p),
        None => Ok(ProfileDistribution::adult_residents()),
    }
}

fn cmd_personas(
    dist: Option<&Path>,
    subjects: usize,
    seed: u64,
    narratives: bool,
    args: &ProviderArgs,
    io: &mut Io,
) -> CmdResult {
    let mut profiles = sample_profiles(&distribution(dist)?, subjects, seed)?;
    if narratives {
        let providers = Providers::new(args);
        let chat = providers.chat(args, None)?;
        let policy = providers.policy(args);
        for p in &mut profiles {
            p.narrative = generate_narrative(p, chat.as_ref(), &policy)?.text;
        }
    }
    io.line(serde_json::to_string_pretty(&profiles).expect("profiles serialize"));
    Ok(EXIT_OK)
}

fn runs_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: &Path,
    subjects: usize,
    seed: u64,
    dist: Option<&Path>,
    environment: Option<&Path>,
    out: Option<PathBuf>,
    jobs: usize,
    assistant_id: Option<&str>,
    avatar_id: Option<&str>,
    no_sync: bool,
    args: &ProviderArgs,
    io: &mut Io,
) -> CmdResult {
    let study = load_config(config)?;
    let env = match environment {
        Some(p) => EnvironmentConfig::load(p)?,
        None => EnvironmentConfig::one_bedroom(),
    };
    let profiles = sample_profiles(&distribution(dist)?, subjects, seed)?;
    let providers = Providers::new(args);
    let assistant = providers.chat(args, assistant_id)?;
    // A scripted backend is shared so one script can serve both roles.
    let avatar_owned;
    let avatar: &dyn ChatProvider = if args.scripted.is_some() {
        assistant.as_ref()
    } else {
        avatar_owned = providers.chat(args, avatar_id)?;
        avatar_owned.as_ref()
    };
    let mut opts = RunOptions::new(runs_root(out), seed);
    opts.jobs = jobs.max(1);
    if no_sync {
        opts.durability = Durability::Flush;
    }
    let outcome = run_study(
        &study,
        &profiles,
        &env,
        &StudyProviders {
            assistant: assistant.as_ref(),
            avatar,
        },
        &opts,
    )?;
    providers.flush(&outcome.dir)?;
    for (status, n) in outcome.manifest.status_counts() {
        eprintln!("{n} subject(s) {status:?}");
    }
    for s in outcome
        .subjects
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| (&s.profile.subject_id, e)))
    {
        eprintln!("subject {}: {}", s.0, s.1);
    }
    io.line(&outcome.manifest.run_id);
    Ok(if outcome.all_failed_on_provider() {
        EXIT_PROVIDER
    } else {
        EXIT_OK
    })
}

fn run_study_config(run: &trace::LoadedRun) -> Result<StudyConfig> {
    parse_config(&run.config_text)
}

fn cmd_summarize(
    run_dir: &Path,
    findings: &Path,
    out: Option<PathBuf>,
    jobs: usize,
    args: &ProviderArgs,
    io: &mut Io,
) -> CmdResult {
    let run = load_run(run_dir)?;
    let study = run_study_config(&run)?;
    let originals = load_original_findings(findings, &study)?;
    let simulated = simulated_text(&run)?;
    let providers = Providers::new(args);
    let chat = providers.chat(args, None)?;
    let docs = summarize_docs(
        &study,
        &originals,
        &simulated,
        chat.as_ref(),
        &providers.policy(args),
        jobs,
    )?;
    let out = out.unwrap_or_else(|| run_dir.join("analysis"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("findings.json");
    write_json(&path, &docs)?;
    providers.flush(&out)?;
    io.line(path.display().to_string());
    Ok(EXIT_OK)
}

/// Digest of similarity means: overall, then per study, theme and mode.
pub fn similarity_digest(results: &[RQResult]) -> Vec<String> {
    let mut lines = vec![format!(
        "overall mean: {:.2}",
        aggregate(results, GroupBy::All)["all"]
    )];
    for g in [GroupBy::Study, GroupBy::Theme, GroupBy::Mode] {
        for (k, v) in aggregate(results, g) {
            lines.push(format!("{g} {k}: {v:.2}"));
        }
    }
    lines
}

fn cmd_evaluate(
    runs: &[PathBuf],
    csvs: &[PathBuf],
    embedder_id: &str,
    out: Option<&Path>,
    args: &ProviderArgs,
    io: &mut Io,
) -> CmdResult {
    if runs.is_empty() && csvs.is_empty() {
        return Err(usage("evaluate needs at least one --run or --results"));
    }
    let mut results = Vec::new();
    for path in csvs {
        results.extend(read_similarity_csv(path)?);
    }
    if !runs.is_empty() {
        let providers = Providers::new(args);
        let embedder = providers.embedder(args, embedder_id)?;
        for dir in runs {
            let run = load_run(dir)?;
            let study = run_study_config(&run)?;
            let docs: Vec<FindingsDoc> =
                trace::read_json(&dir.join("analysis").join("findings.json"))?;
            let scored = score_docs(&study, &docs, embedder.as_ref(), &providers.policy(args))?;
            write_similarity_csv(&dir.join("analysis").join("similarity.csv"), &scored)?;
            results.extend(scored);
        }
        if let Some(dir) = out {
            providers.flush(dir)?;
        }
    }
    if results.is_empty() {
        return Err(Error::Precondition("no similarity results to evaluate".into()).into());
    }
    if let Some(dir) = out {
        write_similarity_csv(&dir.join("similarity.csv"), &results)?;
    }
    for line in similarity_digest(&results) {
        io.line(line);
    }
    Ok(EXIT_OK)
}

fn study_dates(dir: &Path) -> Result<Vec<(String, NaiveDate)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let cfg = load_config(&p)?;
        out.push((cfg.study_id, cfg.publication_date));
    }
    Ok(out)
}

/// Reads `study -> T`, or `model -> study -> T` when keyed by model id.
fn scores_for<T: serde::de::DeserializeOwned>(
    path: &Path,
    model: &str,
) -> Result<BTreeMap<String, T>> {
    let value: serde_json::Value = trace::read_json(path)?;
    let inner = match value.get(model) {
        Some(v) if v.is_object() => v.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_leakage(
    model: &str,
    method: MethodArg,
    studies: &Path,
    cutoff: Option<NaiveDate>,
    scores: Option<&Path>,
    excerpts: Option<&Path>,
    findings: Option<&Path>,
    embedder_id: &str,
    out: &Path,
    args: &ProviderArgs,
    io: &mut Io,
) -> CmdResult {
    let cutoff = match cutoff {
        Some(c) => c,
        None => builtin_cutoffs()
            .into_iter()
            .find(|c| c.model_id == model)
            .map(|c| c.knowledge_cutoff)
            .ok_or_else(|| usage(format!("no known cutoff for `{model}`; pass --cutoff")))?,
    };
    let dates = study_dates(studies)?;
    let split = temporal_split(&dates, cutoff);
    let (report, table) = match method {
        MethodArg::Temporal => {
            let path = scores.ok_or_else(|| usage("the temporal method needs --scores"))?;
            let s: BTreeMap<String, Vec<f64>> = scores_for(path, model)?;
            (method1_test(model, &s, &split)?, s)
        }
        MethodArg::Continuation => {
            let s: BTreeMap<String, Method2Score> = match (scores, excerpts) {
                (Some(path), _) => scores_for::<f64>(path, model)?
                    .into_iter()
                    .map(|(k, v)| (k, Method2Score::from_average(v)))
                    .collect(),
                (None, Some(dir)) => {
                    let findings =
                        findings.ok_or_else(|| usage("live continuation needs --findings"))?;
                    let providers = Providers::new(args);
                    let chat = providers.chat(args, Some(model))?;
                    let embedder = providers.embedder(args, embedder_id)?;
                    let policy = providers.policy(args);
                    let mut s = BTreeMap::new();
                    for (id, _) in &dates {
                        let path = dir.join(format!("{id}.txt"));
                        let excerpt =
                            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                        let cfg_rqs = std::fs::read_dir(findings.join(id))
                            .map_err(|e| Error::io(findings.join(id), e))?
                            .filter_map(|e| e.ok().map(|e| e.path()))
                            .filter(|p| p.to_string_lossy().ends_with(".original.txt"))
                            .collect::<Vec<_>>();
                        let mut original = String::new();
                        let mut sorted = cfg_rqs;
                        sorted.sort();
                        for p in sorted {
                            original.push_str(
                                &std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?,
                            );
                            original.push('\n');
                        }
                        let runs = continuation_probe(
                            &strip_numerals(&excerpt),
                            id,
                            chat.as_ref(),
                            CONTINUATION_RUNS,
                            &policy,
                        )?;
                        s.insert(
                            id.clone(),
                            method2_score(&runs, &original, embedder.as_ref(), &policy)?,
                        );
                    }
                    providers.flush(out)?;
                    s
                }
                (None, None) => {
                    return Err(usage(
                        "the continuation method needs --scores or --excerpts",
                    ))
                }
            };
            let table = s
                .iter()
                .map(|(k, v)| (k.clone(), vec![v.average]))
                .collect();
            (method2_test(model, &s, &split)?, table)
        }
    };
    write_report(out, &report, &table)?;
    let method = match report.method {
        LeakageMethod::Temporal => "temporal",
        LeakageMethod::Continuation => "continuation",
    };
    io.line(format!(
        "{model} {method}: exposed mean {:.3} (n={}), controlled mean {:.3} (n={}), t = {:.3}, df = {:.2}, p = {:.2}",
        report.exposed_mean,
        report.exposed.len(),
        report.controlled_mean,
        report.controlled.len(),
        report.t_test.t_statistic,
        report.t_test.degrees_of_freedom,
        report.t_test.p_value
    ));
    for (id, score) in &report.verbatim_flags {
        io.line(format!("verbatim flag: {id} {score:.2}"));
    }
    Ok(EXIT_OK)
}

fn cmd_report(run_dir: &Path, out: Option<PathBuf>, io: &mut Io) -> CmdResult {
    let run = load_run(run_dir)?;
    let study = run_study_config(&run)?;
    let out = out.unwrap_or_else(|| run_dir.join("analysis"));
    for table in analyze_run(&run, &study)? {
        let path = write_table(&out, &table)?;
        io.line(format!("{} ({} rows)", path.display(), table.rows.len()));
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli, io: &mut Io) -> CmdResult {
    match cli.command {
        Command::Validate { config } => cmd_validate(&config, io),
        Command::Personas {
            distribution,
            subjects,
            seed,
            narratives,
            provider,
        } => cmd_personas(
            distribution.as_deref(),
            subjects,
            seed,
            narratives,
            &provider,
            io,
        ),
        Command::Simulate {
            config,
            subjects,
            seed,
            distribution,
            environment,
            out,
            jobs,
            assistant_provider,
            avatar_provider,
            no_sync,
            provider,
        } => cmd_simulate(
            &config,
            subjects,
            seed,
            distribution.as_deref(),
            environment.as_deref(),
            out,
            jobs,
            assistant_provider.as_deref(),
            avatar_provider.as_deref(),
            no_sync,
            &provider,
            io,
        ),
        Command::Summarize {
            run,
            findings,
            out,
            jobs,
            provider,
        } => cmd_summarize(&run, &findings, out, jobs, &provider, io),
        Command::Evaluate {
            run,
            results,
            embedder,
            out,
            provider,
        } => cmd_evaluate(&run, &results, &embedder, out.as_deref(), &provider, io),
        Command::Leakage {
            model,
            method,
            studies,
            cutoff,
            scores,
            excerpts,
            findings,
            embedder,
            out,
            provider,
        } => cmd_leakage(
            &model,
            method,
            &studies,
            cutoff,
            scores.as_deref(),
            excerpts.as_deref(),
            findings.as_deref(),
            &embedder,
            &out,
            &provider,
            io,
        ),
        Command::Report { run, out } => cmd_report(&run, out, io),
    }
}

/// Runs the CLI on `args` (program name first), writing results to `out`
/// and diagnostics to stderr. Returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut io = Io { out };
    match dispatch(cli, &mut io) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(std::env::args_os(), &mut lock)
}
