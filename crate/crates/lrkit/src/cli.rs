//! Command-line surface: argument definitions and one function per command.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lrkit_core::fit::{fit_power_law, PowerLawOptions};
use lrkit_core::ingest::{ModelShape, RunRecord};
use lrkit_core::lawfit::{LossSource, ParamCount, Units};
use lrkit_core::micro::{
    coord_check_width, growth_ratio, step_stability_probe, summarize, train, MarkovTask, Net,
    NetConfig, Parametrization, Probe, TrainOptions,
};
use lrkit_core::modsearch::{
    assemble_table, init_plan, uniform_grids, ModuleGroup, SearchPlan, DEFAULT_D_BUDGET,
};
use lrkit_core::mutransfer::{compose_plans, make_transfer_plan, BaseHParams, Variant};
use lrkit_core::oracle::{gen_runs, synthetic_shape, SurfaceSpec, SweepDesign};
use rayon::prelude::*;

use crate::artifact::{self, Kind, Record, Written};
use crate::error::UsageError;
use crate::records::*;
use crate::render::{render_artifact, render_runs};
use crate::report::Report;
use crate::runs::{parse_runs, to_jsonl};
use crate::shapes::resolve_shape;
use crate::units::{parse_count, parse_count_grid, parse_pair, parse_range, parse_real_list};
use crate::workspace::{UnitName, Workspace, ENV_VAR};
use crate::{muptable, report};

#[derive(Debug, Parser)]
#[command(
    name = "lrkit",
    version,
    about = "Learning-rate scaling laws, transfer plans and training diagnostics"
)]
pub struct Cli {
    /// Workspace root holding runs.jsonl and artifacts/.
    #[arg(long, global = true, env = ENV_VAR, default_value = ".")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate run records and append them to the run store.
    Ingest(IngestArgs),
    /// Fit L(D) = L0 + A*D^-gamma to one run.
    FitLd(FitLdArgs),
    /// Fit loss against ln(lr) for one (model, D) cell or explicit points.
    FitQuad(FitQuadArgs),
    /// Fit the joint law eta*(N, D) = C*N^-alpha*D^-beta from LR sweeps.
    FitLaw(FitLawArgs),
    /// Print the optimal LR a fitted law predicts.
    Predict(PredictArgs),
    /// Plan, record and tabulate the greedy module-level LR search.
    PlanModsearch(PlanModsearchArgs),
    /// Build a muP / Complete-P transfer plan between two shapes.
    PlanMup(PlanMupArgs),
    /// Generate run records from a synthetic loss surface.
    Simulate(SimulateArgs),
    /// Train the micro network and record a trace.
    TrainMicro(TrainMicroArgs),
    /// Coordinate check across widths.
    Coordcheck(CoordcheckArgs),
    /// Render CSV/SVG reports from an artifact or the run store.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL file, or `-` for stdin.
    #[arg(long, default_value = "-")]
    pub input: String,
    /// Print the validated runs as JSONL on stdout (the default when
    /// stdout is piped).
    #[arg(long)]
    pub echo: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Smoothed,
    Raw,
}

impl From<SourceArg> for LossSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Smoothed => LossSource::Smoothed,
            SourceArg::Raw => LossSource::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ParamCountArg {
    Total,
    Active,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnitsArg {
    Raw,
    Billions,
}

impl From<UnitsArg> for UnitName {
    fn from(u: UnitsArg) -> Self {
        match u {
            UnitsArg::Raw => UnitName::Raw,
            UnitsArg::Billions => UnitName::Billions,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitLdArgs {
    /// Run to fit; optional when the input holds exactly one run.
    #[arg(long)]
    pub run: Option<String>,
    /// Read runs from this JSONL file (`-` for stdin) instead of the store.
    #[arg(long)]
    pub input: Option<String>,
    /// Ignore samples below this many tokens.
    #[arg(long, value_parser = parse_count)]
    pub min_tokens: Option<u64>,
    /// Resample the fitted curve every INTERVAL tokens over --range.
    #[arg(long, value_parser = parse_count, requires = "range")]
    pub resample: Option<u64>,
    #[arg(long, value_parser = parse_range)]
    pub range: Option<(u64, u64)>,
    /// Refuse to resample outside the fitted range or from a low-trust fit.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct FitQuadArgs {
    /// An `lr:loss` point; repeat for each point.
    #[arg(long = "point", value_parser = parse_pair, conflicts_with_all = ["model", "d"])]
    pub points: Vec<(f64, f64)>,
    #[arg(long, requires = "d")]
    pub model: Option<String>,
    #[arg(long, value_parser = parse_count, requires = "model")]
    pub d: Option<u64>,
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, value_enum, default_value = "smoothed")]
    pub source: SourceArg,
    #[arg(long, value_parser = parse_count)]
    pub min_tokens: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitLawArgs {
    /// Read runs from this JSONL file (`-` for stdin) instead of the store.
    #[arg(long)]
    pub input: Option<String>,
    /// Token grid `LO:HI:STEP` or a comma list.
    #[arg(long, value_parser = parse_count_grid)]
    pub d_grid: Option<::std::vec::Vec<u64>>,
    #[arg(long, value_enum, default_value = "smoothed")]
    pub source: SourceArg,
    #[arg(long, value_enum, default_value = "total")]
    pub param_count: ParamCountArg,
    #[arg(long, value_enum)]
    pub units: Option<UnitsArg>,
    #[arg(long, value_parser = parse_count)]
    pub min_tokens: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Law artifact path or `lr_law-<digest>` name.
    #[arg(long)]
    pub law: PathBuf,
    #[arg(long, value_parser = parse_count)]
    pub n: u64,
    #[arg(long, value_parser = parse_count)]
    pub d: u64,
    /// Also print eta*(n, d) / eta*(vs-n, vs-d).
    #[arg(long, value_parser = parse_count, requires = "vs_d")]
    pub vs_n: Option<u64>,
    #[arg(long, value_parser = parse_count, requires = "vs_n")]
    pub vs_d: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlanModsearchArgs {
    #[command(subcommand)]
    pub action: ModsearchAction,
}

#[derive(Debug, Subcommand)]
pub enum ModsearchAction {
    /// Start a plan with every group at the global optimum.
    Init(ModsearchInit),
    /// Record the current stage's results and advance.
    Record(ModsearchRecord),
    /// Assemble completed plans into a table.
    Table(ModsearchTable),
}

#[derive(Debug, Args)]
pub struct ModsearchInit {
    /// Shape file or preset name.
    #[arg(long)]
    pub shape: String,
    #[arg(long, required_unless_present = "law")]
    pub global_lr: Option<f64>,
    /// Take the global LR from a law at (total params, d-budget).
    #[arg(long, conflicts_with = "global_lr")]
    pub law: Option<PathBuf>,
    /// LR grid shared by every stage (comma list).
    #[arg(long, value_parser = parse_real_list)]
    pub grid: Option<::std::vec::Vec<f64>>,
    #[arg(long, value_parser = parse_count, default_value_t = DEFAULT_D_BUDGET)]
    pub d_budget: u64,
    /// Stage order as four comma-separated groups.
    #[arg(long)]
    pub order: Option<String>,
    /// Loss of the all-global configuration at the budget.
    #[arg(long)]
    pub global_loss: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModsearchRecord {
    #[arg(long)]
    pub plan: PathBuf,
    /// An `lr:loss` point of the current stage; repeat for each point.
    #[arg(long = "point", value_parser = parse_pair, required_unless_present = "from_runs")]
    pub points: Vec<(f64, f64)>,
    /// Read the stage's losses from runs matching the planned configs.
    #[arg(long, conflicts_with = "points")]
    pub from_runs: bool,
    #[arg(long, requires = "from_runs")]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModsearchTable {
    /// Completed plan artifacts.
    #[arg(long = "plan", required = true)]
    pub plans: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Mup,
    CompleteP,
}

#[derive(Debug, Args)]
pub struct PlanMupArgs {
    /// Proxy shape file or preset name.
    #[arg(long)]
    pub proxy: String,
    #[arg(long)]
    pub target: String,
    /// Proxy and target token horizons as `P:T`.
    #[arg(long, value_parser = parse_range)]
    pub tokens: (u64, u64),
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "complete-p")]
    pub variant: VariantArg,
    /// Base hyperparameters `eta,sigma,eps,lambda` tuned on the proxy.
    #[arg(long, value_parser = parse_real_list)]
    pub base: Option<::std::vec::Vec<f64>>,
    /// Chain after this existing plan (its target must be this proxy).
    #[arg(long)]
    pub compose: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DesignArg {
    /// Four model sizes, seven LRs, D from 80B to 220B every 10B.
    #[value(name = "reference", alias = "s4.2")]
    Reference,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Plant the reference law constants (the default surface).
    #[arg(long, alias = "paper-constants", conflicts_with = "spec")]
    pub reference_constants: bool,
    /// Surface spec JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "reference")]
    pub design: DesignArg,
    /// Model sizes replacing the design's shapes (comma list of counts).
    #[arg(long, value_parser = parse_count_grid)]
    pub n: Option<::std::vec::Vec<u64>>,
    #[arg(long, value_parser = parse_count_grid)]
    pub d_grid: Option<::std::vec::Vec<u64>>,
    #[arg(long, value_parser = parse_real_list)]
    pub lr_grid: Option<::std::vec::Vec<f64>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ParamArg {
    Sp,
    MupComplete,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// 0 for a dense MLP, 2 for a two-expert MoE.
    #[arg(long, default_value_t = 2)]
    pub moe_experts: usize,
    #[arg(long, value_enum, default_value = "sp")]
    pub parametrization: ParamArg,
    /// QK-Norm on (default).
    #[arg(long = "qk-norm", overrides_with = "no_qk_norm")]
    pub qk_norm: bool,
    #[arg(long = "no-qk-norm")]
    pub no_qk_norm: bool,
    /// Peak LR of every group.
    #[arg(long, default_value_t = lrkit_core::micro::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    /// Warmup steps; defaults to a tenth of --steps.
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Markov-chain sharpness of the synthetic task.
    #[arg(long, default_value_t = 2.0)]
    pub sharpness: f64,
    /// Sequences in the fixed coordinate-check probe batch.
    #[arg(long, default_value_t = 8)]
    pub probe_seqs: usize,
    /// Bypass QK-Norm when measuring attention logits.
    #[arg(long)]
    pub ablate_qk_norm: bool,
}

impl NetArgs {
    fn config(&self, width: usize) -> NetConfig {
        NetConfig::uniform(
            width, self.depth, self.heads, self.vocab, self.lr, self.seed,
        )
        .with_moe(self.moe_experts)
        .with_qk_norm(!self.no_qk_norm)
        .with_parametrization(match self.parametrization {
            ParamArg::Sp => Parametrization::Sp,
            ParamArg::MupComplete => Parametrization::MupComplete,
        })
    }

    fn task(&self) -> MarkovTask {
        MarkovTask {
            vocab: self.vocab,
            sharpness: self.sharpness,
            seed: self.seed,
            ..MarkovTask::default()
        }
    }

    fn options(&self, checkpoints: Vec<u64>, task: &MarkovTask) -> TrainOptions {
        TrainOptions::new(self.steps, self.warmup.unwrap_or(self.steps / 10))
            .with_checkpoints(checkpoints)
            .with_probe(Probe::new(task, self.probe_seqs, self.ablate_qk_norm))
    }
}

#[derive(Debug, Args)]
pub struct TrainMicroArgs {
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[command(flatten)]
    pub net: NetArgs,
    /// Checkpoint steps (comma list); defaults to every tenth of --steps.
    #[arg(long, value_parser = parse_count_grid)]
    pub checkpoints: Option<::std::vec::Vec<u64>>,
    /// Transfer plan whose ratios and multipliers scale this config.
    #[arg(long)]
    pub plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoordcheckArgs {
    #[arg(long, value_parser = parse_count_grid, default_value = "32,64,128,256")]
    pub widths: ::std::vec::Vec<u64>,
    #[command(flatten)]
    pub net: NetArgs,
    /// Also record drift against step count at the smallest width.
    #[arg(long)]
    pub step_series: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Artifact path or `<kind>-<digest>` name; omit for the run store.
    pub artifact: Option<PathBuf>,
    /// Write every table (CSV) and plot (SVG) into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Table printed to stdout when --out is absent.
    #[arg(long)]
    pub table: Option<String>,
}

/// Standard streams, injectable for tests.
pub struct Io<'a> {
    pub stdin: &'a mut dyn Read,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
    /// stdin is a pipe or file rather than a terminal.
    pub stdin_piped: bool,
    /// stdout is a pipe or file rather than a terminal.
    pub stdout_piped: bool,
}

pub fn run(cli: Cli, io: &mut Io) -> Result<()> {
    let root = cli.workspace;
    match cli.command {
        Command::Ingest(a) => ingest(&root, a, io),
        Command::FitLd(a) => fit_ld(&root, a, io),
        Command::FitQuad(a) => fit_quad(&root, a, io),
        Command::FitLaw(a) => fit_law(&root, a, io),
        Command::Predict(a) => predict(&root, a, io),
        Command::PlanModsearch(a) => plan_modsearch(&root, a, io),
        Command::PlanMup(a) => plan_mup(&root, a, io),
        Command::Simulate(a) => simulate(&root, a, io),
        Command::TrainMicro(a) => train_micro(&root, a, io),
        Command::Coordcheck(a) => coordcheck(&root, a, io),
        Command::Report(a) => report_cmd(&root, a, io),
    }
}

fn read_input(input: &str, stdin: &mut dyn Read) -> Result<String> {
    let mut text = String::new();
    if input == "-" {
        stdin.read_to_string(&mut text).context("reading stdin")?;
    } else {
        text = fs::read_to_string(input).with_context(|| format!("reading {input}"))?;
    }
    Ok(text)
}

/// Runs from `--input`, else from piped stdin if it is non-empty, else
/// from the store.
fn load_runs(ws: &Workspace, input: Option<&str>, io: &mut Io) -> Result<Vec<RunRecord>> {
    match input {
        Some(i) => Ok(parse_runs(&read_input(i, io.stdin)?)?),
        None if io.stdin_piped => {
            let text = read_input("-", io.stdin)?;
            if text.trim().is_empty() {
                Ok(ws.runs().load()?)
            } else {
                Ok(parse_runs(&text)?)
            }
        }
        None => Ok(ws.runs().load()?),
    }
}

fn announce(io: &mut Io, w: &Written, to_stdout: bool) -> Result<()> {
    let line = w.path.display().to_string();
    if to_stdout {
        writeln!(io.stdout, "{line}")?;
    }
    writeln!(
        io.stderr,
        "{} {line}",
        if w.cached { "unchanged" } else { "wrote" }
    )?;
    Ok(())
}

fn load_record<T: serde::de::DeserializeOwned>(
    ws: &Workspace,
    reference: &Path,
    kind: Kind,
) -> Result<T> {
    let path = ws.resolve(reference);
    Ok(artifact::load(&path, kind)?)
}

fn write_reports(ws: &Workspace, w: &Written, report: &Report) -> Result<Vec<PathBuf>> {
    let stem = w
        .path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report")
        .to_string();
    Ok(report.write(&ws.artifact_dir("reports"), &stem)?)
}

fn power_law_options(ws: &Workspace, min_tokens: Option<u64>) -> PowerLawOptions {
    PowerLawOptions {
        min_tokens: min_tokens.unwrap_or(ws.config.min_tokens),
        gamma_floor: ws.config.gamma_floor,
        ..PowerLawOptions::default()
    }
}

fn ingest(root: &Path, a: IngestArgs, io: &mut Io) -> Result<()> {
    let runs = parse_runs(&read_input(&a.input, io.stdin)?)?;
    let ws = Workspace::init(root)?;
    let summary = ws.runs().append(&runs)?;
    let w = ws.write(&Record::new(Kind::Ingest, &IngestRecord::of(&runs)))?;
    let echo = a.echo || io.stdout_piped;
    if echo {
        io.stdout.write_all(to_jsonl(&runs).as_bytes())?;
    }
    announce(io, &w, !echo)?;
    writeln!(
        io.stderr,
        "ingested {} runs: {} new, {} already stored",
        runs.len(),
        summary.added,
        summary.unchanged
    )?;
    Ok(())
}

fn fit_ld(root: &Path, a: FitLdArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let runs = load_runs(&ws, a.input.as_deref(), io)?;
    let run = match &a.run {
        Some(id) => runs
            .iter()
            .find(|r| &r.run_id == id)
            .ok_or_else(|| UsageError(format!("no run `{id}`")))?,
        None if runs.len() == 1 => &runs[0],
        None => bail!(UsageError(format!(
            "{} runs available; choose one with --run",
            runs.len()
        ))),
    };
    let mut rec = PowerLawRecord::fit(run, &power_law_options(&ws, a.min_tokens))
        .with_context(|| format!("fitting run {}", run.run_id))?;
    if let (Some(interval), Some((lo, hi))) = (a.resample, a.range) {
        rec = rec.with_resampled(interval, lo, hi, a.strict)?;
    }
    let ws = Workspace::init(root)?;
    let w = ws.write(&Record::new(Kind::PowerLaw, &rec))?;
    announce(io, &w, true)?;
    writeln!(
        io.stderr,
        "L0={} A={} gamma={} r2={}{}",
        rec.params.l0,
        rec.params.a,
        rec.params.gamma,
        rec.r2,
        if rec.low_trust { " (low trust)" } else { "" }
    )?;
    Ok(())
}

fn fit_quad(root: &Path, a: FitQuadArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let rec = match (&a.model, a.d) {
        (Some(model), Some(d)) => {
            let runs = load_runs(&ws, a.input.as_deref(), io)?;
            let pts = cell_points(
                &runs,
                model,
                d,
                a.source.into(),
                &power_law_options(&ws, a.min_tokens),
            )
            .with_context(|| format!("collecting losses of {model} at {d} tokens"))?;
            QuadLogRecord::fit(pts, Some(model.clone()), Some(d))?
        }
        _ if !a.points.is_empty() => QuadLogRecord::fit(a.points.clone(), None, None)?,
        _ => bail!(UsageError(
            "give --point lr:loss values or --model with --d".into()
        )),
    };
    let ws = Workspace::init(root)?;
    let w = ws.write(&Record::new(Kind::QuadLog, &rec))?;
    announce(io, &w, true)?;
    writeln!(io.stderr, "eta*={} r2={}", rec.eta_star, rec.r2)?;
    Ok(())
}

fn fit_law(root: &Path, a: FitLawArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let runs = load_runs(&ws, a.input.as_deref(), io)?;
    let mut p = LawPipeline::new(a.d_grid.unwrap_or_else(|| ws.config.d_grid.clone()));
    p.collect.source = a.source.into();
    p.collect.param_count = match a.param_count {
        ParamCountArg::Total => ParamCount::Total,
        ParamCountArg::Active => ParamCount::Active,
    };
    p.collect.power_law = power_law_options(&ws, a.min_tokens);
    p.units = a
        .units
        .map(UnitName::from)
        .unwrap_or(ws.config.units)
        .units();
    let rec = p.run(&runs).context("fitting the LR law")?;
    let ws = Workspace::init(root)?;
    let w = ws.write(&Record::new(Kind::LrLaw, &rec))?;
    announce(io, &w, true)?;
    writeln!(
        io.stderr,
        "C_eta={} alpha_N={} beta_D={} r2={} ({} cells, {} failed)",
        rec.c_eta,
        rec.alpha_n,
        rec.beta_d,
        rec.r2,
        rec.n_points,
        rec.failures.len()
    )?;
    Ok(())
}

fn predict(root: &Path, a: PredictArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let rec: LrLawRecord = load_record(&ws, &a.law, Kind::LrLaw)?;
    let law = rec.to_law();
    let Units { n_scale, d_scale } = law.units;
    let eta = law.predict(a.n as f64 / n_scale, a.d as f64 / d_scale);
    writeln!(io.stdout, "{eta}")?;
    if let (Some(n2), Some(d2)) = (a.vs_n, a.vs_d) {
        writeln!(
            io.stdout,
            "{}",
            law.ratio(a.n as f64, n2 as f64, a.d as f64, d2 as f64)
        )?;
    }
    Ok(())
}

fn parse_order(s: &str) -> Result<Vec<ModuleGroup>> {
    s.split(',')
        .map(|k| {
            ModuleGroup::from_key(k.trim())
                .ok_or_else(|| UsageError(format!("unknown module group `{k}`")).into())
        })
        .collect()
}

fn plan_modsearch(root: &Path, a: PlanModsearchArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let (kind, record) = match a.action {
        ModsearchAction::Init(i) => {
            let shape = resolve_shape(&i.shape)?;
            let global_lr = match (i.global_lr, &i.law) {
                (Some(lr), _) => lr,
                (None, Some(law)) => {
                    let rec: LrLawRecord = load_record(&ws, law, Kind::LrLaw)?;
                    let l = rec.to_law();
                    l.predict(
                        shape.total_params as f64 / l.units.n_scale,
                        i.d_budget as f64 / l.units.d_scale,
                    )
                }
                (None, None) => bail!(UsageError("give --global-lr or --law".into())),
            };
            let grid = i.grid.unwrap_or_else(|| ws.config.lr_grid.clone());
            let mut plan = init_plan(shape, global_lr, uniform_grids(&grid), i.d_budget)?;
            if let Some(order) = &i.order {
                plan = plan.with_stage_order(&parse_order(order)?)?;
            }
            if let Some(l) = i.global_loss {
                plan = plan.with_global_loss(l);
            }
            (
                Kind::SearchPlan,
                Record::new(Kind::SearchPlan, &SearchPlanRecord::of(plan)),
            )
        }
        ModsearchAction::Record(r) => {
            let rec: SearchPlanRecord = load_record(&ws, &r.plan, Kind::SearchPlan)?;
            let mut plan = rec.plan;
            let points = if r.from_runs {
                let runs = load_runs(&ws, r.input.as_deref(), io)?;
                stage_points_from_runs(&plan, &runs, &power_law_options(&ws, None))?
            } else {
                r.points
            };
            plan.record_stage(&points)?;
            (
                Kind::SearchPlan,
                Record::new(Kind::SearchPlan, &SearchPlanRecord::of(plan)),
            )
        }
        ModsearchAction::Table(t) => {
            let plans = t
                .plans
                .iter()
                .map(|p| load_record::<SearchPlanRecord>(&ws, p, Kind::SearchPlan).map(|r| r.plan))
                .collect::<Result<Vec<SearchPlan>>>()?;
            let table = assemble_table(&plans)?;
            (
                Kind::ModuleLrTable,
                Record::new(Kind::ModuleLrTable, &ModuleTableRecord { table }),
            )
        }
    };
    let ws = Workspace::init(root)?;
    let w = ws.write(&record)?;
    announce(io, &w, true)?;
    if kind == Kind::ModuleLrTable {
        for p in write_reports(&ws, &w, &render_artifact(kind.name(), &record.value)?)? {
            writeln!(io.stderr, "report {}", p.display())?;
        }
    }
    Ok(())
}

/// Loss at the budget for each planned config, from matching runs.
fn stage_points_from_runs(
    plan: &SearchPlan,
    runs: &[RunRecord],
    opts: &PowerLawOptions,
) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for cfg in plan.next_stage_configs()? {
        let run = runs
            .iter()
            .find(|r| {
                r.model.name == plan.shape.name && r.module_lrs.as_ref() == Some(&cfg.module_lrs)
            })
            .ok_or_else(|| {
                UsageError(format!(
                    "no run for {} at {} lr {}",
                    plan.shape.name,
                    cfg.group.key(),
                    cfg.lr
                ))
            })?;
        let loss = match run.samples.iter().find(|s| s.tokens == plan.d_budget) {
            Some(s) => s.loss,
            None => fit_power_law(&run.samples, opts)
                .with_context(|| format!("fitting run {}", run.run_id))?
                .predict(plan.d_budget as f64),
        };
        points.push((cfg.lr, loss));
    }
    Ok(points)
}

fn plan_mup(root: &Path, a: PlanMupArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let proxy = resolve_shape(&a.proxy)?;
    let target = resolve_shape(&a.target)?;
    let variant = match a.variant {
        VariantArg::Mup => Variant::MuP,
        VariantArg::CompleteP => Variant::CompleteP,
    };
    let mut plan = make_transfer_plan(&proxy, &target, a.tokens.0, a.tokens.1, a.alpha, variant)?;
    if let Some(first) = &a.compose {
        let first: TransferPlanRecord = load_record(&ws, first, Kind::TransferPlan)?;
        plan = compose_plans(&first.plan, &plan)?;
    }
    let base = match a.base.as_deref() {
        None => None,
        Some(&[eta_b, sigma_b, eps_b, lambda_b]) => Some(BaseHParams {
            eta_b,
            sigma_b,
            eps_b,
            lambda_b,
            tokens_b: plan.proxy.tokens,
        }),
        Some(_) => bail!(UsageError(
            "--base takes four values: eta,sigma,eps,lambda".into()
        )),
    };
    let applied = base.as_ref().map(|b| plan.apply(b)).transpose()?;
    write!(io.stdout, "{}", muptable::render(&plan))?;
    let rec = TransferPlanRecord {
        plan,
        base,
        applied,
    };
    let ws = Workspace::init(root)?;
    let w = ws.write(&Record::new(Kind::TransferPlan, &rec))?;
    announce(io, &w, false)
}

fn simulate(root: &Path, a: SimulateArgs, io: &mut Io) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SurfaceSpec>(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SurfaceSpec::reference(0.0, 0),
    };
    if let Some(n) = a.noise {
        if !(n >= 0.0 && n.is_finite()) {
            bail!(UsageError("--noise must be finite and >= 0".into()));
        }
        spec.noise_sigma = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let design = match a.design {
        DesignArg::Reference => SweepDesign::reference(),
    };
    let shapes: Vec<ModelShape> = match &a.n {
        Some(ns) => ns.iter().map(|n| synthetic_shape(*n)).collect(),
        None => design.shapes,
    };
    let d_grid = a.d_grid.unwrap_or(design.d_grid);
    let lr_grid = a.lr_grid.unwrap_or(design.lr_grid);
    if shapes.is_empty() || d_grid.is_empty() || lr_grid.is_empty() {
        bail!(UsageError(
            "model, token and LR grids must be non-empty".into()
        ));
    }
    let runs = gen_runs(&spec, &shapes, &d_grid, &lr_grid);
    let text = to_jsonl(&runs);
    let rec = SurfaceRecord {
        spec,
        design_name: a.n.is_none().then(|| "reference".to_string()),
        shapes,
        lr_grid,
        d_grid,
        runs_digest: lrkit_core::digest::sha256_hex(text.as_bytes())[..16].to_string(),
    };
    io.stdout.write_all(text.as_bytes())?;
    let ws = Workspace::init(root)?;
    let w = ws.write(&Record::new(Kind::SurfaceSpec, &rec))?;
    announce(io, &w, false)
}

fn ratio_of(len: usize, r: &lrkit_core::mutransfer::ExactRatio, what: &str) -> Result<usize> {
    let (num, den) = (*r.0.numer(), *r.0.denom());
    let scaled = len as u128 * num;
    if scaled % den != 0 {
        bail!(UsageError(format!(
            "{what} {len} times ratio {} is not a whole number",
            r
        )));
    }
    Ok((scaled / den) as usize)
}

fn train_micro(root: &Path, a: TrainMicroArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let mut config = a.net.config(a.width);
    let mut plan_digest = None;
    if let Some(p) = &a.plan {
        let path = ws.resolve(p);
        let rec: TransferPlanRecord = artifact::load(&path, Kind::TransferPlan)?;
        let width = ratio_of(a.width, &rec.plan.ratios.m_n, "width")?;
        let depth = ratio_of(a.net.depth, &rec.plan.ratios.m_l, "depth")?;
        config = config.transferred(&rec.plan, width, depth);
        plan_digest = path.file_stem().and_then(|s| s.to_str()).map(String::from);
    }
    config.validate()?;
    let steps = a.net.steps;
    let checkpoints = a.checkpoints.clone().unwrap_or_else(|| {
        let every = (steps / 10).max(1);
        (0..=steps).step_by(every as usize).chain([steps]).collect()
    });
    let task = a.net.task();
    let opts = a.net.options(checkpoints, &task);
    let mut net = Net::build(&config)?;
    let trace = train(&mut net, &task, &opts)?;
    let rec = TraceRecord {
        num_params: net.num_params(),
        config,
        task,
        options: opts,
        plan_digest,
        trace,
    };
    let ws = Workspace::init(root)?;
    let record = Record::new(Kind::Trace, &rec);
    let w = ws.write(&record)?;
    announce(io, &w, true)?;
    write_reports(
        &ws,
        &w,
        &render_artifact(Kind::Trace.name(), &record.value)?,
    )?;
    writeln!(
        io.stderr,
        "final loss {}{}",
        rec.trace.losses.last().copied().unwrap_or(f64::NAN),
        if rec.trace.diverged {
            " (diverged)"
        } else {
            ""
        }
    )?;
    Ok(())
}

fn coordcheck(root: &Path, a: CoordcheckArgs, io: &mut Io) -> Result<()> {
    let mut widths: Vec<usize> = a.widths.iter().map(|w| *w as usize).collect();
    widths.sort_unstable();
    widths.dedup();
    if widths.is_empty() {
        bail!(UsageError("--widths is empty".into()));
    }
    let steps = a.net.steps;
    let base = a.net.config(widths[0]);
    base.validate()?;
    let task = a.net.task();
    let opts = a.net.options(vec![0, steps / 10, steps / 2, steps], &task);
    let step_opts = a
        .net
        .options((1..=10).map(|k| k * steps / 10).collect(), &task);
    let (series, step_series) = rayon::join(
        || {
            widths
                .par_iter()
                .map(|w| coord_check_width(&base, *w, &task, &opts))
                .collect::<Result<Vec<_>, _>>()
        },
        || {
            a.step_series
                .then(|| step_stability_probe(&base, &task, &step_opts))
                .transpose()
        },
    );
    let report = summarize(&base, a.net.ablate_qk_norm, series?);
    let step_series = step_series?;
    let growth = step_series.as_ref().and_then(|s| growth_ratio(s, &report));
    let rec = CoordCheckRecord {
        task,
        options: opts,
        report,
        step_series,
        growth_ratio: growth,
    };
    let ws = Workspace::init(root)?;
    let record = Record::new(Kind::CoordCheck, &rec);
    let w = ws.write(&record)?;
    announce(io, &w, true)?;
    write_reports(
        &ws,
        &w,
        &render_artifact(Kind::CoordCheck.name(), &record.value)?,
    )?;
    if let Some(t) = rec.report.final_trend() {
        writeln!(
            io.stderr,
            "step {}: rho(attn logits vs width)={} logits spread={}{}",
            t.step,
            report::opt(t.rho_attn_logits),
            report::opt(t.logits_spread),
            if rec.report.partial {
                " (partial: a width diverged)"
            } else {
                ""
            }
        )?;
    }
    Ok(())
}

fn report_cmd(root: &Path, a: ReportArgs, io: &mut Io) -> Result<()> {
    let ws = Workspace::open(root)?;
    let (report, stem) = match &a.artifact {
        Some(r) => {
            let path = ws.resolve(r);
            let (kind, value) = artifact::read(&path)?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report")
                .to_string();
            (render_artifact(&kind, &value)?, stem)
        }
        None => (render_runs(&ws.runs().load()?), "runs".to_string()),
    };
    match &a.out {
        Some(dir) => {
            let (out, ws_root) = (std::path::absolute(dir)?, std::path::absolute(&ws.root)?);
            if out.starts_with(&ws_root) {
                bail!(UsageError(format!(
                    "--out {} lies inside the workspace; report never writes there",
                    dir.display()
                )));
            }
            for p in report.write(dir, &stem)? {
                writeln!(io.stdout, "{}", p.display())?;
            }
        }
        None => io
            .stdout
            .write_all(report.table(a.table.as_deref())?.to_csv()?.as_bytes())?,
    }
    Ok(())
}

/// Parses arguments and runs, returning the process exit code.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>, io: &mut Io) -> i32 {
    use crate::error::{classify, error_record, ErrorKind};
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = write!(io.stdout, "{e}");
                return 0;
            }
            let msg = e.render().to_string();
            let _ = writeln!(io.stderr, "{}", error_record(ErrorKind::Usage, msg.trim()));
            return ErrorKind::Usage.code();
        }
    };
    match run(cli, io) {
        Ok(()) => 0,
        Err(e) => {
            let kind = classify(&e);
            let _ = writeln!(io.stderr, "{}", error_record(kind, &format!("{e:#}")));
            kind.code()
        }
    }
}

/// Runs against the process's real standard streams.
pub fn main_stdio() -> i32 {
    use std::io::IsTerminal;
    let (stdin, stdout, stderr) = (io::stdin(), io::stdout(), io::stderr());
    let (stdin_piped, stdout_piped) = (!stdin.is_terminal(), !stdout.is_terminal());
    let (mut i, mut o, mut e) = (stdin.lock(), stdout.lock(), stderr.lock());
    main_with(
        std::env::args_os(),
        &mut Io {
            stdin: &mut i,
            stdout: &mut o,
            stderr: &mut e,
            stdin_piped,
            stdout_piped,
        },
    )
}
