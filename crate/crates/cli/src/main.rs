//! `tcmcap`: capacities, sweeps, oracle runs and overlap-curve dumps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod render;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use config::FileConfig;
use render::{OracleOutput, Sweep, SweepCell};
use tcmcap::{
    capacity_from, gauss_hermite, mc_estimate, z_infinity, ActivationSpec, CapacityReport, Level,
    McConfig, OverlapCurve, SolverConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tcmcap::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tcmcap::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(
                E::InvalidConfig(_)
                | E::InvalidLevel(_)
                | E::UnknownActivation(_)
                | E::OrderOutOfRange(_),
            ) => 2,
            CliError::Core(e) if e.is_domain() => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tcmcap",
    version,
    about = "Capacity of wide treelike committee machines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Capacity and stationary parameters at one or more levels.
    Capacity(CapacityArgs),
    /// Capacity matrix over activations and levels.
    Sweep(SweepArgs),
    /// Finite-d Monte Carlo estimate of the level-1 projection value.
    Oracle(OracleArgs),
    /// Overlap curve pbar(p) on a lattice.
    Pbar(PbarArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Pretty,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Format as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output format [default: pretty].
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Gauss-Hermite order of the one-dimensional rules.
    #[arg(long)]
    grid_order: Option<usize>,
    /// Gauss-Hermite order of each nested dimension at level 3 and above.
    #[arg(long)]
    nested_order: Option<usize>,
    #[arg(long)]
    alpha_lo: Option<f64>,
    #[arg(long)]
    alpha_hi: Option<f64>,
}

#[derive(Debug, Args)]
struct CapacityArgs {
    /// relu, quadratic, erf or tanh.
    #[arg(long)]
    activation: Option<String>,
    /// 1, 2-partial, 2-full, 3-full or r-full:N; repeat or comma-separate for several rows.
    #[arg(long, value_delimiter = ',')]
    level: Vec<String>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Activations to sweep [default: all four].
    #[arg(long, value_delimiter = ',')]
    activation: Vec<String>,
    /// Levels to sweep [default: 1,2-full,3-full].
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    level: Option<Vec<String>>,
    /// Plot-data CSV (activation, level, r, variant, alpha_c).
    #[arg(long)]
    plot_out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    activation: Option<String>,
    /// Input dimension (even).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bisect the candidate step until the constraint holds.
    #[arg(long)]
    polish: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PbarArgs {
    #[arg(long)]
    activation: Option<String>,
    /// start:step:end [default: 0:0.05:1].
    #[arg(long)]
    lattice: Option<String>,
    #[arg(long)]
    grid_order: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tcmcap: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Capacity(a) => cmd_capacity(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Pbar(a) => cmd_pbar(a),
    }
}

struct Output {
    format: Format,
    out: Option<PathBuf>,
}

impl Output {
    fn resolve(common: &Common, file: &FileConfig) -> Result<Self, CliError> {
        Ok(Output {
            format: file
                .pick(common.format, "format")?
                .unwrap_or(Format::Pretty),
            out: file.pick(common.out.clone(), "out")?,
        })
    }

    fn emit(&self, text: &str) -> Result<(), CliError> {
        match &self.out {
            Some(path) => write_atomic(path, text),
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout
                    .write_all(text.as_bytes())
                    .map_err(|e| CliError::Io(format!("stdout: {e}")))
            }
        }
    }
}

/// Writes through a temporary file in the target directory, so a failed
/// run never leaves a partial file behind.
fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn solver_config(args: &SolverArgs, file: &FileConfig) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig::default();
    macro_rules! set {
        ($field:expr, $flag:expr, $key:literal) => {
            if let Some(v) = file.pick($flag, $key)? {
                $field = v;
            }
        };
    }
    set!(cfg.grid_order, args.grid_order, "grid_order");
    set!(cfg.nested_order, args.nested_order, "nested_order");
    set!(cfg.alpha_bracket.0, args.alpha_lo, "alpha_lo");
    set!(cfg.alpha_bracket.1, args.alpha_hi, "alpha_hi");
    set!(cfg.fd_step, None, "fd_step");
    set!(cfg.jacobian_step, None, "jacobian_step");
    set!(cfg.damping, None, "damping");
    set!(cfg.max_iters, None, "max_iters");
    set!(cfg.stationarity_tol, None, "stationarity_tol");
    set!(cfg.psi_tol, None, "psi_tol");
    set!(cfg.init_p2, None, "init_p2");
    set!(cfg.init_q2, None, "init_q2");
    cfg.validate()?;
    Ok(cfg)
}

fn parse_levels(raw: &[String]) -> Result<Vec<Level>, CliError> {
    let levels: Vec<Level> = raw
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Level>())
        .collect::<Result<_, _>>()?;
    if levels.is_empty() {
        return Err(CliError::Usage("level list is empty".into()));
    }
    Ok(levels)
}

fn activation(flag: Option<String>, file: &FileConfig) -> Result<ActivationSpec, CliError> {
    let id = file
        .pick(flag, "activation")?
        .ok_or_else(|| CliError::Usage("--activation is required".into()))?;
    Ok(ActivationSpec::from_id(&id)?)
}

/// Reports for `levels` of one activation, solving each level's chain once.
/// The first failure ends the chain; later levels that need it fail too.
fn solve_chain(
    act: &ActivationSpec,
    levels: &[Level],
    cfg: &SolverConfig,
) -> Vec<Result<CapacityReport, tcmcap::Error>> {
    let grid = match gauss_hermite(cfg.grid_order) {
        Ok(g) => g,
        Err(e) => return levels.iter().map(|_| Err(e.clone())).collect(),
    };
    let curve = match OverlapCurve::new(act, &grid) {
        Ok(c) => c,
        Err(e) => return levels.iter().map(|_| Err(e.clone())).collect(),
    };
    let mut solved: Vec<(Level, Result<CapacityReport, tcmcap::Error>)> = Vec::new();
    let get = |level: Level,
               solved: &mut Vec<(Level, Result<CapacityReport, tcmcap::Error>)>|
     -> Result<CapacityReport, tcmcap::Error> {
        let mut chain = vec![level];
        while let Some(prev) = chain.last().unwrap().previous() {
            chain.push(prev);
        }
        let mut prev: Option<CapacityReport> = None;
        for &l in chain.iter().rev() {
            let key = if l == Level::Full(1) { Level::One } else { l };
            let r = match solved.iter().find(|(s, _)| *s == key) {
                Some((_, r)) => r.clone(),
                None => {
                    let r = capacity_from(l, &curve, cfg, prev.as_ref());
                    solved.push((key, r.clone()));
                    r
                }
            };
            prev = Some(r?);
        }
        Ok(prev.expect("chain is never empty"))
    };
    levels.iter().map(|&l| get(l, &mut solved)).collect()
}

fn cmd_capacity(args: CapacityArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let output = Output::resolve(&args.common, &file)?;
    let act = activation(args.activation, &file)?;
    let levels = parse_levels(&file.pick_list(&args.level, "level").unwrap_or_default())?;
    let cfg = solver_config(&args.solver, &file)?;
    let reports = solve_chain(&act, &levels, &cfg)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let text = match output.format {
        Format::Csv => render::capacity_csv(&reports),
        Format::Pretty => render::capacity_pretty(&reports),
        Format::Json if reports.len() == 1 => render::json(&reports[0]),
        Format::Json => render::json(&reports),
    };
    output.emit(&text)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let output = Output::resolve(&args.common, &file)?;
    let ids = file
        .pick_list(&args.activation, "activation")
        .unwrap_or_else(|| {
            ["relu", "quadratic", "erf", "tanh"]
                .map(String::from)
                .to_vec()
        });
    let acts: Vec<ActivationSpec> = ids
        .iter()
        .map(|id| ActivationSpec::from_id(id))
        .collect::<Result<_, _>>()?;
    let levels = match args.level.or_else(|| file.pick_list(&[], "level")) {
        Some(raw) => parse_levels(&raw)?,
        None => vec![Level::One, Level::Full(2), Level::Full(3)],
    };
    let cfg = solver_config(&args.solver, &file)?;
    let plot_out = file
        .pick(args.plot_out, "plot_out")?
        .or_else(|| output.out.as_ref().map(|p| p.with_extension("plot.csv")));

    let results: Vec<_> = acts
        .par_iter()
        .map(|act| solve_chain(act, &levels, &cfg))
        .collect();
    let mut cells = Vec::new();
    for (act, row) in acts.iter().zip(results) {
        for (&level, r) in levels.iter().zip(row) {
            let (report, error) = match r {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(SweepCell {
                activation: act.name().to_string(),
                level,
                report,
                error,
            });
        }
    }
    for c in &cells {
        if let Some(e) = &c.error {
            eprintln!("tcmcap: {} {}: {e}", c.activation, c.level);
        }
    }
    let sweep = Sweep {
        activations: acts.iter().map(|a| a.name().to_string()).collect(),
        levels,
        cells,
    };
    let text = match output.format {
        Format::Csv => sweep.csv(),
        Format::Json => render::json(&sweep),
        Format::Pretty => sweep.pretty(),
    };
    if let Some(path) = plot_out {
        write_atomic(&path, &sweep.plot_csv())?;
    }
    output.emit(&text)
}

fn cmd_oracle(args: OracleArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let output = Output::resolve(&args.common, &file)?;
    let act = activation(args.activation, &file)?;
    let cfg = McConfig {
        d: file.pick(args.d, "d")?.unwrap_or(1024),
        samples: file.pick(args.samples, "samples")?.unwrap_or(10_000),
        seed: file.pick(args.seed, "seed")?.unwrap_or(0),
        polish: args.polish || file.pick::<bool>(None, "polish")?.unwrap_or(false),
    };
    cfg.validate()?;
    let limit = z_infinity(&act, &gauss_hermite(SolverConfig::default().grid_order)?)?;
    let estimate = mc_estimate(&act, &cfg)?;
    let out = OracleOutput {
        activation: act.name().to_string(),
        d: cfg.d,
        samples: cfg.samples,
        seed: cfg.seed,
        polish: cfg.polish,
        estimate,
        limit,
        gap: estimate.mean - limit,
    };
    let text = match output.format {
        Format::Csv => out.csv(),
        Format::Json => render::json(&out),
        Format::Pretty => out.pretty(),
    };
    output.emit(&text)
}

/// Parses `start:step:end` into the lattice points, `end` included when the
/// step lands on it.
fn parse_lattice(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Usage(format!("lattice `{spec}`: {why}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("expected start:step:end"))?;
    let [start, step, end] = parts[..] else {
        return Err(bad("expected start:step:end"));
    };
    if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
        return Err(bad("need step > 0 and end ≥ start"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    if n > 1_000_000 {
        return Err(bad("too many points"));
    }
    Ok((0..=n)
        .map(|i| (start + i as f64 * step).min(end))
        .collect())
}

fn cmd_pbar(args: PbarArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let output = Output::resolve(&args.common, &file)?;
    let act = activation(args.activation, &file)?;
    let lattice = parse_lattice(
        &file
            .pick(args.lattice, "lattice")?
            .unwrap_or_else(|| "0:0.05:1".into()),
    )?;
    let order = file
        .pick(args.grid_order, "grid_order")?
        .unwrap_or(SolverConfig::default().grid_order);
    let grid = gauss_hermite(order)?;
    let curve = OverlapCurve::new(&act, &grid)?;
    let points: Vec<(f64, f64)> = lattice
        .iter()
        .map(|&p| Ok((p, curve.eval(p)?)))
        .collect::<Result<_, tcmcap::Error>>()?;
    let text = match output.format {
        Format::Csv => render::pbar_csv(&points),
        Format::Json => {
            let rows: Vec<_> = points
                .iter()
                .map(|&(p, pbar)| serde_json::json!({ "p": p, "pbar": pbar }))
                .collect();
            render::json(&rows)
        }
        Format::Pretty => render::pbar_pretty(&points),
    };
    output.emit(&text)
}
