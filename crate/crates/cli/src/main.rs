use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xrrmeta::comparators::Method;
use xrrmeta::io::{analyze, load_dataset, AnalyzeConfig};
use xrrmeta::simgen::{run_experiment, write_records_csv, write_summary_csv, Scenario};
use xrrmeta::{Error, McConfig, SearchConfig, VarianceCentre};

#[derive(Parser)]
#[command(
    name = "xrrmeta",
    version,
    about = "Exact random-effects meta-analysis of rare events"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact interval for the treatment contrast plus classical comparators.
    Analyze(AnalyzeArgs),
    /// Run a simulation scenario and summarise rejection rates.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Centre {
    CorrectedMean,
    Estimate,
    Hypothesized,
}

impl From<Centre> for VarianceCentre {
    fn from(c: Centre) -> Self {
        match c {
            Centre::CorrectedMean => VarianceCentre::CorrectedMean,
            Centre::Estimate => VarianceCentre::Estimate,
            Centre::Hypothesized => VarianceCentre::Hypothesized,
        }
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

#[derive(Clone)]
struct Methods(Vec<Method>);

fn methods(s: &str) -> Result<Methods, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Methods(Vec::new()));
    }
    if s.eq_ignore_ascii_case("all") {
        return Ok(Methods(Method::ALL.to_vec()));
    }
    s.split(',')
        .map(|m| Method::parse(m).ok_or_else(|| format!("unknown method {m:?}")))
        .collect::<Result<_, _>>()
        .map(Methods)
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// CSV with columns study_id,n1,y1,n2,y2.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = open_unit)]
    alpha: f64,
    /// Monte Carlo replicates per p-value.
    #[arg(long, default_value_t = 2000)]
    mc_reps: usize,
    /// Grid step on the treatment-contrast axis.
    #[arg(long, default_value_t = 0.001)]
    step: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Comparators: comma-separated list of MH, MH-CC, Peto-F, Peto-R, DL, or all / none.
    #[arg(long, default_value = "all", value_parser = methods)]
    methods: Methods,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    output: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Smallest number of studies with events that will be analysed.
    #[arg(long, default_value_t = 2)]
    min_studies: usize,
    /// Grid points examined beyond each bound in the correction step.
    #[arg(long, default_value_t = 10)]
    correction_window: usize,
    /// Points of the variance grid in the correction step.
    #[arg(long, default_value_t = 20)]
    nu_grid: usize,
    #[arg(long, value_enum, default_value_t = Centre::CorrectedMean)]
    variance_centre: Centre,
    /// Record wall-clock time in the report (makes output non-reproducible).
    #[arg(long)]
    time: bool,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Scenario file of key = value lines.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the replicate count.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// First replicate index, for resuming or splitting a run.
    #[arg(long)]
    first_rep: Option<usize>,
    /// Summary CSV; metadata goes to the same path with `.meta.json` appended.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-replicate CSV.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn sink(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_analyze(a: AnalyzeArgs) -> Result<(), Error> {
    let data = load_dataset(&a.input)?;
    log::info!(
        "{} studies, {} with events, {} double-zero",
        data.k_tot(),
        data.k(),
        data.dz_studies().len()
    );
    let cfg = AnalyzeConfig {
        search: SearchConfig {
            alpha: a.alpha,
            step: a.step,
            correction_window: a.correction_window,
            nu_grid_size: a.nu_grid,
            min_studies: a.min_studies,
            variance_centre: a.variance_centre.into(),
            mc: McConfig {
                m: a.mc_reps,
                seed: a.seed,
                threads: a.threads,
            },
        },
        methods: a.methods.0,
        record_time: a.time,
    };
    let report = analyze(&data, &cfg)?;
    let mut out = sink(a.report.as_deref())?;
    match a.output {
        Format::Json => out.write_all(report.to_json()?.as_bytes())?,
        Format::Csv => report.write_csv(&mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<(), Error> {
    let mut sc = Scenario::load(&a.scenario)?;
    if let Some(r) = a.reps {
        sc.reps = r;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(f) = a.first_rep {
        sc.first_rep = f;
    }
    log::info!(
        "scenario {}: {} replicates from {}",
        sc.name,
        sc.reps,
        sc.first_rep
    );
    let exp = run_experiment(&sc, a.threads)?;
    write_summary_csv(BufWriter::new(File::create(&a.out)?), &exp.summary)?;

    let mut meta_path = a.out.into_os_string();
    meta_path.push(".meta.json");
    let mut meta = serde_json::to_string_pretty(&exp.metadata)?;
    meta.push('\n');
    std::fs::write(meta_path, meta)?;

    if let Some(raw) = a.raw {
        write_records_csv(BufWriter::new(File::create(raw)?), &exp.records)?;
    }
    if exp.metadata.dropped_all_double_zero + exp.metadata.dropped_redraw_limit > 0 {
        log::warn!(
            "dropped {} replicates without events and {} at the redraw limit",
            exp.metadata.dropped_all_double_zero,
            exp.metadata.dropped_redraw_limit
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
