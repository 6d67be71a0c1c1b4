//! Batch front end: fit models, generate simulation data, run
//! benchmarks, estimate selection probabilities, and tidy results.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stabreg::dataset::load_csv;
use stabreg::error::Error;
use stabreg::eval::{report_tables, run_benchmark, BenchMethod, BenchmarkResult};
use stabreg::sim::{gen_sim1, gen_sim2, gen_toy, SimDesign, SimKind, SimOutput};
use stabreg::sr::{
    fit_sr, importance_coef, importance_srdiff, importance_weight, AlphaStab, PredKind, Screen,
    SetBudget,
};
use stabreg::stability::StabilityMethod;
use stabreg::stabsel::run_stability_selection;
use stabreg::{MultiEnvDataset, SRConfig};

#[derive(Parser)]
#[command(
    name = "stabreg",
    version,
    about = "Ensemble regression over stability-filtered predictor subsets"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    /// Results do not depend on this value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a CSV file and write model JSON + importance CSV
    Fit(FitArgs),
    /// Generate per-repetition simulation datasets
    Simulate(SimulateArgs),
    /// Run the method comparison on a simulation design
    Benchmark(BenchmarkArgs),
    /// Estimate selection probabilities over half-subsamples
    Stabsel(StabselArgs),
    /// Convert a benchmark JSON into tidy per-repetition CSVs
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row
    #[arg(long)]
    input: PathBuf,
    /// Response column name
    #[arg(long, default_value = "y")]
    response: String,
    /// Environment-label column name
    #[arg(long, default_value = "env")]
    env: String,
}

#[derive(Args)]
struct ModelArgs {
    /// Stability level, or "off" to disable the filter
    #[arg(long, default_value = "0.05")]
    alpha_stab: String,
    /// Prediction-cutoff level in (0, 1]
    #[arg(long, default_value = "0.01")]
    alpha_pred: f64,
    /// Stability test
    #[arg(long, value_enum, default_value_t = StabTest::Chow)]
    stab_test: StabTest,
    /// Prediction score: pooled or worst-environment mean squared error
    #[arg(long, value_enum, default_value_t = PredScore::Pooled)]
    pred_score: PredScore,
    /// Variable screening before set generation
    #[arg(long, value_enum, default_value_t = ScreenKind::None)]
    screen: ScreenKind,
    /// Number of variables kept by screening (0 = keep all)
    #[arg(long, default_value_t = 0)]
    screen_size: usize,
    /// Candidate-set budget, or "exhaustive"
    #[arg(long, default_value = "1000")]
    n_sets: String,
    /// Largest candidate-set cardinality
    #[arg(long, default_value_t = 6)]
    max_set_size: usize,
    /// Bootstrap resamples for the prediction cutoff
    #[arg(long, default_value_t = 100)]
    b_boot: usize,
    /// Resamples for the scaled-residual stability test
    #[arg(long, default_value_t = 999)]
    b_resample: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StabTest {
    Chow,
    ScaledResidual,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredScore {
    Pooled,
    MinEnv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScreenKind {
    None,
    Corr,
    Lasso,
}

impl ModelArgs {
    fn to_config(&self, seed: u64) -> Result<SRConfig, Error> {
        let alpha_stab = if self.alpha_stab == "off" {
            AlphaStab::Off
        } else {
            let a: f64 = self.alpha_stab.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "--alpha-stab must be a number or \"off\", got {:?}",
                    self.alpha_stab
                ))
            })?;
            AlphaStab::Value(a)
        };
        let n_sets = if self.n_sets == "exhaustive" {
            SetBudget::Exhaustive
        } else {
            let n: usize = self.n_sets.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "--n-sets must be an integer or \"exhaustive\", got {:?}",
                    self.n_sets
                ))
            })?;
            SetBudget::Count(n)
        };
        Ok(SRConfig {
            alpha_stab,
            alpha_pred: self.alpha_pred,
            stab_test: match self.stab_test {
                StabTest::Chow => StabilityMethod::Chow,
                StabTest::ScaledResidual => StabilityMethod::ScaledResidual,
            },
            pred_kind: match self.pred_score {
                PredScore::Pooled => PredKind::Pooled,
                PredScore::MinEnv => PredKind::MinEnv,
            },
            screen: match self.screen {
                ScreenKind::None => Screen::None,
                ScreenKind::Corr => Screen::Corr,
                ScreenKind::Lasso => Screen::Lasso,
            },
            screen_size: self.screen_size,
            n_sets,
            max_set_size: self.max_set_size,
            b_boot: self.b_boot,
            b_resample: self.b_resample,
            seed,
        })
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Also fit the purely predictive variant and emit the importance
    /// difference column
    #[arg(long)]
    srdiff: bool,
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignKind {
    Sim1,
    Sim2,
    Toy,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, value_enum)]
    design: DesignKind,
    /// Number of predictors (sim2 only; sim1 and toy are fixed-size)
    #[arg(long, default_value_t = 200)]
    d: usize,
    /// Rows per environment (0 = design default)
    #[arg(long, default_value_t = 0)]
    n_per_env: usize,
}

impl DesignArgs {
    fn to_design(&self) -> SimDesign {
        let mut design = match self.design {
            DesignKind::Sim1 => SimDesign::sim1(),
            DesignKind::Sim2 => SimDesign::sim2(self.d),
            DesignKind::Toy => {
                let mut d = SimDesign::sim1();
                d.kind = SimKind::Toy;
                d.n_per_env = 500;
                d
            }
        };
        if self.n_per_env > 0 {
            design.n_per_env = self.n_per_env;
        }
        design
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Number of repetition directories to emit
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated methods (sr,srpred,srdiff,ols,lasso,anchor,iv)
    #[arg(long, default_value = "sr,srpred,srdiff,ols,lasso,anchor,iv")]
    methods: String,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabselArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of half-subsamples (at least 20)
    #[arg(long, default_value_t = 100)]
    subsamples: usize,
    /// Optional JSON file of {variable: display name} annotations
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Benchmark result JSON produced by `benchmark`
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// 0 success; 2 validation failure; 3 numerical failure; 4 benchmark
/// completed with flagged (partially failed) methods.
fn exit_for(err: &Error) -> u8 {
    match err {
        Error::SingularDesign { .. }
        | Error::Underdetermined { .. }
        | Error::DegreesOfFreedom { .. }
        | Error::BootstrapExhausted { .. }
        | Error::TooManyFailures { .. }
        | Error::EmptyCandidates => 3,
        _ => 2,
    }
}

fn load_data(args: &DataArgs) -> Result<MultiEnvDataset, Error> {
    load_csv(&args.input, &args.response, &args.env, None)
}

fn write_out(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_fit(args: &FitArgs) -> Result<u8, Error> {
    let ds = load_data(&args.data)?;
    let config = args.model.to_config(args.seed)?;
    let model = fit_sr(&ds, &config)?;
    let doc = serde_json::to_string_pretty(&model.to_doc())?;
    write_out(&args.out.join("model.json"), &doc)?;

    let weight = importance_weight(&model);
    let coef = importance_coef(&model);
    let srdiff = if args.srdiff {
        let pred = fit_sr(&ds, &config.to_srpred())?;
        Some(importance_srdiff(&model, &pred, stabreg::sr::ImportanceKind::Coef)?.values)
    } else {
        None
    };

    let mut csv = String::from(if srdiff.is_some() {
        "variable,weight,coef,srdiff\n"
    } else {
        "variable,weight,coef\n"
    });
    for (j, name) in model.column_names.iter().enumerate() {
        match &srdiff {
            Some(d) => csv.push_str(&format!(
                "{name},{:?},{:?},{:?}\n",
                weight.values[j], coef.values[j], d[j]
            )),
            None => csv.push_str(&format!("{name},{:?},{:?}\n", weight.values[j], coef.values[j])),
        }
    }
    write_out(&args.out.join("importance.csv"), &csv)?;
    log::info!(
        "fit: {} candidate sets, {} optimal",
        model.candidate_sets.len(),
        model.optimal_sets.len()
    );
    Ok(0)
}

fn generate(design: &SimDesign, seed: u64) -> Result<SimOutput, Error> {
    match design.kind {
        SimKind::Sim1 => gen_sim1(design, seed),
        SimKind::Sim2 => gen_sim2(design, seed),
        SimKind::Toy => gen_toy(false, &[2.0, -2.0], design.n_per_env, seed),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, Error> {
    let design = args.design.to_design();
    for rep in 0..args.reps {
        let dir = args.out.join(format!("rep_{rep:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let out = generate(&design, stabreg::rng::derive_seed(args.seed, rep as u64))?;
        out.train.write_csv(&dir.join("train.csv"))?;
        out.test.write_csv(&dir.join("test.csv"))?;
        write_out(
            &dir.join("truth.json"),
            &serde_json::to_string_pretty(&out.truth)?,
        )?;
        write_out(&dir.join("scm.json"), &out.scm.to_json())?;
    }
    log::info!("simulate: wrote {} repetition directories", args.reps);
    Ok(0)
}

fn parse_methods(text: &str) -> Result<Vec<BenchMethod>, Error> {
    text.split(',')
        .map(|m| match m.trim() {
            "sr" => Ok(BenchMethod::Sr),
            "srpred" => Ok(BenchMethod::Srpred),
            "srdiff" => Ok(BenchMethod::Srdiff),
            "ols" => Ok(BenchMethod::Ols),
            "lasso" => Ok(BenchMethod::Lasso),
            "anchor" => Ok(BenchMethod::Anchor),
            "iv" => Ok(BenchMethod::Iv),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        })
        .collect()
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<u8, Error> {
    let design = args.design.to_design();
    let methods = parse_methods(&args.methods)?;
    let config = args.model.to_config(args.seed)?;
    let result = run_benchmark(&design, &methods, &config, args.reps, args.seed)?;
    write_out(
        &args.out.join("benchmark.json"),
        &serde_json::to_string_pretty(&result)?,
    )?;
    let flagged = result.aggregates.iter().filter(|a| a.flagged).count();
    if flagged > 0 {
        log::warn!("benchmark: {flagged} methods flagged with partial failures");
        return Ok(4);
    }
    Ok(0)
}

fn cmd_stabsel(args: &StabselArgs) -> Result<u8, Error> {
    let ds = load_data(&args.data)?;
    let config = args.model.to_config(args.seed)?;
    let profile = run_stability_selection(&ds, &config, args.subsamples, args.seed)?;

    let annotations: HashMap<String, String> = match &args.annotations {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => HashMap::new(),
    };

    let mut csv_buf = Vec::new();
    let mut json_buf = Vec::new();
    stabreg::stabsel::emit_selection_scatter(&profile, &annotations, &mut csv_buf, &mut json_buf)?;
    write_out(
        &args.out.join("scatter.csv"),
        &String::from_utf8(csv_buf).expect("csv output is utf-8"),
    )?;
    write_out(
        &args.out.join("thresholds.json"),
        &String::from_utf8(json_buf).expect("json output is utf-8"),
    )?;
    log::info!(
        "stabsel: {} subsamples ok, {} failed",
        profile.n_subsamples,
        profile.n_failed
    );
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<u8, Error> {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::Io {
        path: args.input.clone(),
        source: e,
    })?;
    let result: BenchmarkResult = serde_json::from_str(&text)?;
    let (prediction, recovery) = report_tables(&result);
    write_out(&args.out.join("prediction.csv"), &prediction)?;
    write_out(&args.out.join("recovery.csv"), &recovery)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("STABREG_LOG")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: could not configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Stabsel(a) => cmd_stabsel(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
