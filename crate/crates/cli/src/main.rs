use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use motion_reid::experiment::{
    self, resolve_traces, Corpus, Design, ExperimentConfig, FeatureStore,
};
use motion_reid::features::{FeatureCache, FeatureMatrix, FeatureParams, PresetName};
use motion_reid::forest::{predict_all, train, Forest, ForestProfile, PredictionMatrix};
use motion_reid::metrics::{EvaluationReport, TiePolicy};
use motion_reid::split::SplitPlan;
use motion_reid::synth::{write_cohort, CohortSpec};
use motion_reid::{Error, Result};

#[derive(Parser)]
#[command(
    name = "motion-reid",
    version,
    about = "Re-identify VR users from head and hand motion"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as JSONL traces.
    Synth(SynthArgs),
    /// Extract a feature matrix to CSV.
    Extract(ExtractArgs),
    /// Train a forest and save it.
    Train(TrainArgs),
    /// Predict sessions with a saved forest.
    Predict(PredictArgs),
    /// Score a prediction file.
    Eval(EvalArgs),
    /// Run a full experiment design.
    Exp {
        #[command(subcommand)]
        design: ExpDesign,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// JSON cohort spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_participants: Option<usize>,
    #[arg(long)]
    weeks: Option<u8>,
    #[arg(long)]
    minutes: Option<f64>,
    #[arg(long)]
    hz: Option<f64>,
    #[arg(long)]
    session_noise: Option<f64>,
    #[arg(long)]
    weekly_drift: Option<f64>,
    #[arg(long)]
    spawn_randomization: Option<bool>,
    #[arg(long)]
    participants_per_section: Option<usize>,
    #[arg(long)]
    dataset_id: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FeatureArgs {
    /// Trace file, directory or glob pattern.
    #[arg(long)]
    traces: String,
    #[arg(long, default_value = "M6")]
    preset: PresetName,
    #[arg(long, default_value_t = FeatureParams::default().bsc_half_window_s)]
    bsc_half_window_s: f64,
    #[arg(long, default_value_t = FeatureParams::default().max_gap_s)]
    max_gap_s: f64,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl FeatureArgs {
    fn store(&self) -> Result<FeatureStore> {
        let corpus = Corpus::from_files(&resolve_traces(&self.traces)?)?;
        let params = FeatureParams {
            bsc_half_window_s: self.bsc_half_window_s,
            max_gap_s: self.max_gap_s,
        };
        let cache = self.cache_dir.as_ref().map(FeatureCache::new);
        FeatureStore::build(&corpus, self.preset, &params, cache.as_ref())
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    features: FeatureArgs,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    features: FeatureArgs,
    /// Restrict training to the train spans of a saved plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    profile: ForestProfile,
    #[arg(long)]
    trees_per_draw: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output forest file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    model: PathBuf,
    /// Restrict prediction to the test spans of a saved plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Output prediction JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction JSON written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "30")]
    n: Vec<usize>,
    #[arg(long, default_value = "half")]
    tie_policy: TiePolicy,
    #[arg(long, default_value = "eval")]
    design: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExpDesign {
    Identification(ExpArgs),
    Duration(ExpArgs),
    Delay(ExpArgs),
    Ablation(ExpArgs),
}

#[derive(Args)]
struct ExpArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    traces: Option<String>,
    #[arg(long)]
    preset: Option<PresetName>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    profile: Option<ForestProfile>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(BufWriter::new(f))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: CohortSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => CohortSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(
        n_participants,
        weeks,
        minutes,
        hz,
        session_noise,
        weekly_drift,
        spawn_randomization,
        participants_per_section,
        dataset_id,
        seed
    );
    let files = write_cohort(&spec, &a.out)?;
    info!("wrote {} traces to {}", files.len(), a.out.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let store = a.features.store()?;
    let m = FeatureMatrix::concat(store.preset.column_names(), store.matrices.values())?;
    m.write_csv(create(&a.out)?)?;
    info!(
        "{} rows x {} features -> {}",
        m.nrows(),
        m.ncols(),
        a.out.display()
    );
    Ok(())
}

fn load_plan(path: &Option<PathBuf>) -> Result<Option<SplitPlan>> {
    path.as_ref()
        .map(|p| SplitPlan::load(p).map_err(Error::from))
        .transpose()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let store = a.features.store()?;
    let m = match load_plan(&a.plan)? {
        Some(plan) => store.training_matrix(&plan)?,
        None => FeatureMatrix::concat(store.preset.column_names(), store.matrices.values())?,
    };
    let mut params = a.profile.params(a.seed);
    if let Some(v) = a.trees_per_draw {
        params.trees_per_draw = v;
    }
    if let Some(v) = a.draws {
        params.draws = v;
    }
    let forest = train(&m, &params)?;
    forest.save(&a.out)?;
    info!(
        "trained on {} rows, {} classes -> {}",
        m.nrows(),
        forest.classes.len(),
        a.out.display()
    );
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let forest = Forest::load(&a.model)?;
    let store = a.features.store()?;
    let pred = match load_plan(&a.plan)? {
        Some(plan) => {
            let tests = store.test_sets(&plan, &forest, |_| true);
            predict_all(&forest, tests.iter().map(|(k, m)| (k, m)))?
        }
        None => {
            let known = store
                .matrices
                .iter()
                .filter(|(k, m)| forest.class_index(&k.participant).is_some() && !m.is_empty());
            predict_all(&forest, known)?
        }
    };
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &pred)?;
    writeln!(w).map_err(|e| Error::io("writing predictions", e))?;
    info!(
        "{} sessions predicted -> {}",
        pred.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let pred: PredictionMatrix = read_json(&a.predictions)?;
    let params = serde_json::json!({ "predictions": a.predictions.display().to_string() });
    let report = EvaluationReport::evaluate(&a.design, params, a.seed, &pred, &a.n, a.tie_policy)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            EvaluationReport::write_csv(&[&report], &a.n, create(&dir.join("report.csv"))?)?;
            std::fs::write(dir.join("report.json"), json)
                .map_err(|e| Error::io("writing report.json", e))?;
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn exp(design: ExpDesign) -> Result<()> {
    let (design, a) = match design {
        ExpDesign::Identification(a) => (Design::Identification, a),
        ExpDesign::Duration(a) => (Design::Duration, a),
        ExpDesign::Delay(a) => (Design::Delay, a),
        ExpDesign::Ablation(a) => (Design::Ablation, a),
    };
    let mut config = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match a.seed {
            Some(seed) => ExperimentConfig::new(design, seed),
            None => return Err(Error::Config("--seed is required without --config".into())),
        },
    };
    config.design = design;
    if let Some(t) = a.traces {
        config.traces = Some(t);
        config.synthetic = None;
    }
    if let Some(v) = a.preset {
        config.preset = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.profile {
        config.forest = Some(v);
    }
    if let Some(v) = a.n {
        config.n_values = v;
    }
    if let Some(v) = a.repetitions {
        config.duration.repetitions = v;
    }
    if a.cache_dir.is_some() {
        config.cache_dir = a.cache_dir;
    }
    if a.out.is_some() {
        config.out = a.out;
    }
    experiment::run(&config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon_threads(n) {
            log::error!("{e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Exp { design } => exp(design),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn rayon_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    experiment::set_global_jobs(n)
}
