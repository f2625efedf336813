//! End-to-end experiment runners: identification, duration grid, delay
//! matrix and feature ablation.
//!
//! Every runner is a pure function of the trace contents, the config and
//! the seed. Report files (CSV + JSON) are byte-stable across reruns;
//! wall-clock timings go to a separate `timings.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    featurize_session, FeatureCache, FeatureMatrix, FeatureParams, FeaturePreset, PresetName,
};
use crate::forest::{predict_all, train, Forest, ForestParams, ForestProfile, PredictionMatrix};
use crate::metrics::{multiclass_auc, EvaluationReport, TiePolicy};
use crate::seed;
use crate::split::{
    self, between_split, delay_pairs, duration_sample, trend, within_split, DurationConfig, Role,
    SessionAssignment, SessionInfo, SplitPlan, WithinConfig,
};
use crate::synth::CohortSpec;
use crate::trace::{read_trace_file, Session, SessionKey};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Identification,
    Duration,
    Delay,
    Ablation,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::Identification => "identification",
            Design::Duration => "duration",
            Design::Delay => "delay",
            Design::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationGrid {
    pub sessions: Vec<usize>,
    pub minutes: Vec<f64>,
    pub repetitions: u32,
    #[serde(flatten)]
    pub spans: DurationConfig,
}

impl Default for DurationGrid {
    fn default() -> Self {
        Self {
            sessions: split::DURATION_SESSIONS.to_vec(),
            minutes: split::DURATION_MINUTES.to_vec(),
            repetitions: 10,
            spans: DurationConfig::default(),
        }
    }
}

/// Overrides applied on top of a forest profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestOverride {
    pub trees_per_draw: Option<usize>,
    pub draws: Option<usize>,
    pub rows_per_draw: Option<usize>,
    pub mtry: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Trace file, directory of `.jsonl` files, or glob pattern.
    #[serde(default)]
    pub traces: Option<String>,
    /// Generate the cohort in memory instead of reading traces.
    #[serde(default)]
    pub synthetic: Option<CohortSpec>,
    #[serde(default = "default_preset")]
    pub preset: PresetName,
    pub design: Design,
    pub seed: u64,
    #[serde(default = "default_train_weeks")]
    pub train_weeks: Vec<u8>,
    #[serde(default = "default_test_weeks")]
    pub test_weeks: Vec<u8>,
    #[serde(default)]
    pub within: WithinConfig,
    #[serde(default)]
    pub duration: DurationGrid,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
    /// Forest profile; each design has its own default.
    #[serde(default)]
    pub forest: Option<ForestProfile>,
    #[serde(default)]
    pub forest_override: ForestOverride,
    #[serde(default)]
    pub tie_policy: TiePolicy,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default)]
    pub features: FeatureParams,
    /// Presets run by the ablation design.
    #[serde(default = "default_ablation_presets")]
    pub ablation_presets: Vec<PresetName>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

fn default_preset() -> PresetName {
    PresetName::M6
}
fn default_train_weeks() -> Vec<u8> {
    split::DEFAULT_TRAIN_WEEKS.to_vec()
}
fn default_test_weeks() -> Vec<u8> {
    split::DEFAULT_TEST_WEEKS.to_vec()
}
fn default_n_values() -> Vec<usize> {
    vec![30]
}
fn default_permutations() -> usize {
    1000
}
fn default_ablation_presets() -> Vec<PresetName> {
    PresetName::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn new(design: Design, seed: u64) -> Self {
        Self {
            traces: None,
            synthetic: None,
            preset: default_preset(),
            design,
            seed,
            train_weeks: default_train_weeks(),
            test_weeks: default_test_weeks(),
            within: WithinConfig::default(),
            duration: DurationGrid::default(),
            n_values: default_n_values(),
            forest: None,
            forest_override: ForestOverride::default(),
            tie_policy: TiePolicy::default(),
            permutations: default_permutations(),
            features: FeatureParams::default(),
            ablation_presets: default_ablation_presets(),
            out: None,
            cache_dir: None,
            jobs: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.traces, &self.synthetic) {
            (None, None) => return bad("either traces or synthetic must be set".into()),
            (Some(_), Some(_)) => return bad("traces and synthetic are mutually exclusive".into()),
            (None, Some(spec)) => spec.validate().map_err(|e| Error::Config(e.to_string()))?,
            _ => {}
        }
        if self.design == Design::Duration {
            let g = &self.duration;
            if g.repetitions == 0 {
                return bad("duration.repetitions must be at least 1".into());
            }
            if g.sessions.is_empty() || g.minutes.is_empty() {
                return bad(
                    "duration grid needs at least one session count and one minute value".into(),
                );
            }
            if g.sessions.contains(&0) || g.minutes.iter().any(|m| !(*m > 0.0)) {
                return bad("duration grid values must be positive".into());
            }
        }
        if self.n_values.contains(&0) {
            return bad("n_values must be positive".into());
        }
        if self.design == Design::Ablation && self.ablation_presets.is_empty() {
            return bad("ablation_presets is empty".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        self.within.validate()?;
        self.forest_params(0).validate()?;
        Ok(())
    }

    pub fn profile(&self) -> ForestProfile {
        self.forest.unwrap_or(match self.design {
            Design::Identification | Design::Ablation => ForestProfile::Default,
            Design::Duration => ForestProfile::Duration,
            Design::Delay => ForestProfile::Delay,
        })
    }

    pub fn forest_params(&self, seed: u64) -> ForestParams {
        let mut p = self.profile().params(seed);
        let o = &self.forest_override;
        if let Some(v) = o.trees_per_draw {
            p.trees_per_draw = v;
        }
        if let Some(v) = o.draws {
            p.draws = v;
        }
        if let Some(v) = o.rows_per_draw {
            p.rows_per_draw = v;
        }
        if o.mtry.is_some() {
            p.mtry = o.mtry;
        }
        p
    }

    /// Digest over everything that can change results. Output location,
    /// cache location and job count are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.cache_dir = None;
        c.jobs = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone)]
enum Origin {
    File(PathBuf),
    Synthetic(usize, u8),
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub info: SessionInfo,
    pub digest: String,
    origin: Origin,
}

/// The sessions an experiment runs on. Sessions are reloaded on demand so
/// only feature matrices stay resident.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    synthetic: Option<CohortSpec>,
}

/// Expands a trace argument: a file, a directory (all `.jsonl` inside),
/// or a glob pattern. Result is sorted.
pub fn resolve_traces(pattern: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let mut out: Vec<PathBuf> = if path.is_dir() {
        let rd = std::fs::read_dir(path).map_err(|e| Error::io(format!("listing {pattern}"), e))?;
        let mut v = Vec::new();
        for entry in rd {
            let p = entry
                .map_err(|e| Error::io(format!("listing {pattern}"), e))?
                .path();
            if p.extension().is_some_and(|x| x == "jsonl") {
                v.push(p);
            }
        }
        v
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        glob::glob(pattern)
            .map_err(|e| Error::Config(format!("bad trace pattern {pattern:?}: {e}")))?
            .filter_map(|r| r.ok())
            .filter(|p| p.is_file())
            .collect()
    };
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no trace files match {pattern:?}")));
    }
    Ok(out)
}

impl Corpus {
    pub fn from_files(paths: &[PathBuf]) -> Result<Self> {
        let entries = paths
            .par_iter()
            .map(|p| {
                let s =
                    read_trace_file(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                Ok(CorpusEntry {
                    info: SessionInfo::of(&s),
                    digest: s.digest(),
                    origin: Origin::File(p.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::finish(entries, None)
    }

    pub fn synthetic(spec: &CohortSpec) -> Result<Self> {
        spec.validate()?;
        let cells: Vec<(usize, u8)> = (0..spec.n_participants)
            .flat_map(|p| (1..=spec.weeks).map(move |w| (p, w)))
            .collect();
        let entries = cells
            .par_iter()
            .map(|&(p, w)| {
                let s = spec.generate_session(p, w);
                CorpusEntry {
                    info: SessionInfo::of(&s),
                    digest: s.digest(),
                    origin: Origin::Synthetic(p, w),
                }
            })
            .collect();
        Self::finish(entries, Some(spec.clone()))
    }

    pub fn open(config: &ExperimentConfig) -> Result<Self> {
        match (&config.traces, &config.synthetic) {
            (Some(t), None) => Self::from_files(&resolve_traces(t)?),
            (None, Some(spec)) => Self::synthetic(spec),
            _ => Err(Error::Config(
                "either traces or synthetic must be set".into(),
            )),
        }
    }

    fn finish(mut entries: Vec<CorpusEntry>, synthetic: Option<CohortSpec>) -> Result<Self> {
        entries.sort_by(|a, b| a.info.key.cmp(&b.info.key));
        for w in entries.windows(2) {
            if w[0].info.key == w[1].info.key {
                return Err(Error::Data(format!("duplicate session {}", w[0].info.key)));
            }
        }
        Ok(Self { entries, synthetic })
    }

    pub fn infos(&self) -> Vec<SessionInfo> {
        self.entries.iter().map(|e| e.info.clone()).collect()
    }

    pub fn weeks(&self) -> Vec<u8> {
        let mut w: Vec<u8> = self.entries.iter().map(|e| e.info.key.week).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    pub fn class_count(&self) -> usize {
        let mut p: Vec<&str> = self
            .entries
            .iter()
            .map(|e| e.info.key.participant.as_str())
            .collect();
        p.sort_unstable();
        p.dedup();
        p.len()
    }

    /// Digest over all session digests in key order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.digest.as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn load(&self, entry: &CorpusEntry) -> Result<Session> {
        match &entry.origin {
            Origin::File(p) => {
                read_trace_file(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
            }
            Origin::Synthetic(p, w) => Ok(self
                .synthetic
                .as_ref()
                .expect("synthetic corpus")
                .generate_session(*p, *w)),
        }
    }
}

// ---------------------------------------------------------------------------
// Features

/// Per-session feature matrices for one preset.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub preset: FeaturePreset,
    pub matrices: BTreeMap<SessionKey, FeatureMatrix>,
}

impl FeatureStore {
    pub fn build(
        corpus: &Corpus,
        preset: PresetName,
        params: &FeatureParams,
        cache: Option<&FeatureCache>,
    ) -> Result<Self> {
        let p = preset.preset();
        let matrices = corpus
            .entries
            .par_iter()
            .map(|e| {
                let key = FeatureCache::key(&e.digest, preset, params);
                if let Some(cache) = cache {
                    if let Some(m) = cache.load(&key)? {
                        return Ok((e.info.key.clone(), m));
                    }
                }
                let session = corpus.load(e)?;
                let m = featurize_session(&session, &p, params)?;
                if let Some(cache) = cache {
                    cache.store(&key, &m)?;
                }
                Ok((e.info.key.clone(), m))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            preset: p,
            matrices,
        })
    }

    fn half_window(&self) -> f64 {
        self.preset.max_window() / 2.0
    }

    fn rows_in(&self, a: &SessionAssignment, test: bool) -> Option<FeatureMatrix> {
        let m = self.matrices.get(&a.key)?;
        let half = self.half_window();
        Some(m.select_rows(|_, t| {
            if test {
                a.in_test(t, half)
            } else {
                a.in_train(t, half)
            }
        }))
    }

    /// Training rows of `plan`, concatenated in session-key order.
    pub fn training_matrix(&self, plan: &SplitPlan) -> Result<FeatureMatrix> {
        let parts: Vec<FeatureMatrix> = plan
            .training()
            .filter_map(|a| self.rows_in(a, false))
            .collect();
        Ok(FeatureMatrix::concat(
            self.preset.column_names(),
            parts.iter(),
        )?)
    }

    /// Test rows per session for the assignments accepted by `select`.
    /// Sessions with no complete rows, or whose participant the forest
    /// does not know, are skipped with a warning.
    pub fn test_sets(
        &self,
        plan: &SplitPlan,
        forest: &Forest,
        select: impl Fn(&SessionAssignment) -> bool,
    ) -> Vec<(SessionKey, FeatureMatrix)> {
        let mut out = Vec::new();
        for a in plan.testing().filter(|a| select(a)) {
            if forest.class_index(&a.key.participant).is_none() {
                log::warn!(
                    "{}: {} skipped, participant has no training rows",
                    plan.design,
                    a.key
                );
                continue;
            }
            match self.rows_in(a, true) {
                Some(m) if !m.is_empty() => out.push((a.key.clone(), m)),
                _ => log::warn!("{}: {} skipped, no complete test rows", plan.design, a.key),
            }
        }
        out
    }
}

/// Trains on `plan` and predicts each selected test session.
fn train_and_predict(
    store: &FeatureStore,
    plan: &SplitPlan,
    params: &ForestParams,
    panels: &[&dyn Fn(&SessionAssignment) -> bool],
) -> Result<Vec<PredictionMatrix>> {
    let train_m = store.training_matrix(plan)?;
    let forest = train(&train_m, params)?;
    drop(train_m);
    panels
        .iter()
        .map(|select| {
            let tests = store.test_sets(plan, &forest, select);
            Ok(predict_all(&forest, tests.iter().map(|(k, m)| (k, m)))?)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports

/// Provenance embedded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub design: String,
    pub seed: u64,
    pub config_digest: String,
    pub traces_digest: String,
    pub sessions: usize,
    pub forest: ForestParams,
}

impl ReportMeta {
    fn new(config: &ExperimentConfig, corpus: &Corpus, forest: ForestParams) -> Self {
        Self {
            tool: "motion-reid".into(),
            version: crate::VERSION.into(),
            design: config.design.name().into(),
            seed: config.seed,
            config_digest: config.digest(),
            traces_digest: corpus.digest(),
            sessions: corpus.entries.len(),
            forest,
        }
    }
}

/// Wall-clock seconds per named stage.
#[derive(Debug, Default, Clone, Serialize)]
pub struct Timings(pub BTreeMap<String, f64>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    let file = std::fs::File::create(&path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(file))
}

fn prepare_out(config: &ExperimentConfig) -> Result<Option<PathBuf>> {
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    Ok(config.out.clone())
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Sizes the global rayon pool. Must run before any parallel work.
pub fn set_global_jobs(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn cache_of(config: &ExperimentConfig) -> Option<FeatureCache> {
    config.cache_dir.as_ref().map(FeatureCache::new)
}

// ---------------------------------------------------------------------------
// Identification

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationOutcome {
    pub meta: ReportMeta,
    pub preset: PresetName,
    pub feature_count: usize,
    pub between: EvaluationReport,
    pub within: EvaluationReport,
}

fn evaluate_between(
    store: &FeatureStore,
    corpus: &Corpus,
    config: &ExperimentConfig,
    timings: &mut Timings,
    label: &str,
) -> Result<(EvaluationReport, SplitPlan)> {
    let plan = between_split(&corpus.infos(), &config.train_weeks, &config.test_weeks)?;
    plan.validate(0.0)
        .map_err(|e| Error::Invariant(e.to_string()))?;
    let params = config.forest_params(seed::derive(config.seed, &[seed::tag_str("between")]));
    let pred = timings.time(&format!("{label}between"), || {
        train_and_predict(store, &plan, &params, &[&|_: &SessionAssignment| true])
    })?;
    let design_params = json!({
        "preset": store.preset.name,
        "train_weeks": config.train_weeks,
        "test_weeks": config.test_weeks,
        "forest": params,
    });
    let report = EvaluationReport::evaluate(
        "between",
        design_params,
        config.seed,
        &pred[0],
        &config.n_values,
        config.tie_policy,
    )?;
    Ok((report, plan))
}

pub fn run_identification(config: &ExperimentConfig) -> Result<IdentificationOutcome> {
    config.validate()?;
    let out = prepare_out(config)?;
    in_pool(config.jobs, || {
        let mut timings = Timings::default();
        let corpus = timings.time("load", || Corpus::open(config))?;
        let store = timings.time("features", || {
            FeatureStore::build(
                &corpus,
                config.preset,
                &config.features,
                cache_of(config).as_ref(),
            )
        })?;
        let (between, between_plan) = evaluate_between(&store, &corpus, config, &mut timings, "")?;

        let plan = within_split(&corpus.infos(), &config.within, config.seed)?;
        plan.validate(config.within.buffer_s)
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let params = config.forest_params(seed::derive(config.seed, &[seed::tag_str("within")]));
        let pred = timings.time("within", || {
            train_and_predict(&store, &plan, &params, &[&|_: &SessionAssignment| true])
        })?;
        let design_params = json!({
            "preset": config.preset,
            "within": config.within,
            "forest": params,
        });
        let within = EvaluationReport::evaluate(
            "within",
            design_params,
            config.seed,
            &pred[0],
            &config.n_values,
            config.tie_policy,
        )?;

        let outcome = IdentificationOutcome {
            meta: ReportMeta::new(config, &corpus, config.forest_params(config.seed)),
            preset: config.preset,
            feature_count: store.preset.feature_count(),
            between,
            within,
        };
        if let Some(dir) = &out {
            let mut w = csv_writer(dir, "identification.csv")?;
            w.write_record(EvaluationReport::csv_header(&config.n_values))?;
            for r in [&outcome.between, &outcome.within] {
                w.write_record(r.csv_record(&config.n_values))?;
            }
            w.flush()
                .map_err(|e| Error::io("writing identification.csv", e))?;
            write_json(dir, "identification.json", &outcome)?;
            between_plan.save(&dir.join("between_plan.json"))?;
            plan.save(&dir.join("within_plan.json"))?;
            write_json(dir, "timings.json", &timings)?;
        }
        Ok(outcome)
    })?
}

// ---------------------------------------------------------------------------
// Duration

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Panel {
    Between,
    Within,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationCell {
    pub panel: Panel,
    pub n_sessions: usize,
    pub minutes: f64,
    /// Multiclass AUC per repetition; `None` where the cell could not be evaluated.
    pub aucs: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationOutcome {
    pub meta: ReportMeta,
    pub preset: PresetName,
    pub repetitions: u32,
    pub cells: Vec<DurationCell>,
}

impl DurationOutcome {
    pub fn cell(&self, panel: Panel, n_sessions: usize, minutes: f64) -> Option<&DurationCell> {
        self.cells
            .iter()
            .find(|c| c.panel == panel && c.n_sessions == n_sessions && c.minutes == minutes)
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

fn auc_or_log(pred: &PredictionMatrix, tie: TiePolicy, what: &str) -> Option<f64> {
    match multiclass_auc(pred, tie) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{what}: {e}");
            None
        }
    }
}

pub fn run_duration(config: &ExperimentConfig) -> Result<DurationOutcome> {
    config.validate()?;
    let out = prepare_out(config)?;
    in_pool(config.jobs, || {
        let mut timings = Timings::default();
        let corpus = timings.time("load", || Corpus::open(config))?;
        let store = timings.time("features", || {
            FeatureStore::build(
                &corpus,
                config.preset,
                &config.features,
                cache_of(config).as_ref(),
            )
        })?;
        let infos = corpus.infos();
        let grid = &config.duration;
        let jobs: Vec<(usize, f64, u32)> = grid
            .sessions
            .iter()
            .flat_map(|&n| {
                grid.minutes
                    .iter()
                    .flat_map(move |&m| (0..grid.repetitions).map(move |r| (n, m, r)))
            })
            .collect();
        let results: Vec<[Option<f64>; 2]> = timings.time("cells", || {
            jobs.par_iter()
                .map(|&(n, m, rep)| {
                    let what = format!("duration cell ({n} sessions, {m} min, rep {rep})");
                    let plan = match duration_sample(&infos, n, m, &grid.spans, config.seed, rep) {
                        Ok(p) => p,
                        Err(e) => {
                            log::warn!("{what}: {e}");
                            return Ok([None, None]);
                        }
                    };
                    plan.validate(grid.spans.buffer_minutes * 60.0)
                        .map_err(|e| Error::Invariant(e.to_string()))?;
                    let params = config.forest_params(seed::derive(
                        config.seed,
                        &[seed::tag_str("duration"), u64::from(rep)],
                    ));
                    let between = |a: &SessionAssignment| a.role == Role::Test;
                    let within = |a: &SessionAssignment| a.role == Role::Within;
                    match train_and_predict(&store, &plan, &params, &[&between, &within]) {
                        Ok(p) => Ok([
                            auc_or_log(&p[0], config.tie_policy, &format!("{what}, between")),
                            auc_or_log(&p[1], config.tie_policy, &format!("{what}, within")),
                        ]),
                        Err(Error::Forest(e)) => {
                            log::warn!("{what}: {e}");
                            Ok([None, None])
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut cells = Vec::new();
        for (pi, panel) in [Panel::Between, Panel::Within].into_iter().enumerate() {
            for &n in &grid.sessions {
                for &m in &grid.minutes {
                    let aucs: Vec<Option<f64>> = jobs
                        .iter()
                        .zip(&results)
                        .filter(|((jn, jm, _), _)| *jn == n && *jm == m)
                        .map(|(_, r)| r[pi])
                        .collect();
                    let present: Vec<f64> = aucs.iter().flatten().copied().collect();
                    if present.is_empty() {
                        log::warn!("duration: {panel:?} cell ({n} sessions, {m} min) is empty");
                    }
                    let (mean, sd) = mean_sd(&present);
                    cells.push(DurationCell {
                        panel,
                        n_sessions: n,
                        minutes: m,
                        aucs,
                        mean,
                        sd,
                    });
                }
            }
        }
        let outcome = DurationOutcome {
            meta: ReportMeta::new(config, &corpus, config.forest_params(config.seed)),
            preset: config.preset,
            repetitions: grid.repetitions,
            cells,
        };
        if let Some(dir) = &out {
            let mut w = csv_writer(dir, "duration.csv")?;
            w.write_record([
                "panel",
                "n_sessions",
                "train_minutes",
                "mean_auc",
                "sd_auc",
                "repetitions",
            ])?;
            for c in &outcome.cells {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([
                    match c.panel {
                        Panel::Between => "between".to_string(),
                        Panel::Within => "within".to_string(),
                    },
                    c.n_sessions.to_string(),
                    c.minutes.to_string(),
                    opt(c.mean),
                    opt(c.sd),
                    c.aucs.iter().flatten().count().to_string(),
                ])?;
            }
            w.flush()
                .map_err(|e| Error::io("writing duration.csv", e))?;
            write_json(dir, "duration.json", &outcome)?;
            write_json(dir, "timings.json", &timings)?;
        }
        Ok(outcome)
    })?
}

// ---------------------------------------------------------------------------
// Delay

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayCell {
    pub train_week: u8,
    pub test_week: u8,
    pub multiclass_auc: f64,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayOutcome {
    pub meta: ReportMeta,
    pub preset: PresetName,
    pub weeks: Vec<u8>,
    pub cells: Vec<DelayCell>,
    pub trend: Option<trend::TrendTest>,
}

/// Trend of cell AUC against `|train - test|` week gap.
pub fn delay_trend(
    cells: &[DelayCell],
    permutations: usize,
    seed: u64,
) -> Option<trend::TrendTest> {
    if cells.len() < 3 {
        return None;
    }
    let gap: Vec<f64> = cells
        .iter()
        .map(|c| f64::from(c.train_week.abs_diff(c.test_week)))
        .collect();
    let auc: Vec<f64> = cells.iter().map(|c| c.multiclass_auc).collect();
    Some(trend::permutation_test(&gap, &auc, permutations, seed))
}

/// Averages cell AUCs over several runs (cells present in every run only)
/// and tests the trend on the averages.
pub fn pooled_delay_trend(
    runs: &[DelayOutcome],
    permutations: usize,
    seed: u64,
) -> Option<(Vec<DelayCell>, trend::TrendTest)> {
    let mut acc: BTreeMap<(u8, u8), (f64, usize, usize)> = BTreeMap::new();
    for run in runs {
        for c in &run.cells {
            let e = acc
                .entry((c.train_week, c.test_week))
                .or_insert((0.0, 0, 0));
            e.0 += c.multiclass_auc;
            e.1 += 1;
            e.2 += c.sessions;
        }
    }
    let cells: Vec<DelayCell> = acc
        .into_iter()
        .filter(|(_, (_, n, _))| *n == runs.len())
        .map(|((tr, te), (sum, n, s))| DelayCell {
            train_week: tr,
            test_week: te,
            multiclass_auc: sum / n as f64,
            sessions: s,
        })
        .collect();
    let t = delay_trend(&cells, permutations, seed)?;
    Some((cells, t))
}

pub fn run_delay(config: &ExperimentConfig) -> Result<DelayOutcome> {
    config.validate()?;
    let out = prepare_out(config)?;
    in_pool(config.jobs, || {
        let mut timings = Timings::default();
        let corpus = timings.time("load", || Corpus::open(config))?;
        let weeks = corpus.weeks();
        if weeks.len() < 2 {
            return Err(Error::Config(format!(
                "delay design needs at least 2 weeks, found {weeks:?}"
            )));
        }
        if weeks.len() < 8 {
            log::warn!("delay: only weeks {weeks:?} present; missing weeks are skipped");
        }
        let store = timings.time("features", || {
            FeatureStore::build(
                &corpus,
                config.preset,
                &config.features,
                cache_of(config).as_ref(),
            )
        })?;
        let plans = delay_pairs(&corpus.infos(), &weeks);
        let params = config.forest_params(seed::derive(config.seed, &[seed::tag_str("delay")]));
        let cells: Vec<Option<DelayCell>> = timings.time("cells", || {
            plans
                .par_iter()
                .map(|p| {
                    let what = format!("delay cell (train {}, test {})", p.train_week, p.test_week);
                    let pred = match train_and_predict(
                        &store,
                        &p.plan,
                        &params,
                        &[&|_: &SessionAssignment| true],
                    ) {
                        Ok(mut v) => v.remove(0),
                        Err(Error::Forest(e)) => {
                            log::warn!("{what}: {e}");
                            return Ok(None);
                        }
                        Err(e) => return Err(e),
                    };
                    Ok(
                        auc_or_log(&pred, config.tie_policy, &what).map(|auc| DelayCell {
                            train_week: p.train_week,
                            test_week: p.test_week,
                            multiclass_auc: auc,
                            sessions: pred.rows.len(),
                        }),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let cells: Vec<DelayCell> = cells.into_iter().flatten().collect();
        let trend = delay_trend(&cells, config.permutations, config.seed);
        let outcome = DelayOutcome {
            meta: ReportMeta::new(config, &corpus, params),
            preset: config.preset,
            weeks: weeks.clone(),
            cells,
            trend,
        };
        if let Some(dir) = &out {
            // Matrix layout: one row per training week, one column per test week.
            let mut w = csv_writer(dir, "delay.csv")?;
            let mut header = vec!["train_week".to_string()];
            header.extend(weeks.iter().map(|t| format!("test_w{t}")));
            w.write_record(&header)?;
            for &tr in &weeks {
                let mut row = vec![tr.to_string()];
                for &te in &weeks {
                    row.push(
                        outcome
                            .cells
                            .iter()
                            .find(|c| c.train_week == tr && c.test_week == te)
                            .map(|c| c.multiclass_auc.to_string())
                            .unwrap_or_default(),
                    );
                }
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io("writing delay.csv", e))?;
            write_json(dir, "delay.json", &outcome)?;
            write_json(dir, "timings.json", &timings)?;
        }
        Ok(outcome)
    })?
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: PresetName,
    pub feature_count: usize,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationOutcome {
    pub meta: ReportMeta,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn auc(&self, preset: PresetName) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.preset == preset)
            .map(|r| r.report.multiclass_auc)
    }
}

/// Between-session identification once per preset, with the same plan and
/// forest seed for every preset.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationOutcome> {
    config.validate()?;
    let out = prepare_out(config)?;
    in_pool(config.jobs, || {
        let mut timings = Timings::default();
        let corpus = timings.time("load", || Corpus::open(config))?;
        let mut rows = Vec::new();
        for &preset in &config.ablation_presets {
            // One preset resident at a time keeps memory flat.
            let store = timings.time(&format!("features_{preset}"), || {
                FeatureStore::build(&corpus, preset, &config.features, cache_of(config).as_ref())
            })?;
            let (report, _) =
                evaluate_between(&store, &corpus, config, &mut timings, &format!("{preset}_"))?;
            rows.push(AblationRow {
                preset,
                feature_count: store.preset.feature_count(),
                report,
            });
        }
        let outcome = AblationOutcome {
            meta: ReportMeta::new(config, &corpus, config.forest_params(config.seed)),
            rows,
        };
        if let Some(dir) = &out {
            let mut w = csv_writer(dir, "ablation.csv")?;
            let mut header = vec!["preset".to_string(), "features".to_string()];
            header.extend(EvaluationReport::csv_header(&config.n_values));
            w.write_record(&header)?;
            for r in &outcome.rows {
                let mut rec = vec![r.preset.to_string(), r.feature_count.to_string()];
                rec.extend(r.report.csv_record(&config.n_values));
                w.write_record(&rec)?;
            }
            w.flush()
                .map_err(|e| Error::io("writing ablation.csv", e))?;
            write_json(dir, "ablation.json", &outcome)?;
            write_json(dir, "timings.json", &timings)?;
        }
        Ok(outcome)
    })?
}

/// Runs the design named in `config`, discarding the typed outcome.
pub fn run(config: &ExperimentConfig) -> Result<()> {
    match config.design {
        Design::Identification => run_identification(config).map(drop),
        Design::Duration => run_duration(config).map(drop),
        Design::Delay => run_delay(config).map(drop),
        Design::Ablation => run_ablation(config).map(drop),
    }
}
