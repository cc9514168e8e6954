//! Command-line front end. `run` parses arguments, dispatches to one
//! subcommand and maps failures onto exit codes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::concentration::{
    activity_counts, fit_power_law, gini, gini_by_year, lr_test_vs_exponential, ConcentrationError,
    LrTestResult, PowerLawFit,
};
use crate::counterfactual::{run_ladder, LadderOptions, StabilityReport, DEFAULT_KS};
use crate::ingest::{join_political, AnnotatedRating, Corpus, IngestError, LoadReport, ParseOptions};
use crate::model::NoteStatus;
use crate::polarization::{analyze, PolarizationError, PolarizationReport, SkewKind};
use crate::scorer::{score_corpus_with_model, ScorerConfig, ScorerError};
use crate::selectivity::{
    fit_saturation, null_fits, selectivity_points, shuffle_null, SaturationFit, SelectivityError,
    SelectivityPoint,
};
use crate::synth::{generate, plant_pivotal_rater, SynthConfig, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "notelab", version, about = "Participation, polarization and stability analysis for note ratings")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized steps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip malformed rows instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse release files into a binary cache.
    Ingest(IngestArgs),
    /// Gini, Lorenz curve and power-law fit of rater activity.
    Concentration(ConcentrationArgs),
    /// Author-diversity saturation fit against a shuffled null.
    Selectivity(SelectivityArgs),
    /// Rater leaning, bimodality and activity deciles.
    Polarization(PolarizationArgs),
    /// Train the scorer and assign note statuses.
    Score(ScoreArgs),
    /// Remove the top-k raters and rescore.
    Counterfactual(CounterfactualArgs),
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Run every analysis and write a consolidated report.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    ratings: String,
    #[arg(long)]
    notes: String,
    #[arg(long)]
    status: String,
    #[arg(long)]
    annotations: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConcentrationArgs {
    /// Binary cache or directory of release files.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    per_year: bool,
}

#[derive(Debug, Args)]
struct SelectivityArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 1)]
    null_reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PolarizationArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 30)]
    min_ratings: u64,
    #[arg(long, default_value = "adjusted")]
    skew: SkewKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CounterfactualArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Keep locked statuses instead of clearing them before scoring.
    #[arg(long)]
    keep_locks: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// Plant a pivotal super-rater over this many bridging notes.
    #[arg(long, default_value_t = 0)]
    pivotal: usize,
    /// Scorer config used to verify the pivotal plant.
    #[arg(long)]
    scorer_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ladder sizes; default drops standard sizes that would remove every rater.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 30)]
    min_ratings: u64,
    #[arg(long, default_value_t = 1)]
    null_reps: usize,
    #[arg(long, default_value = "adjusted")]
    skew: SkewKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o error: {e}"))
    }
}

impl From<ConcentrationError> for CliError {
    fn from(e: ConcentrationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SelectivityError> for CliError {
    fn from(e: SelectivityError) -> Self {
        match e {
            SelectivityError::NonConvergence { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PolarizationError> for CliError {
    fn from(e: PolarizationError) -> Self {
        match e {
            PolarizationError::NonConvergence => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            ScorerError::ConfigInvalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid(_) => CliError::Usage(e.to_string()),
            SynthError::Scorer(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Provenance record written next to every set of outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub tool_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_digests: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

fn now_rfc3339() -> String {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    chrono::DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    std::io::copy(&mut File::open(path)?, &mut h)?;
    Ok(format!("{:x}", h.finalize()))
}

struct Run {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl Run {
    fn new(argv: &[String], subcommand: &str, out_dir: &Path) -> CliResult<Run> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Run {
            manifest: RunManifest {
                run_id: String::new(),
                command_line: argv.to_vec(),
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seeds: BTreeMap::new(),
                config_digests: BTreeMap::new(),
                input_digests: BTreeMap::new(),
                outputs: Vec::new(),
                started_at: now_rfc3339(),
                finished_at: String::new(),
            },
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    fn config(&mut self, name: &str, digest: String) {
        self.manifest.config_digests.insert(name.to_string(), digest);
    }

    fn input_file(&mut self, path: &Path) -> CliResult<()> {
        let d = sha256_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.manifest.input_digests.insert(name, d);
        Ok(())
    }

    fn input_dir(&mut self, dir: &Path) -> CliResult<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_corpus_file(p))
            .collect();
        files.sort();
        for f in files {
            self.input_file(&f)?;
        }
        Ok(())
    }

    /// Identifies the run by everything that determines its outputs, and
    /// nothing that varies between identical reruns (paths, clocks).
    fn finalize_id(&mut self) {
        let m = &self.manifest;
        let key = json!({
            "subcommand": m.subcommand,
            "version": m.tool_version,
            "seeds": m.seeds,
            "configs": m.config_digests,
            "inputs": m.input_digests,
        });
        let mut h = Sha256::new();
        h.update(key.to_string().as_bytes());
        self.manifest.run_id = format!("{:x}", h.finalize())[..16].to_string();
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| {
            CliError::Data(format!("{}: {e}", p.display()))
        })?))
    }

    /// Writes a JSON report carrying a reference to this run's manifest.
    fn write_json<T: Serialize>(&mut self, name: &str, report: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(report).map_err(|e| CliError::Data(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.insert(
                "manifest".into(),
                json!({"file": "manifest.json", "run_id": self.manifest.run_id}),
            );
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.finished_at = now_rfc3339();
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(self.out_dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}

fn is_corpus_file(p: &Path) -> bool {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.ends_with(".tsv") || name.ends_with(".bin") || name == "annotations.csv"
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn file_name(file: &Path) -> CliResult<String> {
    file.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("--out {} is not a file path", file.display())))
}

fn load(run: &mut Run, dir: &Path, lenient: bool) -> CliResult<Corpus> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    run.input_dir(dir)?;
    let opts = if lenient { ParseOptions::lenient() } else { ParseOptions::strict() };
    log::info!("loading {}", dir.display());
    Ok(Corpus::load_dir(dir, opts)?)
}

fn annotated(corpus: &Corpus) -> CliResult<Vec<AnnotatedRating>> {
    let anns = corpus
        .annotations
        .as_ref()
        .ok_or_else(|| CliError::Data("corpus has no political annotations".into()))?;
    let out = join_political(&corpus.ratings, &corpus.notes, anns)?;
    log::info!("{} annotated ratings, {} dropped", out.annotated.len(), out.dropped);
    Ok(out.annotated)
}

fn scorer_config(run: &mut Run, path: Option<&Path>) -> CliResult<ScorerConfig> {
    let cfg = match path {
        Some(p) => ScorerConfig::from_toml_file(p)?,
        None => ScorerConfig::default(),
    };
    cfg.validate()?;
    run.config("scorer", cfg.digest());
    Ok(cfg)
}

fn require_seed(seed: Option<u64>, cmd: &str) -> CliResult<u64> {
    seed.ok_or_else(|| CliError::Usage(format!("{cmd} requires an explicit --seed")))
}

#[derive(Debug, Serialize)]
struct ConcentrationReport {
    n_raters: usize,
    n_ratings: u64,
    gini: f64,
    lorenz_points: usize,
    gini_by_year: Option<BTreeMap<i32, f64>>,
    power_law: PowerLawFit,
    lr_test: LrTestResult,
}

fn concentration(run: &mut Run, corpus: &Corpus, per_year: bool) -> CliResult<ConcentrationReport> {
    let act = activity_counts(&corpus.ratings);
    let g = gini(&act)?;
    let values = act.values();
    let fit = fit_power_law(&values)?;
    let lr = lr_test_vs_exponential(&values, &fit)?;
    let mut w = csv::Writer::from_writer(run.create("lorenz.csv")?);
    w.write_record(["cum_raters", "cum_ratings"]).map_err(csv_err)?;
    for (x, y) in &g.lorenz {
        w.write_record([x.to_string(), y.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(ConcentrationReport {
        n_raters: values.len(),
        n_ratings: corpus.ratings.len() as u64,
        gini: g.gini,
        lorenz_points: g.lorenz.len(),
        gini_by_year: per_year.then(|| gini_by_year(&corpus.ratings)),
        power_law: fit,
        lr_test: lr,
    })
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(format!("csv write failed: {e}"))
}

#[derive(Debug, Serialize)]
struct SelectivityReport {
    seed: u64,
    n_points: usize,
    observed: SaturationFit,
    null: SaturationFit,
    null_reps: Vec<SaturationFit>,
}

fn write_points(run: &mut Run, name: &str, points: &[SelectivityPoint]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(run.create(name)?);
    w.write_record(["r", "n_authors"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.r.to_string(), p.n_authors.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn selectivity(run: &mut Run, ann: &[AnnotatedRating], seed: u64, reps: usize) -> CliResult<SelectivityReport> {
    let observed = selectivity_points(ann);
    let null = selectivity_points(&shuffle_null(ann, seed));
    write_points(run, "points_observed.csv", &observed)?;
    write_points(run, "points_null.csv", &null)?;
    let obs_fit = fit_saturation(&observed)?;
    let null_fit = fit_saturation(&null)?;
    let extra = if reps > 1 {
        null_fits(ann, seed, reps).into_iter().collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(SelectivityReport {
        seed,
        n_points: observed.len(),
        observed: obs_fit,
        null: null_fit,
        null_reps: extra,
    })
}

fn polarization(
    run: &mut Run,
    corpus: &Corpus,
    ann: &[AnnotatedRating],
    min_ratings: u64,
    seed: u64,
    skew: SkewKind,
) -> CliResult<PolarizationReport> {
    let act = activity_counts(&corpus.ratings);
    let rep = analyze(ann, &act, min_ratings, seed, skew);
    if rep.n_raters > 0 && rep.overall_gmm.is_none() {
        // surface the underlying failure with its proper exit code
        let values: Vec<f64> = rep.leanings.values().map(|v| v.l).collect();
        crate::polarization::fit_gmm2(&values, seed)?;
    }
    let mut w = csv::Writer::from_writer(run.create("leaning_per_rater.csv")?);
    w.write_record(["rater_id", "L", "n_ratings", "decile"]).map_err(csv_err)?;
    for (id, v) in &rep.leanings {
        let d = rep.decile_of.get(id).map(|d| d.to_string()).unwrap_or_default();
        w.write_record([id.as_str(), &v.l.to_string(), &v.n_ratings.to_string(), &d])
            .map_err(csv_err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(run.create("deciles.csv")?);
    w.write_record(["decile", "mu1", "sigma1", "w1", "mu2", "sigma2", "w2", "ashman_d"])
        .map_err(csv_err)?;
    for d in &rep.deciles {
        let mut row = vec![d.decile.to_string()];
        match &d.gmm {
            Some(g) => {
                for c in &g.components {
                    row.extend([c.mu.to_string(), c.sigma.to_string(), c.weight.to_string()]);
                }
                row.push(d.ashman_d.map(|x| x.to_string()).unwrap_or_default());
            }
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rep)
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    config_digest: String,
    n_ratings: usize,
    n_notes: usize,
    status_counts: BTreeMap<&'static str, usize>,
    global_intercept: Option<f64>,
    final_loss: Option<f64>,
    epochs_run: Option<usize>,
}

fn status_counts(a: &crate::scorer::StatusAssignment) -> BTreeMap<&'static str, usize> {
    NoteStatus::ALL.iter().map(|&s| (s.short(), a.count(s))).collect()
}

fn score(run: &mut Run, corpus: &Corpus, cfg: &ScorerConfig, csv_name: &str) -> CliResult<ScoreReport> {
    let (assign, model) = score_corpus_with_model(&corpus.ratings, &corpus.status, cfg)?;
    assign.write_csv(run.create(csv_name)?)?;
    Ok(ScoreReport {
        config_digest: assign.config_digest.clone(),
        n_ratings: corpus.ratings.len(),
        n_notes: assign.notes.len(),
        status_counts: status_counts(&assign),
        global_intercept: model.as_ref().map(|m| m.mu()),
        final_loss: model.as_ref().map(|m| m.final_loss),
        epochs_run: model.as_ref().map(|m| m.epochs_run),
    })
}

fn counterfactual(
    run: &mut Run,
    corpus: &Corpus,
    cfg: &ScorerConfig,
    ks: &[usize],
    keep_locks: bool,
) -> CliResult<StabilityReport> {
    let report = run_ladder(&corpus.ratings, &corpus.status, ks, cfg, LadderOptions { keep_locks })?;
    report.write_heatmap_csv(run.create("heatmap.csv")?)?;
    for s in &report.scenarios {
        s.statuses.write_csv(run.create(&format!("statuses_k{}.csv", s.k))?)?;
    }
    Ok(report)
}

/// Standard ladder sizes that leave at least one rater.
fn default_ks(corpus: &Corpus) -> Vec<usize> {
    let n = activity_counts(&corpus.ratings).counts.len();
    DEFAULT_KS.iter().copied().filter(|&k| k == 0 || k < n).collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

fn cmd_ingest(run: &mut Run, a: &IngestArgs, lenient: bool) -> CliResult<()> {
    let opts = if lenient { ParseOptions::lenient() } else { ParseOptions::strict() };
    let mut patterns = vec![a.ratings.as_str(), a.notes.as_str(), a.status.as_str()];
    patterns.extend(a.annotations.as_deref());
    for p in patterns {
        let files = glob::glob(p).map_err(|e| CliError::Usage(format!("bad pattern {p}: {e}")))?;
        for f in files.filter_map(Result::ok).filter(|f| f.is_file()) {
            run.input_file(&f)?;
        }
    }
    let (corpus, report): (Corpus, LoadReport) =
        Corpus::from_files(&a.ratings, &a.notes, &a.status, a.annotations.as_deref(), opts)?;
    run.finalize_id();
    corpus.write_cache(&a.out)?;
    for f in crate::ingest::CACHE_FILES {
        run.manifest.outputs.push(f.to_string());
    }
    run.write_json(
        "corpus_stats.json",
        &json!({"stats": corpus.stats(), "load_report": report}),
    )
}

fn cmd_concentration(run: &mut Run, a: &ConcentrationArgs, lenient: bool) -> CliResult<()> {
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();
    let rep = concentration(run, &corpus, a.per_year)?;
    run.write_json(&file_name(&a.out)?, &rep)
}

fn cmd_selectivity(run: &mut Run, a: &SelectivityArgs, seed: u64, lenient: bool) -> CliResult<()> {
    run.seed("selectivity", seed);
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();
    let ann = annotated(&corpus)?;
    let rep = selectivity(run, &ann, seed, a.null_reps)?;
    run.write_json(&file_name(&a.out)?, &rep)
}

fn cmd_polarization(run: &mut Run, a: &PolarizationArgs, seed: u64, lenient: bool) -> CliResult<()> {
    run.seed("polarization", seed);
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();
    let ann = annotated(&corpus)?;
    let rep = polarization(run, &corpus, &ann, a.min_ratings, seed, a.skew)?;
    run.write_json(&file_name(&a.out)?, &rep)
}

fn cmd_score(run: &mut Run, a: &ScoreArgs, lenient: bool) -> CliResult<()> {
    let cfg = scorer_config(run, a.config.as_deref())?;
    run.seed("scorer", cfg.seed);
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();
    let rep = score(run, &corpus, &cfg, &file_name(&a.out)?)?;
    run.write_json("score_report.json", &rep)
}

fn cmd_counterfactual(run: &mut Run, a: &CounterfactualArgs, lenient: bool) -> CliResult<()> {
    let cfg = scorer_config(run, a.config.as_deref())?;
    run.seed("scorer", cfg.seed);
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();
    let ks = a.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    let rep = counterfactual(run, &corpus, &cfg, &ks, a.keep_locks)?;
    run.write_json(&file_name(&a.out)?, &rep)
}

fn cmd_synth(run: &mut Run, a: &SynthArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = SynthConfig::from_toml_file(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run.seed("synth", cfg.seed);
    let toml = toml::to_string(&cfg).map_err(|e| CliError::Data(e.to_string()))?;
    run.config("synth", format!("{:x}", Sha256::digest(toml.as_bytes())));
    let mut sc = generate(&cfg)?;
    if a.pivotal > 0 {
        let scfg = scorer_config(run, a.scorer_config.as_deref())?;
        sc = plant_pivotal_rater(&sc, a.pivotal, &scfg)?;
    }
    run.finalize_id();
    sc.write(&a.out)?;
    run.manifest.outputs.extend(
        [
            "ratings-00000.tsv",
            "notes-00000.tsv",
            "noteStatusHistory-00000.tsv",
            "annotations.csv",
            "ground_truth.json",
        ]
        .map(String::from),
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct LadderRow {
    k: usize,
    jaccard: BTreeMap<&'static str, f64>,
    crh_lost: usize,
    crh_gained: usize,
}

fn cmd_reproduce(run: &mut Run, a: &ReproduceArgs, seed: u64, lenient: bool) -> CliResult<()> {
    run.seed("reproduce", seed);
    let cfg = scorer_config(run, a.config.as_deref())?;
    run.seed("scorer", cfg.seed);
    let corpus = load(run, &a.cache, lenient)?;
    run.finalize_id();

    log::info!("concentration");
    let conc = concentration(run, &corpus, true)?;
    run.write_json("concentration.json", &conc)?;

    let (sel, pol) = if corpus.annotations.is_some() {
        let ann = annotated(&corpus)?;
        log::info!("selectivity");
        let sel = selectivity(run, &ann, seed, a.null_reps)?;
        run.write_json("selectivity.json", &sel)?;
        log::info!("polarization");
        let pol = polarization(run, &corpus, &ann, a.min_ratings, seed, a.skew)?;
        run.write_json("polarization.json", &pol)?;
        (Some(sel), Some(pol))
    } else {
        log::warn!("no annotations: skipping selectivity and polarization");
        (None, None)
    };

    log::info!("baseline score");
    let sc = score(run, &corpus, &cfg, "statuses.csv")?;
    run.write_json("score_report.json", &sc)?;

    let ks = a.ks.clone().unwrap_or_else(|| default_ks(&corpus));
    log::info!("counterfactual ladder {ks:?}");
    let ladder = counterfactual(run, &corpus, &cfg, &ks, false)?;
    run.write_json("stability.json", &ladder)?;

    let decile_d: Option<Vec<Option<f64>>> =
        pol.as_ref().map(|p| p.deciles.iter().map(|d| d.ashman_d).collect());
    let decile_spearman = decile_d.as_ref().and_then(|ds| {
        let pts: Vec<(f64, f64)> = ds
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|d| (i as f64 + 1.0, d)))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        spearman(&x, &y)
    });
    let rows: Vec<LadderRow> = ladder
        .scenarios
        .iter()
        .map(|s| {
            let crh = s.stability(NoteStatus::Crh);
            LadderRow {
                k: s.k,
                jaccard: s.per_status.iter().map(|p| (p.status.short(), p.jaccard)).collect(),
                crh_lost: crh.lost,
                crh_gained: crh.gained,
            }
        })
        .collect();
    let stats = pol.as_ref().and_then(|p| p.stats.as_ref());
    let report = json!({
        "n_ratings": corpus.ratings.len(),
        "n_raters": conc.n_raters,
        "n_notes": corpus.notes.len(),
        "concentration": {
            "G": conc.gini,
            "G_t": conc.gini_by_year,
            "alpha": conc.power_law.alpha,
            "alpha_stderr": conc.power_law.alpha_stderr,
            "x_min": conc.power_law.x_min,
            "D": conc.power_law.ks_distance,
            "R": conc.lr_test.r,
            "p": conc.lr_test.p_value,
        },
        "selectivity": sel.as_ref().map(|s| json!({
            "N_asy": s.observed.n_asy,
            "tau": s.observed.tau,
            "N_asy_ci95": s.observed.ci95_n_asy,
            "tau_ci95": s.observed.ci95_tau,
            "null_N_asy": s.null.n_asy,
            "null_tau": s.null.tau,
            "null_N_asy_ci95": s.null.ci95_n_asy,
            "null_tau_ci95": s.null.ci95_tau,
        })),
        "polarization": pol.as_ref().map(|p| json!({
            "n_raters": p.n_raters,
            "min_ratings": p.min_ratings,
            "mu_L": stats.map(|s| s.mean),
            "M_L": stats.map(|s| s.median),
            "sigma_L": stats.map(|s| s.std),
            "gamma_L": stats.map(|s| s.skewness),
            "skew_kind": stats.map(|s| s.skew_kind),
            "ashman_d": p.overall_ashman_d,
            "decile_ashman_d": decile_d,
            "decile_spearman": decile_spearman,
        })),
        "scoring": {
            "config_digest": sc.config_digest,
            "status_counts": sc.status_counts,
            "global_intercept": sc.global_intercept,
        },
        "ladder": rows,
    });
    run.write_json("paper_report.json", &report)
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let (name, out_dir) = match &cli.command {
        Command::Ingest(a) => ("ingest", a.out.clone()),
        Command::Concentration(a) => ("concentration", parent_dir(&a.out)),
        Command::Selectivity(a) => ("selectivity", parent_dir(&a.out)),
        Command::Polarization(a) => ("polarization", parent_dir(&a.out)),
        Command::Score(a) => ("score", parent_dir(&a.out)),
        Command::Counterfactual(a) => ("counterfactual", parent_dir(&a.out)),
        Command::Synth(a) => ("synth", a.out.clone()),
        Command::Reproduce(a) => ("reproduce", a.out.clone()),
    };
    // validate seeds before touching the filesystem
    let seed = match &cli.command {
        Command::Selectivity(_) | Command::Polarization(_) => Some(require_seed(cli.seed, name)?),
        _ => cli.seed,
    };
    let mut run = Run::new(argv, name, &out_dir)?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&mut run, a, cli.lenient)?,
        Command::Concentration(a) => cmd_concentration(&mut run, a, cli.lenient)?,
        Command::Selectivity(a) => cmd_selectivity(&mut run, a, seed.unwrap_or_default(), cli.lenient)?,
        Command::Polarization(a) => cmd_polarization(&mut run, a, seed.unwrap_or_default(), cli.lenient)?,
        Command::Score(a) => cmd_score(&mut run, a, cli.lenient)?,
        Command::Counterfactual(a) => cmd_counterfactual(&mut run, a, cli.lenient)?,
        Command::Synth(a) => cmd_synth(&mut run, a, seed)?,
        Command::Reproduce(a) => cmd_reproduce(&mut run, a, seed.unwrap_or(0), cli.lenient)?,
    }
    run.finish()
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("--threads ignored: {e}");
        }
    }
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("notelab: {}", e.message());
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // ties get average ranks: y ranks [1.5, 1.5, 3]
        let r = spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 9.0]).unwrap();
        assert!((r - 0.8660254037844386).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), None);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["notelab", "jaccard"]), EXIT_USAGE);
        assert_eq!(run(["notelab", "concentration", "--out", "x.json"]), EXIT_USAGE);
        assert_eq!(run(["notelab", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_seed_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.json");
        let code = run([
            "notelab",
            "selectivity",
            "--cache",
            dir.path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn missing_data_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out").join("r.json");
        let code = run([
            "notelab",
            "concentration",
            "--cache",
            dir.path().join("nope").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }
}
