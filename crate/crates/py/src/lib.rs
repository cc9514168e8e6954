//! Python bindings for `notelab_core`.
//!
//! Report-shaped results come back as plain dicts (via their JSON form);
//! fits are small read-only classes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use notelab_core::concentration::{self, ConcentrationError};
use notelab_core::counterfactual::{run_ladder as core_run_ladder, LadderOptions};
use notelab_core::ingest::{self, join_political, IngestError, ParseOptions};
use notelab_core::polarization::{self, PolarizationError, SkewKind};
use notelab_core::scorer::{score_corpus, ScorerConfig, ScorerError};
use notelab_core::selectivity::{self, SelectivityError};
use notelab_core::synth::{self, SynthConfig, SynthError};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn ingest_err(e: IngestError) -> PyErr {
    let mut inner = &e;
    while let IngestError::File { source, .. } = inner {
        inner = source;
    }
    match inner {
        IngestError::Io(_) | IngestError::NoInputFiles { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn conc_err(e: ConcentrationError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sel_err(e: SelectivityError) -> PyErr {
    match e {
        SelectivityError::NonConvergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn pol_err(e: PolarizationError) -> PyErr {
    match e {
        PolarizationError::NonConvergence => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scorer_err(e: ScorerError) -> PyErr {
    match e {
        ScorerError::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn synth_err(e: SynthError) -> PyErr {
    match e {
        SynthError::Io(_) => PyIOError::new_err(e.to_string()),
        SynthError::Scorer(e) => scorer_err(e),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scorer_config(toml: Option<&str>) -> PyResult<ScorerConfig> {
    let cfg = match toml {
        Some(s) => ScorerConfig::from_toml_str(s).map_err(scorer_err)?,
        None => ScorerConfig::default(),
    };
    cfg.validate().map_err(scorer_err)?;
    Ok(cfg)
}

/// Keys given in `toml` override the generator defaults.
fn synth_config(toml: Option<&str>) -> PyResult<SynthConfig> {
    let bad = |e: String| PyValueError::new_err(format!("invalid synth config: {e}"));
    let Some(toml) = toml else {
        return Ok(SynthConfig::default());
    };
    let user: toml::Table = toml.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
    let mut merged = toml::Table::try_from(SynthConfig::default()).map_err(|e| bad(e.to_string()))?;
    merged.extend(user);
    let text = toml::to_string(&merged).map_err(|e| bad(e.to_string()))?;
    SynthConfig::from_toml_str(&text).map_err(synth_err)
}

fn opts(lenient: bool) -> ParseOptions {
    ParseOptions { lenient }
}

/// An in-memory rating corpus.
#[pyclass(frozen, module = "notelab")]
struct Corpus {
    inner: ingest::Corpus,
}

#[pymethods]
impl Corpus {
    /// Loads a binary cache or a directory of release files.
    #[staticmethod]
    #[pyo3(signature = (path, lenient = false))]
    fn load(py: Python<'_>, path: PathBuf, lenient: bool) -> PyResult<Self> {
        let inner = py
            .detach(|| ingest::Corpus::load_dir(&path, opts(lenient)))
            .map_err(ingest_err)?;
        Ok(Corpus { inner })
    }

    /// Loads release files matching the given glob patterns.
    #[staticmethod]
    #[pyo3(signature = (ratings, notes, status, annotations = None, lenient = false))]
    fn from_files(
        py: Python<'_>,
        ratings: &str,
        notes: &str,
        status: &str,
        annotations: Option<&str>,
        lenient: bool,
    ) -> PyResult<Self> {
        let (inner, _) = py
            .detach(|| ingest::Corpus::from_files(ratings, notes, status, annotations, opts(lenient)))
            .map_err(ingest_err)?;
        Ok(Corpus { inner })
    }

    fn write_cache(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| self.inner.write_cache(&path))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats())
    }

    /// `(note_id, rater_id, created_at_ms, level)` tuples.
    fn ratings(&self) -> Vec<(String, String, i64, String)> {
        self.inner
            .ratings
            .iter()
            .map(|r| {
                (
                    r.note_id.to_string(),
                    r.rater_id.to_string(),
                    r.created_at,
                    r.level.to_string(),
                )
            })
            .collect()
    }

    /// Ratings per rater.
    fn activity(&self) -> BTreeMap<String, u64> {
        concentration::activity_counts(&self.inner.ratings)
            .counts
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.ratings.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(ratings={}, notes={}, status_records={}, annotated={})",
            self.inner.ratings.len(),
            self.inner.notes.len(),
            self.inner.status.len(),
            self.inner.annotations.is_some()
        )
    }
}

impl Corpus {
    fn annotated(&self) -> PyResult<Vec<ingest::AnnotatedRating>> {
        let anns = self
            .inner
            .annotations
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("corpus has no political annotations"))?;
        Ok(join_political(&self.inner.ratings, &self.inner.notes, anns)
            .map_err(ingest_err)?
            .annotated)
    }
}

#[pyclass(frozen, get_all, module = "notelab")]
struct PowerLawFit {
    alpha: f64,
    alpha_stderr: f64,
    x_min: u64,
    ks_distance: f64,
    n_tail: usize,
}

#[pymethods]
impl PowerLawFit {
    fn __repr__(&self) -> String {
        format!(
            "PowerLawFit(alpha={:.4}, x_min={}, ks_distance={:.4}, n_tail={})",
            self.alpha, self.x_min, self.ks_distance, self.n_tail
        )
    }
}

impl From<&concentration::PowerLawFit> for PowerLawFit {
    fn from(f: &concentration::PowerLawFit) -> Self {
        PowerLawFit {
            alpha: f.alpha,
            alpha_stderr: f.alpha_stderr,
            x_min: f.x_min,
            ks_distance: f.ks_distance,
            n_tail: f.n_tail,
        }
    }
}

#[pyclass(frozen, get_all, module = "notelab")]
struct SaturationFit {
    n_asy: f64,
    tau: f64,
    ci95_n_asy: f64,
    ci95_tau: f64,
    residual_sse: f64,
    n_points: usize,
}

#[pymethods]
impl SaturationFit {
    fn predict(&self, r: f64) -> f64 {
        selectivity::saturation(self.n_asy, self.tau, r)
    }

    fn __repr__(&self) -> String {
        format!(
            "SaturationFit(n_asy={:.4} ± {:.4}, tau={:.4} ± {:.4})",
            self.n_asy, self.ci95_n_asy, self.tau, self.ci95_tau
        )
    }
}

impl From<selectivity::SaturationFit> for SaturationFit {
    fn from(f: selectivity::SaturationFit) -> Self {
        SaturationFit {
            n_asy: f.n_asy,
            tau: f.tau,
            ci95_n_asy: f.ci95_n_asy,
            ci95_tau: f.ci95_tau,
            residual_sse: f.residual_sse,
            n_points: f.n_points,
        }
    }
}

/// Two-component Gaussian mixture, components ordered by mean.
#[pyclass(frozen, module = "notelab")]
struct Gmm2 {
    inner: polarization::Gmm2,
}

#[pymethods]
impl Gmm2 {
    /// `[(mu, sigma, weight), (mu, sigma, weight)]`
    #[getter]
    fn components(&self) -> Vec<(f64, f64, f64)> {
        self.inner
            .components
            .iter()
            .map(|c| (c.mu, c.sigma, c.weight))
            .collect()
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn ashman_d(&self) -> f64 {
        polarization::ashman_d(&self.inner)
    }

    fn __repr__(&self) -> String {
        let [a, b] = &self.inner.components;
        format!(
            "Gmm2(({:.3}, {:.3}, {:.3}), ({:.3}, {:.3}, {:.3}))",
            a.mu, a.sigma, a.weight, b.mu, b.sigma, b.weight
        )
    }
}

type Lorenz = Vec<(f64, f64)>;

/// Returns `(gini, top20_share, lorenz_points)`.
#[pyfunction]
fn gini(values: Vec<u64>) -> PyResult<(f64, f64, Lorenz)> {
    let g = concentration::gini_values(&values).map_err(conc_err)?;
    Ok((g.gini, g.top20_share, g.lorenz))
}

#[pyfunction]
fn fit_power_law(py: Python<'_>, values: Vec<u64>) -> PyResult<PowerLawFit> {
    let fit = py
        .detach(|| concentration::fit_power_law(&values))
        .map_err(conc_err)?;
    Ok(PowerLawFit::from(&fit))
}

/// Likelihood-ratio test of the power law against a geometric tail.
/// Returns `(R, p)`; positive R favors the power law.
#[pyfunction]
fn lr_test(values: Vec<u64>, fit: &PowerLawFit) -> PyResult<(f64, f64)> {
    let f = concentration::PowerLawFit {
        alpha: fit.alpha,
        alpha_stderr: fit.alpha_stderr,
        x_min: fit.x_min,
        ks_distance: fit.ks_distance,
        n_tail: fit.n_tail,
    };
    let r = concentration::lr_test_vs_exponential(&values, &f).map_err(conc_err)?;
    Ok((r.r, r.p_value))
}

/// Concentration summary of a corpus: Gini, yearly Gini, power-law fit and LR test.
#[pyfunction]
fn concentration_report<'py>(py: Python<'py>, corpus: &Corpus) -> PyResult<Bound<'py, PyDict>> {
    let act = concentration::activity_counts(&corpus.inner.ratings);
    let values = act.values();
    let g = concentration::gini(&act).map_err(conc_err)?;
    let fit = py
        .detach(|| concentration::fit_power_law(&values))
        .map_err(conc_err)?;
    let lr = concentration::lr_test_vs_exponential(&values, &fit).map_err(conc_err)?;
    let d = PyDict::new(py);
    d.set_item("gini", g.gini)?;
    d.set_item("top20_share", g.top20_share)?;
    d.set_item("gini_by_year", concentration::gini_by_year(&corpus.inner.ratings))?;
    d.set_item("power_law", PowerLawFit::from(&fit))?;
    d.set_item("R", lr.r)?;
    d.set_item("p", lr.p_value)?;
    Ok(d)
}

#[pyfunction]
fn fit_saturation(r: Vec<f64>, y: Vec<f64>) -> PyResult<SaturationFit> {
    Ok(selectivity::fit_saturation_xy(&r, &y).map_err(sel_err)?.into())
}

/// Observed and shuffled-null saturation fits for an annotated corpus.
#[pyfunction]
fn selectivity_fits(py: Python<'_>, corpus: &Corpus, seed: u64) -> PyResult<(SaturationFit, SaturationFit)> {
    let ann = corpus.annotated()?;
    let (obs, null) = py.detach(|| {
        let obs = selectivity::fit_saturation(&selectivity::selectivity_points(&ann));
        let null = selectivity::fit_saturation(&selectivity::selectivity_points(
            &selectivity::shuffle_null(&ann, seed),
        ));
        (obs, null)
    });
    Ok((obs.map_err(sel_err)?.into(), null.map_err(sel_err)?.into()))
}

#[pyfunction]
#[pyo3(signature = (values, seed = 0))]
fn fit_gmm2(py: Python<'_>, values: Vec<f64>, seed: u64) -> PyResult<Gmm2> {
    let inner = py
        .detach(|| polarization::fit_gmm2(&values, seed))
        .map_err(pol_err)?;
    Ok(Gmm2 { inner })
}

/// Partisan leaning per rater with at least `min_ratings` annotated ratings.
#[pyfunction]
#[pyo3(signature = (corpus, min_ratings = 30))]
fn leaning(corpus: &Corpus, min_ratings: u64) -> PyResult<BTreeMap<String, f64>> {
    let ann = corpus.annotated()?;
    Ok(polarization::leaning_per_rater(&ann, min_ratings)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.l))
        .collect())
}

/// Leaning statistics plus overall and per-decile mixture fits.
#[pyfunction]
#[pyo3(signature = (corpus, seed, min_ratings = 30, skew = "adjusted"))]
fn polarization_report<'py>(
    py: Python<'py>,
    corpus: &Corpus,
    seed: u64,
    min_ratings: u64,
    skew: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let skew: SkewKind = skew.parse().map_err(PyValueError::new_err)?;
    let ann = corpus.annotated()?;
    let act = concentration::activity_counts(&corpus.inner.ratings);
    let rep = py.detach(|| polarization::analyze(&ann, &act, min_ratings, seed, skew));
    to_py(py, &rep)
}

/// Note statuses keyed by note id. `config` is scorer TOML.
#[pyfunction]
#[pyo3(signature = (corpus, config = None))]
fn score(py: Python<'_>, corpus: &Corpus, config: Option<&str>) -> PyResult<BTreeMap<String, String>> {
    let cfg = scorer_config(config)?;
    let assign = py
        .detach(|| score_corpus(&corpus.inner.ratings, &corpus.inner.status, &cfg))
        .map_err(scorer_err)?;
    Ok(assign
        .notes
        .iter()
        .map(|(id, s)| (id.to_string(), s.status.short().to_string()))
        .collect())
}

/// Removes the top-k raters for each k and rescores; returns the stability report.
#[pyfunction]
#[pyo3(signature = (corpus, ks, config = None, keep_locks = false))]
fn run_ladder<'py>(
    py: Python<'py>,
    corpus: &Corpus,
    ks: Vec<usize>,
    config: Option<&str>,
    keep_locks: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = scorer_config(config)?;
    let rep = py
        .detach(|| {
            core_run_ladder(
                &corpus.inner.ratings,
                &corpus.inner.status,
                &ks,
                &cfg,
                LadderOptions { keep_locks },
            )
        })
        .map_err(scorer_err)?;
    to_py(py, &rep)
}

/// Generates a synthetic corpus; `config` is generator TOML, missing keys take defaults. Returns `(corpus, ground_truth)`.
/// With `pivotal > 0` a single rater is planted whose removal flips that many notes.
#[pyfunction]
#[pyo3(signature = (config = None, seed = None, pivotal = 0, out = None))]
fn generate<'py>(
    py: Python<'py>,
    config: Option<&str>,
    seed: Option<u64>,
    pivotal: usize,
    out: Option<PathBuf>,
) -> PyResult<(Corpus, Bound<'py, PyAny>)> {
    let mut cfg = synth_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(synth_err)?;
    let sc = py
        .detach(|| {
            let sc = synth::generate(&cfg)?;
            if pivotal > 0 {
                synth::plant_pivotal_rater(&sc, pivotal, &ScorerConfig::default())
            } else {
                Ok(sc)
            }
        })
        .map_err(synth_err)?;
    if let Some(dir) = out {
        sc.write(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    let truth = to_py(py, &sc.truth)?;
    Ok((Corpus { inner: sc.corpus }, truth))
}

/// Runs the command-line tool with the given arguments; returns its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("notelab".to_string()).chain(args);
    py.detach(|| notelab_core::cli::run(argv))
}

#[pymodule]
fn notelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Corpus>()?;
    m.add_class::<PowerLawFit>()?;
    m.add_class::<SaturationFit>()?;
    m.add_class::<Gmm2>()?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(lr_test, m)?)?;
    m.add_function(wrap_pyfunction!(concentration_report, m)?)?;
    m.add_function(wrap_pyfunction!(fit_saturation, m)?)?;
    m.add_function(wrap_pyfunction!(selectivity_fits, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gmm2, m)?)?;
    m.add_function(wrap_pyfunction!(leaning, m)?)?;
    m.add_function(wrap_pyfunction!(polarization_report, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(run_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
