//! Bridging matrix-factorization scorer: a note earns CRH when its
//! intercept stays high after the rater factors have explained away
//! agreement along the polarization axis.

mod train;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{NoteId, NoteStatus, RaterId, RatingEvent, RatingLevel, StatusRecord};

pub use train::{gradient, objective, residuals, train_matrix, Gradient, Params, RatingMatrix, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("no ratings to train on")]
    EmptyInput,
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFinite { epoch: usize },
    #[error("note {0} is rated but has no model parameters")]
    MissingNote(String),
    #[error("invalid scorer config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Alternating exact block minimization.
    #[default]
    Als,
    /// Preconditioned gradient descent with `learning_rate` and `lr_decay`.
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub optimizer: Optimizer,
    pub factor_dim: usize,
    pub lambda_intercept: f64,
    pub lambda_factor: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub convergence_tol: f64,
    pub crh_threshold: f64,
    pub crnh_intercept_threshold: f64,
    pub crnh_factor_slope: f64,
    pub min_ratings_for_status: u64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            optimizer: Optimizer::Als,
            factor_dim: 1,
            lambda_intercept: 0.15,
            lambda_factor: 0.03,
            learning_rate: 0.2,
            lr_decay: 0.99,
            epochs: 200,
            convergence_tol: 1e-7,
            crh_threshold: 0.40,
            crnh_intercept_threshold: -0.05,
            crnh_factor_slope: 0.8,
            min_ratings_for_status: 5,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
    pub fn validate(&self) -> Result<(), ScorerError> {
        let mut bad = Vec::new();
        if self.factor_dim == 0 {
            bad.push("factor_dim must be positive".to_string());
        }
        for (name, v) in [
            ("lambda_intercept", self.lambda_intercept),
            ("lambda_factor", self.lambda_factor),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be a positive number, got {v}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bad.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if !(self.convergence_tol >= 0.0) {
            bad.push("convergence_tol must be non-negative".to_string());
        }
        if self.crnh_factor_slope < 0.0 || !self.crnh_factor_slope.is_finite() {
            bad.push("crnh_factor_slope must be non-negative".to_string());
        }
        if !(self.crh_threshold > self.crnh_intercept_threshold) {
            bad.push(format!(
                "crh_threshold ({}) must exceed crnh_intercept_threshold ({})",
                self.crh_threshold, self.crnh_intercept_threshold
            ));
        }
        if self.min_ratings_for_status == 0 {
            bad.push("min_ratings_for_status must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ScorerError::ConfigInvalid(bad.join("; ")))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ScorerError> {
        let cfg: ScorerConfig =
            toml::from_str(s).map_err(|e| ScorerError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, ScorerError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| ScorerError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

pub fn encode_rating(level: RatingLevel) -> f64 {
    match level {
        RatingLevel::Helpful => 1.0,
        RatingLevel::SomewhatHelpful => 0.5,
        RatingLevel::NotHelpful => 0.0,
    }
}

/// Trained parameters with ids sorted ascending.
#[derive(Debug, Clone)]
pub struct MfModel {
    pub notes: Vec<NoteId>,
    pub raters: Vec<RaterId>,
    pub params: Params,
    pub note_rating_counts: Vec<u64>,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
    pub lr_backoffs: usize,
}

impl MfModel {
    pub fn mu(&self) -> f64 {
        self.params.mu
    }

    fn note_index(&self, id: &NoteId) -> Option<usize> {
        self.notes.binary_search(id).ok()
    }

    fn rater_index(&self, id: &RaterId) -> Option<usize> {
        self.raters.binary_search(id).ok()
    }

    pub fn note_intercept(&self, id: &NoteId) -> Option<f64> {
        self.note_index(id).map(|i| self.params.note_intercept[i])
    }

    pub fn note_factor(&self, id: &NoteId) -> Option<&[f64]> {
        let d = self.params.dim;
        self.note_index(id)
            .map(|i| &self.params.note_factor[i * d..(i + 1) * d])
    }

    pub fn rater_intercept(&self, id: &RaterId) -> Option<f64> {
        self.rater_index(id).map(|i| self.params.rater_intercept[i])
    }

    pub fn rater_factor(&self, id: &RaterId) -> Option<&[f64]> {
        let d = self.params.dim;
        self.rater_index(id)
            .map(|i| &self.params.rater_factor[i * d..(i + 1) * d])
    }

    pub fn predict(&self, rater: &RaterId, note: &NoteId) -> Option<f64> {
        Some(self.params.predict(self.rater_index(rater)?, self.note_index(note)?))
    }
}

pub fn train(ratings: &[RatingEvent], config: &ScorerConfig) -> Result<MfModel, ScorerError> {
    config.validate()?;
    let m = RatingMatrix::build(ratings);
    train_built(&m, config)
}

fn train_built(m: &RatingMatrix, config: &ScorerConfig) -> Result<MfModel, ScorerError> {
    let out = train_matrix(m, config)?;
    Ok(MfModel {
        note_rating_counts: (0..m.notes.len()).map(|j| m.note_count(j) as u64).collect(),
        notes: m.notes.clone(),
        raters: m.raters.clone(),
        final_loss: *out.loss_trace.last().expect("non-empty trace"),
        params: out.params,
        loss_trace: out.loss_trace,
        epochs_run: out.epochs_run,
        lr_backoffs: out.lr_backoffs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteScore {
    pub status: NoteStatus,
    pub note_intercept: Option<f64>,
    pub abs_factor: Option<f64>,
    pub n_ratings: u64,
    pub locked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusAssignment {
    pub notes: BTreeMap<NoteId, NoteScore>,
    pub config_digest: String,
}

impl StatusAssignment {
    pub fn status(&self, id: &NoteId) -> Option<NoteStatus> {
        self.notes.get(id).map(|s| s.status)
    }

    pub fn with_status(&self, status: NoteStatus) -> impl Iterator<Item = &NoteId> {
        self.notes
            .iter()
            .filter(move |(_, s)| s.status == status)
            .map(|(id, _)| id)
    }

    pub fn count(&self, status: NoteStatus) -> usize {
        self.with_status(status).count()
    }

    /// `note_id,status,note_intercept,abs_factor,n_ratings`
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["note_id", "status", "note_intercept", "abs_factor", "n_ratings"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for (id, s) in &self.notes {
            out.write_record([
                id.as_str(),
                s.status.short(),
                &fmt(s.note_intercept),
                &fmt(s.abs_factor),
                &s.n_ratings.to_string(),
            ])?;
        }
        out.flush()
    }
}

/// The threshold rule for a single note.
pub fn status_rule(intercept: f64, abs_factor: f64, n_ratings: u64, cfg: &ScorerConfig) -> NoteStatus {
    if n_ratings < cfg.min_ratings_for_status {
        NoteStatus::Nmr
    } else if intercept >= cfg.crh_threshold {
        NoteStatus::Crh
    } else if intercept <= cfg.crnh_intercept_threshold - cfg.crnh_factor_slope * abs_factor {
        NoteStatus::Crnh
    } else {
        NoteStatus::Nmr
    }
}

pub fn assign_status(
    model: &MfModel,
    ratings: &[RatingEvent],
    config: &ScorerConfig,
) -> Result<StatusAssignment, ScorerError> {
    let mut counts: HashMap<&NoteId, u64> = HashMap::new();
    for r in ratings {
        *counts.entry(&r.note_id).or_default() += 1;
    }
    let mut notes = BTreeMap::new();
    for (id, n) in counts {
        let i = model
            .note_index(id)
            .ok_or_else(|| ScorerError::MissingNote(id.to_string()))?;
        notes.insert(id.clone(), score_note(model, i, n, config));
    }
    Ok(StatusAssignment {
        notes,
        config_digest: config.digest(),
    })
}

fn score_note(model: &MfModel, i: usize, n_ratings: u64, cfg: &ScorerConfig) -> NoteScore {
    let d = model.params.dim;
    let intercept = model.params.note_intercept[i];
    let abs_factor = model.params.note_factor[i * d..(i + 1) * d]
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    NoteScore {
        status: status_rule(intercept, abs_factor, n_ratings, cfg),
        note_intercept: Some(intercept),
        abs_factor: Some(abs_factor),
        n_ratings,
        locked: false,
    }
}

/// Trains on all ratings and assigns statuses; locked notes keep their
/// locked status. Returns the model too when any rating was present.
pub fn score_corpus_with_model(
    ratings: &[RatingEvent],
    status_history: &[StatusRecord],
    config: &ScorerConfig,
) -> Result<(StatusAssignment, Option<MfModel>), ScorerError> {
    config.validate()?;
    let mut notes = BTreeMap::new();
    let model = if ratings.is_empty() {
        None
    } else {
        let m = RatingMatrix::build(ratings);
        let model = train_built(&m, config)?;
        for (i, id) in model.notes.iter().enumerate() {
            notes.insert(
                id.clone(),
                score_note(&model, i, model.note_rating_counts[i], config),
            );
        }
        Some(model)
    };
    for rec in status_history {
        if let Some(locked) = rec.locked_status {
            let entry = notes.entry(rec.note_id.clone()).or_insert(NoteScore {
                status: locked,
                note_intercept: None,
                abs_factor: None,
                n_ratings: 0,
                locked: true,
            });
            entry.status = locked;
            entry.locked = true;
        }
    }
    Ok((
        StatusAssignment {
            notes,
            config_digest: config.digest(),
        },
        model,
    ))
}

pub fn score_corpus(
    ratings: &[RatingEvent],
    status_history: &[StatusRecord],
    config: &ScorerConfig,
) -> Result<StatusAssignment, ScorerError> {
    score_corpus_with_model(ratings, status_history, config).map(|(s, _)| s)
}
