//! Synthetic corpora with planted ground truth, emitted in the release file
//! layout so every analysis can be exercised end to end.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concentration::sample_discrete_power_law;
use crate::counterfactual::rank_raters;
use crate::ingest::Corpus;
use crate::model::{
    AuthorId, NoteClassification, NoteId, NoteRecord, NoteStatus, ParticipantId, Party,
    PoliticalAnnotation, RaterId, RatingEvent, RatingLevel, StatusRecord, TweetId,
};
use crate::polarization::decile_sizes;
use crate::scorer::{score_corpus, ScorerConfig, ScorerError};

const DAY_MS: i64 = 86_400_000;
const BRIDGING_HELPFUL: f64 = 0.9;
const PLANT_ATTEMPTS: usize = 100;
const REPAIR_ROUNDS: usize = 20;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),
    #[error("cannot plant pivotal rater after {attempts} attempts: {reason}")]
    CannotPlant { attempts: usize, reason: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaningMix {
    pub mu_1: f64,
    pub sigma_1: f64,
    pub w_1: f64,
    pub mu_2: f64,
    pub sigma_2: f64,
    pub w_2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_raters: u64,
    pub n_notes: u64,
    pub n_authors: u64,
    pub activity_alpha: f64,
    pub activity_xmin: u64,
    pub leaning_mix: LeaningMix,
    pub polarization_by_activity: f64,
    pub selectivity_zipf_s: f64,
    pub frac_bridging_notes: f64,
    pub noise: f64,
    pub seed: u64,
    /// Authors in each rater's personal preference pool; 0 means all authors.
    #[serde(default)]
    pub author_pool_size: u64,
    #[serde(default = "half")]
    pub frac_misleading: f64,
    #[serde(default = "half")]
    pub frac_republican_authors: f64,
    /// First day of the rating window, ms since epoch (default 2021-01-01).
    #[serde(default = "default_start")]
    pub start_millis: i64,
    #[serde(default = "default_span")]
    pub span_days: u32,
}

fn half() -> f64 {
    0.5
}

fn default_start() -> i64 {
    1_609_459_200_000
}

fn default_span() -> u32 {
    1826
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_raters: 3000,
            n_notes: 5000,
            n_authors: 150,
            activity_alpha: 1.8,
            activity_xmin: 20,
            leaning_mix: LeaningMix {
                mu_1: -0.25,
                sigma_1: 0.15,
                w_1: 0.5,
                mu_2: 0.25,
                sigma_2: 0.15,
                w_2: 0.5,
            },
            polarization_by_activity: 0.25,
            selectivity_zipf_s: 0.5,
            frac_bridging_notes: 0.2,
            noise: 0.05,
            seed: 1,
            author_pool_size: 40,
            frac_misleading: 0.5,
            frac_republican_authors: 0.5,
            start_millis: default_start(),
            span_days: default_span(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.n_raters > 0, "n_raters: must be positive");
        check(self.n_notes > 0, "n_notes: must be positive");
        check(self.n_notes <= u32::MAX as u64, "n_notes: too large");
        check(self.n_authors > 0, "n_authors: must be positive");
        check(
            self.activity_alpha > 1.0 && self.activity_alpha.is_finite(),
            "activity_alpha: must be a finite real > 1",
        );
        check(self.activity_xmin > 0, "activity_xmin: must be positive");
        let m = &self.leaning_mix;
        check(m.mu_1.is_finite() && m.mu_2.is_finite(), "leaning_mix: means must be finite");
        check(
            m.sigma_1 >= 0.0 && m.sigma_2 >= 0.0 && m.sigma_1.is_finite() && m.sigma_2.is_finite(),
            "leaning_mix: sigmas must be finite and >= 0",
        );
        check(
            m.w_1 >= 0.0 && m.w_2 >= 0.0 && (m.w_1 + m.w_2 - 1.0).abs() < 1e-9,
            "leaning_mix: w_1 + w_2 must equal 1 with both >= 0",
        );
        check(
            self.polarization_by_activity >= 0.0 && self.polarization_by_activity.is_finite(),
            "polarization_by_activity: must be >= 0",
        );
        check(
            self.selectivity_zipf_s >= 0.0 && self.selectivity_zipf_s.is_finite(),
            "selectivity_zipf_s: must be >= 0",
        );
        check(
            (0.0..=1.0).contains(&self.frac_bridging_notes),
            "frac_bridging_notes: must lie in [0, 1]",
        );
        check((0.0..0.5).contains(&self.noise), "noise: must lie in [0, 0.5)");
        check((0.0..=1.0).contains(&self.frac_misleading), "frac_misleading: must lie in [0, 1]");
        check(
            (0.0..=1.0).contains(&self.frac_republican_authors),
            "frac_republican_authors: must lie in [0, 1]",
        );
        check(self.span_days > 0, "span_days: must be positive");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SynthError::ConfigInvalid(errs))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SynthError> {
        let cfg: SynthConfig =
            toml::from_str(s).map_err(|e| SynthError::ConfigInvalid(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, SynthError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoteType {
    Bridging,
    PartisanD,
    PartisanR,
}

/// Which party a HELPFUL rating on this note favors.
fn partisan_type(classification: NoteClassification, party: Party) -> NoteType {
    match (classification, party) {
        (NoteClassification::Misleading, Party::Republican)
        | (NoteClassification::NotMisleading, Party::Democrat) => NoteType::PartisanD,
        _ => NoteType::PartisanR,
    }
}

/// Thinned ratings and the HELPFUL count kept on each planted note.
type Thinned = (Vec<RatingEvent>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotalPlant {
    pub rater_id: RaterId,
    pub notes: Vec<NoteId>,
    /// HELPFUL ratings from other raters kept on each planted note.
    pub kept_ratings: BTreeMap<NoteId, usize>,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub rater_leaning: BTreeMap<RaterId, f64>,
    pub rater_activity: BTreeMap<RaterId, u64>,
    /// Activity decile (1..=10) used to scale leaning extremity.
    pub rater_decile: BTreeMap<RaterId, u8>,
    pub note_type: BTreeMap<NoteId, NoteType>,
    pub author_party: BTreeMap<AuthorId, Party>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivotal: Option<PivotalPlant>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

impl SynthCorpus {
    /// Release files plus `ground_truth.json`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        self.corpus.write_release_files(dir)?;
        let json = serde_json::to_string_pretty(&self.truth).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("ground_truth.json"), json + "\n")
    }
}

fn note_id(j: usize) -> NoteId {
    NoteId::new(format!("N{j:07}"))
}

fn rater_id(u: usize) -> RaterId {
    RaterId::new(format!("R{u:07}"))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct NotePlan {
    author: usize,
    classification: NoteClassification,
    kind: NoteType,
}

struct World<'a> {
    cfg: &'a SynthConfig,
    notes: Vec<NotePlan>,
    author_party: Vec<Party>,
    author_notes: Vec<Vec<u32>>,
}

impl World<'_> {
    fn helpful(&self, rng: &mut ChaCha8Rng, j: usize, leaning: f64) -> bool {
        let note = &self.notes[j];
        let helpful = match note.kind {
            NoteType::Bridging => rng.random::<f64>() < BRIDGING_HELPFUL,
            _ => {
                let sign = match self.author_party[note.author] {
                    Party::Democrat => -1.0,
                    Party::Republican => 1.0,
                };
                let p_pro = ((1.0 + leaning * sign) / 2.0).clamp(0.0, 1.0);
                let pro = rng.random::<f64>() < p_pro;
                match note.classification {
                    NoteClassification::Misleading => !pro,
                    NoteClassification::NotMisleading => pro,
                }
            }
        };
        if rng.random::<f64>() < self.cfg.noise {
            !helpful
        } else {
            helpful
        }
    }

    /// One rater's (note, time, helpful) triples.
    fn rater_events(&self, u: usize, activity: u64, leaning: f64) -> Vec<(u32, i64, bool)> {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64 + 1);
        let n_a = cfg.n_authors;
        let n_notes = cfg.n_notes as usize;
        let offset = rng.random_range(0..n_a);
        let stride = loop {
            let s = if n_a == 1 { 1 } else { rng.random_range(1..n_a) };
            if gcd(s, n_a) == 1 {
                break s;
            }
        };
        let pool = match cfg.author_pool_size {
            0 => n_a,
            k => k.min(n_a),
        };
        let zipf = Zipf::new(pool as f64, cfg.selectivity_zipf_s).expect("validated s >= 0");
        let mut rated: HashSet<u32> = HashSet::with_capacity(activity as usize);
        let mut out = Vec::with_capacity(activity as usize);
        let span = cfg.span_days as i64 * DAY_MS;
        for _ in 0..activity {
            let mut pick = None;
            for _ in 0..32 {
                let rank = zipf.sample(&mut rng) as u64 - 1;
                let a = ((offset + rank * stride) % n_a) as usize;
                if let Some(&j) = self.author_notes[a].choose(&mut rng) {
                    if !rated.contains(&j) {
                        pick = Some(j);
                        break;
                    }
                }
            }
            let j = pick.unwrap_or_else(|| {
                let start = rng.random_range(0..n_notes);
                (0..n_notes)
                    .map(|i| ((start + i) % n_notes) as u32)
                    .find(|j| !rated.contains(j))
                    .expect("activity is capped at n_notes")
            });
            rated.insert(j);
            let t = cfg.start_millis + rng.random_range(0..span);
            out.push((j, t, self.helpful(&mut rng, j as usize, leaning)));
        }
        out
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_authors = cfg.n_authors as usize;
    let n_notes = cfg.n_notes as usize;
    let n_raters = cfg.n_raters as usize;

    let author_party: Vec<Party> = (0..n_authors)
        .map(|_| {
            if rng.random::<f64>() < cfg.frac_republican_authors {
                Party::Republican
            } else {
                Party::Democrat
            }
        })
        .collect();
    let mut author_notes = vec![Vec::new(); n_authors];
    let notes: Vec<NotePlan> = (0..n_notes)
        .map(|j| {
            let author = rng.random_range(0..n_authors);
            author_notes[author].push(j as u32);
            let classification = if rng.random::<f64>() < cfg.frac_misleading {
                NoteClassification::Misleading
            } else {
                NoteClassification::NotMisleading
            };
            let kind = if rng.random::<f64>() < cfg.frac_bridging_notes {
                NoteType::Bridging
            } else {
                partisan_type(classification, author_party[author])
            };
            NotePlan { author, classification, kind }
        })
        .collect();

    let activity: Vec<u64> = (0..n_raters)
        .map(|_| sample_discrete_power_law(&mut rng, cfg.activity_alpha, cfg.activity_xmin).min(cfg.n_notes))
        .collect();
    let mix = cfg.leaning_mix;
    let c1 = Normal::new(0.0, mix.sigma_1).expect("validated sigma");
    let c2 = Normal::new(0.0, mix.sigma_2).expect("validated sigma");
    // (component mean, deviation from it)
    let base: Vec<(f64, f64)> = (0..n_raters)
        .map(|_| {
            if rng.random::<f64>() < mix.w_1 {
                (mix.mu_1, c1.sample(&mut rng))
            } else {
                (mix.mu_2, c2.sample(&mut rng))
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n_raters).collect();
    order.sort_by_key(|&u| (activity[u], u));
    let mut decile = vec![0u8; n_raters];
    let mut pos = 0;
    for (d, size) in decile_sizes(n_raters).into_iter().enumerate() {
        for &u in &order[pos..pos + size] {
            decile[u] = d as u8 + 1;
        }
        pos += size;
    }
    let leaning: Vec<f64> = (0..n_raters)
        .map(|u| {
            // only the bloc mean moves outward; the spread within a bloc stays
            let scale = 1.0 + cfg.polarization_by_activity * (decile[u] as f64 - 1.0);
            let (mu, dev) = base[u];
            (mu * scale + dev).clamp(-1.0, 1.0)
        })
        .collect();

    let world = World {
        cfg,
        notes,
        author_party,
        author_notes,
    };
    let events: Vec<Vec<(u32, i64, bool)>> = (0..n_raters)
        .into_par_iter()
        .map(|u| world.rater_events(u, activity[u], leaning[u]))
        .collect();

    let note_ids: Vec<NoteId> = (0..n_notes).map(note_id).collect();
    let rater_ids: Vec<RaterId> = (0..n_raters).map(rater_id).collect();
    let mut first_rating = vec![i64::MAX; n_notes];
    let mut ratings = Vec::with_capacity(events.iter().map(Vec::len).sum());
    for (u, evs) in events.iter().enumerate() {
        for &(j, t, helpful) in evs {
            first_rating[j as usize] = first_rating[j as usize].min(t);
            ratings.push(RatingEvent {
                note_id: note_ids[j as usize].clone(),
                rater_id: rater_ids[u].clone(),
                created_at: t,
                level: if helpful {
                    RatingLevel::Helpful
                } else {
                    RatingLevel::NotHelpful
                },
            });
        }
    }
    ratings.sort_by(|a, b| (&a.note_id, &a.rater_id).cmp(&(&b.note_id, &b.rater_id)));

    let span = cfg.span_days as i64 * DAY_MS;
    let author_ids: Vec<AuthorId> = (0..n_authors).map(|a| AuthorId::new(format!("A{a:06}"))).collect();
    let mut note_records = Vec::with_capacity(n_notes);
    let mut annotations = Vec::with_capacity(n_notes);
    for (j, plan) in world.notes.iter().enumerate() {
        let created_at = if first_rating[j] == i64::MAX {
            cfg.start_millis + rng.random_range(0..span)
        } else {
            first_rating[j] - rng.random_range(0..3_600_000)
        };
        let tweet = TweetId::new(format!("T{j:07}"));
        note_records.push(NoteRecord {
            note_id: note_ids[j].clone(),
            tweet_id: tweet.clone(),
            author_participant_id: ParticipantId::new(format!("R{:07}", rng.random_range(0..n_raters))),
            classification: plan.classification,
            created_at,
        });
        annotations.push(PoliticalAnnotation {
            tweet_id: tweet,
            tweet_author_id: author_ids[plan.author].clone(),
            party: world.author_party[plan.author],
        });
    }
    let status = note_ids
        .iter()
        .map(|id| StatusRecord::unlocked(id.clone(), NoteStatus::Nmr))
        .collect();

    let truth = GroundTruth {
        seed: cfg.seed,
        rater_leaning: rater_ids.iter().cloned().zip(leaning.iter().copied()).collect(),
        rater_activity: rater_ids.iter().cloned().zip(activity.iter().copied()).collect(),
        rater_decile: rater_ids.iter().cloned().zip(decile.iter().copied()).collect(),
        note_type: note_ids
            .iter()
            .cloned()
            .zip(world.notes.iter().map(|n| n.kind))
            .collect(),
        author_party: author_ids
            .iter()
            .cloned()
            .zip(world.author_party.iter().copied())
            .collect(),
        pivotal: None,
    };
    Ok(SynthCorpus {
        corpus: Corpus {
            ratings,
            notes: note_records,
            status,
            annotations: Some(annotations),
        },
        truth,
    })
}

/// Two opposed rater blocs. Partisan notes are endorsed by one bloc only;
/// bridging notes by both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoBlocConfig {
    pub n_raters: usize,
    pub n_notes: usize,
    pub frac_bridging: f64,
    pub noise: f64,
    /// Probability that a given rater rates a given note.
    pub density: f64,
    pub seed: u64,
}

impl Default for TwoBlocConfig {
    fn default() -> Self {
        Self {
            n_raters: 2000,
            n_notes: 200,
            frac_bridging: 0.2,
            noise: 0.05,
            density: 0.25,
            seed: 0,
        }
    }
}

/// Returns the ratings and the set of bridging notes.
pub fn two_bloc(cfg: &TwoBlocConfig) -> (Vec<RatingEvent>, BTreeSet<NoteId>) {
    let n_bridging = (cfg.frac_bridging * cfg.n_notes as f64).round() as usize;
    let notes: Vec<NoteId> = (0..cfg.n_notes).map(note_id).collect();
    let mut ratings = Vec::new();
    for u in 0..cfg.n_raters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64 + 1);
        let rater = rater_id(u);
        let bloc = u % 2;
        for (j, note) in notes.iter().enumerate() {
            if rng.random::<f64>() >= cfg.density {
                continue;
            }
            let mut helpful = j < n_bridging || j % 2 == bloc;
            if rng.random::<f64>() < cfg.noise {
                helpful = !helpful;
            }
            ratings.push(RatingEvent {
                note_id: note.clone(),
                rater_id: rater.clone(),
                created_at: default_start() + rng.random_range(0..365 * DAY_MS),
                level: if helpful {
                    RatingLevel::Helpful
                } else {
                    RatingLevel::NotHelpful
                },
            });
        }
    }
    ratings.sort_by(|a, b| (&a.note_id, &a.rater_id).cmp(&(&b.note_id, &b.rater_id)));
    (ratings, notes[..n_bridging].iter().cloned().collect())
}

/// Everything about a corpus the planting search needs, computed once.
struct PlantBase<'a> {
    sc: &'a SynthCorpus,
    cfg: &'a ScorerConfig,
    sr: RaterId,
    t0: i64,
    /// Other raters' HELPFUL ratings per bridging note, earliest first.
    helpful: BTreeMap<NoteId, Vec<RatingEvent>>,
    partisan: Vec<NoteId>,
    max_other: usize,
}

impl PlantBase<'_> {
    fn build_ratings(
        &self,
        planted: &[NoteId],
        kept: &[usize],
        sr_ratings: &[RatingEvent],
    ) -> Vec<RatingEvent> {
        let planted_set: HashSet<&NoteId> = planted.iter().collect();
        let mut out: Vec<RatingEvent> = self
            .sc
            .corpus
            .ratings
            .iter()
            .filter(|r| !planted_set.contains(&r.note_id))
            .cloned()
            .collect();
        for (id, &m) in planted.iter().zip(kept) {
            out.extend(self.helpful[id][..m].iter().cloned());
        }
        out.extend(sr_ratings.iter().cloned());
        out
    }

    fn crh(&self, ratings: &[RatingEvent]) -> Result<BTreeSet<NoteId>, SynthError> {
        let a = score_corpus(ratings, &[], self.cfg)?;
        Ok(a.with_status(NoteStatus::Crh).cloned().collect())
    }

    fn sr_ratings(&self, planted: &[NoteId], rng: &mut ChaCha8Rng) -> Vec<RatingEvent> {
        let mut out = Vec::new();
        let mut push = |note: &NoteId, level| {
            out.push(RatingEvent {
                note_id: note.clone(),
                rater_id: self.sr.clone(),
                created_at: self.t0,
                level,
            })
        };
        for id in planted {
            push(id, RatingLevel::Helpful);
        }
        for id in &self.partisan {
            push(id, RatingLevel::NotHelpful);
        }
        let planted_set: HashSet<&NoteId> = planted.iter().collect();
        let mut filler: Vec<&NoteId> = self
            .helpful
            .keys()
            .filter(|id| !planted_set.contains(id))
            .collect();
        filler.shuffle(rng);
        let need = self.max_other.saturating_sub(planted.len() + self.partisan.len());
        for id in filler.into_iter().take(need) {
            push(id, RatingLevel::NotHelpful);
        }
        for (i, r) in out.iter_mut().enumerate() {
            r.created_at = self.t0 + i as i64;
        }
        out
    }

    /// One attempt at a fixed candidate set. Ok(None) means this set does
    /// not work; `bad` collects notes that can never reach CRH.
    fn attempt(
        &self,
        planted: &[NoteId],
        rng: &mut ChaCha8Rng,
        bad: &mut HashSet<NoteId>,
    ) -> Result<Option<Thinned>, SynthError> {
        let sr = self.sr_ratings(planted, rng);
        let caps: Vec<usize> = planted.iter().map(|id| self.helpful[id].len()).collect();
        let crh = self.crh(&self.build_ratings(planted, &caps, &sr))?;
        let mut ok = true;
        for id in planted {
            if !crh.contains(id) {
                bad.insert(id.clone());
                ok = false;
            }
        }
        if !ok {
            return Ok(None);
        }
        // smallest kept count that still reaches CRH with the super-rater
        let mut lo = vec![0usize; planted.len()];
        let mut hi = caps.clone();
        while lo.iter().zip(&hi).any(|(l, h)| h - l > 1) {
            let mid: Vec<usize> = lo
                .iter()
                .zip(&hi)
                .map(|(l, h)| if h - l > 1 { (l + h) / 2 } else { *h })
                .collect();
            let crh = self.crh(&self.build_ratings(planted, &mid, &sr))?;
            for (i, id) in planted.iter().enumerate() {
                if hi[i] - lo[i] > 1 {
                    if crh.contains(id) {
                        hi[i] = mid[i];
                    } else {
                        lo[i] = mid[i];
                    }
                }
            }
        }
        let mut kept = hi;
        let planted_set: BTreeSet<NoteId> = planted.iter().cloned().collect();
        for _ in 0..REPAIR_ROUNDS {
            let with = self.build_ratings(planted, &kept, &sr);
            let without: Vec<RatingEvent> =
                with.iter().filter(|r| r.rater_id != self.sr).cloned().collect();
            let (crh_with, crh_without) = (self.crh(&with)?, self.crh(&without)?);
            let lost: BTreeSet<NoteId> = crh_with.difference(&crh_without).cloned().collect();
            if lost == planted_set {
                if rank_raters(&with).first() != Some(&self.sr) {
                    return Ok(None);
                }
                return Ok(Some((with, kept)));
            }
            if !lost.is_subset(&planted_set) {
                return Ok(None);
            }
            let mut changed = false;
            for (i, id) in planted.iter().enumerate() {
                if !crh_with.contains(id) && kept[i] < caps[i] {
                    kept[i] += 1;
                    changed = true;
                } else if crh_without.contains(id) && kept[i] > 0 {
                    kept[i] -= 1;
                    changed = true;
                }
            }
            if !changed {
                return Ok(None);
            }
        }
        Ok(None)
    }
}

/// Adds one super-rater so that exactly `n_pivotal` bridging notes are CRH
/// with it and drop out of CRH without it. Planted notes are thinned to
/// their earliest HELPFUL ratings so that a single extra rating decides them.
pub fn plant_pivotal_rater(
    sc: &SynthCorpus,
    n_pivotal: usize,
    cfg: &ScorerConfig,
) -> Result<SynthCorpus, SynthError> {
    if n_pivotal == 0 {
        return Ok(sc.clone());
    }
    cfg.validate()?;
    let ratings = &sc.corpus.ratings;
    let mut sr = RaterId::new("S0000000");
    while ratings.iter().any(|r| r.rater_id == sr) {
        sr = RaterId::new(format!("{sr}0"));
    }
    let t0 = ratings
        .iter()
        .map(|r| r.created_at)
        .chain(sc.corpus.notes.iter().map(|n| n.created_at))
        .min()
        .unwrap_or(default_start())
        - DAY_MS;
    let mut helpful: BTreeMap<NoteId, Vec<RatingEvent>> = BTreeMap::new();
    let mut partisan = Vec::new();
    for (id, kind) in &sc.truth.note_type {
        match kind {
            NoteType::Bridging => {
                helpful.insert(id.clone(), Vec::new());
            }
            _ => partisan.push(id.clone()),
        }
    }
    let mut counts: BTreeMap<&RaterId, usize> = BTreeMap::new();
    for r in ratings {
        *counts.entry(&r.rater_id).or_default() += 1;
        if r.level == RatingLevel::Helpful {
            if let Some(v) = helpful.get_mut(&r.note_id) {
                v.push(r.clone());
            }
        }
    }
    for v in helpful.values_mut() {
        v.sort_by(|a, b| (a.created_at, &a.rater_id).cmp(&(b.created_at, &b.rater_id)));
    }
    let base = PlantBase {
        sc,
        cfg,
        sr: sr.clone(),
        t0,
        max_other: counts.values().copied().max().unwrap_or(0),
        helpful,
        partisan,
    };
    if base.max_other > base.helpful.len() + base.partisan.len() {
        return Err(SynthError::CannotPlant {
            attempts: 0,
            reason: "super-rater cannot out-rate the most active rater".into(),
        });
    }

    let min_n = cfg.min_ratings_for_status as usize;
    let mut bad: HashSet<NoteId> = base
        .helpful
        .iter()
        .filter(|(_, v)| v.len() + 1 < min_n)
        .map(|(id, _)| id.clone())
        .collect();
    for attempt in 0..PLANT_ATTEMPTS {
        let eligible: Vec<&NoteId> = base.helpful.keys().filter(|id| !bad.contains(*id)).collect();
        if eligible.len() < n_pivotal {
            return Err(SynthError::CannotPlant {
                attempts: attempt,
                reason: format!(
                    "{} bridging notes can reach CRH, {n_pivotal} requested",
                    eligible.len()
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sc.truth.seed);
        rng.set_stream((1 << 48) + attempt as u64);
        let mut planted: Vec<NoteId> = eligible
            .choose_multiple(&mut rng, n_pivotal)
            .map(|id| (*id).clone())
            .collect();
        planted.sort();
        if let Some((mut with, kept)) = base.attempt(&planted, &mut rng, &mut bad)? {
            with.sort_by(|a, b| (&a.note_id, &a.rater_id).cmp(&(&b.note_id, &b.rater_id)));
            let mut out = sc.clone();
            out.corpus.ratings = with;
            out.truth.pivotal = Some(PivotalPlant {
                rater_id: sr,
                kept_ratings: planted.iter().cloned().zip(kept).collect(),
                notes: planted,
                attempts: attempt + 1,
            });
            return Ok(out);
        }
    }
    Err(SynthError::CannotPlant {
        attempts: PLANT_ATTEMPTS,
        reason: "no candidate set verified".into(),
    })
}
