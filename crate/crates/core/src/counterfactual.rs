//! Rater-removal ladder: rescore after dropping the k most active raters
//! and compare each status set with the unperturbed baseline.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::clear_locks;
use crate::model::{NoteId, NoteStatus, RaterId, RatingEvent, StatusRecord};
use crate::scorer::{score_corpus, ScorerConfig, ScorerError, StatusAssignment};

pub const DEFAULT_KS: [usize; 8] = [0, 10, 100, 200, 500, 1000, 5000, 10000];

/// All raters ordered by rating count (descending), then earliest first
/// rating, then id.
pub fn rank_raters(ratings: &[RatingEvent]) -> Vec<RaterId> {
    let mut stats: HashMap<&RaterId, (u64, i64)> = HashMap::new();
    for r in ratings {
        let e = stats.entry(&r.rater_id).or_insert((0, i64::MAX));
        e.0 += 1;
        e.1 = e.1.min(r.created_at);
    }
    let mut order: Vec<(&RaterId, u64, i64)> = stats.into_iter().map(|(r, (c, t))| (r, c, t)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then_with(|| a.0.cmp(b.0)));
    order.into_iter().map(|(r, _, _)| r.clone()).collect()
}

pub fn top_k_raters(ratings: &[RatingEvent], k: usize) -> Vec<RaterId> {
    let mut ranked = rank_raters(ratings);
    ranked.truncate(k);
    ranked
}

/// Drops every rating by a removed rater; the rest keeps its order.
pub fn remove_raters(ratings: &[RatingEvent], removed: &HashSet<RaterId>) -> Vec<RatingEvent> {
    if removed.is_empty() {
        return ratings.to_vec();
    }
    ratings
        .par_iter()
        .filter(|r| !removed.contains(&r.rater_id))
        .cloned()
        .collect()
}

/// Jaccard similarity with J(∅, ∅) = 1.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusStability {
    pub status: NoteStatus,
    pub n_notes: usize,
    pub jaccard: f64,
    pub retained: usize,
    pub gained: usize,
    pub lost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub k: usize,
    pub removed_raters: Vec<RaterId>,
    pub n_ratings: usize,
    pub config_digest: String,
    pub per_status: Vec<StatusStability>,
    /// Notes that left CRH relative to the baseline.
    pub lost_crh: Vec<NoteId>,
    #[serde(skip)]
    pub statuses: StatusAssignment,
}

impl ScenarioResult {
    pub fn stability(&self, status: NoteStatus) -> &StatusStability {
        self.per_status
            .iter()
            .find(|s| s.status == status)
            .expect("every status reported")
    }

    pub fn status_set(&self, status: NoteStatus) -> BTreeSet<NoteId> {
        self.statuses.with_status(status).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub config_digest: String,
    pub locks_cleared: bool,
    pub n_notes: usize,
    pub scenarios: Vec<ScenarioResult>,
}

impl StabilityReport {
    pub fn scenario(&self, k: usize) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.k == k)
    }

    /// `k,status,n_notes,jaccard,gained,lost`
    pub fn write_heatmap_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "status", "n_notes", "jaccard", "gained", "lost"])?;
        for sc in &self.scenarios {
            for s in &sc.per_status {
                out.write_record([
                    sc.k.to_string(),
                    s.status.short().to_string(),
                    s.n_notes.to_string(),
                    format!("{:.12}", s.jaccard),
                    s.gained.to_string(),
                    s.lost.to_string(),
                ])?;
            }
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LadderOptions {
    pub keep_locks: bool,
}

/// Fills notes of the baseline universe that lost all ratings as NMR.
fn complete(mut s: StatusAssignment, universe: &BTreeSet<NoteId>) -> StatusAssignment {
    for id in universe {
        s.notes.entry(id.clone()).or_insert(crate::scorer::NoteScore {
            status: NoteStatus::Nmr,
            note_intercept: None,
            abs_factor: None,
            n_ratings: 0,
            locked: false,
        });
    }
    s
}

fn compare(baseline: &StatusAssignment, scenario: &StatusAssignment) -> (Vec<StatusStability>, Vec<NoteId>) {
    let per_status = NoteStatus::ALL
        .iter()
        .map(|&status| {
            let b: BTreeSet<&NoteId> = baseline.with_status(status).collect();
            let s: BTreeSet<&NoteId> = scenario.with_status(status).collect();
            let retained = b.intersection(&s).count();
            StatusStability {
                status,
                n_notes: s.len(),
                jaccard: jaccard(&b, &s),
                retained,
                gained: s.len() - retained,
                lost: b.len() - retained,
            }
        })
        .collect();
    let lost_crh = baseline
        .with_status(NoteStatus::Crh)
        .filter(|id| scenario.status(id) != Some(NoteStatus::Crh))
        .cloned()
        .collect();
    (per_status, lost_crh)
}

/// Runs every scenario in `ks` (0 is always included as the baseline).
/// Each scenario retrains from scratch with the same config.
pub fn run_ladder(
    ratings: &[RatingEvent],
    status_history: &[StatusRecord],
    ks: &[usize],
    config: &ScorerConfig,
    opts: LadderOptions,
) -> Result<StabilityReport, ScorerError> {
    let history: Vec<StatusRecord> = if opts.keep_locks {
        status_history.to_vec()
    } else {
        clear_locks(status_history.to_vec())
    };
    let mut ks: Vec<usize> = ks.to_vec();
    ks.push(0);
    ks.sort_unstable();
    ks.dedup();
    let ranked = rank_raters(ratings);

    let assignments: Vec<(usize, Vec<RaterId>, usize, StatusAssignment)> = ks
        .par_iter()
        .map(|&k| {
            let removed: Vec<RaterId> = ranked.iter().take(k).cloned().collect();
            let set: HashSet<RaterId> = removed.iter().cloned().collect();
            let kept = remove_raters(ratings, &set);
            let s = score_corpus(&kept, &history, config)?;
            Ok((k, removed, kept.len(), s))
        })
        .collect::<Result<_, ScorerError>>()?;

    let universe: BTreeSet<NoteId> = assignments[0].3.notes.keys().cloned().collect();
    let baseline = assignments[0].3.clone();
    let scenarios = assignments
        .into_iter()
        .map(|(k, removed, n_ratings, s)| {
            let s = complete(s, &universe);
            let (per_status, lost_crh) = compare(&baseline, &s);
            ScenarioResult {
                k,
                removed_raters: removed,
                n_ratings,
                config_digest: s.config_digest.clone(),
                per_status,
                lost_crh,
                statuses: s,
            }
        })
        .collect();
    Ok(StabilityReport {
        config_digest: config.digest(),
        locks_cleared: !opts.keep_locks,
        n_notes: universe.len(),
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RatingLevel;
    use proptest::prelude::*;

    fn ev(note: &str, rater: &str, t: i64) -> RatingEvent {
        RatingEvent {
            note_id: note.into(),
            rater_id: rater.into(),
            created_at: t,
            level: RatingLevel::Helpful,
        }
    }

    #[test]
    fn top_k_examples() {
        let mut r = Vec::new();
        for i in 0..5 {
            r.push(ev(&format!("a{i}"), "a", 10 + i));
            r.push(ev(&format!("c{i}"), "c", 20 + i));
        }
        for i in 0..3 {
            r.push(ev(&format!("b{i}"), "b", i));
        }
        assert!(top_k_raters(&r, 0).is_empty());
        assert_eq!(top_k_raters(&r, 2), vec![RaterId::from("a"), "c".into()]);
        assert_eq!(top_k_raters(&r, 10).len(), 3);
        // equal counts and equal first timestamps fall back to id order
        let tie = vec![ev("x", "z", 0), ev("y", "y", 0)];
        assert_eq!(top_k_raters(&tie, 1), vec![RaterId::from("y")]);
    }

    #[test]
    fn remove_examples() {
        let r = vec![ev("n1", "a", 0), ev("n1", "b", 1), ev("n2", "c", 2), ev("n3", "b", 3)];
        assert_eq!(remove_raters(&r, &HashSet::new()), r);
        let all: HashSet<RaterId> = ["a", "b", "c"].iter().map(|s| RaterId::from(*s)).collect();
        assert!(remove_raters(&r, &all).is_empty());
        let one: HashSet<RaterId> = [RaterId::from("b")].into_iter().collect();
        assert_eq!(remove_raters(&r, &one), vec![r[0].clone(), r[2].clone()]);
    }

    #[test]
    fn jaccard_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<String>>();
        assert_eq!(jaccard(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(jaccard(&s(&["a", "b", "c"]), &s(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 1.0);
    }

    proptest! {
        #[test]
        fn jaccard_bounds_and_symmetry(a in proptest::collection::btree_set(0u8..20, 0..15),
                                       b in proptest::collection::btree_set(0u8..20, 0..15)) {
            let j = jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j, jaccard(&b, &a));
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }
    }

    #[test]
    fn ladder_baseline_and_algebra() {
        let mut r = Vec::new();
        for u in 0..40 {
            for n in 0..25 {
                if (u * 7 + n * 3) % 4 != 0 {
                    let level = RatingLevel::from_code(((u + n) % 3) as u8).unwrap();
                    r.push(RatingEvent {
                        level,
                        ..ev(&format!("n{n}"), &format!("u{u:02}"), (u * 100 + n) as i64)
                    });
                }
            }
        }
        let cfg = ScorerConfig::default();
        let rep = run_ladder(&r, &[], &[0, 1, 5, 40], &cfg, LadderOptions::default()).unwrap();
        let base = rep.scenario(0).unwrap();
        for s in &base.per_status {
            assert_eq!(s.jaccard, 1.0);
            assert_eq!((s.gained, s.lost), (0, 0));
        }
        let mut prev = usize::MAX;
        for sc in &rep.scenarios {
            assert!(sc.n_ratings < prev);
            prev = sc.n_ratings;
            let total: usize = sc.per_status.iter().map(|s| s.n_notes).sum();
            assert_eq!(total, rep.n_notes);
            for s in &sc.per_status {
                let b = base.stability(s.status).n_notes;
                assert_eq!(s.retained + s.gained, s.n_notes);
                assert_eq!(s.retained + s.lost, b);
                let union = b + s.n_notes - s.retained;
                let j = if union == 0 { 1.0 } else { s.retained as f64 / union as f64 };
                assert_eq!(j, s.jaccard);
            }
        }
        // removing everyone leaves every note NMR
        let all = rep.scenario(40).unwrap();
        assert_eq!(all.n_ratings, 0);
        assert_eq!(all.stability(NoteStatus::Nmr).n_notes, rep.n_notes);
    }

    #[test]
    fn locks_kept_only_on_request() {
        let r: Vec<RatingEvent> = (0..10).map(|u| ev("n", &format!("u{u}"), u)).collect();
        let mut rec = StatusRecord::unlocked("n".into(), NoteStatus::Crnh);
        rec.locked_status = Some(NoteStatus::Crnh);
        let cfg = ScorerConfig::default();
        let kept = run_ladder(&r, &[rec.clone()], &[0], &cfg, LadderOptions { keep_locks: true }).unwrap();
        assert_eq!(kept.scenario(0).unwrap().statuses.status(&"n".into()), Some(NoteStatus::Crnh));
        let cleared = run_ladder(&r, &[rec], &[0], &cfg, LadderOptions::default()).unwrap();
        assert_ne!(cleared.scenario(0).unwrap().statuses.status(&"n".into()), Some(NoteStatus::Crnh));
    }
}
