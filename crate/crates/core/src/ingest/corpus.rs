use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    cache, parse_annotations_csv, parse_notes_tsv, parse_status_history_tsv, stream_ratings_tsv,
    IngestError, ParseOptions, ParseReport,
};
use crate::model::{dedup_ratings, NoteRecord, PoliticalAnnotation, RatingEvent, StatusRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_notes: u64,
    pub n_raters: u64,
    pub n_ratings: u64,
    /// Smallest and largest rating `created_at`, absent for an empty corpus.
    pub time_span: Option<[i64; 2]>,
    pub n_status_records: u64,
    pub n_annotations: Option<u64>,
}

/// A fully parsed data release. Ratings are deduplicated and sorted by
/// (note, rater).
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub ratings: Vec<RatingEvent>,
    pub notes: Vec<NoteRecord>,
    pub status: Vec<StatusRecord>,
    pub annotations: Option<Vec<PoliticalAnnotation>>,
}

/// Per-file parse reports collected while loading a corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub ratings: ParseReport,
    pub notes: ParseReport,
    pub status: ParseReport,
    pub annotations: Option<ParseReport>,
    pub duplicate_ratings_removed: u64,
    pub files: Vec<String>,
}

/// Expands a glob (or literal path) into files sorted by name.
fn expand(pattern: &str) -> Result<Vec<PathBuf>, IngestError> {
    let mut files: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| IngestError::NoInputFiles {
            pattern: format!("{pattern} ({e})"),
        })?
        .filter_map(Result::ok)
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(IngestError::NoInputFiles {
            pattern: pattern.to_string(),
        });
    }
    Ok(files)
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 20, f))
        .map_err(|e| IngestError::from(e).in_file(path))
}

impl Corpus {
    /// Parses multi-part inputs; each argument may be a glob pattern.
    pub fn from_files(
        ratings: &str,
        notes: &str,
        status: &str,
        annotations: Option<&str>,
        opts: ParseOptions,
    ) -> Result<(Corpus, LoadReport), IngestError> {
        let mut report = LoadReport::default();
        let mut all_ratings = Vec::new();
        for path in expand(ratings)? {
            let r = stream_ratings_tsv(open(&path)?, opts, |e| all_ratings.push(e))
                .map_err(|e| e.in_file(&path))?;
            report.ratings.merge(r);
            report.files.push(path.display().to_string());
        }
        let n_raw = all_ratings.len() as u64;
        let ratings = dedup_ratings(all_ratings);
        report.duplicate_ratings_removed = n_raw - ratings.len() as u64;

        let mut all_notes = Vec::new();
        for path in expand(notes)? {
            let (n, r) = parse_notes_tsv(open(&path)?, opts).map_err(|e| e.in_file(&path))?;
            all_notes.extend(n);
            report.notes.merge(r);
            report.files.push(path.display().to_string());
        }
        let mut all_status = Vec::new();
        for path in expand(status)? {
            let (s, r) =
                parse_status_history_tsv(open(&path)?, opts).map_err(|e| e.in_file(&path))?;
            all_status.extend(s);
            report.status.merge(r);
            report.files.push(path.display().to_string());
        }
        // parts are unique individually; check across parts too
        let mut seen = HashSet::new();
        for n in &all_notes {
            if !seen.insert(&n.note_id) {
                return Err(IngestError::DuplicateNote {
                    note_id: n.note_id.to_string(),
                });
            }
        }
        seen.clear();
        for s in &all_status {
            if !seen.insert(&s.note_id) {
                return Err(IngestError::DuplicateNote {
                    note_id: s.note_id.to_string(),
                });
            }
        }

        let annotations = match annotations {
            Some(pattern) => {
                let mut anns = Vec::new();
                let mut rep = ParseReport::default();
                for path in expand(pattern)? {
                    let (a, r) = parse_annotations_csv(open(&path)?, opts)
                        .map_err(|e| e.in_file(&path))?;
                    anns.extend(a);
                    rep.merge(r);
                    report.files.push(path.display().to_string());
                }
                report.annotations = Some(rep);
                Some(anns)
            }
            None => None,
        };
        Ok((
            Corpus {
                ratings,
                notes: all_notes,
                status: all_status,
                annotations,
            },
            report,
        ))
    }

    /// Loads a directory that holds either a binary cache written by
    /// [`Corpus::write_cache`] or raw release files (`ratings-*.tsv`,
    /// `notes-*.tsv`, `noteStatusHistory-*.tsv`, optional `annotations.csv`).
    pub fn load_dir(dir: &Path, opts: ParseOptions) -> Result<Corpus, IngestError> {
        if dir.join(cache::CACHE_FILES[0]).exists() {
            let (ratings, notes, status, annotations) = cache::read_cache(dir)?;
            return Ok(Corpus {
                ratings,
                notes,
                status,
                annotations,
            });
        }
        let d = dir.display();
        let ann = dir.join("annotations.csv");
        let ann_pattern = ann.display().to_string();
        let (corpus, _) = Corpus::from_files(
            &format!("{d}/ratings-*.tsv"),
            &format!("{d}/notes-*.tsv"),
            &format!("{d}/noteStatusHistory-*.tsv"),
            ann.exists().then_some(ann_pattern.as_str()),
            opts,
        )?;
        Ok(corpus)
    }

    pub fn write_cache(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        cache::write_cache(
            dir,
            &self.ratings,
            &self.notes,
            &self.status,
            self.annotations.as_deref(),
        )
    }

    pub fn stats(&self) -> CorpusStats {
        let raters: HashSet<&str> = self.ratings.iter().map(|r| r.rater_id.as_str()).collect();
        let min = self.ratings.iter().map(|r| r.created_at).min();
        let max = self.ratings.iter().map(|r| r.created_at).max();
        CorpusStats {
            n_notes: self.notes.len() as u64,
            n_raters: raters.len() as u64,
            n_ratings: self.ratings.len() as u64,
            time_span: min.zip(max).map(|(a, b)| [a, b]),
            n_status_records: self.status.len() as u64,
            n_annotations: self.annotations.as_ref().map(|a| a.len() as u64),
        }
    }

    /// Writes the corpus in the release file layout under `dir`.
    pub fn write_release_files(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("ratings-00000.tsv"))?);
        write_ratings_tsv(&mut w, &self.ratings)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("notes-00000.tsv"))?);
        write_notes_tsv(&mut w, &self.notes)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("noteStatusHistory-00000.tsv"))?);
        write_status_tsv(&mut w, &self.status)?;
        w.flush()?;
        if let Some(anns) = &self.annotations {
            let mut w = BufWriter::new(File::create(dir.join("annotations.csv"))?);
            write_annotations_csv(&mut w, anns)?;
            w.flush()?;
        }
        Ok(())
    }
}

pub fn write_ratings_tsv<W: Write>(w: &mut W, ratings: &[RatingEvent]) -> std::io::Result<()> {
    writeln!(w, "noteId\traterParticipantId\tcreatedAtMillis\thelpfulnessLevel")?;
    for r in ratings {
        writeln!(w, "{}\t{}\t{}\t{}", r.note_id, r.rater_id, r.created_at, r.level)?;
    }
    Ok(())
}

pub fn write_notes_tsv<W: Write>(w: &mut W, notes: &[NoteRecord]) -> std::io::Result<()> {
    writeln!(
        w,
        "noteId\tnoteAuthorParticipantId\tcreatedAtMillis\ttweetId\tclassification"
    )?;
    for n in notes {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            n.note_id, n.author_participant_id, n.created_at, n.tweet_id, n.classification
        )?;
    }
    Ok(())
}

/// Extra timestamp columns are emitted in sorted name order after the
/// required ones.
pub fn write_status_tsv<W: Write>(w: &mut W, status: &[StatusRecord]) -> std::io::Result<()> {
    let mut extra: Vec<&str> = status
        .iter()
        .flat_map(|s| s.status_timestamps.keys().map(String::as_str))
        .filter(|k| *k != crate::model::LOCK_TIMESTAMP_KEY)
        .collect();
    extra.sort_unstable();
    extra.dedup();
    write!(w, "noteId\tcurrentStatus\tlockedStatus\t{}", crate::model::LOCK_TIMESTAMP_KEY)?;
    for k in &extra {
        write!(w, "\t{k}")?;
    }
    writeln!(w)?;
    let opt = |v: Option<i64>| v.map(|t| t.to_string()).unwrap_or_default();
    for s in status {
        write!(
            w,
            "{}\t{}\t{}\t{}",
            s.note_id,
            s.current_status,
            s.locked_status.map(|l| l.token()).unwrap_or(""),
            opt(s.lock_timestamp())
        )?;
        for k in &extra {
            write!(w, "\t{}", opt(s.status_timestamps.get(*k).copied()))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_annotations_csv<W: Write>(
    w: &mut W,
    annotations: &[PoliticalAnnotation],
) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["tweet_id", "author_id", "party"])?;
    for a in annotations {
        csv.write_record([a.tweet_id.as_str(), a.tweet_author_id.as_str(), a.party.token()])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_notes_tsv, parse_ratings_tsv, parse_status_history_tsv};
    use crate::model::{NoteClassification, NoteStatus, Party, RatingLevel, LOCK_TIMESTAMP_KEY};
    use proptest::prelude::*;

    fn arb_id() -> impl Strategy<Value = String> {
        "[A-Za-z0-9]{1,12}"
    }

    fn arb_rating() -> impl Strategy<Value = RatingEvent> {
        (arb_id(), arb_id(), 0i64..i64::MAX / 2, 0u8..3).prop_map(|(n, r, t, l)| RatingEvent {
            note_id: n.into(),
            rater_id: r.into(),
            created_at: t,
            level: RatingLevel::from_code(l).unwrap(),
        })
    }

    fn arb_status() -> impl Strategy<Value = StatusRecord> {
        (
            arb_id(),
            0usize..3,
            prop::option::of(0usize..3),
            prop::option::of(0i64..1_000_000),
        )
            .prop_map(|(id, cur, lock, ts)| {
                let mut s = StatusRecord::unlocked(id.into(), NoteStatus::ALL[cur]);
                s.locked_status = lock.map(|l| NoteStatus::ALL[l]);
                if let Some(t) = ts {
                    s.status_timestamps.insert(LOCK_TIMESTAMP_KEY.into(), t);
                    s.status_timestamps
                        .insert("timestampMillisOfCurrentStatus".into(), t + 1);
                }
                s
            })
    }

    proptest! {
        #[test]
        fn ratings_tsv_round_trip(ratings in prop::collection::vec(arb_rating(), 0..20)) {
            let mut buf = Vec::new();
            write_ratings_tsv(&mut buf, &ratings).unwrap();
            let (parsed, _) = parse_ratings_tsv(&buf[..], ParseOptions::strict()).unwrap();
            prop_assert_eq!(parsed, ratings);
        }

        #[test]
        fn status_tsv_round_trip(records in prop::collection::vec(arb_status(), 0..10)) {
            let mut seen = HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.note_id.clone())).collect();
            let mut buf = Vec::new();
            write_status_tsv(&mut buf, &records).unwrap();
            let (parsed, _) = parse_status_history_tsv(&buf[..], ParseOptions::strict()).unwrap();
            prop_assert_eq!(parsed, records);
        }
    }

    fn sample_corpus() -> Corpus {
        let notes = vec![NoteRecord {
            note_id: "n1".into(),
            tweet_id: "t1".into(),
            author_participant_id: "w1".into(),
            classification: NoteClassification::NotMisleading,
            created_at: 3,
        }];
        let mut status = StatusRecord::unlocked("n1".into(), NoteStatus::Crh);
        status.locked_status = Some(NoteStatus::Crh);
        status.status_timestamps.insert(LOCK_TIMESTAMP_KEY.into(), 44);
        Corpus {
            ratings: vec![RatingEvent {
                note_id: "n1".into(),
                rater_id: "r1".into(),
                created_at: 9,
                level: RatingLevel::NotHelpful,
            }],
            notes,
            status: vec![status],
            annotations: Some(vec![PoliticalAnnotation {
                tweet_id: "t1".into(),
                tweet_author_id: "au".into(),
                party: Party::Republican,
            }]),
        }
    }

    #[test]
    fn notes_tsv_round_trip() {
        let c = sample_corpus();
        let mut buf = Vec::new();
        write_notes_tsv(&mut buf, &c.notes).unwrap();
        let (parsed, _) = parse_notes_tsv(&buf[..], ParseOptions::strict()).unwrap();
        assert_eq!(parsed, c.notes);
    }

    #[test]
    fn cache_and_release_files_round_trip() {
        let c = sample_corpus();
        let dir = tempfile::tempdir().unwrap();
        c.write_release_files(dir.path()).unwrap();
        let raw = Corpus::load_dir(dir.path(), ParseOptions::strict()).unwrap();
        assert_eq!(raw.ratings, c.ratings);
        assert_eq!(raw.notes, c.notes);
        assert_eq!(raw.status, c.status);
        assert_eq!(raw.annotations, c.annotations);

        let cache_dir = tempfile::tempdir().unwrap();
        c.write_cache(cache_dir.path()).unwrap();
        let cached = Corpus::load_dir(cache_dir.path(), ParseOptions::strict()).unwrap();
        assert_eq!(cached.ratings, c.ratings);
        assert_eq!(cached.notes, c.notes);
        assert_eq!(cached.status, c.status);
        assert_eq!(cached.annotations, c.annotations);
        assert_eq!(cached.stats(), c.stats());
    }

    #[test]
    fn multi_part_files_concatenate_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let header = "noteId\traterParticipantId\tcreatedAtMillis\thelpfulnessLevel\n";
        std::fs::write(dir.path().join("ratings-00001.tsv"), format!("{header}n2\tr1\t5\tHELPFUL\n")).unwrap();
        std::fs::write(dir.path().join("ratings-00000.tsv"), format!("{header}n1\tr1\t4\tHELPFUL\nn2\tr1\t1\tNOT_HELPFUL\n")).unwrap();
        let c = sample_corpus();
        let mut buf = Vec::new();
        write_notes_tsv(&mut buf, &c.notes).unwrap();
        std::fs::write(dir.path().join("notes-00000.tsv"), &buf).unwrap();
        buf.clear();
        write_status_tsv(&mut buf, &c.status).unwrap();
        std::fs::write(dir.path().join("noteStatusHistory-00000.tsv"), &buf).unwrap();
        let d = dir.path().display();
        let (corpus, report) = Corpus::from_files(
            &format!("{d}/ratings-*.tsv"),
            &format!("{d}/notes-*.tsv"),
            &format!("{d}/noteStatusHistory-*.tsv"),
            None,
            ParseOptions::strict(),
        )
        .unwrap();
        assert_eq!(report.ratings.rows, 3);
        assert_eq!(report.duplicate_ratings_removed, 1);
        assert_eq!(corpus.ratings.len(), 2);
        assert_eq!(corpus.ratings[1].level, RatingLevel::Helpful);
        assert!(report.files[0].ends_with("ratings-00000.tsv"));
        let stats = corpus.stats();
        assert_eq!(stats.n_raters, 1);
        assert_eq!(stats.time_span, Some([4, 5]));
    }

    #[test]
    fn missing_inputs_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Corpus::load_dir(dir.path(), ParseOptions::strict()),
            Err(IngestError::NoInputFiles { .. })
        ));
    }
}
