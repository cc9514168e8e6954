//! Streaming parsers for the public notes/ratings release and the political
//! annotation table, plus the joins and transforms built on them.

mod cache;
mod corpus;
mod tsv;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AuthorId, NoteClassification, NoteId, NoteRecord, NoteStatus, Party, ParticipantId,
    PoliticalAnnotation, RaterId, RatingEvent, StatusRecord, TweetId, LOCK_TIMESTAMP_KEY,
};
use tsv::{field, parse_millis, Interner, TsvReader};

pub use cache::{read_cache, write_cache, CACHE_FILES};
pub use corpus::{
    write_annotations_csv, write_notes_tsv, write_ratings_tsv, write_status_tsv, Corpus, CorpusStats,
    LoadReport,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("input is empty (no header line)")]
    EmptyInput,
    #[error("missing required column `{name}`")]
    MissingColumn { name: String },
    #[error("malformed row at line {line}: {cause}")]
    MalformedRow { line: u64, cause: String },
    #[error("duplicate note id {note_id}")]
    DuplicateNote { note_id: String },
    #[error("author {author_id} is annotated with both parties")]
    ConflictingAnnotation { author_id: String },
    #[error("no input files match {pattern}")]
    NoInputFiles { pattern: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error("invalid cache: {0}")]
    Cache(String),
}

impl IngestError {
    pub(crate) fn in_file(self, path: &std::path::Path) -> Self {
        IngestError::File {
            path: path.display().to_string(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Skip and count malformed rows instead of failing on the first one.
    pub lenient: bool,
}

impl ParseOptions {
    pub fn strict() -> Self {
        Self { lenient: false }
    }

    pub fn lenient() -> Self {
        Self { lenient: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: u64,
    pub skipped: u64,
    /// Up to the first ten skipped-row diagnostics.
    pub first_errors: Vec<String>,
}

impl ParseReport {
    fn skip(&mut self, line: u64, cause: String) {
        self.skipped += 1;
        if self.first_errors.len() < 10 {
            self.first_errors.push(format!("line {line}: {cause}"));
        }
    }

    pub fn merge(&mut self, other: ParseReport) {
        self.rows += other.rows;
        self.skipped += other.skipped;
        for e in other.first_errors {
            if self.first_errors.len() < 10 {
                self.first_errors.push(e);
            }
        }
    }
}

/// Drives `decode` over every data row, applying the strict/lenient policy.
fn for_each_row<R, T>(
    reader: &mut TsvReader<R>,
    opts: ParseOptions,
    report: &mut ParseReport,
    mut decode: impl FnMut(&[&str]) -> Result<T, String>,
    mut sink: impl FnMut(T),
) -> Result<(), IngestError>
where
    R: BufRead,
{
    while let Some((line, row)) = reader.next_row()? {
        match decode(&row) {
            Ok(v) => {
                report.rows += 1;
                sink(v);
            }
            Err(cause) if opts.lenient => report.skip(line, cause),
            Err(cause) => return Err(IngestError::MalformedRow { line, cause }),
        }
    }
    Ok(())
}

/// Streams rating events out of a `ratings-*.tsv` source into `sink`.
pub fn stream_ratings_tsv<R: BufRead>(
    src: R,
    opts: ParseOptions,
    mut sink: impl FnMut(RatingEvent),
) -> Result<ParseReport, IngestError> {
    let mut reader = TsvReader::new(src)?;
    let note_col = reader.column("noteId")?;
    let rater_col = reader.column("raterParticipantId")?;
    let time_col = reader.column("createdAtMillis")?;
    let level_col = reader.column("helpfulnessLevel")?;
    let mut notes = Interner::default();
    let mut raters = Interner::default();
    let mut report = ParseReport::default();
    for_each_row(
        &mut reader,
        opts,
        &mut report,
        |row| {
            let note = field(row, note_col, "noteId")?;
            let rater = field(row, rater_col, "raterParticipantId")?;
            let created_at = parse_millis(field(row, time_col, "createdAtMillis")?, "createdAtMillis")?;
            let level = field(row, level_col, "helpfulnessLevel")?
                .parse()
                .map_err(|e: crate::model::ModelError| e.to_string())?;
            Ok(RatingEvent {
                note_id: NoteId::from_arc(notes.intern(note)),
                rater_id: RaterId::from_arc(raters.intern(rater)),
                created_at,
                level,
            })
        },
        &mut sink,
    )?;
    Ok(report)
}

pub fn parse_ratings_tsv<R: BufRead>(
    src: R,
    opts: ParseOptions,
) -> Result<(Vec<RatingEvent>, ParseReport), IngestError> {
    let mut out = Vec::new();
    let report = stream_ratings_tsv(src, opts, |e| out.push(e))?;
    Ok((out, report))
}

pub fn parse_notes_tsv<R: BufRead>(
    src: R,
    opts: ParseOptions,
) -> Result<(Vec<NoteRecord>, ParseReport), IngestError> {
    let mut reader = TsvReader::new(src)?;
    let note_col = reader.column("noteId")?;
    let author_col = reader.column("noteAuthorParticipantId")?;
    let tweet_col = reader.column("tweetId")?;
    let class_col = reader.column("classification")?;
    let time_col = reader.column("createdAtMillis")?;
    let mut report = ParseReport::default();
    let mut out = Vec::new();
    for_each_row(
        &mut reader,
        opts,
        &mut report,
        |row| {
            Ok(NoteRecord {
                note_id: field(row, note_col, "noteId")?.into(),
                author_participant_id: ParticipantId::from(field(
                    row,
                    author_col,
                    "noteAuthorParticipantId",
                )?),
                tweet_id: TweetId::from(field(row, tweet_col, "tweetId")?),
                classification: field(row, class_col, "classification")?
                    .parse()
                    .map_err(|e: crate::model::ModelError| e.to_string())?,
                created_at: parse_millis(field(row, time_col, "createdAtMillis")?, "createdAtMillis")?,
            })
        },
        |n| out.push(n),
    )?;
    ensure_unique_notes(out.iter().map(|n| &n.note_id))?;
    Ok((out, report))
}

fn ensure_unique_notes<'a>(ids: impl Iterator<Item = &'a NoteId>) -> Result<(), IngestError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(IngestError::DuplicateNote {
                note_id: id.to_string(),
            });
        }
    }
    Ok(())
}

fn is_placeholder(v: &str) -> bool {
    matches!(v, "" | "-1" | "NaN" | "nan" | "None" | "null")
}

pub fn parse_status_history_tsv<R: BufRead>(
    src: R,
    opts: ParseOptions,
) -> Result<(Vec<StatusRecord>, ParseReport), IngestError> {
    let mut reader = TsvReader::new(src)?;
    let note_col = reader.column("noteId")?;
    let status_col = reader.column("currentStatus")?;
    let locked_col = reader.column("lockedStatus")?;
    reader.column(LOCK_TIMESTAMP_KEY)?;
    let ts_cols: Vec<(usize, String)> = reader
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("timestampMillisOf"))
        .map(|(i, c)| (i, c.clone()))
        .collect();
    let mut report = ParseReport::default();
    let mut out = Vec::new();
    for_each_row(
        &mut reader,
        opts,
        &mut report,
        |row| {
            let note_id: NoteId = field(row, note_col, "noteId")?.into();
            let current_status: NoteStatus = field(row, status_col, "currentStatus")?
                .parse()
                .map_err(|e: crate::model::ModelError| e.to_string())?;
            let locked_raw = row.get(locked_col).copied().unwrap_or("");
            let locked_status = if is_placeholder(locked_raw) {
                None
            } else {
                Some(
                    locked_raw
                        .parse()
                        .map_err(|e: crate::model::ModelError| e.to_string())?,
                )
            };
            let mut status_timestamps = BTreeMap::new();
            for (idx, name) in &ts_cols {
                let v = row.get(*idx).copied().unwrap_or("");
                if !is_placeholder(v) {
                    status_timestamps.insert(name.clone(), parse_millis(v, name)?);
                }
            }
            Ok(StatusRecord {
                note_id,
                current_status,
                locked_status,
                status_timestamps,
            })
        },
        |r| out.push(r),
    )?;
    ensure_unique_notes(out.iter().map(|r| &r.note_id))?;
    Ok((out, report))
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    tweet_id: String,
    author_id: String,
    party: String,
}

/// Reads `annotations.csv` (`tweet_id,author_id,party`, party in {D,R}).
pub fn parse_annotations_csv<R: Read>(
    src: R,
    opts: ParseOptions,
) -> Result<(Vec<PoliticalAnnotation>, ParseReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(src);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            line: 1,
            cause: e.to_string(),
        })?
        .clone();
    for name in ["tweet_id", "author_id", "party"] {
        if !headers.iter().any(|h| h == name) {
            return Err(IngestError::MissingColumn {
                name: name.to_string(),
            });
        }
    }
    let mut report = ParseReport::default();
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let line = i as u64 + 2;
        let decoded = rec.map_err(|e| e.to_string()).and_then(|row| {
            if row.tweet_id.is_empty() || row.author_id.is_empty() {
                return Err("empty id".to_string());
            }
            let party: Party = row.party.trim().parse().map_err(|e: crate::model::ModelError| e.to_string())?;
            Ok(PoliticalAnnotation {
                tweet_id: row.tweet_id.into(),
                tweet_author_id: row.author_id.into(),
                party,
            })
        });
        match decoded {
            Ok(a) => {
                report.rows += 1;
                out.push(a);
            }
            Err(cause) if opts.lenient => report.skip(line, cause),
            Err(cause) => return Err(IngestError::MalformedRow { line, cause }),
        }
    }
    Ok((out, report))
}

/// Erases lock fields so every note becomes eligible for re-scoring.
pub fn clear_locks(records: Vec<StatusRecord>) -> Vec<StatusRecord> {
    records
        .into_iter()
        .map(|mut r| {
            r.locked_status = None;
            r.status_timestamps.remove(LOCK_TIMESTAMP_KEY);
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRating {
    pub rating: RatingEvent,
    pub note_classification: NoteClassification,
    pub tweet_author_id: AuthorId,
    pub party: Party,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinOutput {
    pub annotated: Vec<AnnotatedRating>,
    /// Ratings whose note is unknown or whose tweet carries no annotation.
    pub dropped: u64,
}

/// Attaches tweet author and party to every rating whose note refers to an
/// annotated tweet. Output follows input rating order.
pub fn join_political(
    ratings: &[RatingEvent],
    notes: &[NoteRecord],
    annotations: &[PoliticalAnnotation],
) -> Result<JoinOutput, IngestError> {
    let mut author_party: HashMap<&AuthorId, Party> = HashMap::new();
    for a in annotations {
        match author_party.insert(&a.tweet_author_id, a.party) {
            Some(prev) if prev != a.party => {
                return Err(IngestError::ConflictingAnnotation {
                    author_id: a.tweet_author_id.to_string(),
                })
            }
            _ => {}
        }
    }
    let by_tweet: HashMap<&TweetId, &PoliticalAnnotation> =
        annotations.iter().map(|a| (&a.tweet_id, a)).collect();
    let by_note: HashMap<&NoteId, (&PoliticalAnnotation, NoteClassification)> = notes
        .iter()
        .filter_map(|n| by_tweet.get(&n.tweet_id).map(|a| (&n.note_id, (*a, n.classification))))
        .collect();

    let mut out = JoinOutput::default();
    for r in ratings {
        match by_note.get(&r.note_id) {
            Some((a, classification)) => out.annotated.push(AnnotatedRating {
                rating: r.clone(),
                note_classification: *classification,
                tweet_author_id: a.tweet_author_id.clone(),
                party: a.party,
            }),
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RatingLevel;

    const RATINGS_HEADER: &str = "noteId\traterParticipantId\tcreatedAtMillis\tversion\thelpfulnessLevel\n";

    #[test]
    fn ratings_header_only_is_empty() {
        let (ev, rep) = parse_ratings_tsv(RATINGS_HEADER.as_bytes(), ParseOptions::strict()).unwrap();
        assert!(ev.is_empty());
        assert_eq!(rep.rows, 0);
    }

    #[test]
    fn ratings_single_row() {
        let src = format!("{RATINGS_HEADER}1400000000000000001\tABCDEF\t1611000000000\t2\tSOMEWHAT_HELPFUL\n");
        let (ev, _) = parse_ratings_tsv(src.as_bytes(), ParseOptions::strict()).unwrap();
        assert_eq!(
            ev,
            vec![RatingEvent {
                note_id: "1400000000000000001".into(),
                rater_id: "ABCDEF".into(),
                created_at: 1_611_000_000_000,
                level: RatingLevel::SomewhatHelpful,
            }]
        );
    }

    #[test]
    fn ratings_missing_level_strict_vs_lenient() {
        let src = format!("{RATINGS_HEADER}n1\tr1\t10\t1\tHELPFUL\nn2\tr1\t11\t1\t\n");
        match parse_ratings_tsv(src.as_bytes(), ParseOptions::strict()) {
            Err(IngestError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
        let (ev, rep) = parse_ratings_tsv(src.as_bytes(), ParseOptions::lenient()).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.rows, 1);
    }

    #[test]
    fn ratings_missing_column() {
        let src = "noteId\traterParticipantId\tcreatedAtMillis\n";
        assert!(matches!(
            parse_ratings_tsv(src.as_bytes(), ParseOptions::strict()),
            Err(IngestError::MissingColumn { name }) if name == "helpfulnessLevel"
        ));
    }

    #[test]
    fn ratings_negative_timestamp_rejected() {
        let src = format!("{RATINGS_HEADER}n1\tr1\t-5\t1\tHELPFUL\n");
        assert!(parse_ratings_tsv(src.as_bytes(), ParseOptions::strict()).is_err());
    }

    const NOTES_HEADER: &str =
        "noteId\tnoteAuthorParticipantId\tcreatedAtMillis\ttweetId\tclassification\tsummary\n";

    #[test]
    fn notes_classification_tokens() {
        let src = format!(
            "{NOTES_HEADER}n1\ta1\t5\tt1\tMISINFORMED_OR_POTENTIALLY_MISLEADING\tx\nn2\ta2\t6\tt2\tNOT_MISLEADING\ty\n"
        );
        let (notes, _) = parse_notes_tsv(src.as_bytes(), ParseOptions::strict()).unwrap();
        assert_eq!(notes[0].classification, NoteClassification::Misleading);
        assert_eq!(notes[1].classification, NoteClassification::NotMisleading);
        assert_eq!(notes[1].tweet_id.as_str(), "t2");

        let bad = format!("{NOTES_HEADER}n1\ta1\t5\tt1\tMAYBE\tx\n");
        assert!(matches!(
            parse_notes_tsv(bad.as_bytes(), ParseOptions::strict()),
            Err(IngestError::MalformedRow { .. })
        ));
    }

    const STATUS_HEADER: &str = "noteId\tnoteAuthorParticipantId\tcreatedAtMillis\ttimestampMillisOfFirstNonNMRStatus\tcurrentStatus\tlockedStatus\ttimestampMillisOfStatusLock\n";

    #[test]
    fn status_lock_fields() {
        let src = format!(
            "{STATUS_HEADER}n1\ta\t1\t\tNEEDS_MORE_RATINGS\t\t\nn2\ta\t1\t50\tCURRENTLY_RATED_HELPFUL\tCURRENTLY_RATED_HELPFUL\t99\n"
        );
        let (recs, _) = parse_status_history_tsv(src.as_bytes(), ParseOptions::strict()).unwrap();
        assert_eq!(recs[0].locked_status, None);
        assert_eq!(recs[0].lock_timestamp(), None);
        assert_eq!(recs[1].locked_status, Some(NoteStatus::Crh));
        assert_eq!(recs[1].lock_timestamp(), Some(99));
        assert_eq!(
            recs[1].status_timestamps.get("timestampMillisOfFirstNonNMRStatus"),
            Some(&50)
        );
    }

    #[test]
    fn status_duplicate_note() {
        let src = format!(
            "{STATUS_HEADER}n1\ta\t1\t\tNEEDS_MORE_RATINGS\t\t\nn1\ta\t1\t\tNEEDS_MORE_RATINGS\t\t\n"
        );
        assert!(matches!(
            parse_status_history_tsv(src.as_bytes(), ParseOptions::strict()),
            Err(IngestError::DuplicateNote { note_id }) if note_id == "n1"
        ));
    }

    fn locked(id: &str) -> StatusRecord {
        let mut r = StatusRecord::unlocked(id.into(), NoteStatus::Crh);
        r.locked_status = Some(NoteStatus::Crh);
        r.status_timestamps.insert(LOCK_TIMESTAMP_KEY.into(), 7);
        r.status_timestamps.insert("timestampMillisOfCurrentStatus".into(), 3);
        r
    }

    #[test]
    fn clear_locks_erases_only_lock_fields() {
        let recs = vec![
            locked("a"),
            StatusRecord::unlocked("b".into(), NoteStatus::Nmr),
            locked("c"),
        ];
        let cleared = clear_locks(recs.clone());
        assert_eq!(cleared.len(), 3);
        assert_eq!(cleared.iter().filter(|r| r.locked_status.is_some()).count(), 0);
        assert_eq!(cleared.iter().filter(|r| r.lock_timestamp().is_some()).count(), 0);
        assert_eq!(cleared[1], recs[1]);
        assert_eq!(cleared[0].current_status, NoteStatus::Crh);
        assert_eq!(
            cleared[0].status_timestamps.get("timestampMillisOfCurrentStatus"),
            Some(&3)
        );
        assert_eq!(clear_locks(cleared.clone()), cleared);
    }

    #[test]
    fn annotations_csv() {
        let src = "tweet_id,author_id,party\nt1,alice,D\nt2,bob,R\n";
        let (ann, _) = parse_annotations_csv(src.as_bytes(), ParseOptions::strict()).unwrap();
        assert_eq!(ann.len(), 2);
        assert_eq!(ann[1].party, Party::Republican);
        let bad = "tweet_id,author_id,party\nt1,alice,X\n";
        assert!(parse_annotations_csv(bad.as_bytes(), ParseOptions::strict()).is_err());
        let missing = "tweet,author_id,party\n";
        assert!(matches!(
            parse_annotations_csv(missing.as_bytes(), ParseOptions::strict()),
            Err(IngestError::MissingColumn { .. })
        ));
    }

    fn note(id: &str, tweet: &str) -> NoteRecord {
        NoteRecord {
            note_id: id.into(),
            tweet_id: tweet.into(),
            author_participant_id: "w".into(),
            classification: NoteClassification::Misleading,
            created_at: 0,
        }
    }

    fn rating(note: &str, rater: &str) -> RatingEvent {
        RatingEvent {
            note_id: note.into(),
            rater_id: rater.into(),
            created_at: 1,
            level: RatingLevel::Helpful,
        }
    }

    fn ann(tweet: &str, author: &str, party: Party) -> PoliticalAnnotation {
        PoliticalAnnotation {
            tweet_id: tweet.into(),
            tweet_author_id: author.into(),
            party,
        }
    }

    #[test]
    fn join_drops_unannotated_and_labels_party() {
        let notes = vec![note("n1", "t1"), note("n2", "t2")];
        let ratings = vec![rating("n1", "r1"), rating("n2", "r1"), rating("n3", "r2")];
        let anns = vec![ann("t1", "dem_author", Party::Democrat)];
        let out = join_political(&ratings, &notes, &anns).unwrap();
        assert_eq!(out.annotated.len(), 1);
        assert_eq!(out.dropped, 2);
        assert_eq!(out.annotated[0].party, Party::Democrat);
        assert_eq!(out.annotated[0].tweet_author_id.as_str(), "dem_author");
        assert_eq!(out.annotated[0].note_classification, NoteClassification::Misleading);
    }

    #[test]
    fn join_rejects_conflicting_author() {
        let anns = vec![ann("t1", "x", Party::Democrat), ann("t2", "x", Party::Republican)];
        assert!(matches!(
            join_political(&[], &[], &anns),
            Err(IngestError::ConflictingAnnotation { author_id }) if author_id == "x"
        ));
    }
}
