//! Compact binary cache written by `notelab ingest`.
//!
//! Ratings are stored column-wise with dictionary-encoded ids; the smaller
//! tables are stored row-wise. All integers are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::IngestError;
use crate::model::{
    NoteClassification, NoteRecord, NoteStatus, Party, PoliticalAnnotation, RatingEvent, RatingLevel,
    StatusRecord,
};

const RATINGS_MAGIC: &[u8; 8] = b"NLRATE01";
const NOTES_MAGIC: &[u8; 8] = b"NLNOTE01";
const STATUS_MAGIC: &[u8; 8] = b"NLSTAT01";
const ANNOT_MAGIC: &[u8; 8] = b"NLANNO01";

pub const CACHE_FILES: [&str; 4] = ["ratings.bin", "notes.bin", "status.bin", "annotations.bin"];

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn i64(&mut self, v: i64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.0.write_all(s.as_bytes())
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], IngestError> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| IngestError::Cache(format!("truncated cache file: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, IngestError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, IngestError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, IngestError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn i64(&mut self) -> Result<i64, IngestError> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }
    fn str(&mut self) -> Result<String, IngestError> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| IngestError::Cache(format!("truncated string: {e}")))?;
        String::from_utf8(buf).map_err(|e| IngestError::Cache(e.to_string()))
    }
    fn magic(&mut self, expected: &[u8; 8]) -> Result<(), IngestError> {
        let got = self.bytes::<8>()?;
        if &got != expected {
            return Err(IngestError::Cache(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }
}

fn bad_code(what: &str, code: u8) -> IngestError {
    IngestError::Cache(format!("invalid {what} code {code}"))
}

fn class_code(c: NoteClassification) -> u8 {
    match c {
        NoteClassification::Misleading => 0,
        NoteClassification::NotMisleading => 1,
    }
}

fn status_code(s: NoteStatus) -> u8 {
    match s {
        NoteStatus::Nmr => 0,
        NoteStatus::Crh => 1,
        NoteStatus::Crnh => 2,
    }
}

fn status_from(code: u8) -> Result<NoteStatus, IngestError> {
    NoteStatus::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| bad_code("status", code))
}

fn write_ratings<W: Write>(out: &mut Out<W>, ratings: &[RatingEvent]) -> std::io::Result<()> {
    let mut note_dict: HashMap<&str, u32> = HashMap::new();
    let mut rater_dict: HashMap<&str, u32> = HashMap::new();
    let mut notes: Vec<&str> = Vec::new();
    let mut raters: Vec<&str> = Vec::new();
    let mut note_col = Vec::with_capacity(ratings.len());
    let mut rater_col = Vec::with_capacity(ratings.len());
    for r in ratings {
        let n = *note_dict.entry(r.note_id.as_str()).or_insert_with(|| {
            notes.push(r.note_id.as_str());
            notes.len() as u32 - 1
        });
        let u = *rater_dict.entry(r.rater_id.as_str()).or_insert_with(|| {
            raters.push(r.rater_id.as_str());
            raters.len() as u32 - 1
        });
        note_col.push(n);
        rater_col.push(u);
    }
    out.0.write_all(RATINGS_MAGIC)?;
    for dict in [&notes, &raters] {
        out.u64(dict.len() as u64)?;
        for s in dict.iter() {
            out.str(s)?;
        }
    }
    out.u64(ratings.len() as u64)?;
    for v in note_col {
        out.u32(v)?;
    }
    for v in rater_col {
        out.u32(v)?;
    }
    for r in ratings {
        out.i64(r.created_at)?;
    }
    for r in ratings {
        out.u8(r.level.to_code())?;
    }
    Ok(())
}

fn read_ratings<R: Read>(inp: &mut In<R>) -> Result<Vec<RatingEvent>, IngestError> {
    inp.magic(RATINGS_MAGIC)?;
    let mut dicts: Vec<Vec<Arc<str>>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = inp.u64()? as usize;
        let mut d = Vec::with_capacity(n);
        for _ in 0..n {
            d.push(Arc::from(inp.str()?));
        }
        dicts.push(d);
    }
    let n = inp.u64()? as usize;
    let lookup = |dict: &Vec<Arc<str>>, idx: u32| {
        dict.get(idx as usize)
            .cloned()
            .ok_or_else(|| IngestError::Cache(format!("dictionary index {idx} out of range")))
    };
    let mut note_col = Vec::with_capacity(n);
    for _ in 0..n {
        note_col.push(lookup(&dicts[0], inp.u32()?)?);
    }
    let mut rater_col = Vec::with_capacity(n);
    for _ in 0..n {
        rater_col.push(lookup(&dicts[1], inp.u32()?)?);
    }
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        times.push(inp.i64()?);
    }
    let mut out = Vec::with_capacity(n);
    for ((note, rater), created_at) in note_col.into_iter().zip(rater_col).zip(times) {
        let code = inp.u8()?;
        let level = RatingLevel::from_code(code).ok_or_else(|| bad_code("rating level", code))?;
        out.push(RatingEvent {
            note_id: crate::model::NoteId::from_arc(note),
            rater_id: crate::model::RaterId::from_arc(rater),
            created_at,
            level,
        });
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> std::io::Result<Out<BufWriter<File>>> {
    Ok(Out(BufWriter::new(File::create(dir.join(name))?)))
}

fn open(dir: &Path, name: &str) -> Result<In<BufReader<File>>, IngestError> {
    let path = dir.join(name);
    let f = File::open(&path).map_err(|e| IngestError::from(e).in_file(&path))?;
    Ok(In(BufReader::new(f)))
}

/// Writes the cache files into `dir` (which must exist).
pub fn write_cache(
    dir: &Path,
    ratings: &[RatingEvent],
    notes: &[NoteRecord],
    status: &[StatusRecord],
    annotations: Option<&[PoliticalAnnotation]>,
) -> std::io::Result<()> {
    let mut out = create(dir, CACHE_FILES[0])?;
    write_ratings(&mut out, ratings)?;
    out.0.flush()?;

    let mut out = create(dir, CACHE_FILES[1])?;
    out.0.write_all(NOTES_MAGIC)?;
    out.u64(notes.len() as u64)?;
    for n in notes {
        out.str(n.note_id.as_str())?;
        out.str(n.tweet_id.as_str())?;
        out.str(n.author_participant_id.as_str())?;
        out.u8(class_code(n.classification))?;
        out.i64(n.created_at)?;
    }
    out.0.flush()?;

    let mut out = create(dir, CACHE_FILES[2])?;
    out.0.write_all(STATUS_MAGIC)?;
    out.u64(status.len() as u64)?;
    for s in status {
        out.str(s.note_id.as_str())?;
        out.u8(status_code(s.current_status))?;
        out.u8(s.locked_status.map(status_code).unwrap_or(u8::MAX))?;
        out.u32(s.status_timestamps.len() as u32)?;
        for (k, v) in &s.status_timestamps {
            out.str(k)?;
            out.i64(*v)?;
        }
    }
    out.0.flush()?;

    let ann_path = dir.join(CACHE_FILES[3]);
    match annotations {
        Some(anns) => {
            let mut out = create(dir, CACHE_FILES[3])?;
            out.0.write_all(ANNOT_MAGIC)?;
            out.u64(anns.len() as u64)?;
            for a in anns {
                out.str(a.tweet_id.as_str())?;
                out.str(a.tweet_author_id.as_str())?;
                out.u8(match a.party {
                    Party::Democrat => 0,
                    Party::Republican => 1,
                })?;
            }
            out.0.flush()?;
        }
        None if ann_path.exists() => std::fs::remove_file(ann_path)?,
        None => {}
    }
    Ok(())
}

pub type CacheContents = (
    Vec<RatingEvent>,
    Vec<NoteRecord>,
    Vec<StatusRecord>,
    Option<Vec<PoliticalAnnotation>>,
);

pub fn read_cache(dir: &Path) -> Result<CacheContents, IngestError> {
    let ratings = read_ratings(&mut open(dir, CACHE_FILES[0])?)?;

    let mut inp = open(dir, CACHE_FILES[1])?;
    inp.magic(NOTES_MAGIC)?;
    let n = inp.u64()? as usize;
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let note_id = inp.str()?.into();
        let tweet_id = inp.str()?.into();
        let author_participant_id = inp.str()?.into();
        let code = inp.u8()?;
        let classification = NoteClassification::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| bad_code("classification", code))?;
        notes.push(NoteRecord {
            note_id,
            tweet_id,
            author_participant_id,
            classification,
            created_at: inp.i64()?,
        });
    }

    let mut inp = open(dir, CACHE_FILES[2])?;
    inp.magic(STATUS_MAGIC)?;
    let n = inp.u64()? as usize;
    let mut status = Vec::with_capacity(n);
    for _ in 0..n {
        let note_id = inp.str()?.into();
        let current_status = status_from(inp.u8()?)?;
        let locked_status = match inp.u8()? {
            u8::MAX => None,
            c => Some(status_from(c)?),
        };
        let n_ts = inp.u32()?;
        let mut status_timestamps = std::collections::BTreeMap::new();
        for _ in 0..n_ts {
            let k = inp.str()?;
            status_timestamps.insert(k, inp.i64()?);
        }
        status.push(StatusRecord {
            note_id,
            current_status,
            locked_status,
            status_timestamps,
        });
    }

    let annotations = if dir.join(CACHE_FILES[3]).exists() {
        let mut inp = open(dir, CACHE_FILES[3])?;
        inp.magic(ANNOT_MAGIC)?;
        let n = inp.u64()? as usize;
        let mut anns = Vec::with_capacity(n);
        for _ in 0..n {
            let tweet_id = inp.str()?.into();
            let tweet_author_id = inp.str()?.into();
            let party = match inp.u8()? {
                0 => Party::Democrat,
                1 => Party::Republican,
                c => return Err(bad_code("party", c)),
            };
            anns.push(PoliticalAnnotation {
                tweet_id,
                tweet_author_id,
                party,
            });
        }
        Some(anns)
    } else {
        None
    };
    Ok((ratings, notes, status, annotations))
}
