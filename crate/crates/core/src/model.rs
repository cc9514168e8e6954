//! Shared vocabulary: identifiers, enumerations and records.
//!
//! Identifiers are opaque strings. The public release carries ids that
//! overflow 64-bit integers as well as hashed participant ids, so nothing
//! here ever parses an id numerically.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown {kind} token {token:?}")]
    UnknownToken { kind: &'static str, token: String },
}

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl Into<Arc<str>>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            /// Shares the underlying allocation; used by interning parsers.
            pub fn from_arc(id: Arc<str>) -> Self {
                Self(id)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), &*self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(Arc::from(s))
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(Arc::from(s))
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d).map(Self::from)
            }
        }
    };
}

opaque_id!(
    /// Community note identifier.
    NoteId
);
opaque_id!(
    /// Participant who rated a note.
    RaterId
);
opaque_id!(TweetId);
opaque_id!(
    /// Account that authored the tweet a note refers to.
    AuthorId
);
opaque_id!(
    /// Participant who wrote a note.
    ParticipantId
);

macro_rules! token_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $token:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Token used by the public data files.
            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($token => Ok($name::$variant),)+
                    _ => Err(ModelError::UnknownToken { kind: $kind, token: s.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.token())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RatingLevel {
    Helpful,
    SomewhatHelpful,
    NotHelpful,
}

token_enum!(RatingLevel, "rating level", {
    Helpful => "HELPFUL",
    SomewhatHelpful => "SOMEWHAT_HELPFUL",
    NotHelpful => "NOT_HELPFUL",
});

impl RatingLevel {
    /// `HELPFUL` and `SOMEWHAT_HELPFUL` both count as agreement with the note.
    pub fn is_agreement(self) -> bool {
        !matches!(self, RatingLevel::NotHelpful)
    }

    pub fn to_code(self) -> u8 {
        match self {
            RatingLevel::Helpful => 0,
            RatingLevel::SomewhatHelpful => 1,
            RatingLevel::NotHelpful => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RatingLevel::Helpful),
            1 => Some(RatingLevel::SomewhatHelpful),
            2 => Some(RatingLevel::NotHelpful),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoteClassification {
    Misleading,
    NotMisleading,
}

token_enum!(NoteClassification, "note classification", {
    Misleading => "MISINFORMED_OR_POTENTIALLY_MISLEADING",
    NotMisleading => "NOT_MISLEADING",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoteStatus {
    /// Needs More Ratings; every note starts here.
    Nmr,
    /// Currently Rated Helpful.
    Crh,
    /// Currently Rated Not Helpful.
    Crnh,
}

token_enum!(NoteStatus, "note status", {
    Nmr => "NEEDS_MORE_RATINGS",
    Crh => "CURRENTLY_RATED_HELPFUL",
    Crnh => "CURRENTLY_RATED_NOT_HELPFUL",
});

impl NoteStatus {
    pub fn short(self) -> &'static str {
        match self {
            NoteStatus::Nmr => "NMR",
            NoteStatus::Crh => "CRH",
            NoteStatus::Crnh => "CRNH",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        match s {
            "NMR" => Some(NoteStatus::Nmr),
            "CRH" => Some(NoteStatus::Crh),
            "CRNH" => Some(NoteStatus::Crnh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Democrat,
    Republican,
}

token_enum!(Party, "party", {
    Democrat => "D",
    Republican => "R",
});

impl Party {
    pub fn other(self) -> Party {
        match self {
            Party::Democrat => Party::Republican,
            Party::Republican => Party::Democrat,
        }
    }

    /// -1 for Democrat, +1 for Republican; positive leaning is Republican.
    pub fn sign(self) -> f64 {
        match self {
            Party::Democrat => -1.0,
            Party::Republican => 1.0,
        }
    }
}

pub fn parse_rating_level(token: &str) -> Result<RatingLevel, ModelError> {
    token.parse()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingEvent {
    pub note_id: NoteId,
    pub rater_id: RaterId,
    /// Milliseconds since the Unix epoch.
    pub created_at: i64,
    pub level: RatingLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub note_id: NoteId,
    pub tweet_id: TweetId,
    pub author_participant_id: ParticipantId,
    pub classification: NoteClassification,
    pub created_at: i64,
}

/// Lock timestamp key inside [`StatusRecord::status_timestamps`].
pub const LOCK_TIMESTAMP_KEY: &str = "timestampMillisOfStatusLock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub note_id: NoteId,
    pub current_status: NoteStatus,
    pub locked_status: Option<NoteStatus>,
    /// Status-transition timestamps keyed by their column name.
    pub status_timestamps: BTreeMap<String, i64>,
}

impl StatusRecord {
    pub fn unlocked(note_id: NoteId, current_status: NoteStatus) -> Self {
        Self {
            note_id,
            current_status,
            locked_status: None,
            status_timestamps: BTreeMap::new(),
        }
    }

    pub fn lock_timestamp(&self) -> Option<i64> {
        self.status_timestamps.get(LOCK_TIMESTAMP_KEY).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoliticalAnnotation {
    pub tweet_id: TweetId,
    pub tweet_author_id: AuthorId,
    pub party: Party,
}

/// Keeps one event per (note, rater): the latest `created_at` wins, ties go
/// to the later position in the input. Output is sorted by (note, rater).
pub fn dedup_ratings(events: Vec<RatingEvent>) -> Vec<RatingEvent> {
    let mut indexed: Vec<(usize, RatingEvent)> = events.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        a.note_id
            .cmp(&b.note_id)
            .then_with(|| a.rater_id.cmp(&b.rater_id))
            .then_with(|| a.created_at.cmp(&b.created_at))
            .then_with(|| ia.cmp(ib))
    });
    let mut out: Vec<RatingEvent> = Vec::with_capacity(indexed.len());
    for (_, ev) in indexed {
        match out.last_mut() {
            Some(last) if last.note_id == ev.note_id && last.rater_id == ev.rater_id => *last = ev,
            _ => out.push(ev),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(note: &str, rater: &str, t: i64, level: RatingLevel) -> RatingEvent {
        RatingEvent {
            note_id: note.into(),
            rater_id: rater.into(),
            created_at: t,
            level,
        }
    }

    #[test]
    fn rating_level_tokens() {
        assert_eq!(parse_rating_level("HELPFUL"), Ok(RatingLevel::Helpful));
        assert_eq!(
            parse_rating_level("SOMEWHAT_HELPFUL"),
            Ok(RatingLevel::SomewhatHelpful)
        );
        assert_eq!(parse_rating_level("NOT_HELPFUL"), Ok(RatingLevel::NotHelpful));
        assert!(matches!(
            parse_rating_level("helpful"),
            Err(ModelError::UnknownToken { .. })
        ));
        assert!(parse_rating_level("").is_err());
    }

    #[test]
    fn enum_tokens_round_trip() {
        for l in RatingLevel::ALL {
            assert_eq!(l.token().parse::<RatingLevel>().unwrap(), *l);
            assert_eq!(RatingLevel::from_code(l.to_code()), Some(*l));
        }
        for c in NoteClassification::ALL {
            assert_eq!(c.token().parse::<NoteClassification>().unwrap(), *c);
        }
        for s in NoteStatus::ALL {
            assert_eq!(s.token().parse::<NoteStatus>().unwrap(), *s);
            assert_eq!(NoteStatus::from_short(s.short()), Some(*s));
        }
        for p in Party::ALL {
            assert_eq!(p.token().parse::<Party>().unwrap(), *p);
        }
        assert_eq!(
            "MISINFORMED_OR_POTENTIALLY_MISLEADING".parse(),
            Ok(NoteClassification::Misleading)
        );
    }

    #[test]
    fn dedup_empty() {
        assert!(dedup_ratings(vec![]).is_empty());
    }

    #[test]
    fn dedup_latest_wins() {
        let out = dedup_ratings(vec![
            ev("n1", "r1", 1, RatingLevel::Helpful),
            ev("n1", "r1", 2, RatingLevel::NotHelpful),
        ]);
        assert_eq!(out, vec![ev("n1", "r1", 2, RatingLevel::NotHelpful)]);
    }

    #[test]
    fn dedup_tie_keeps_last_occurrence() {
        let out = dedup_ratings(vec![
            ev("n1", "r1", 5, RatingLevel::Helpful),
            ev("n1", "r1", 5, RatingLevel::SomewhatHelpful),
        ]);
        assert_eq!(out[0].level, RatingLevel::SomewhatHelpful);
    }

    #[test]
    fn dedup_counts_distinct_pairs() {
        let out = dedup_ratings(vec![
            ev("n2", "r1", 3, RatingLevel::Helpful),
            ev("n1", "r1", 1, RatingLevel::Helpful),
            ev("n2", "r1", 1, RatingLevel::NotHelpful),
        ]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].note_id.as_str(), "n1");
        assert_eq!(out[1].created_at, 3);
    }

    fn arb_events() -> impl Strategy<Value = Vec<RatingEvent>> {
        prop::collection::vec((0u8..4, 0u8..4, 0i64..5, 0u8..3), 0..40).prop_map(|v| {
            v.into_iter()
                .map(|(n, r, t, l)| {
                    ev(
                        &format!("n{n}"),
                        &format!("r{r}"),
                        t,
                        RatingLevel::from_code(l).unwrap(),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(events in arb_events()) {
            let once = dedup_ratings(events);
            let twice = dedup_ratings(once.clone());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn dedup_keeps_max_timestamp(events in arb_events()) {
            let out = dedup_ratings(events.clone());
            for o in &out {
                let max_t = events
                    .iter()
                    .filter(|e| e.note_id == o.note_id && e.rater_id == o.rater_id)
                    .map(|e| e.created_at)
                    .max()
                    .unwrap();
                prop_assert_eq!(o.created_at, max_t);
            }
            for w in out.windows(2) {
                prop_assert!((&w[0].note_id, &w[0].rater_id) < (&w[1].note_id, &w[1].rater_id));
            }
        }
    }
}
