//! The adversary's labeled knowledge base and time-frame filtering.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, LogFormat, SessionRecord};
use crate::loc::LocId;
use crate::trace_model::LocationGrid;

pub const MANIFEST_VERSION: u32 = 1;

/// Window `[t0 - t - delta, t0 - delta]`, both ends inclusive.
///
/// `delta` shifts the knowledge-base window into the past when the adversary
/// has no probes aligned with the user's observation period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeFrame {
    pub t0: u64,
    pub t: u64,
    pub delta: u64,
}

impl TimeFrame {
    pub fn new(t0: u64, t: u64, delta: u64) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidParameter("time frame length must be positive".into()));
        }
        Ok(TimeFrame { t0, t, delta })
    }

    /// Inclusive bounds, or `None` when the whole window lies before the
    /// epoch.
    pub fn bounds(&self) -> Option<(u64, u64)> {
        let hi = self.t0.checked_sub(self.delta)?;
        Some((hi.saturating_sub(self.t), hi))
    }

    pub fn contains(&self, timestamp: u64) -> bool {
        self.bounds()
            .is_some_and(|(lo, hi)| (lo..=hi).contains(&timestamp))
    }
}

/// Time-sorted columns for one location.
#[derive(Debug, Clone, Default)]
struct Series {
    positions: Vec<usize>,
    timestamps: Vec<u64>,
    bytes: Vec<u64>,
}

impl Series {
    fn window(&self, frame: &TimeFrame) -> std::ops::Range<usize> {
        let Some((lo, hi)) = frame.bounds() else {
            return 0..0;
        };
        let start = self.timestamps.partition_point(|&ts| ts < lo);
        let end = self.timestamps.partition_point(|&ts| ts <= hi);
        start..end.max(start)
    }
}

/// Labeled session records indexed by location and time.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    records: Vec<SessionRecord>,
    index: BTreeMap<LocId, Series>,
}

impl KnowledgeBase {
    /// Builds a knowledge base; every record must carry a location label.
    pub fn build(records: impl IntoIterator<Item = SessionRecord>) -> Result<Self> {
        let records: Vec<SessionRecord> = records.into_iter().collect();
        let mut grouped: BTreeMap<LocId, Vec<usize>> = BTreeMap::new();
        for (position, r) in records.iter().enumerate() {
            let loc = r
                .loc_id
                .as_ref()
                .ok_or(Error::UnlabeledRecord { position })?;
            grouped.entry(loc.clone()).or_default().push(position);
        }
        let index = grouped
            .into_iter()
            .map(|(loc, mut positions)| {
                // stable: equal timestamps keep input order
                positions.sort_by_key(|&p| records[p].timestamp);
                let series = Series {
                    timestamps: positions.iter().map(|&p| records[p].timestamp).collect(),
                    bytes: positions.iter().map(|&p| records[p].bytes).collect(),
                    positions,
                };
                (loc, series)
            })
            .collect();
        Ok(KnowledgeBase { records, index })
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels present in the knowledge base, in lexicographic order.
    pub fn locations(&self) -> impl Iterator<Item = &LocId> {
        self.index.keys()
    }

    /// Earliest and latest timestamps.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        let first = self.index.values().filter_map(|s| s.timestamps.first()).min()?;
        let last = self.index.values().filter_map(|s| s.timestamps.last()).max()?;
        Some((*first, *last))
    }

    /// Records inside `frame`, keeping input order.
    pub fn filter(&self, frame: &TimeFrame) -> KnowledgeBase {
        let kept = self
            .records
            .iter()
            .filter(|r| frame.contains(r.timestamp))
            .cloned();
        KnowledgeBase::build(kept).expect("labels already validated")
    }

    /// Byte values recorded for `loc`, in timestamp order. Empty when the
    /// label is absent.
    pub fn slice(&self, loc: &LocId) -> Vec<u64> {
        self.index
            .get(loc)
            .map(|s| s.bytes.clone())
            .unwrap_or_default()
    }

    /// Byte values for `loc` inside `frame` without materializing a
    /// filtered knowledge base.
    pub fn window_bytes(&self, loc: &LocId, frame: &TimeFrame) -> &[u64] {
        match self.index.get(loc) {
            Some(s) => &s.bytes[s.window(frame)],
            None => &[],
        }
    }

    /// Record positions for `loc` in timestamp order.
    pub fn positions(&self, loc: &LocId) -> &[usize] {
        self.index.get(loc).map_or(&[], |s| &s.positions)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        ingest::write_jsonl(&self.records, &mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a JSONL knowledge base. Any malformed line is fatal here.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed = ingest::parse_session_log(BufReader::new(file), LogFormat::Jsonl)?;
        if let Some(err) = parsed.errors.first() {
            return Err(Error::MalformedLog {
                path: path.to_owned(),
                line: err.line,
                message: err.message.clone(),
            });
        }
        KnowledgeBase::build(parsed.records)
    }
}

/// Sidecar describing how a persisted knowledge base was collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbManifest {
    pub version: u32,
    pub grid: LocationGrid,
    pub probe_interval_s: u64,
    pub t_start: u64,
    pub t_end: u64,
    pub record_count: usize,
}

impl KbManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: KbManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        Ok(manifest)
    }
}

/// Unlabeled observations of the target user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserDataset {
    records: Vec<SessionRecord>,
}

impl UserDataset {
    pub fn new(records: Vec<SessionRecord>) -> Result<Self> {
        if let Some(position) = records.iter().position(|r| r.loc_id.is_some()) {
            return Err(Error::LabeledUserRecord { position });
        }
        Ok(UserDataset { records })
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn bytes(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.bytes).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn example_kb_has_two_locations() {
        let kb = example_kb();
        let locs: Vec<_> = kb.locations().map(LocId::as_str).collect();
        assert_eq!(locs, vec!["1", "2"]);
        assert_eq!(kb.slice(&"1".into()), vec![35_780, 36_780]);
        assert_eq!(kb.slice(&"2".into()), vec![30_780, 30_784]);
        assert!(kb.slice(&"99".into()).is_empty());
        assert_eq!(kb.time_span(), Some((1_399_743_000, 1_399_743_060)));
    }

    #[test]
    fn empty_kb_is_valid() {
        let kb = KnowledgeBase::build(Vec::new()).unwrap();
        assert!(kb.is_empty());
        assert_eq!(kb.time_span(), None);
    }

    #[test]
    fn unlabeled_record_is_fatal() {
        let err = KnowledgeBase::build(vec![
            SessionRecord::labeled(LocId::new("1"), 10, 0),
            SessionRecord::unlabeled(10, 1),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::UnlabeledRecord { position: 1 }));
    }

    #[test]
    fn per_location_index_is_time_sorted() {
        let kb = KnowledgeBase::build(vec![
            SessionRecord::labeled(LocId::new("a"), 3, 30),
            SessionRecord::labeled(LocId::new("a"), 1, 10),
            SessionRecord::labeled(LocId::new("b"), 9, 5),
            SessionRecord::labeled(LocId::new("a"), 2, 20),
        ])
        .unwrap();
        assert_eq!(kb.slice(&"a".into()), vec![1, 2, 3]);
        assert_eq!(kb.positions(&"a".into()), &[1, 3, 0]);
    }

    #[test]
    fn filter_bounds_are_inclusive() {
        let kb = example_kb();
        let all = kb.filter(&TimeFrame::new(1_399_743_060, 60, 0).unwrap());
        assert_eq!(all.len(), 4);

        let first = kb.filter(&TimeFrame::new(1_399_743_000, 1, 0).unwrap());
        assert_eq!(first.len(), 2);
        assert!(first.records().iter().all(|r| r.timestamp == 1_399_743_000));

        let shifted = kb.filter(&TimeFrame::new(1_399_743_060, 60, 121).unwrap());
        assert!(shifted.is_empty());
    }

    #[test]
    fn frame_before_epoch_is_empty() {
        let frame = TimeFrame::new(10, 5, 20).unwrap();
        assert_eq!(frame.bounds(), None);
        assert_eq!(TimeFrame::new(10, 50, 0).unwrap().bounds(), Some((0, 10)));
        assert!(TimeFrame::new(10, 0, 0).is_err());
    }

    #[test]
    fn user_dataset_rejects_labels() {
        let err = UserDataset::new(vec![
            SessionRecord::unlabeled(1, 1),
            SessionRecord::labeled(LocId::new("1"), 1, 1),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::LabeledUserRecord { position: 1 }));
        assert_eq!(example_user().len(), 6);
    }

    #[test]
    fn jsonl_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = example_kb();
        kb.save_jsonl(&path).unwrap();
        let back = KnowledgeBase::load_jsonl(&path).unwrap();
        assert_eq!(back.records(), kb.records());

        let manifest = KbManifest {
            version: MANIFEST_VERSION,
            grid: LocationGrid::new(1, 2, 200.0).unwrap(),
            probe_interval_s: 60,
            t_start: 1_399_743_000,
            t_end: 1_399_743_060,
            record_count: 4,
        };
        let mpath = dir.path().join("kb.manifest.json");
        manifest.save(&mpath).unwrap();
        assert_eq!(KbManifest::load(&mpath).unwrap(), manifest);
    }

    fn arb_kb() -> impl Strategy<Value = Vec<SessionRecord>> {
        proptest::collection::vec((0u8..5, 1u64..1_000, 0u64..200), 0..60).prop_map(|rows| {
            rows.into_iter()
                .map(|(l, b, ts)| SessionRecord::labeled(LocId::new(format!("L{l}")), b, ts))
                .collect()
        })
    }

    fn arb_frame() -> impl Strategy<Value = TimeFrame> {
        (0u64..250, 1u64..120, 0u64..80).prop_map(|(t0, t, d)| TimeFrame::new(t0, t, d).unwrap())
    }

    fn sorted(mut v: Vec<u64>) -> Vec<u64> {
        v.sort_unstable();
        v
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_monotone(records in arb_kb(), frame in arb_frame(), shrink in 0u64..60) {
            let kb = KnowledgeBase::build(records).unwrap();
            let once = kb.filter(&frame);
            let twice = once.filter(&frame);
            prop_assert_eq!(once.records(), twice.records());

            let narrow = TimeFrame::new(frame.t0, frame.t.saturating_sub(shrink).max(1), frame.delta).unwrap();
            let narrowed = kb.filter(&narrow);
            prop_assert!(narrowed.records().iter().all(|r| once.records().contains(r)));
            prop_assert!(narrowed.len() <= once.len());
        }

        #[test]
        fn slices_partition_bytes(records in arb_kb()) {
            let kb = KnowledgeBase::build(records.clone()).unwrap();
            let all: Vec<u64> = kb.locations().flat_map(|l| kb.slice(l)).collect();
            prop_assert_eq!(sorted(all), sorted(records.iter().map(|r| r.bytes).collect()));
        }

        #[test]
        fn filter_commutes_with_slice(records in arb_kb(), frame in arb_frame()) {
            let kb = KnowledgeBase::build(records).unwrap();
            let filtered = kb.filter(&frame);
            for loc in kb.locations() {
                let sliced_then_filtered: Vec<u64> = kb
                    .positions(loc)
                    .iter()
                    .map(|&p| &kb.records()[p])
                    .filter(|r| frame.contains(r.timestamp))
                    .map(|r| r.bytes)
                    .collect();
                prop_assert_eq!(filtered.slice(loc), sliced_then_filtered.clone());
                prop_assert_eq!(kb.window_bytes(loc, &frame).to_vec(), sliced_then_filtered);
            }
        }
    }
}
