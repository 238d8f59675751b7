//! Candidate-location selection.
//!
//! For a user dataset `x` and the knowledge base restricted to a time frame,
//! every location `l` with at least one record in the frame gets a distance
//! `d(x, y[l])`. The candidate set of size `k` minimizes the summed distance
//! over all `k`-subsets of locations; since the objective is a sum of
//! independent per-location terms, that is exactly the `k` closest
//! locations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_base::{KnowledgeBase, TimeFrame, UserDataset};
use crate::loc::LocId;

/// Median of a nonempty byte sample. Even counts average the two middle
/// values.
pub fn median(values: &[u64]) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    median_of_sorted(&sorted)
}

pub(crate) fn median_of_sorted(sorted: &[u64]) -> Result<f64> {
    let n = sorted.len();
    if n == 0 {
        return Err(Error::Unscorable("median of an empty sample"));
    }
    let mid = n / 2;
    Ok(if n % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] as f64 + sorted[mid] as f64) / 2.0
    })
}

/// A statistical distance between the user's sample and one location's
/// knowledge-base sample.
pub trait DistanceMeasure: Sync {
    fn distance(&self, user: &[u64], reference: &[u64]) -> Result<f64>;
}

/// `|median(user) - median(reference)|`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MedianDistance;

impl DistanceMeasure for MedianDistance {
    fn distance(&self, user: &[u64], reference: &[u64]) -> Result<f64> {
        Ok((median(user)? - median(reference)?).abs())
    }
}

/// Median distance between a user dataset and a knowledge-base slice.
pub fn distance(user: &UserDataset, kb_slice: &[u64]) -> Result<f64> {
    MedianDistance.distance(&user.bytes(), kb_slice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub loc: LocId,
    pub distance: f64,
}

fn by_distance_then_label(a: &Candidate, b: &Candidate) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.loc.cmp(&b.loc))
}

/// Every scorable location ordered by distance, ties by label.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ranked: Vec<Candidate>,
    /// Locations with no records in the frame.
    pub unscorable: Vec<LocId>,
}

impl Ranking {
    /// 0-based rank of `loc`, if it was scorable.
    pub fn rank_of(&self, loc: &LocId) -> Option<usize> {
        self.ranked.iter().position(|c| &c.loc == loc)
    }
}

/// Scores every knowledge-base location against the user's sample within
/// `frame`.
pub fn rank_locations(
    user: &UserDataset,
    kb: &KnowledgeBase,
    frame: &TimeFrame,
    measure: &dyn DistanceMeasure,
) -> Result<Ranking> {
    if user.is_empty() {
        return Err(Error::Unscorable("user dataset is empty"));
    }
    let user_bytes = user.bytes();
    let mut ranked = Vec::new();
    let mut unscorable = Vec::new();
    for loc in kb.locations() {
        let window = kb.window_bytes(loc, frame);
        if window.is_empty() {
            unscorable.push(loc.clone());
            continue;
        }
        ranked.push(Candidate {
            loc: loc.clone(),
            distance: measure.distance(&user_bytes, window)?,
        });
    }
    if ranked.is_empty() {
        return Err(Error::NoScorableLocations);
    }
    ranked.sort_by(by_distance_then_label);
    Ok(Ranking { ranked, unscorable })
}

/// The `k` candidate locations, closest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub k: usize,
    pub entries: Vec<Candidate>,
    /// Fewer than `k` locations were scorable.
    pub truncated: bool,
    pub unscorable: Vec<LocId>,
}

impl CandidateSet {
    pub fn contains(&self, loc: &LocId) -> bool {
        self.entries.iter().any(|c| &c.loc == loc)
    }
}

pub fn select_candidates(
    user: &UserDataset,
    kb: &KnowledgeBase,
    frame: &TimeFrame,
    k: usize,
) -> Result<CandidateSet> {
    select_candidates_with(user, kb, frame, k, &MedianDistance)
}

pub fn select_candidates_with(
    user: &UserDataset,
    kb: &KnowledgeBase,
    frame: &TimeFrame,
    k: usize,
    measure: &dyn DistanceMeasure,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let Ranking {
        mut ranked,
        unscorable,
    } = rank_locations(user, kb, frame, measure)?;
    let truncated = ranked.len() < k;
    ranked.truncate(k);
    Ok(CandidateSet {
        k,
        entries: ranked,
        truncated,
        unscorable,
    })
}

/// 1 if the true location is among the candidates, else 0.
pub fn k_identifiability(candidates: &CandidateSet, true_loc: &LocId) -> u8 {
    u8::from(candidates.contains(true_loc))
}

/// Machine-readable attack output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub t0: u64,
    pub t: u64,
    pub delta: u64,
    pub k: usize,
    pub candidates: Vec<Candidate>,
    pub unscorable: Vec<LocId>,
    #[serde(default)]
    pub truncated: bool,
}

impl AttackReport {
    pub fn new(frame: &TimeFrame, set: &CandidateSet) -> Self {
        AttackReport {
            t0: frame.t0,
            t: frame.t,
            delta: frame.delta,
            k: set.k,
            candidates: set.entries.clone(),
            unscorable: set.unscorable.clone(),
            truncated: set.truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SessionRecord;
    use crate::knowledge_base::fixtures::{example_kb, example_user};
    use proptest::prelude::*;

    fn example_frame() -> TimeFrame {
        TimeFrame::new(1_399_743_060, 60, 0).unwrap()
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[1, 2, 3]).unwrap(), 2.0);
        assert_eq!(median(&[35_780, 36_780]).unwrap(), 36_280.0);
        assert_eq!(
            median(&[30_784, 30_784, 35_780, 35_780, 36_780, 36_780]).unwrap(),
            35_780.0
        );
        assert_eq!(median(&[36_780, 30_784, 35_780, 30_784, 36_780, 35_780]).unwrap(), 35_780.0);
        assert!(matches!(median(&[]), Err(Error::Unscorable(_))));
    }

    #[test]
    fn example_distances() {
        let kb = example_kb();
        let user = example_user();
        assert_eq!(distance(&user, &kb.slice(&"1".into())).unwrap(), 500.0);
        assert_eq!(distance(&user, &kb.slice(&"2".into())).unwrap(), 4_998.0);
        assert_eq!(distance(&user, &user.bytes()).unwrap(), 0.0);
        assert!(distance(&user, &[]).is_err());
    }

    #[test]
    fn example_selection() {
        let kb = example_kb();
        let user = example_user();
        let one = select_candidates(&user, &kb, &example_frame(), 1).unwrap();
        assert_eq!(
            one.entries,
            vec![Candidate { loc: "1".into(), distance: 500.0 }]
        );
        assert!(!one.truncated);
        let two = select_candidates(&user, &kb, &example_frame(), 2).unwrap();
        assert_eq!(two.entries[1], Candidate { loc: "2".into(), distance: 4_998.0 });

        let three = select_candidates(&user, &kb, &example_frame(), 3).unwrap();
        assert_eq!(three.entries.len(), 2);
        assert!(three.truncated);
    }

    #[test]
    fn ties_go_to_smaller_label() {
        let kb = KnowledgeBase::build(vec![
            SessionRecord::labeled("b".into(), 110, 10),
            SessionRecord::labeled("a".into(), 90, 10),
        ])
        .unwrap();
        let user = UserDataset::new(vec![SessionRecord::unlabeled(100, 10)]).unwrap();
        let frame = TimeFrame::new(10, 5, 0).unwrap();
        let set = select_candidates(&user, &kb, &frame, 1).unwrap();
        assert_eq!(set.entries[0].loc.as_str(), "a");
    }

    #[test]
    fn unscorable_locations_are_reported() {
        let kb = KnowledgeBase::build(vec![
            SessionRecord::labeled("near".into(), 100, 100),
            SessionRecord::labeled("stale".into(), 100, 10),
        ])
        .unwrap();
        let user = UserDataset::new(vec![SessionRecord::unlabeled(100, 100)]).unwrap();
        let set = select_candidates(&user, &kb, &TimeFrame::new(100, 20, 0).unwrap(), 5).unwrap();
        assert_eq!(set.entries.len(), 1);
        assert_eq!(set.unscorable, vec![LocId::new("stale")]);
        assert!(set.truncated);
    }

    #[test]
    fn selection_errors() {
        let kb = example_kb();
        let user = example_user();
        assert!(matches!(
            select_candidates(&user, &kb, &TimeFrame::new(1_399_743_060, 60, 500).unwrap(), 1),
            Err(Error::NoScorableLocations)
        ));
        assert!(select_candidates(&user, &kb, &example_frame(), 0).is_err());
        let empty = UserDataset::new(Vec::new()).unwrap();
        assert!(matches!(
            select_candidates(&empty, &kb, &example_frame(), 1),
            Err(Error::Unscorable(_))
        ));
    }

    #[test]
    fn identifiability() {
        let set = select_candidates(&example_user(), &example_kb(), &example_frame(), 1).unwrap();
        assert_eq!(k_identifiability(&set, &"1".into()), 1);
        assert_eq!(k_identifiability(&set, &"2".into()), 0);
        let empty = CandidateSet {
            k: 1,
            entries: Vec::new(),
            truncated: true,
            unscorable: Vec::new(),
        };
        assert_eq!(k_identifiability(&empty, &"1".into()), 0);
    }

    #[test]
    fn report_json_shape() {
        let frame = example_frame();
        let set = select_candidates(&example_user(), &example_kb(), &frame, 2).unwrap();
        let json = serde_json::to_value(AttackReport::new(&frame, &set)).unwrap();
        assert_eq!(json["t0"], 1_399_743_060u64);
        assert_eq!(json["k"], 2);
        assert_eq!(json["candidates"][0]["loc"], "1");
        assert_eq!(json["candidates"][1]["distance"], 4_998.0);
        assert_eq!(json["unscorable"], serde_json::json!([]));
    }

    fn arb_samples() -> impl Strategy<Value = (Vec<u64>, Vec<Vec<u64>>)> {
        (
            proptest::collection::vec(1u64..5_000, 1..12),
            proptest::collection::vec(proptest::collection::vec(1u64..5_000, 1..8), 1..7),
        )
    }

    fn kb_from(samples: &[Vec<u64>]) -> KnowledgeBase {
        KnowledgeBase::build(samples.iter().enumerate().flat_map(|(i, s)| {
            s.iter()
                .map(move |&b| SessionRecord::labeled(LocId::new(format!("{i}")), b, 50))
        }))
        .unwrap()
    }

    fn user_from(bytes: &[u64]) -> UserDataset {
        UserDataset::new(bytes.iter().map(|&b| SessionRecord::unlabeled(b, 50)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn candidate_sets_are_prefixes((user, samples) in arb_samples()) {
            let kb = kb_from(&samples);
            let user = user_from(&user);
            let frame = TimeFrame::new(50, 10, 0).unwrap();
            let mut prev: Vec<Candidate> = Vec::new();
            for k in 1..=samples.len() + 1 {
                let set = select_candidates(&user, &kb, &frame, k).unwrap();
                prop_assert!(set.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
                prop_assert_eq!(&set.entries[..prev.len()], &prev[..]);
                prev = set.entries;
            }
        }

        #[test]
        fn shifting_user_shifts_distance((user, samples) in arb_samples(), c in 0u64..3_000) {
            let shifted: Vec<u64> = user.iter().map(|b| b + c).collect();
            for s in &samples {
                let expected = (median(&user).unwrap() + c as f64 - median(s).unwrap()).abs();
                prop_assert_eq!(MedianDistance.distance(&shifted, s).unwrap(), expected);
            }
        }

        #[test]
        fn record_order_is_irrelevant((user, samples) in arb_samples(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut user_shuffled = user.clone();
            user_shuffled.shuffle(&mut rng);
            let mut samples_shuffled = samples.clone();
            for s in &mut samples_shuffled {
                s.shuffle(&mut rng);
            }
            let frame = TimeFrame::new(50, 10, 0).unwrap();
            let k = samples.len();
            let a = select_candidates(&user_from(&user), &kb_from(&samples), &frame, k).unwrap();
            let b = select_candidates(&user_from(&user_shuffled), &kb_from(&samples_shuffled), &frame, k).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
