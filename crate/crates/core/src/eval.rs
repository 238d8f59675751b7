//! Evaluation harness: k-accuracy sweeps, misalignment sweeps, summary
//! statistics and granularity heat matrices.
//!
//! One trial draws a true location and an observation time `t0`, generates
//! the user's sessions over `[t0 - t, t0]`, ranks every location against the
//! knowledge base and records where the true location landed. Each trial
//! draws from its own `(seed, trial index)` stream, so results do not depend
//! on thread count or scheduling.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{median_of_sorted, rank_locations, MedianDistance};
use crate::error::{Error, Result};
use crate::ingest::SessionRecord;
use crate::knowledge_base::{KnowledgeBase, TimeFrame};
use crate::loc::LocId;
use crate::trace_model::{hour_of_day, keyed_stream, LocationGrid, TrafficModel, HOURS_PER_DAY};

const DOMAIN_TRIAL: u64 = 0x0074_7269_616c;
const WILSON_Z: f64 = 1.959_963_984_540_054;

pub const DEFAULT_EPSILON_BYTES: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
    /// Minutes.
    pub t_values: Vec<u64>,
    /// Minutes.
    pub delta_values: Vec<u64>,
    pub trials: usize,
    pub seed: u64,
    /// Spacing of the simulated user's sessions.
    pub session_interval_s: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_values: vec![1, 2, 4, 8],
            t_values: vec![5, 10, 20, 40, 60],
            delta_values: (0..=4_320).step_by(180).collect(),
            trials: 1_000,
            seed: 0,
            session_interval_s: 300,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_owned()));
        if self.k_values.is_empty() || self.t_values.is_empty() || self.delta_values.is_empty() {
            return bad("sweep axes must be nonempty");
        }
        if self.k_values.contains(&0) {
            return bad("k values must be positive");
        }
        if self.t_values.contains(&0) {
            return bad("t values must be positive");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.session_interval_s == 0 {
            return bad("session interval must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    K,
    T,
    Delta,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::T => "t",
            Axis::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub value: u64,
    pub k_accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub hits: usize,
    pub trials: usize,
}

impl AccuracyPoint {
    fn new(value: u64, hits: usize, trials: usize) -> Self {
        let (ci_lo, ci_hi) = wilson_interval(hits, trials);
        AccuracyPoint {
            value,
            k_accuracy: hits as f64 / trials as f64,
            ci_lo,
            ci_hi,
            hits,
            trials,
        }
    }
}

/// Accuracy along one axis with the other parameters held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub axis: Axis,
    pub k: Option<usize>,
    /// Minutes.
    pub t: Option<u64>,
    /// Minutes.
    pub delta: Option<u64>,
    pub points: Vec<AccuracyPoint>,
}

impl AccuracyCurve {
    pub fn accuracy_at(&self, value: u64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.value == value)
            .map(|p| p.k_accuracy)
    }

    /// Rows `axis,value,accuracy,ci_lo,ci_hi,trials`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["axis", "value", "accuracy", "ci_lo", "ci_hi", "trials"])?;
        for p in &self.points {
            w.write_record([
                self.axis.as_str().to_owned(),
                p.value.to_string(),
                p.k_accuracy.to_string(),
                p.ci_lo.to_string(),
                p.ci_hi.to_string(),
                p.trials.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(hits: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let centre = p + z2 / (2.0 * n);
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (
        ((centre - half) / denom).max(0.0),
        ((centre + half) / denom).min(1.0),
    )
}

#[derive(Debug, Clone)]
struct Trial {
    true_loc: LocId,
    t0: u64,
}

fn draw_trial(grid: &LocationGrid, seed: u64, index: usize, t0_lo: u64, t0_hi: u64) -> Trial {
    let mut rng = keyed_stream(seed, index as u64, 0, DOMAIN_TRIAL);
    let loc = rng.random_range(0..grid.len());
    Trial {
        true_loc: grid.loc_ids()[loc].clone(),
        t0: rng.random_range(t0_lo..=t0_hi),
    }
}

/// Range of `t0` for which every window reaching `lead_s` back lies inside
/// the knowledge base.
fn t0_range(kb: &KnowledgeBase, lead_s: u64) -> Result<(u64, u64)> {
    let (first, last) = kb.time_span().ok_or(Error::EmptyKnowledgeBase)?;
    let lo = first + lead_s;
    if lo > last {
        return Err(Error::InsufficientKnowledgeBase {
            needed_from: first,
            needed_to: lo,
            have_from: first,
            have_to: last,
        });
    }
    Ok((lo, last))
}

/// 0-based rank of the true location, `None` if it was not scorable.
fn trial_rank(
    model: &TrafficModel,
    kb: &KnowledgeBase,
    trial: &Trial,
    t_s: u64,
    delta_s: u64,
    session_interval_s: u64,
) -> Result<Option<usize>> {
    let user = model.generate_user_trace(&trial.true_loc, trial.t0, t_s, session_interval_s)?;
    let frame = TimeFrame::new(trial.t0, t_s, delta_s)?;
    let ranking = rank_locations(&user.dataset, kb, &frame, &MedianDistance)?;
    Ok(ranking.rank_of(&trial.true_loc))
}

fn hits_within(ranks: impl Iterator<Item = Option<usize>>, k: usize) -> usize {
    ranks.filter(|r| r.is_some_and(|r| r < k)).count()
}

fn sorted_unique<T: Ord + Copy>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// k-accuracy for every `(k, t)` pair with aligned windows. Returns one
/// curve per `k` (ascending) whose points run along `t`.
pub fn k_accuracy_sweep(
    model: &TrafficModel,
    kb: &KnowledgeBase,
    config: &SweepConfig,
) -> Result<Vec<AccuracyCurve>> {
    config.validate()?;
    let ks = sorted_unique(&config.k_values);
    let ts = sorted_unique(&config.t_values);
    let max_t = *ts.last().expect("validated nonempty");
    let (lo, hi) = t0_range(kb, max_t * 60)?;

    // ranks[trial][t index]
    let ranks: Vec<Vec<Option<usize>>> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let trial = draw_trial(model.grid(), config.seed, i, lo, hi);
            ts.iter()
                .map(|&t| trial_rank(model, kb, &trial, t * 60, 0, config.session_interval_s))
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(ks
        .iter()
        .map(|&k| AccuracyCurve {
            axis: Axis::T,
            k: Some(k),
            t: None,
            delta: Some(0),
            points: ts
                .iter()
                .enumerate()
                .map(|(ti, &t)| {
                    let hits = hits_within(ranks.iter().map(|r| r[ti]), k);
                    AccuracyPoint::new(t, hits, config.trials)
                })
                .collect(),
        })
        .collect())
}

/// k-accuracy as the knowledge-base window is shifted `delta` minutes into
/// the past, for each value of `config.delta_values`.
pub fn delta_sweep(
    model: &TrafficModel,
    kb: &KnowledgeBase,
    k: usize,
    t_min: u64,
    config: &SweepConfig,
) -> Result<AccuracyCurve> {
    config.validate()?;
    if k == 0 || t_min == 0 {
        return Err(Error::InvalidParameter("k and t must be positive".into()));
    }
    let deltas = sorted_unique(&config.delta_values);
    let max_delta = *deltas.last().expect("validated nonempty");
    let (lo, hi) = t0_range(kb, (t_min + max_delta) * 60)?;

    let ranks: Vec<Vec<Option<usize>>> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let trial = draw_trial(model.grid(), config.seed, i, lo, hi);
            deltas
                .iter()
                .map(|&d| {
                    trial_rank(model, kb, &trial, t_min * 60, d * 60, config.session_interval_s)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(AccuracyCurve {
        axis: Axis::Delta,
        k: Some(k),
        t: Some(t_min),
        delta: None,
        points: deltas
            .iter()
            .enumerate()
            .map(|(di, &d)| {
                let hits = hits_within(ranks.iter().map(|r| r[di]), k);
                AccuracyPoint::new(d, hits, config.trials)
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn median_f64(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Descriptive statistics; quartiles are medians of the lower and upper
/// halves, excluding the overall median when the count is odd.
pub fn summary_stats(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("summary of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let (lower, upper) = if n == 1 {
        (&sorted[..], &sorted[..])
    } else {
        (&sorted[..n / 2], &sorted[n.div_ceil(2)..])
    };
    Ok(SummaryStats {
        count: n,
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[n - 1],
        median: median_f64(&sorted),
        q1: median_f64(lower),
        q3: median_f64(upper),
    })
}

/// Sessions drawn at uniformly random `(location, second)` pairs over
/// `[t_start, t_start + span_s]`: the model's long-run pooled distribution.
pub fn pooled_sample(model: &TrafficModel, t_start: u64, span_s: u64, n: usize, seed: u64) -> Vec<u64> {
    let grid = model.grid();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_stream(seed, i as u64, 1, DOMAIN_TRIAL);
            let loc = &grid.loc_ids()[rng.random_range(0..grid.len())];
            let ts = t_start + rng.random_range(0..=span_s);
            model
                .sample_session_bytes(loc, ts)
                .expect("grid locations are modeled")
        })
        .collect()
}

/// Median session size per UTC hour, pooled over all records.
pub fn hourly_medians(records: &[SessionRecord]) -> [Option<f64>; HOURS_PER_DAY] {
    let mut by_hour: Vec<Vec<u64>> = vec![Vec::new(); HOURS_PER_DAY];
    for r in records {
        by_hour[hour_of_day(r.timestamp)].push(r.bytes);
    }
    std::array::from_fn(|h| {
        let bucket = &mut by_hour[h];
        bucket.sort_unstable();
        median_of_sorted(bucket).ok()
    })
}

/// Per-cell median session size over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMatrix {
    pub grid: LocationGrid,
    /// `cell_medians[row][col]`; `None` where the cell has no data.
    pub cell_medians: Vec<Vec<Option<f64>>>,
    pub window: TimeFrame,
}

impl HeatMatrix {
    pub fn from_cells(
        grid: LocationGrid,
        cell_medians: Vec<Vec<Option<f64>>>,
        window: TimeFrame,
    ) -> Result<Self> {
        if cell_medians.len() != grid.rows()
            || cell_medians.iter().any(|row| row.len() != grid.cols())
        {
            return Err(Error::InvalidParameter(format!(
                "matrix does not match a {}x{} grid",
                grid.rows(),
                grid.cols()
            )));
        }
        Ok(HeatMatrix {
            grid,
            cell_medians,
            window,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cell_medians[row][col]
    }

    pub fn absent_cells(&self) -> Vec<LocId> {
        self.grid
            .loc_ids()
            .iter()
            .filter(|l| {
                let (i, j) = self.grid.position(l).expect("grid label");
                self.get(i, j).is_none()
            })
            .cloned()
            .collect()
    }

    /// One CSV row per grid row; absent cells are empty fields.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.cell_medians {
            w.write_record(
                row.iter()
                    .map(|c| c.map(|v| v.to_string()).unwrap_or_default()),
            )?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn heat_matrix(kb: &KnowledgeBase, grid: &LocationGrid, window: &TimeFrame) -> HeatMatrix {
    let cell_medians = (0..grid.rows())
        .map(|i| {
            (0..grid.cols())
                .map(|j| {
                    let mut bytes = kb.window_bytes(&LocId::grid(i, j), window).to_vec();
                    bytes.sort_unstable();
                    median_of_sorted(&bytes).ok()
                })
                .collect()
        })
        .collect();
    HeatMatrix {
        grid: grid.clone(),
        cell_medians,
        window: *window,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    /// Row-major order.
    pub members: Vec<LocId>,
}

/// Grid cells grouped into regions of indistinguishable session sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    /// `null` in JSON when unbounded.
    pub epsilon_bytes: f64,
    pub regions: Vec<Region>,
}

impl RegionPartition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region_of(&self, loc: &LocId) -> Option<usize> {
        self.regions
            .iter()
            .find(|r| r.members.contains(loc))
            .map(|r| r.id)
    }
}

/// Connected components of the 4-neighbour grid graph in which two adjacent
/// cells are joined when their medians differ by at most `epsilon_bytes`.
/// Cells without data are singleton regions. Region ids follow the
/// row-major order of each region's first cell.
pub fn detect_regions(hm: &HeatMatrix, epsilon_bytes: f64) -> RegionPartition {
    let (rows, cols) = (hm.grid.rows(), hm.grid.cols());
    let mut label: Vec<Option<usize>> = vec![None; rows * cols];
    let mut regions = Vec::new();
    let joined = |a: (usize, usize), b: (usize, usize)| match (hm.get(a.0, a.1), hm.get(b.0, b.1)) {
        (Some(x), Some(y)) => (x - y).abs() <= epsilon_bytes,
        _ => false,
    };

    for start in 0..rows * cols {
        if label[start].is_some() {
            continue;
        }
        let id = regions.len();
        label[start] = Some(id);
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(cell) = queue.pop_front() {
            let (i, j) = (cell / cols, cell % cols);
            let neighbours = [
                (i > 0).then(|| (i - 1, j)),
                (i + 1 < rows).then(|| (i + 1, j)),
                (j > 0).then(|| (i, j - 1)),
                (j + 1 < cols).then(|| (i, j + 1)),
            ];
            for (ni, nj) in neighbours.into_iter().flatten() {
                let next = ni * cols + nj;
                if label[next].is_none() && joined((i, j), (ni, nj)) {
                    label[next] = Some(id);
                    members.push(next);
                    queue.push_back(next);
                }
            }
        }
        members.sort_unstable();
        regions.push(Region {
            id,
            members: members
                .into_iter()
                .map(|c| hm.grid.loc_ids()[c].clone())
                .collect(),
        });
    }
    RegionPartition {
        epsilon_bytes,
        regions,
    }
}
