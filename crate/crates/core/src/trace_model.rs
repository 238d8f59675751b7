//! Synthetic per-location session-size generator.
//!
//! Each location has a characteristic session size that is modulated by the
//! hour of day, a slowly drifting content component and small Gaussian
//! noise. Every random quantity is drawn from a ChaCha stream keyed by
//! `(seed, location hash, time bin, domain)`, so a value depends only on
//! what is being asked for and never on generation order.

use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ingest::SessionRecord;
use crate::knowledge_base::UserDataset;
use crate::loc::LocId;

pub const HOURS_PER_DAY: usize = 24;
pub const MODEL_VERSION: u32 = 1;

/// Smallest session the generator ever emits; also the smallest session seen
/// in real captures.
pub const DEFAULT_BYTE_FLOOR: u64 = 80;
pub const DEFAULT_NOISE_STD: f64 = 300.0;
pub const DEFAULT_DRIFT_STD: f64 = 1_300.0;
pub const DEFAULT_DRIFT_HALFLIFE_H: f64 = 72.0;

/// Daytime session-size level of the median location.
const PRESET_DAY_LEVEL: f64 = 31_000.0;
/// Spread of location levels below / above the median (split normal).
const PRESET_SPREAD_BELOW: f64 = 3_000.0;
const PRESET_SPREAD_ABOVE: f64 = 8_000.0;
/// Per-location, per-hour deviation from the shared diurnal shape.
const PRESET_HOURLY_JITTER: f64 = 250.0;

/// Shared diurnal shape in bytes relative to the daytime level, indexed by
/// UTC hour. Hours 08-19 sit at the daytime plateau, 00-04 at the night
/// trough, the rest ramp between them.
const DIURNAL_SHAPE: [i64; HOURS_PER_DAY] = [
    -8_000, -8_000, -8_000, -8_000, -8_000, -6_000, -3_500, -1_000, // 00-07
    0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, // 08-19
    -500, -2_000, -4_000, -6_000, // 20-23
];

/// Number of random Fourier components in each location's drift process.
const DRIFT_COMPONENTS: usize = 64;

// Stream domains keep unrelated draws for the same key apart.
const DOMAIN_NOISE: u64 = 0x006e_6f69_7365;
const DOMAIN_DRIFT: u64 = 0x0064_7269_6674;
const DOMAIN_PRESET: u64 = 0x7072_6573_6574;

/// Deterministic random stream for one `(seed, salt, bin, domain)` key.
pub(crate) fn keyed_stream(seed: u64, salt: u64, bin: u64, domain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&salt.to_le_bytes());
    key[16..24].copy_from_slice(&bin.to_le_bytes());
    key[24..].copy_from_slice(&domain.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// UTC hour of day of an epoch timestamp.
pub fn hour_of_day(timestamp: u64) -> usize {
    ((timestamp / 3_600) % HOURS_PER_DAY as u64) as usize
}

/// The adversary's monitored points laid out on a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct LocationGrid {
    rows: usize,
    cols: usize,
    cell_edge_m: f64,
    loc_ids: Vec<LocId>,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    rows: usize,
    cols: usize,
    cell_edge_m: f64,
}

impl TryFrom<GridSpec> for LocationGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        LocationGrid::new(spec.rows, spec.cols, spec.cell_edge_m)
    }
}

impl From<LocationGrid> for GridSpec {
    fn from(grid: LocationGrid) -> Self {
        GridSpec {
            rows: grid.rows,
            cols: grid.cols,
            cell_edge_m: grid.cell_edge_m,
        }
    }
}

impl LocationGrid {
    pub fn new(rows: usize, cols: usize, cell_edge_m: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid needs at least one row and column, got {rows}x{cols}"
            )));
        }
        if !(cell_edge_m.is_finite() && cell_edge_m > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell edge must be a positive length, got {cell_edge_m}"
            )));
        }
        let loc_ids = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| LocId::grid(i, j)))
            .collect();
        Ok(LocationGrid {
            rows,
            cols,
            cell_edge_m,
            loc_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_edge_m(&self) -> f64 {
        self.cell_edge_m
    }

    /// Location identifiers in row-major order.
    pub fn loc_ids(&self) -> &[LocId] {
        &self.loc_ids
    }

    pub fn len(&self) -> usize {
        self.loc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc_ids.is_empty()
    }

    pub fn contains(&self, loc: &LocId) -> bool {
        self.position(loc).is_some()
    }

    /// `(row, col)` of a grid label, if it belongs to this grid.
    pub fn position(&self, loc: &LocId) -> Option<(usize, usize)> {
        loc.grid_position()
            .filter(|&(i, j)| i < self.rows && j < self.cols)
            // "01_2" parses but is not one of our labels
            .filter(|&(i, j)| self.loc_ids[i * self.cols + j] == *loc)
    }
}

/// Generative parameters for one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationProfile {
    pub loc_id: LocId,
    /// Session size at the daytime reference level.
    pub base_bytes: u64,
    /// Additive modulation per UTC hour.
    pub hourly_offsets: Vec<i64>,
    pub noise_std: f64,
    /// Stationary standard deviation of the drift component; zero disables
    /// drift.
    pub drift_std: f64,
    pub drift_halflife_h: f64,
}

impl LocationProfile {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(format!("{}: {msg}", self.loc_id)));
        if self.base_bytes == 0 {
            return bad("base_bytes must be positive".into());
        }
        if self.hourly_offsets.len() != HOURS_PER_DAY {
            return bad(format!(
                "expected {HOURS_PER_DAY} hourly offsets, got {}",
                self.hourly_offsets.len()
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be nonnegative, got {}", self.noise_std));
        }
        if !(self.drift_std.is_finite() && self.drift_std >= 0.0) {
            return bad(format!("drift_std must be nonnegative, got {}", self.drift_std));
        }
        if !(self.drift_halflife_h.is_finite() && self.drift_halflife_h > 0.0) {
            return bad(format!(
                "drift_halflife_h must be positive, got {}",
                self.drift_halflife_h
            ));
        }
        Ok(())
    }

    /// Noiseless, drift-free level at a given hour.
    pub fn hourly_level(&self, hour: usize) -> f64 {
        self.base_bytes as f64 + self.hourly_offsets[hour] as f64
    }
}

/// Slowly varying content drift of one location.
///
/// A sum of random Fourier features with Cauchy-distributed angular
/// frequencies: over the ensemble of locations the autocorrelation is
/// `2^(-lag / halflife)`, and each location's path is a smooth,
/// deterministic function of time.
#[derive(Debug, Clone)]
struct DriftProcess {
    amplitude: f64,
    /// rad/hour
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

impl DriftProcess {
    fn new(profile: &LocationProfile, seed: u64) -> Self {
        if profile.drift_std == 0.0 {
            return DriftProcess {
                amplitude: 0.0,
                frequencies: Vec::new(),
                phases: Vec::new(),
            };
        }
        let mut rng = keyed_stream(seed, profile.loc_id.stable_hash(), 0, DOMAIN_DRIFT);
        let decay = LN_2 / profile.drift_halflife_h;
        let cauchy = Cauchy::new(0.0, decay).expect("decay is positive and finite");
        let frequencies = (0..DRIFT_COMPONENTS)
            .map(|_| cauchy.sample(&mut rng))
            .collect();
        let phases = (0..DRIFT_COMPONENTS)
            .map(|_| rng.random::<f64>() * 2.0 * PI)
            .collect();
        DriftProcess {
            amplitude: profile.drift_std * (2.0 / DRIFT_COMPONENTS as f64).sqrt(),
            frequencies,
            phases,
        }
    }

    fn value(&self, timestamp: u64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let hours = timestamp as f64 / 3_600.0;
        let sum: f64 = self
            .frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, p)| (w * hours + p).cos())
            .sum();
        self.amplitude * sum
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    grid: LocationGrid,
    seed: u64,
    byte_floor: u64,
    profiles: Vec<LocationProfile>,
}

/// A seeded generative model covering every location of a grid.
#[derive(Debug, Clone)]
pub struct TrafficModel {
    grid: LocationGrid,
    profiles: Vec<LocationProfile>,
    seed: u64,
    byte_floor: u64,
    drift: Vec<DriftProcess>,
    index: HashMap<LocId, usize>,
}

impl PartialEq for TrafficModel {
    fn eq(&self, other: &Self) -> bool {
        // drift and index are derived from the rest
        self.grid == other.grid
            && self.profiles == other.profiles
            && self.seed == other.seed
            && self.byte_floor == other.byte_floor
    }
}

impl TrafficModel {
    pub fn new(
        grid: LocationGrid,
        profiles: Vec<LocationProfile>,
        seed: u64,
        byte_floor: u64,
    ) -> Result<Self> {
        if byte_floor == 0 {
            return Err(Error::InvalidModel("byte_floor must be positive".into()));
        }
        if profiles.len() != grid.len() {
            return Err(Error::InvalidModel(format!(
                "{} profiles for a grid of {} locations",
                profiles.len(),
                grid.len()
            )));
        }
        let mut index = HashMap::with_capacity(profiles.len());
        for (i, profile) in profiles.iter().enumerate() {
            profile.validate()?;
            if !grid.contains(&profile.loc_id) {
                return Err(Error::InvalidModel(format!(
                    "profile {} is not a grid location",
                    profile.loc_id
                )));
            }
            if index.insert(profile.loc_id.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!(
                    "duplicate profile for {}",
                    profile.loc_id
                )));
            }
        }
        let drift = profiles.iter().map(|p| DriftProcess::new(p, seed)).collect();
        Ok(TrafficModel {
            grid,
            profiles,
            seed,
            byte_floor,
            drift,
            index,
        })
    }

    pub fn grid(&self) -> &LocationGrid {
        &self.grid
    }

    pub fn profiles(&self) -> &[LocationProfile] {
        &self.profiles
    }

    pub fn profile(&self, loc: &LocId) -> Option<&LocationProfile> {
        self.index.get(loc).map(|&i| &self.profiles[i])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn byte_floor(&self) -> u64 {
        self.byte_floor
    }

    /// Drift component of a location at `timestamp`, in bytes.
    pub fn drift(&self, loc: &LocId, timestamp: u64) -> Result<f64> {
        let i = self.slot(loc)?;
        Ok(self.drift[i].value(timestamp))
    }

    fn slot(&self, loc: &LocId) -> Result<usize> {
        self.index
            .get(loc)
            .copied()
            .ok_or_else(|| Error::UnknownLocation(loc.clone()))
    }

    fn sample_slot(&self, slot: usize, timestamp: u64) -> u64 {
        let profile = &self.profiles[slot];
        let mut value = profile.hourly_level(hour_of_day(timestamp));
        value += self.drift[slot].value(timestamp);
        if profile.noise_std > 0.0 {
            let mut rng = keyed_stream(
                self.seed,
                profile.loc_id.stable_hash(),
                timestamp,
                DOMAIN_NOISE,
            );
            let z: f64 = StandardNormal.sample(&mut rng);
            value += profile.noise_std * z;
        }
        let rounded = value.round();
        if rounded < self.byte_floor as f64 {
            self.byte_floor
        } else {
            rounded as u64
        }
    }

    /// Size of a session observed at `loc` at `timestamp`.
    ///
    /// Noise is keyed on the exact second, so two observers of the same
    /// location at the same second see the same value.
    pub fn sample_session_bytes(&self, loc: &LocId, timestamp: u64) -> Result<u64> {
        let slot = self.slot(loc)?;
        Ok(self.sample_slot(slot, timestamp))
    }

    /// Labeled probe records for every location at `t_start`,
    /// `t_start + probe_interval_s`, ... up to and including `t_end`.
    /// Records are ordered by probe time, then grid order.
    pub fn generate_kb_traces(
        &self,
        t_start: u64,
        t_end: u64,
        probe_interval_s: u64,
    ) -> Result<impl Iterator<Item = SessionRecord> + '_> {
        if t_start > t_end {
            return Err(Error::EmptyTimeRange {
                start: t_start,
                end: t_end,
            });
        }
        if probe_interval_s == 0 {
            return Err(Error::InvalidParameter(
                "probe interval must be positive".into(),
            ));
        }
        let probes = (t_end - t_start) / probe_interval_s + 1;
        Ok((0..probes).flat_map(move |p| {
            let ts = t_start + p * probe_interval_s;
            (0..self.profiles.len()).map(move |slot| {
                SessionRecord::labeled(
                    self.profiles[slot].loc_id.clone(),
                    self.sample_slot(slot, ts),
                    ts,
                )
            })
        }))
    }

    /// Sessions of a stationary user at `true_loc` over `[t0 - t, t0]`.
    pub fn generate_user_trace(
        &self,
        true_loc: &LocId,
        t0: u64,
        t: u64,
        session_interval_s: u64,
    ) -> Result<UserTrace> {
        let slot = self.slot(true_loc)?;
        if t == 0 {
            return Err(Error::InvalidParameter(
                "user time frame must be positive".into(),
            ));
        }
        if session_interval_s == 0 {
            return Err(Error::InvalidParameter(
                "session interval must be positive".into(),
            ));
        }
        let start = t0.checked_sub(t).ok_or_else(|| {
            Error::InvalidParameter(format!("time frame of {t} s reaches before the epoch"))
        })?;
        let records = (0..=t / session_interval_s)
            .map(|i| {
                let ts = start + i * session_interval_s;
                SessionRecord::unlabeled(self.sample_slot(slot, ts), ts)
            })
            .collect();
        Ok(UserTrace {
            dataset: UserDataset::new(records)?,
            true_loc: true_loc.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            version: MODEL_VERSION,
            grid: self.grid.clone(),
            seed: self.seed,
            byte_floor: self.byte_floor,
            profiles: self.profiles.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(doc.version));
        }
        TrafficModel::new(doc.grid, doc.profiles, doc.seed, doc.byte_floor)
    }
}

/// A generated user trace with its ground-truth location, which only the
/// evaluator gets to see.
#[derive(Debug, Clone)]
pub struct UserTrace {
    pub dataset: UserDataset,
    pub true_loc: LocId,
}

/// Preset whose pooled statistics match measured location-based-service
/// traffic: median session around 30 kB, standard deviation around 6-7 kB,
/// daytime hourly medians near 31 kB and night-time near 23 kB.
///
/// Location levels are drawn by stratified sampling of a right-skewed split
/// normal and assigned to grid cells in random order.
pub fn calibrated_model(rows: usize, cols: usize, cell_edge_m: f64, seed: u64) -> Result<TrafficModel> {
    let grid = LocationGrid::new(rows, cols, cell_edge_m)?;
    let n = grid.len();
    let mut rng = keyed_stream(seed, 0, 0, DOMAIN_PRESET);
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);
    let unit = Normal::new(0.0, 1.0).expect("standard normal");

    let profiles = grid
        .loc_ids()
        .iter()
        .zip(strata)
        .map(|(loc, stratum)| {
            let u = (stratum as f64 + rng.random::<f64>()) / n as f64;
            let z = unit.inverse_cdf(u.clamp(1e-9, 1.0 - 1e-9));
            let spread = if z < 0.0 {
                PRESET_SPREAD_BELOW
            } else {
                PRESET_SPREAD_ABOVE
            };
            let base_bytes = (PRESET_DAY_LEVEL + spread * z).round() as u64;
            let hourly_offsets = DIURNAL_SHAPE
                .iter()
                .map(|&shape| {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    shape + (PRESET_HOURLY_JITTER * jitter).round() as i64
                })
                .collect();
            LocationProfile {
                loc_id: loc.clone(),
                base_bytes,
                hourly_offsets,
                noise_std: DEFAULT_NOISE_STD,
                drift_std: DEFAULT_DRIFT_STD,
                drift_halflife_h: DEFAULT_DRIFT_HALFLIFE_H,
            }
        })
        .collect();
    TrafficModel::new(grid, profiles, seed, DEFAULT_BYTE_FLOOR)
}
