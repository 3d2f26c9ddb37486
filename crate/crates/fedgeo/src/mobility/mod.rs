//! Mobility data pipeline: trajectories, fixed-interval resampling,
//! sliding-window sample extraction, per-client datasets, and the
//! population statistics (location entropy, heterogeneity index) that
//! drive client sampling and reporting.

mod cache;
mod plt;
mod synth;

pub use cache::{cache_exists, load_dataset, save_dataset};
pub use plt::{build_client_from_plt, ingest_plt, PltOptions};
pub use synth::{synth_generate, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::geogrid::{GridSpec, LocationId};

/// Errors from the mobility pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MobilityError {
    /// A record in an input file could not be parsed (1-based line number).
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// Input file has no data records.
    #[error("{0}: file contains no data records")]
    EmptyFile(PathBuf),
    /// Invalid generator or pipeline configuration.
    #[error("invalid mobility config: {0}")]
    Config(String),
    /// A trajectory violates its invariants.
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    /// A client has too few samples to satisfy a requested split.
    #[error("client {client_id} has too few samples ({n_samples}) for the requested split")]
    ClientTooSmall { client_id: u32, n_samples: usize },
    /// Dataset-level statistics are undefined for this dataset.
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    /// Cache files disagree with each other or with the grid.
    #[error("dataset cache inconsistent: {0}")]
    CacheInconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A time-ordered sequence of visited grid cells.
///
/// Invariants: at least one point; timestamps strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    points: Vec<(i64, LocationId)>,
}

impl Trajectory {
    /// Builds a trajectory, validating the ordering invariant.
    pub fn new(points: Vec<(i64, LocationId)>) -> Result<Self, MobilityError> {
        if points.is_empty() {
            return Err(MobilityError::InvalidTrajectory(
                "trajectory must contain at least one point".into(),
            ));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(MobilityError::InvalidTrajectory(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(i64, LocationId)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least one point
    }

    /// Location sequence without timestamps.
    pub fn locations(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.points.iter().map(|&(_, l)| l)
    }
}

/// One supervised next-location example: a fixed-length window of visited
/// cells and the cell visited immediately after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub window: Vec<LocationId>,
    pub target: LocationId,
}

/// All data held by one simulated client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientDataset {
    pub client_id: u32,
    /// Chronological samples; the first `train_len` form the training split.
    pub samples: Vec<Sample>,
    /// Visit count per location over the client's raw (resampled) trajectories.
    pub location_counts: BTreeMap<LocationId, u64>,
    /// Number of leading samples that belong to the training split.
    pub train_len: usize,
}

impl ClientDataset {
    /// Builds a client dataset from trajectories: samples are the
    /// concatenated sliding windows, counts tally every trajectory point,
    /// and the training split initially covers all samples.
    pub fn from_trajectories(
        client_id: u32,
        trajectories: &[Trajectory],
        window_len: usize,
    ) -> Self {
        let mut samples = Vec::new();
        let mut location_counts: BTreeMap<LocationId, u64> = BTreeMap::new();
        for t in trajectories {
            samples.extend(windowize(t, window_len));
            for l in t.locations() {
                *location_counts.entry(l).or_insert(0) += 1;
            }
        }
        let train_len = samples.len();
        Self {
            client_id,
            samples,
            location_counts,
            train_len,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Training-split samples (chronological prefix).
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.train_len]
    }

    /// Held-out samples (chronological suffix).
    pub fn test(&self) -> &[Sample] {
        &self.samples[self.train_len..]
    }

    /// Total raw visit count over all locations.
    pub fn n_total_visits(&self) -> u64 {
        self.location_counts.values().sum()
    }

    /// Number of distinct locations this client has visited.
    pub fn n_distinct_locations(&self) -> usize {
        self.location_counts.len()
    }
}

/// A population of clients sharing one spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub grid: GridSpec,
    /// Clients with unique ids, stored in ascending id order.
    pub clients: Vec<ClientDataset>,
}

impl FederatedDataset {
    /// Builds a dataset, validating id uniqueness and sorting by client id.
    pub fn new(grid: GridSpec, mut clients: Vec<ClientDataset>) -> Result<Self, MobilityError> {
        clients.sort_by_key(|c| c.client_id);
        for w in clients.windows(2) {
            if w[0].client_id == w[1].client_id {
                return Err(MobilityError::Config(format!(
                    "duplicate client id {}",
                    w[0].client_id
                )));
            }
        }
        Ok(Self { grid, clients })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Union of all clients' held-out samples, tagged with their client id,
    /// in (client id, chronological) order.
    pub fn union_test(&self) -> Vec<(u32, &Sample)> {
        self.clients
            .iter()
            .flat_map(|c| c.test().iter().map(move |s| (c.client_id, s)))
            .collect()
    }

    pub fn total_train_samples(&self) -> usize {
        self.clients.iter().map(|c| c.train_len).sum()
    }

    /// All training samples pooled in client-id order (centralized baseline).
    pub fn pooled_train(&self) -> Vec<Sample> {
        self.clients
            .iter()
            .flat_map(|c| c.train().iter().cloned())
            .collect()
    }

    /// Per-client sampling weights: entropy of the location distribution
    /// induced by each client's training-split samples (window positions and
    /// targets), in client order. Computed once per run, before any round.
    pub fn train_entropies(&self) -> Vec<f64> {
        self.clients
            .iter()
            .map(|c| {
                let mut counts: BTreeMap<LocationId, u64> = BTreeMap::new();
                for s in c.train() {
                    for &l in &s.window {
                        *counts.entry(l).or_insert(0) += 1;
                    }
                    *counts.entry(s.target).or_insert(0) += 1;
                }
                entropy_of_counts(counts.values().copied())
            })
            .collect()
    }
}

/// Keeps every record whose grid location is valid and drops the rest;
/// splits into a new trajectory whenever consecutive kept records are more
/// than `gap_split_s` seconds apart. Records with non-increasing timestamps
/// are dropped. Exposed for the PLT reader and tests.
pub(crate) fn segment_records(
    records: impl IntoIterator<Item = (i64, LocationId)>,
    gap_split_s: i64,
) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut current: Vec<(i64, LocationId)> = Vec::new();
    for (ts, loc) in records {
        if let Some(&(last_ts, _)) = current.last() {
            if ts <= last_ts {
                continue; // corrupt ordering: drop the record
            }
            if ts - last_ts > gap_split_s {
                out.push(Trajectory {
                    points: std::mem::take(&mut current),
                });
            }
        }
        current.push((ts, loc));
    }
    if !current.is_empty() {
        out.push(Trajectory { points: current });
    }
    out
}

/// Resamples a trajectory onto a fixed clock: one point per tick
/// `t0 + k * interval_s` for every tick up to the last record, carrying the
/// most recent observed location ("last observation carried forward").
pub fn resample_fixed_interval(t: &Trajectory, interval_s: i64) -> Trajectory {
    assert!(interval_s > 0, "resample interval must be positive");
    let t0 = t.points[0].0;
    let t_last = t.points.last().unwrap().0;
    let mut points = Vec::new();
    let mut idx = 0usize;
    let mut tick = t0;
    while tick <= t_last {
        while idx + 1 < t.points.len() && t.points[idx + 1].0 <= tick {
            idx += 1;
        }
        points.push((tick, t.points[idx].1));
        tick += interval_s;
    }
    Trajectory { points }
}

/// Extracts every length-`window_len` sliding window (stride 1) whose
/// successor location exists: positions `p` with `p + window_len < len`,
/// giving `max(0, len - window_len)` samples.
pub fn windowize(t: &Trajectory, window_len: usize) -> Vec<Sample> {
    assert!(window_len >= 1, "window length must be at least 1");
    let locs: Vec<LocationId> = t.locations().collect();
    if locs.len() <= window_len {
        return Vec::new();
    }
    (0..locs.len() - window_len)
        .map(|p| Sample {
            window: locs[p..p + window_len].to_vec(),
            target: locs[p + window_len],
        })
        .collect()
}

/// Shannon entropy (natural log) of a discrete distribution given by counts.
/// Zero-count entries contribute nothing; a single support point gives 0.
pub(crate) fn entropy_of_counts(counts: impl Iterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let mut h = 0.0;
    for c in counts {
        let p = c as f64 / total;
        h -= p * p.ln();
    }
    h
}

/// Location entropy of one client's raw visit distribution.
pub fn location_entropy(c: &ClientDataset) -> f64 {
    assert!(
        c.n_total_visits() >= 1,
        "location entropy requires at least one visit"
    );
    entropy_of_counts(c.location_counts.values().copied())
}

/// Heterogeneity index of a population: `1 - (c - 1) / (C_max - 1)` where
/// `c` is the largest number of distinct locations any single client covers
/// and `C_max` is the number of distinct locations across all clients.
/// Close to 1 means each client sees a small private slice of the world.
pub fn heterogeneity_index(ds: &FederatedDataset) -> Result<f64, MobilityError> {
    let union: BTreeSet<LocationId> = ds
        .clients
        .iter()
        .flat_map(|c| c.location_counts.keys().copied())
        .collect();
    let c_max = union.len();
    if c_max < 2 {
        return Err(MobilityError::DegenerateDataset(format!(
            "heterogeneity index needs at least 2 distinct locations overall, found {c_max}"
        )));
    }
    let c = ds
        .clients
        .iter()
        .map(|c| c.n_distinct_locations())
        .max()
        .unwrap_or(0);
    Ok(1.0 - (c as f64 - 1.0) / (c_max as f64 - 1.0))
}

/// Splits every client chronologically: the last `ceil(test_frac * n)`
/// samples are held out, the rest train. Fails if any client would be left
/// with an empty training split.
pub fn split_train_test(
    mut ds: FederatedDataset,
    test_frac: f64,
) -> Result<FederatedDataset, MobilityError> {
    assert!(
        test_frac > 0.0 && test_frac < 1.0,
        "test fraction must lie in (0, 1)"
    );
    for c in &mut ds.clients {
        let n = c.samples.len();
        let n_test = (test_frac * n as f64).ceil() as usize;
        if n_test >= n {
            return Err(MobilityError::ClientTooSmall {
                client_id: c.client_id,
                n_samples: n,
            });
        }
        c.train_len = n - n_test;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::GridSpec;
    use proptest::prelude::*;

    fn loc(i: u32) -> LocationId {
        LocationId(i)
    }

    fn traj(ids: &[u32]) -> Trajectory {
        Trajectory::new(
            ids.iter()
                .enumerate()
                .map(|(k, &i)| (k as i64 * 60, loc(i)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_rejects_unordered_timestamps() {
        let err = Trajectory::new(vec![(10, loc(0)), (10, loc(1))]).unwrap_err();
        assert!(matches!(err, MobilityError::InvalidTrajectory(_)));
        assert!(Trajectory::new(vec![]).is_err());
    }

    #[test]
    fn resample_carries_last_observation_forward() {
        // Records at t = 0, 70, 130; resample at 60 s: ticks 0, 60, 120.
        let t = Trajectory::new(vec![(0, loc(1)), (70, loc(2)), (130, loc(3))]).unwrap();
        let r = resample_fixed_interval(&t, 60);
        assert_eq!(
            r.points(),
            &[(0, loc(1)), (60, loc(1)), (120, loc(2))],
            "each tick takes the latest record at or before it"
        );
    }

    #[test]
    fn resample_single_point_keeps_it() {
        let t = Trajectory::new(vec![(42, loc(7))]).unwrap();
        let r = resample_fixed_interval(&t, 60);
        assert_eq!(r.points(), &[(42, loc(7))]);
    }

    #[test]
    fn windowize_counts_match_length_minus_window() {
        // len 5, T 4 -> exactly 1 sample.
        let t = traj(&[0, 1, 2, 3, 4]);
        let s = windowize(&t, 4);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].window, vec![loc(0), loc(1), loc(2), loc(3)]);
        assert_eq!(s[0].target, loc(4));

        // len == T and len < T -> no samples.
        assert!(windowize(&traj(&[0, 1, 2, 3]), 4).is_empty());
        assert!(windowize(&traj(&[0, 1]), 4).is_empty());

        // len 40, T 32 -> positions p with p + 32 < 40, i.e. p in 0..8.
        let ids: Vec<u32> = (0..40).collect();
        let s = windowize(&traj(&ids), 32);
        let brute = (0..40usize).filter(|p| p + 32 < 40).count();
        assert_eq!(s.len(), brute);
        assert_eq!(s.len(), 8);
        // Last sample ends one shy of the final record.
        assert_eq!(s[7].target, loc(39));
    }

    #[test]
    fn segmenting_splits_on_large_gaps_only() {
        // 2 h gap between the 2nd and 3rd record under a 30 min threshold.
        let recs = vec![
            (0, loc(0)),
            (60, loc(1)),
            (60 + 7200, loc(2)),
            (120 + 7200, loc(3)),
        ];
        let segs = segment_records(recs, 1800);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].len(), 2);
        assert_eq!(segs[1].len(), 2);

        // Exactly at the threshold: no split.
        let segs = segment_records(vec![(0, loc(0)), (1800, loc(1))], 1800);
        assert_eq!(segs.len(), 1);

        // Non-increasing timestamps are dropped.
        let segs = segment_records(vec![(0, loc(0)), (0, loc(1)), (60, loc(2))], 1800);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].points(), &[(0, loc(0)), (60, loc(2))]);
    }

    #[test]
    fn entropy_of_two_to_one_mix_matches_closed_form() {
        // Counts {A: 2, B: 1}: H = ln 3 - (2/3) ln 2 = 0.636514...
        let mut c = ClientDataset::from_trajectories(0, &[traj(&[5, 5, 9])], 1);
        c.train_len = c.samples.len();
        let h = location_entropy(&c);
        let expected = (3.0f64).ln() - (2.0 / 3.0) * (2.0f64).ln();
        assert!((h - expected).abs() < 1e-12, "{h} vs {expected}");
        assert!((h - 0.6365141682948128).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_single_location_is_zero() {
        let c = ClientDataset::from_trajectories(0, &[traj(&[3, 3, 3, 3])], 2);
        assert_eq!(location_entropy(&c), 0.0);
    }

    #[test]
    fn uniform_entropy_is_log_support_size() {
        let c = ClientDataset::from_trajectories(0, &[traj(&[0, 1, 2, 3])], 1);
        let h = location_entropy(&c);
        assert!((h - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn heterogeneity_index_hand_cases() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
        // Two clients on disjoint single cells: c = 1, C_max = 2 -> HI = 1.
        let a = ClientDataset::from_trajectories(0, &[traj(&[0, 0])], 1);
        let b = ClientDataset::from_trajectories(1, &[traj(&[5, 5])], 1);
        let ds = FederatedDataset::new(grid.clone(), vec![a, b]).unwrap();
        assert_eq!(heterogeneity_index(&ds).unwrap(), 1.0);

        // One client covering everything: c = C_max -> HI = 0.
        let all = ClientDataset::from_trajectories(0, &[traj(&[0, 1, 2])], 1);
        let other = ClientDataset::from_trajectories(1, &[traj(&[1, 1])], 1);
        let ds = FederatedDataset::new(grid.clone(), vec![all, other]).unwrap();
        assert_eq!(heterogeneity_index(&ds).unwrap(), 0.0);

        // c = 2 of C_max = 3 -> 1 - 1/2 = 0.5.
        let a = ClientDataset::from_trajectories(0, &[traj(&[0, 1])], 1);
        let b = ClientDataset::from_trajectories(1, &[traj(&[2, 2])], 1);
        let ds = FederatedDataset::new(grid.clone(), vec![a, b]).unwrap();
        assert_eq!(heterogeneity_index(&ds).unwrap(), 0.5);

        // Single shared location overall: undefined.
        let a = ClientDataset::from_trajectories(0, &[traj(&[4, 4])], 1);
        let b = ClientDataset::from_trajectories(1, &[traj(&[4, 4])], 1);
        let ds = FederatedDataset::new(grid, vec![a, b]).unwrap();
        assert!(matches!(
            heterogeneity_index(&ds),
            Err(MobilityError::DegenerateDataset(_))
        ));
    }

    #[test]
    fn split_holds_out_chronological_tail() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
        let ids: Vec<u32> = (0..14).map(|i| i % 4).collect();
        let c = ClientDataset::from_trajectories(0, &[traj(&ids)], 4);
        assert_eq!(c.n_samples(), 10);
        let ds = FederatedDataset::new(grid, vec![c]).unwrap();
        let ds = split_train_test(ds, 0.1).unwrap();
        let c = &ds.clients[0];
        // ceil(0.1 * 10) = 1 held out.
        assert_eq!(c.train_len, 9);
        assert_eq!(c.test().len(), 1);
        // Held-out samples are the chronological tail.
        assert_eq!(c.test()[0], c.samples[9]);
    }

    #[test]
    fn split_fails_when_training_side_would_be_empty() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
        let c = ClientDataset::from_trajectories(7, &[traj(&[0, 1, 2])], 2); // 1 sample
        let ds = FederatedDataset::new(grid, vec![c]).unwrap();
        let err = split_train_test(ds, 0.5).unwrap_err();
        assert!(matches!(
            err,
            MobilityError::ClientTooSmall { client_id: 7, .. }
        ));
    }

    #[test]
    fn duplicate_client_ids_rejected() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
        let a = ClientDataset::from_trajectories(3, &[traj(&[0, 1])], 1);
        let b = ClientDataset::from_trajectories(3, &[traj(&[2, 3])], 1);
        assert!(FederatedDataset::new(grid, vec![a, b]).is_err());
    }

    #[test]
    fn union_test_is_ordered_by_client_then_time() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
        let mk = |id: u32| {
            let mut c = ClientDataset::from_trajectories(id, &[traj(&[0, 1, 2, 3, 0, 1])], 2);
            c.train_len = 2; // 4 samples -> last 2 held out
            c
        };
        let ds = FederatedDataset::new(grid, vec![mk(2), mk(0)]).unwrap();
        let ut = ds.union_test();
        assert_eq!(ut.len(), 4);
        assert_eq!(ut[0].0, 0);
        assert_eq!(ut[1].0, 0);
        assert_eq!(ut[2].0, 2);
        assert_eq!(ut[3].0, 2);
    }

    proptest! {
        /// Entropy lies in [0, ln(support)] and is invariant to relabeling.
        #[test]
        fn entropy_bounds_and_permutation_invariance(
            counts in proptest::collection::vec(1u64..200, 1..12),
            seed in 0u64..1000,
        ) {
            let h = entropy_of_counts(counts.iter().copied());
            let k = counts.len() as f64;
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= k.ln() + 1e-12);

            // Shuffle the counts: entropy only depends on the multiset.
            use rand::seq::SliceRandom;
            let mut rng = crate::seed::stream(&[seed]);
            let mut shuffled = counts.clone();
            shuffled.shuffle(&mut rng);
            let h2 = entropy_of_counts(shuffled.into_iter());
            prop_assert!((h - h2).abs() < 1e-12);
        }

        /// Every emitted sample's target is the location right after its window,
        /// and the sample count matches the closed form.
        #[test]
        fn windowize_postconditions(
            ids in proptest::collection::vec(0u32..50, 1..80),
            t in 1usize..40,
        ) {
            let trajectory = traj(&ids);
            let samples = windowize(&trajectory, t);
            prop_assert_eq!(samples.len(), ids.len().saturating_sub(t));
            for (p, s) in samples.iter().enumerate() {
                prop_assert_eq!(s.window.len(), t);
                for (j, &w) in s.window.iter().enumerate() {
                    prop_assert_eq!(w, loc(ids[p + j]));
                }
                prop_assert_eq!(s.target, loc(ids[p + t]));
            }
        }

        /// Resampling produces exactly-spaced ticks covering [t0, t_last].
        #[test]
        fn resample_grid_is_regular(
            gaps in proptest::collection::vec(1i64..500, 0..30),
            interval in 1i64..240,
        ) {
            let mut ts = 0i64;
            let mut points = vec![(0i64, loc(0))];
            for (i, g) in gaps.iter().enumerate() {
                ts += g;
                points.push((ts, loc(i as u32 + 1)));
            }
            let t = Trajectory::new(points).unwrap();
            let r = resample_fixed_interval(&t, interval);
            let t_last = t.points().last().unwrap().0;
            prop_assert_eq!(r.len() as i64, t_last / interval + 1);
            for (k, &(tick, l)) in r.points().iter().enumerate() {
                prop_assert_eq!(tick, k as i64 * interval);
                // Carried location is the latest record at or before the tick.
                let expect = t.points().iter().rev().find(|&&(rt, _)| rt <= tick).unwrap().1;
                prop_assert_eq!(l, expect);
            }
        }

        /// Chronological split: train ++ test == samples, test nonempty,
        /// test size == ceil(frac * n).
        #[test]
        fn split_partitions_samples(
            n_steps in 16usize..60,
            frac in 0.05f64..0.5,
        ) {
            let grid = GridSpec::new(0.0, 0.0, 100.0, 4, 4).unwrap();
            let ids: Vec<u32> = (0..n_steps as u32).map(|i| i % 16).collect();
            let c = ClientDataset::from_trajectories(0, &[traj(&ids)], 8);
            let n = c.n_samples();
            prop_assume!(n >= 2);
            let ds = FederatedDataset::new(grid, vec![c]).unwrap();
            match split_train_test(ds, frac) {
                Ok(ds) => {
                    let c = &ds.clients[0];
                    let n_test = (frac * n as f64).ceil() as usize;
                    prop_assert_eq!(c.test().len(), n_test);
                    prop_assert!(!c.train().is_empty());
                    let mut rejoined = c.train().to_vec();
                    rejoined.extend(c.test().iter().cloned());
                    prop_assert_eq!(rejoined, c.samples.clone());
                }
                Err(MobilityError::ClientTooSmall { .. }) => {
                    prop_assert!((frac * n as f64).ceil() as usize >= n);
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            }
        }
    }
}
