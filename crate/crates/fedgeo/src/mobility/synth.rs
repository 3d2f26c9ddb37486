//! Synthetic mobility generator: each client random-walks inside a private
//! "home" block of cells and occasionally commutes to a shared "downtown"
//! block, producing a population that is geographically clustered, highly
//! non-IID across clients, and spread in per-client entropy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geogrid::GridSpec;
use crate::seed::{self, STREAM_SYNTH};

use super::{ClientDataset, FederatedDataset, MobilityError, Trajectory};

/// Parameters of the synthetic walk.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Home block size in cells (rows x cols); each client gets its own
    /// non-overlapping block.
    pub home_rows: usize,
    pub home_cols: usize,
    /// Shared downtown block size in cells, centered on the grid.
    /// Set either to 0 to disable commuting entirely.
    pub downtown_rows: usize,
    pub downtown_cols: usize,
    /// Per-step probability of staying put, interpolated linearly from
    /// `stay_prob_min` (client 0) to `stay_prob_max` (last client) so the
    /// population spans a range of entropies.
    pub stay_prob_min: f64,
    pub stay_prob_max: f64,
    /// Per-step probability of jumping between home and downtown.
    pub commute_prob: f64,
    pub trajectories_per_client: usize,
    /// Steps per trajectory; must exceed `window_len` so every trajectory
    /// yields at least one sample.
    pub steps_per_trajectory: usize,
    /// Sliding-window length used to cut samples from the walks.
    pub window_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            home_rows: 3,
            home_cols: 3,
            downtown_rows: 4,
            downtown_cols: 4,
            stay_prob_min: 0.2,
            stay_prob_max: 0.9,
            commute_prob: 0.1,
            trajectories_per_client: 5,
            steps_per_trajectory: 56,
            window_len: 32,
        }
    }
}

/// A rectangular block of grid cells.
#[derive(Debug, Clone, Copy)]
struct Block {
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn intersects(&self, other: &Block) -> bool {
        self.r0 < other.r0 + other.rows
            && other.r0 < self.r0 + self.rows
            && self.c0 < other.c0 + other.cols
            && other.c0 < self.c0 + self.cols
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r0 + self.rows && c >= self.c0 && c < self.c0 + self.cols
    }

    fn random_cell(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        (
            self.r0 + rng.gen_range(0..self.rows),
            self.c0 + rng.gen_range(0..self.cols),
        )
    }
}

fn validate(grid: &GridSpec, n_clients: usize, cfg: &SynthConfig) -> Result<(), MobilityError> {
    let bad = |msg: String| Err(MobilityError::Config(msg));
    if n_clients == 0 {
        return bad("n_clients must be at least 1".into());
    }
    if cfg.home_rows == 0 || cfg.home_cols == 0 {
        return bad("home_rows and home_cols must be at least 1".into());
    }
    if cfg.home_rows > grid.n_rows || cfg.home_cols > grid.n_cols {
        return bad(format!(
            "home block {}x{} does not fit the {}x{} grid",
            cfg.home_rows, cfg.home_cols, grid.n_rows, grid.n_cols
        ));
    }
    let downtown_enabled = cfg.downtown_rows > 0 && cfg.downtown_cols > 0;
    if downtown_enabled && (cfg.downtown_rows > grid.n_rows || cfg.downtown_cols > grid.n_cols) {
        return bad(format!(
            "downtown block {}x{} does not fit the {}x{} grid",
            cfg.downtown_rows, cfg.downtown_cols, grid.n_rows, grid.n_cols
        ));
    }
    for (name, p) in [
        ("stay_prob_min", cfg.stay_prob_min),
        ("stay_prob_max", cfg.stay_prob_max),
        ("commute_prob", cfg.commute_prob),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("{name} must lie in [0, 1], got {p}"));
        }
    }
    if cfg.stay_prob_min > cfg.stay_prob_max {
        return bad("stay_prob_min must not exceed stay_prob_max".into());
    }
    if cfg.trajectories_per_client == 0 {
        return bad("trajectories_per_client must be at least 1".into());
    }
    if cfg.window_len == 0 {
        return bad("window_len must be at least 1".into());
    }
    if cfg.steps_per_trajectory <= cfg.window_len {
        return bad(format!(
            "steps_per_trajectory ({}) must exceed window_len ({}) so every trajectory yields samples",
            cfg.steps_per_trajectory, cfg.window_len
        ));
    }
    Ok(())
}

/// Centered downtown block, or `None` when disabled.
fn downtown_block(grid: &GridSpec, cfg: &SynthConfig) -> Option<Block> {
    if cfg.downtown_rows == 0 || cfg.downtown_cols == 0 {
        return None;
    }
    Some(Block {
        r0: (grid.n_rows - cfg.downtown_rows) / 2,
        c0: (grid.n_cols - cfg.downtown_cols) / 2,
        rows: cfg.downtown_rows,
        cols: cfg.downtown_cols,
    })
}

/// Generates a synthetic federated dataset. Deterministic in
/// `(grid, n_clients, cfg, seed)`: home-block placement and every walk are
/// driven by dedicated substreams of the seed.
pub fn synth_generate(
    grid: &GridSpec,
    n_clients: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<FederatedDataset, MobilityError> {
    validate(grid, n_clients, cfg)?;
    let downtown = downtown_block(grid, cfg);

    // Candidate home blocks tile the grid; blocks touching downtown are
    // reserved for downtown.
    let mut candidates: Vec<Block> = Vec::new();
    let mut r0 = 0;
    while r0 + cfg.home_rows <= grid.n_rows {
        let mut c0 = 0;
        while c0 + cfg.home_cols <= grid.n_cols {
            let b = Block {
                r0,
                c0,
                rows: cfg.home_rows,
                cols: cfg.home_cols,
            };
            if downtown.map_or(true, |d| !b.intersects(&d)) {
                candidates.push(b);
            }
            c0 += cfg.home_cols;
        }
        r0 += cfg.home_rows;
    }
    if candidates.len() < n_clients {
        return Err(MobilityError::Config(format!(
            "grid only fits {} disjoint {}x{} home blocks outside downtown, need {}",
            candidates.len(),
            cfg.home_rows,
            cfg.home_cols,
            n_clients
        )));
    }

    // Assign each client a home block with a seeded shuffle.
    let mut placement_rng = seed::stream(&[seed, STREAM_SYNTH]);
    use rand::seq::SliceRandom;
    candidates.shuffle(&mut placement_rng);
    let homes = &candidates[..n_clients];

    let mut clients = Vec::with_capacity(n_clients);
    for (k, home) in homes.iter().enumerate() {
        let stay_prob = if n_clients == 1 {
            cfg.stay_prob_min
        } else {
            let f = k as f64 / (n_clients - 1) as f64;
            cfg.stay_prob_min + f * (cfg.stay_prob_max - cfg.stay_prob_min)
        };
        let mut rng = seed::stream(&[seed, STREAM_SYNTH, 1 + k as u64]);
        // Every trajectory starts from the same home-base cell, so a fully
        // sedentary client occupies exactly one location across all of them.
        let base = home.random_cell(&mut rng);
        let mut trajectories = Vec::with_capacity(cfg.trajectories_per_client);
        for _ in 0..cfg.trajectories_per_client {
            trajectories.push(walk(grid, home, downtown, stay_prob, cfg, base, &mut rng));
        }
        clients.push(ClientDataset::from_trajectories(
            k as u32,
            &trajectories,
            cfg.window_len,
        ));
    }

    FederatedDataset::new(grid.clone(), clients)
}

/// One trajectory from `start`: a lazy walk stays put with `stay_prob` each
/// step, and otherwise moves — occasionally by commuting (teleporting to a
/// random cell of the other zone), normally to a random 8-neighbor within
/// the current zone. Staying takes precedence, so a stay probability of 1
/// pins the walker regardless of the commute setting. One step per simulated
/// minute.
fn walk(
    grid: &GridSpec,
    home: &Block,
    downtown: Option<Block>,
    stay_prob: f64,
    cfg: &SynthConfig,
    start: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut zone = *home;
    let mut at_home = true;
    let (mut r, mut c) = start;
    let mut points = Vec::with_capacity(cfg.steps_per_trajectory);
    for step in 0..cfg.steps_per_trajectory {
        points.push((step as i64 * 60, grid.cell_id(r, c)));
        if rng.gen_bool(stay_prob) {
            continue;
        }
        if let Some(d) = downtown {
            if rng.gen_bool(cfg.commute_prob) {
                zone = if at_home { d } else { *home };
                at_home = !at_home;
                let cell = zone.random_cell(rng);
                r = cell.0;
                c = cell.1;
                continue;
            }
        }
        // Random 8-neighbor confined to the current zone.
        let mut moves: Vec<(usize, usize)> = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                if nr >= 0 && nc >= 0 && zone.contains(nr as usize, nc as usize) {
                    moves.push((nr as usize, nc as usize));
                }
            }
        }
        if !moves.is_empty() {
            let pick = moves[rng.gen_range(0..moves.len())];
            r = pick.0;
            c = pick.1;
        }
    }
    Trajectory { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{heterogeneity_index, location_entropy};
    use std::collections::BTreeSet;

    fn grid() -> GridSpec {
        GridSpec::new(37.5, 126.9, 100.0, 20, 20).unwrap()
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&grid(), 10, &cfg, 42).unwrap();
        let b = synth_generate(&grid(), 10, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&grid(), 10, &cfg, 43).unwrap();
        assert_ne!(a, c, "different seeds should give different data");
    }

    #[test]
    fn every_client_yields_expected_sample_count() {
        let cfg = SynthConfig::default();
        let ds = synth_generate(&grid(), 10, &cfg, 7).unwrap();
        assert_eq!(ds.n_clients(), 10);
        let per_traj = cfg.steps_per_trajectory - cfg.window_len;
        for c in &ds.clients {
            assert_eq!(c.n_samples(), cfg.trajectories_per_client * per_traj);
            assert!(c.train_len == c.n_samples());
        }
    }

    #[test]
    fn disjoint_homes_without_commuting() {
        let cfg = SynthConfig {
            downtown_rows: 0,
            downtown_cols: 0,
            commute_prob: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&grid(), 8, &cfg, 11).unwrap();
        let supports: Vec<BTreeSet<_>> = ds
            .clients
            .iter()
            .map(|c| c.location_counts.keys().copied().collect())
            .collect();
        for i in 0..supports.len() {
            for j in 0..i {
                assert!(
                    supports[i].is_disjoint(&supports[j]),
                    "clients {i} and {j} share cells without a shared downtown"
                );
            }
        }
        // Fully private slices: the largest per-client support is far below
        // the union, so the heterogeneity index is high.
        let hi = heterogeneity_index(&ds).unwrap();
        assert!(hi > 0.8, "expected near-private supports, hi = {hi}");
    }

    #[test]
    fn constant_walk_has_zero_entropy_and_unit_heterogeneity() {
        // Stay probability 1 pins every walker to its home base even though
        // commuting stays enabled: staying takes precedence over moving.
        let cfg = SynthConfig {
            stay_prob_min: 1.0,
            stay_prob_max: 1.0,
            window_len: 4,
            steps_per_trajectory: 12,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&grid(), 5, &cfg, 3).unwrap();
        for c in &ds.clients {
            assert_eq!(c.n_distinct_locations(), 1);
            assert_eq!(location_entropy(c), 0.0);
        }
        assert_eq!(heterogeneity_index(&ds).unwrap(), 1.0);
    }

    #[test]
    fn stay_probability_gradient_spreads_entropy() {
        let ds = synth_generate(&grid(), 10, &SynthConfig::default(), 1).unwrap();
        let hs: Vec<f64> = ds.clients.iter().map(location_entropy).collect();
        // The restless first client should be clearly more entropic than the
        // sedentary last one.
        assert!(
            hs[0] > hs[9] + 0.2,
            "entropy gradient missing: first {} vs last {}",
            hs[0],
            hs[9]
        );
    }

    #[test]
    fn default_fixture_is_strongly_heterogeneous() {
        let ds = synth_generate(&grid(), 10, &SynthConfig::default(), 42).unwrap();
        let hi = heterogeneity_index(&ds).unwrap();
        assert!(hi >= 0.5, "fixture heterogeneity too low: {hi}");
    }

    #[test]
    fn commuters_visit_downtown() {
        let cfg = SynthConfig::default();
        let g = grid();
        let ds = synth_generate(&g, 10, &cfg, 42).unwrap();
        let d = downtown_block(&g, &cfg).unwrap();
        for c in &ds.clients {
            let visits_downtown = c.location_counts.keys().any(|l| {
                let (r, col) = g.row_col(*l);
                d.contains(r, col)
            });
            assert!(
                visits_downtown,
                "client {} never commuted despite commute_prob > 0",
                c.client_id
            );
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        let g = grid();
        // Too many clients for the available home blocks.
        let err = synth_generate(&g, 1000, &SynthConfig::default(), 0).unwrap_err();
        assert!(matches!(err, MobilityError::Config(_)));
        // Window at least as long as the walk.
        let cfg = SynthConfig {
            steps_per_trajectory: 32,
            window_len: 32,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&g, 2, &cfg, 0).is_err());
        // Probability out of range.
        let cfg = SynthConfig {
            commute_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&g, 2, &cfg, 0).is_err());
    }
}
