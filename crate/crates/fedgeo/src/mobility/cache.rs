//! On-disk dataset cache. A dataset directory holds three files:
//!
//! * `grid.toml`    - the grid definition,
//! * `samples.csv`  - `client_id,sample_index,loc_0..loc_{T-1},target`,
//! * `counts.csv`   - `client_id,location,count` raw visit tallies.
//!
//! Saving an unsplit dataset and loading it back is an exact round trip;
//! splits are applied by the caller after loading.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::fsio::write_atomic;
use crate::geogrid::{GridSpec, LocationId};

use super::{ClientDataset, FederatedDataset, MobilityError, Sample};

const GRID_FILE: &str = "grid.toml";
const SAMPLES_FILE: &str = "samples.csv";
const COUNTS_FILE: &str = "counts.csv";

fn cache_err(msg: impl Into<String>) -> MobilityError {
    MobilityError::CacheInconsistent(msg.into())
}

/// Writes a dataset to `dir` (created if needed). Every client must carry at
/// least one sample and all samples must share one window length.
pub fn save_dataset(ds: &FederatedDataset, dir: &Path) -> Result<(), MobilityError> {
    let window_len = ds
        .clients
        .iter()
        .flat_map(|c| c.samples.first())
        .map(|s| s.window.len())
        .next()
        .ok_or_else(|| cache_err("cannot save a dataset with no samples"))?;
    for c in &ds.clients {
        if c.samples.is_empty() {
            return Err(cache_err(format!("client {} has no samples", c.client_id)));
        }
        if c.samples.iter().any(|s| s.window.len() != window_len) {
            return Err(cache_err(format!(
                "client {} mixes window lengths",
                c.client_id
            )));
        }
    }
    fs::create_dir_all(dir)?;

    let grid_toml = toml::to_string_pretty(&ds.grid)
        .map_err(|e| cache_err(format!("failed to serialize grid: {e}")))?;
    write_atomic(&dir.join(GRID_FILE), &grid_toml)?;

    let mut samples = String::new();
    samples.push_str("client_id,sample_index");
    for t in 0..window_len {
        write!(samples, ",loc_{t}").unwrap();
    }
    samples.push_str(",target\n");
    for c in &ds.clients {
        for (i, s) in c.samples.iter().enumerate() {
            write!(samples, "{},{}", c.client_id, i).unwrap();
            for l in &s.window {
                write!(samples, ",{}", l.0).unwrap();
            }
            writeln!(samples, ",{}", s.target.0).unwrap();
        }
    }
    write_atomic(&dir.join(SAMPLES_FILE), &samples)?;

    let mut counts = String::from("client_id,location,count\n");
    for c in &ds.clients {
        for (l, n) in &c.location_counts {
            writeln!(counts, "{},{},{}", c.client_id, l.0, n).unwrap();
        }
    }
    write_atomic(&dir.join(COUNTS_FILE), &counts)?;
    Ok(())
}

/// True if `dir` contains a complete dataset cache.
pub fn cache_exists(dir: &Path) -> bool {
    [GRID_FILE, SAMPLES_FILE, COUNTS_FILE]
        .iter()
        .all(|f| dir.join(f).is_file())
}

/// Loads a dataset previously written by [`save_dataset`]. The loaded
/// dataset is unsplit: every sample counts as training data until the caller
/// applies a split.
pub fn load_dataset(dir: &Path) -> Result<FederatedDataset, MobilityError> {
    let grid_path = dir.join(GRID_FILE);
    let grid_src = fs::read_to_string(&grid_path)?;
    let grid: GridSpec =
        toml::from_str(&grid_src).map_err(|e| cache_err(format!("{}: {e}", grid_path.display())))?;
    grid.validate()
        .map_err(|e| cache_err(format!("{}: {e}", grid_path.display())))?;
    let n_locations = grid.n_locations();

    // samples.csv
    let samples_path = dir.join(SAMPLES_FILE);
    let src = fs::read_to_string(&samples_path)?;
    let mut lines = src.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MobilityError::EmptyFile(samples_path.clone()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "client_id" || cols[1] != "sample_index" {
        return Err(cache_err(format!(
            "{}: unexpected header {header:?}",
            samples_path.display()
        )));
    }
    let window_len = cols.len() - 3;
    for (t, col) in cols[2..2 + window_len].iter().enumerate() {
        if *col != format!("loc_{t}") {
            return Err(cache_err(format!(
                "{}: expected column loc_{t}, found {col:?}",
                samples_path.display()
            )));
        }
    }
    if cols[cols.len() - 1] != "target" {
        return Err(cache_err(format!(
            "{}: last column must be target",
            samples_path.display()
        )));
    }

    let mut per_client: BTreeMap<u32, Vec<Sample>> = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parse = |s: &str| -> Result<u32, MobilityError> {
            s.parse::<u32>().map_err(|_| MobilityError::Parse {
                path: samples_path.clone(),
                line: line_no,
                message: format!("invalid integer {s:?}"),
            })
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(MobilityError::Parse {
                path: samples_path.clone(),
                line: line_no,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let client_id = parse(fields[0])?;
        let sample_index = parse(fields[1])? as usize;
        let mut window = Vec::with_capacity(window_len);
        for f in &fields[2..2 + window_len] {
            window.push(LocationId(parse(f)?));
        }
        let target = LocationId(parse(fields[cols.len() - 1])?);
        for l in window.iter().chain(std::iter::once(&target)) {
            if l.index() >= n_locations {
                return Err(cache_err(format!(
                    "{}: line {line_no}: location {} outside grid of {n_locations} cells",
                    samples_path.display(),
                    l.0
                )));
            }
        }
        let entry = per_client.entry(client_id).or_default();
        if entry.len() != sample_index {
            return Err(cache_err(format!(
                "{}: line {line_no}: client {client_id} sample_index {sample_index} out of order (expected {})",
                samples_path.display(),
                entry.len()
            )));
        }
        entry.push(Sample { window, target });
    }
    if per_client.is_empty() {
        return Err(MobilityError::EmptyFile(samples_path));
    }

    // counts.csv
    let counts_path = dir.join(COUNTS_FILE);
    let src = fs::read_to_string(&counts_path)?;
    let mut lines = src.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MobilityError::EmptyFile(counts_path.clone()))?;
    if header != "client_id,location,count" {
        return Err(cache_err(format!(
            "{}: unexpected header {header:?}",
            counts_path.display()
        )));
    }
    let mut per_client_counts: BTreeMap<u32, BTreeMap<LocationId, u64>> = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(MobilityError::Parse {
                path: counts_path.clone(),
                line: line_no,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse_u64 = |s: &str| -> Result<u64, MobilityError> {
            s.parse::<u64>().map_err(|_| MobilityError::Parse {
                path: counts_path.clone(),
                line: line_no,
                message: format!("invalid integer {s:?}"),
            })
        };
        let client_id = parse_u64(fields[0])? as u32;
        let location = LocationId(parse_u64(fields[1])? as u32);
        let count = parse_u64(fields[2])?;
        if location.index() >= n_locations {
            return Err(cache_err(format!(
                "{}: line {line_no}: location {} outside grid of {n_locations} cells",
                counts_path.display(),
                location.0
            )));
        }
        if per_client_counts
            .entry(client_id)
            .or_default()
            .insert(location, count)
            .is_some()
        {
            return Err(cache_err(format!(
                "{}: line {line_no}: duplicate (client, location) pair",
                counts_path.display()
            )));
        }
    }

    let sample_ids: Vec<u32> = per_client.keys().copied().collect();
    let count_ids: Vec<u32> = per_client_counts.keys().copied().collect();
    if sample_ids != count_ids {
        return Err(cache_err(format!(
            "{SAMPLES_FILE} and {COUNTS_FILE} disagree on client ids ({sample_ids:?} vs {count_ids:?})"
        )));
    }

    let clients = per_client
        .into_iter()
        .map(|(client_id, samples)| {
            let location_counts = per_client_counts.remove(&client_id).unwrap();
            let train_len = samples.len();
            ClientDataset {
                client_id,
                samples,
                location_counts,
                train_len,
            }
        })
        .collect();
    FederatedDataset::new(grid, clients)
}
