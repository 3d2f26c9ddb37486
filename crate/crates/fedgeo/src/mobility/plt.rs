//! Reader for GeoLife-style PLT trajectory files and the pipeline that
//! turns a directory of them into a per-client dataset.

use std::fs;
use std::path::{Path, PathBuf};

use crate::geogrid::{GridError, GridSpec};

use super::{
    resample_fixed_interval, segment_records, ClientDataset, MobilityError, Trajectory,
};

/// Knobs for the PLT ingestion pipeline.
#[derive(Debug, Clone)]
pub struct PltOptions {
    /// Fixed resampling interval in seconds.
    pub resample_interval_s: i64,
    /// Consecutive records further apart than this start a new trajectory.
    pub gap_split_s: i64,
    /// Resampled trajectories must have strictly more records than this.
    pub min_records: usize,
    /// Sliding-window length for sample extraction.
    pub window_len: usize,
}

impl Default for PltOptions {
    fn default() -> Self {
        Self {
            resample_interval_s: 60,
            gap_split_s: 30 * 60,
            min_records: 10,
            window_len: 32,
        }
    }
}

/// Number of header lines a PLT file carries before data records.
const PLT_HEADER_LINES: usize = 6;

/// Parses one PLT file into trajectories on the given grid.
///
/// Each data record is `lat,lon,0,altitude,days,date,time`; the timestamp is
/// `round(days * 86400)` seconds. Records falling outside the grid are
/// dropped; records with non-increasing timestamps are dropped; gaps larger
/// than `gap_split_s` split the stream into separate trajectories.
pub fn ingest_plt(
    path: &Path,
    grid: &GridSpec,
    gap_split_s: i64,
) -> Result<Vec<Trajectory>, MobilityError> {
    let contents = fs::read_to_string(path)?;
    let lines: Vec<&str> = contents.lines().collect();
    if lines.len() <= PLT_HEADER_LINES {
        return Err(MobilityError::EmptyFile(path.to_path_buf()));
    }

    let mut records: Vec<(i64, crate::geogrid::LocationId)> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(PLT_HEADER_LINES) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(MobilityError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected at least 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64, MobilityError> {
            s.trim().parse::<f64>().map_err(|_| MobilityError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("invalid {what}: {s:?}"),
            })
        };
        let lat = parse_f64(fields[0], "latitude")?;
        let lon = parse_f64(fields[1], "longitude")?;
        let days = parse_f64(fields[4], "timestamp (fractional days)")?;
        let ts = (days * 86_400.0).round() as i64;
        match grid.locate(lat, lon) {
            Ok(loc) => records.push((ts, loc)),
            Err(GridError::OutOfBounds { .. }) => continue,
            Err(e) => {
                return Err(MobilityError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
    }

    Ok(segment_records(records, gap_split_s))
}

/// Ingests every `.plt` file under `files` (callers pass them sorted by
/// name, which for GeoLife equals chronological order), resamples each
/// trajectory onto a fixed interval, keeps those longer than
/// `min_records`, and windows the survivors into a client dataset.
pub fn build_client_from_plt(
    client_id: u32,
    files: &[PathBuf],
    grid: &GridSpec,
    opts: &PltOptions,
) -> Result<ClientDataset, MobilityError> {
    let mut kept: Vec<Trajectory> = Vec::new();
    for f in files {
        for t in ingest_plt(f, grid, opts.gap_split_s)? {
            let r = resample_fixed_interval(&t, opts.resample_interval_s);
            if r.len() > opts.min_records {
                kept.push(r);
            }
        }
    }
    Ok(ClientDataset::from_trajectories(
        client_id,
        &kept,
        opts.window_len,
    ))
}
