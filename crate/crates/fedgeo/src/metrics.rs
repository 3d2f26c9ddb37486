//! Evaluation: top-k accuracy over the global test set, client drift, and
//! per-run summaries (best accuracy plus tail-rounds variability).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::federation::{ClientUpdate, RoundRecord};
use crate::geogrid::LocationId;
use crate::mobility::Sample;
use crate::model::{self, ModelWeights};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("evaluation test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// One evaluation of a model over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction of samples whose target ranks inside the top k, per k.
    pub acc_at: BTreeMap<usize, f64>,
    pub n_eval: usize,
    /// Top-1 accuracy per contributing client.
    pub per_client_acc: BTreeMap<u32, f64>,
}

/// Per-shard tallies merged with plain integer addition, so the parallel
/// reduction is deterministic regardless of scheduling.
#[derive(Default)]
struct Tally {
    hits: Vec<u64>,
    per_client: BTreeMap<u32, (u64, u64)>, // (top-1 hits, samples)
    n: u64,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        if self.hits.is_empty() {
            self.hits = vec![0; other.hits.len()];
        }
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        for (id, (h, n)) in other.per_client {
            let e = self.per_client.entry(id).or_insert((0, 0));
            e.0 += h;
            e.1 += n;
        }
        self.n += other.n;
        self
    }
}

/// Rank of the target under the prediction order (logit descending, ties
/// broken toward smaller ids): the number of locations strictly preferred
/// to it. The target is inside the top k exactly when `rank < k`.
fn target_rank(logits: ndarray::ArrayView1<'_, f64>, target: usize) -> usize {
    let lt = logits[target];
    let mut rank = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > lt || (v == lt && j < target) {
            rank += 1;
        }
    }
    rank
}

const EVAL_CHUNK: usize = 256;

/// Top-k accuracy of `w` over `test` for every cutoff in `ks`, plus top-1
/// accuracy per client. Evaluation shards across threads; the merge uses
/// integer counts only, so results are deterministic.
pub fn acc_at_k(
    w: &ModelWeights,
    test: &[(u32, &Sample)],
    ks: &[usize],
) -> Result<EvalReport, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    assert!(!ks.is_empty(), "at least one cutoff k is required");
    for &k in ks {
        assert!(
            k >= 1 && k <= w.n_locations(),
            "cutoff k = {k} outside 1..={}",
            w.n_locations()
        );
    }

    let tally = test
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<Tally, MetricsError> {
            let windows: Vec<&[LocationId]> =
                chunk.iter().map(|(_, s)| s.window.as_slice()).collect();
            let logits = model::forward_batch(w, &windows)?;
            let mut t = Tally {
                hits: vec![0; ks.len()],
                ..Tally::default()
            };
            for (bi, (client_id, s)) in chunk.iter().enumerate() {
                let target = s.target.index();
                if target >= w.n_locations() {
                    return Err(model::ModelError::InvalidLocationId {
                        id: s.target.0,
                        n_locations: w.n_locations(),
                    }
                    .into());
                }
                let rank = target_rank(logits.row(bi), target);
                for (ki, &k) in ks.iter().enumerate() {
                    if rank < k {
                        t.hits[ki] += 1;
                    }
                }
                let e = t.per_client.entry(*client_id).or_insert((0, 0));
                if rank == 0 {
                    e.0 += 1;
                }
                e.1 += 1;
            }
            t.n = chunk.len() as u64;
            Ok(t)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;

    let n = tally.n as f64;
    let acc_at = ks
        .iter()
        .zip(&tally.hits)
        .map(|(&k, &h)| (k, h as f64 / n))
        .collect();
    let per_client_acc = tally
        .per_client
        .into_iter()
        .map(|(id, (h, c))| (id, h as f64 / c as f64))
        .collect();
    Ok(EvalReport {
        acc_at,
        n_eval: tally.n as usize,
        per_client_acc,
    })
}

/// Mean L2 distance between each client's trained weights and the reference
/// model (the round's sample-weighted average), in the given update order.
pub fn client_drift(updates: &[ClientUpdate], temp: &ModelWeights) -> f64 {
    assert!(!updates.is_empty(), "drift needs at least one update");
    let sum: f64 = updates.iter().map(|u| u.weights.l2_distance(temp)).sum();
    sum / updates.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than 2 points.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Per-run summary: best accuracy over all rounds and the sample standard
/// deviation over the final `min(10, R)` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds: usize,
    pub best_acc1: f64,
    pub best_acc5: f64,
    pub tail_std_acc1: f64,
    pub tail_std_acc5: f64,
}

pub fn summarize(records: &[RoundRecord]) -> RunSummary {
    assert!(!records.is_empty(), "summarize needs at least one round");
    let acc1: Vec<f64> = records.iter().map(|r| r.acc1).collect();
    let acc5: Vec<f64> = records.iter().map(|r| r.acc5).collect();
    let tail = records.len().min(10);
    RunSummary {
        rounds: records.len(),
        best_acc1: acc1.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        best_acc5: acc5.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        tail_std_acc1: sample_std(&acc1[acc1.len() - tail..]),
        tail_std_acc5: sample_std(&acc5[acc5.len() - tail..]),
    }
}

/// Renders rows as an aligned plain-text table: first column left-aligned,
/// the rest right-aligned, two spaces between columns.
pub fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n_cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        debug_assert_eq!(row.len(), n_cols);
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: Vec<&str>| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("{cell:>w$}"));
            }
        }
        out.push('\n');
    };
    emit(&mut out, headers.to_vec());
    for row in rows {
        emit(&mut out, row.iter().map(|s| s.as_str()).collect());
    }
    out
}
