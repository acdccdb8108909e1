//! Quantitative codebook studies: usage histograms, usage variance,
//! utilization rate, quantization-loss tracking, and pairwise
//! inter-agent codebook distance.
//!
//! All functions here are pure; they operate on snapshots and can run
//! while training proceeds elsewhere.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::quantizer::Codebook;

/// Exact histogram of selected code indices over a codebook of `l`
/// entries.
pub fn usage_counts(indices: &[usize], l: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; l];
    for &idx in indices {
        if idx >= l {
            return Err(Error::shape(format!(
                "code index {idx} out of range for {l} codes"
            )));
        }
        counts[idx] += 1;
    }
    Ok(counts)
}

/// Population variance of a selection-count vector.
pub fn usage_variance(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Fraction of codes selected at least once.
pub fn utilization_rate(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64
}

/// Average elementwise Euclidean distance over all codebook pairs:
///
/// `ED = (2 / (m (m-1))) * sum_{i<j} sqrt(sum_{u,v} (C_i - C_j)^2)`.
///
/// Codes are compared entry by entry with no row alignment, so two
/// codebooks that are equal up to a reordering of their codes score a
/// nonzero distance. See [`pairwise_codebook_distance_matched`] for a
/// reordering-tolerant variant.
pub fn pairwise_codebook_distance(codebooks: &[&Codebook]) -> Result<f64> {
    matrices_distance(&codebooks.iter().map(|cb| cb.codes()).collect::<Vec<_>>())
}

/// [`pairwise_codebook_distance`] over raw code matrices.
pub fn matrices_distance(codes: &[&Matrix]) -> Result<f64> {
    let m = codes.len();
    if m < 2 {
        return Err(Error::Usage(format!(
            "pairwise distance needs at least 2 codebooks, got {m}"
        )));
    }
    let (rows, cols) = (codes[0].rows(), codes[0].cols());
    for c in codes {
        if c.rows() != rows || c.cols() != cols {
            return Err(Error::shape(format!(
                "codebook shape {}x{} does not match {rows}x{cols}",
                c.rows(),
                c.cols()
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let sq: f64 = codes[i]
                .data()
                .iter()
                .zip(codes[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Reordering-tolerant variant for sensitivity analysis: before each
/// pairwise comparison, the second codebook's rows are greedily matched
/// to the first's by nearest Euclidean distance (without replacement).
/// Not used by any acceptance metric.
pub fn pairwise_codebook_distance_matched(codebooks: &[&Codebook]) -> Result<f64> {
    let m = codebooks.len();
    if m < 2 {
        return Err(Error::Usage(format!(
            "pairwise distance needs at least 2 codebooks, got {m}"
        )));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            total += greedy_matched_distance(codebooks[i].codes(), codebooks[j].codes())?;
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

fn greedy_matched_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape("codebook shape mismatch".to_string()));
    }
    let l = a.rows();
    let mut taken = vec![false; l];
    let mut sq_total = 0.0;
    for u in 0..l {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for v in 0..l {
            if taken[v] {
                continue;
            }
            let d = crate::numeric::squared_distance(a.row(u), b.row(v));
            if d < best_d {
                best_d = d;
                best = Some(v);
            }
        }
        taken[best.expect("unmatched row")] = true;
        sq_total += best_d;
    }
    Ok(sq_total.sqrt())
}

/// One point of an exported long-format series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub epoch: usize,
    pub tokens: usize,
    pub value: f64,
}

/// Arranges per-epoch quantization-loss values into an export-ready
/// long-format series tagged with the token count.
pub fn track_quantization_loss(values: &[(usize, f64)], tokens: usize) -> Vec<SeriesPoint> {
    values
        .iter()
        .map(|&(epoch, value)| SeriesPoint {
            epoch,
            tokens,
            value,
        })
        .collect()
}

/// Writes a codebook as CSV: header `index,d0..d{D-1}`, one row per
/// code. Values use 17 significant digits so the file round-trips
/// bit-exactly through [`import_codebook`].
pub fn export_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "index")?;
    for d in 0..cb.code_dim() {
        write!(w, ",d{d}")?;
    }
    writeln!(w)?;
    for i in 0..cb.num_codes() {
        write!(w, "{i}")?;
        for &v in cb.code(i) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a codebook CSV written by [`export_codebook`].
pub fn import_codebook(path: &Path) -> Result<Codebook> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        offset: 0,
        message: "empty codebook file".into(),
    })??;
    let dim = header.split(',').count().saturating_sub(1);
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let _index = fields.next();
        let row: std::result::Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse {
            offset: 0,
            message: format!("bad codebook value: {e}"),
        })?;
        if row.len() != dim {
            return Err(Error::Parse {
                offset: 0,
                message: format!("row has {} values, expected {dim}", row.len()),
            });
        }
        rows.push(row);
    }
    Ok(Codebook::from_codes(Matrix::from_rows(&rows)?))
}
