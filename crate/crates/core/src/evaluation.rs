//! Leave-one-out ranking metrics, rank-biased overlap between the two item
//! views, and the correlation-matrix export.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{correlation_matrix, LossBreakdown};
use crate::model::ForwardTrace;
use crate::numerics::{dot, DenseMatrix, Real};

pub const METRICS_HEADER: &str = "round,hr10,ndcg10,rbo50,loss_rec,loss_a,loss_o,clients_evaluated";
pub const DEFAULT_CLIP: f64 = 0.003;

fn order_by_score<T: Real>(scored: &mut [(usize, T)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or_else(|| a.1.is_nan().cmp(&b.1.is_nan()))
            .then(a.0.cmp(&b.0))
    });
}

/// Candidates ordered by descending `u·v_j`, ties by ascending item id.
pub fn rank_candidates<T: Real>(u: &[T], table: &DenseMatrix<T>, candidates: &[usize]) -> Result<Vec<usize>> {
    if u.len() != table.cols() {
        return Err(Error::shape("rank_candidates", format!("user dim {} vs {}", u.len(), table.cols())));
    }
    if let Some(&bad) = candidates.iter().find(|&&j| j >= table.rows()) {
        return Err(Error::shape("rank_candidates", format!("candidate {bad} out of range")));
    }
    let mut scored: Vec<(usize, T)> = candidates.iter().map(|&j| (j, dot(u, table.row(j)))).collect();
    order_by_score(&mut scored);
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

/// Top `k` items of the whole table by `u·v_j`.
pub fn top_k_items<T: Real>(u: &[T], table: &DenseMatrix<T>, k: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..table.rows()).collect();
    let mut ranked = rank_candidates(u, table, &all)?;
    ranked.truncate(k);
    Ok(ranked)
}

/// `(hit, ndcg)` of the held-out item in a ranked list (1-based rank).
pub fn hr_ndcg_at_k(ranked: &[usize], test_item: usize, k: usize) -> Result<(f64, f64)> {
    let pos = ranked
        .iter()
        .position(|&j| j == test_item)
        .ok_or_else(|| Error::Protocol(format!("test item {test_item} is not among the ranked candidates")))?;
    let rank = pos + 1;
    if rank <= k {
        Ok((1.0, 1.0 / ((rank + 1) as f64).log2()))
    } else {
        Ok((0.0, 0.0))
    }
}

/// Prefix-normalised truncated rank-biased overlap.
pub fn rbo_truncated(a: &[usize], b: &[usize], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("RBO lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Input(format!("RBO persistence p = {p} outside (0, 1)")));
    }
    let (mut seen_a, mut seen_b) = (HashSet::new(), HashSet::new());
    let mut overlap = 0usize;
    let (mut num, mut den, mut w) = (0.0, 0.0, 1.0);
    for (k, (&x, &y)) in a.iter().zip(b).enumerate() {
        if !seen_a.insert(x) || !seen_b.insert(y) {
            return Err(Error::Input("duplicate item inside an RBO list".into()));
        }
        if x == y {
            overlap += 1;
        } else {
            overlap += usize::from(seen_b.contains(&x)) + usize::from(seen_a.contains(&y));
        }
        num += w * overlap as f64 / (k + 1) as f64;
        den += w;
        w *= p;
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// RBO between the top-`k` lists produced by the personal view and the
/// enhanced global view of one forward trace.
pub fn view_consistency_rbo<T: Real>(user: &[T], trace: &ForwardTrace<T>, k: usize, p: f64) -> Result<f64> {
    let k = k.min(trace.v_view.rows());
    let personal = top_k_items(user, &trace.v_view, k)?;
    let global = top_k_items(user, &trace.c_e, k)?;
    rbo_truncated(&personal, &global, p)
}

/// `C_Eᵀ V` with entries of magnitude `<= clip` set to zero.
pub fn clipped_correlation<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>, clip: f64) -> Result<DenseMatrix<f64>> {
    let e = correlation_matrix(c_e, v)?;
    Ok(e.cast::<f64>().map(|x| if x.abs() <= clip { 0.0 } else { x }))
}

/// Number of correlation entries with magnitude above `clip`.
pub fn count_above_clip<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>, clip: f64) -> Result<usize> {
    Ok(clipped_correlation(c_e, v, clip)?.data().iter().filter(|x| **x != 0.0).count())
}

/// Formats like C's `%.6g`.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let sci = format!("{x:.5e}");
    // rounding may bump the exponent (9.999995 -> 1.00000e1)
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if !(-4..6).contains(&exp) {
        let (mant, _) = sci.split_once('e').expect("scientific format");
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn correlation_csv(m: &DenseMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&x| fmt_sig6(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes the clipped correlation matrix as a plain `d×d` CSV.
pub fn export_correlation_matrix<T: Real>(
    c_e: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    clip: f64,
    path: &Path,
) -> Result<DenseMatrix<f64>> {
    let m = clipped_correlation(c_e, v, clip)?;
    std::fs::write(path, correlation_csv(&m)).map_err(|e| Error::io(path, e))?;
    Ok(m)
}

/// Per-client evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub rbo: Option<f64>,
    /// Correlation entries above the export clip.
    pub corr_above_clip: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub rbo: Option<f64>,
    pub loss: LossBreakdown,
    pub clients_trained: usize,
    pub clients_excluded: usize,
    pub clients_evaluated: usize,
    pub wall_seconds: f64,
}

impl RoundMetrics {
    /// Fills the ranking means from per-client results (ordered reduction).
    pub fn absorb(&mut self, evals: &[ClientEval]) {
        let n = evals.len();
        self.clients_evaluated = n;
        if n == 0 {
            return;
        }
        let mean = |f: &dyn Fn(&ClientEval) -> f64| evals.iter().map(f).sum::<f64>() / n as f64;
        self.hr = Some(mean(&|e| e.hr));
        self.ndcg = Some(mean(&|e| e.ndcg));
        let rbos: Vec<f64> = evals.iter().filter_map(|e| e.rbo).collect();
        if !rbos.is_empty() {
            self.rbo = Some(rbos.iter().sum::<f64>() / rbos.len() as f64);
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Metrics CSV. Only deterministic columns are written.
pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.round,
            opt(r.hr),
            opt(r.ndcg),
            opt(r.rbo),
            r.loss.l_rec,
            r.loss.l_a,
            r.loss.l_o,
            r.clients_evaluated
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
