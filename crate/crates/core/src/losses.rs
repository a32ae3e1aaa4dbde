//! Training objectives: the recommendation BCE, the ranking-based consistency
//! loss between the two views, the orthogonality (or L2-distance)
//! complementarity loss, and their weighted sum with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::model::{self, ClientGrads, ClientState, ForwardTrace, HeadGrads, ModelView};
use crate::numerics::{
    axpy, cosine_similarity, dot, grad_check, norm, sigmoid, softmax, DenseMatrix, DenseVector,
    GradCheckReport, Real,
};
use crate::params::{ComplementarityKind, HyperParams, TopOneMode, VariantConfig};

pub const PRED_CLAMP: f64 = 1e-7;
pub const LOG_FLOOR: f64 = 1e-12;
pub const RATIO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_a: f64,
    pub l_o: f64,
    pub total: f64,
    /// Effective weights; zero when the term is disabled.
    pub beta_a: f64,
    pub beta_o: f64,
}

impl LossBreakdown {
    pub fn compose(l_rec: f64, l_a: f64, l_o: f64, beta_a: f64, beta_o: f64) -> Self {
        Self {
            l_rec,
            l_a,
            l_o,
            total: l_rec + beta_a * l_a + beta_o * l_o,
            beta_a,
            beta_o,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l_rec.is_finite() && self.l_a.is_finite() && self.l_o.is_finite()
    }
}

fn clamp_pred<T: Real>(p: T) -> T {
    p.max(T::lit(PRED_CLAMP)).min(T::lit(1.0 - PRED_CLAMP))
}

/// Summed binary cross-entropy with predictions clamped to `[1e-7, 1-1e-7]`.
pub fn rec_loss<T: Real>(predictions: &[T], labels: &[u8]) -> Result<T> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "rec_loss",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut total = T::zero();
    for (&p, &r) in predictions.iter().zip(labels) {
        let p = clamp_pred(p);
        total -= if r == 1 { p.ln() } else { (T::one() - p).ln() };
    }
    Ok(total)
}

/// Top-one probabilities of a prototype over a set of item rows.
#[derive(Debug, Clone)]
pub struct TopOne<T> {
    pub probs: DenseVector<T>,
    sims: Vec<T>,
    pub degenerate: bool,
}

fn top_one_rows<T: Real>(
    prototype: &[T],
    table: &DenseMatrix<T>,
    rows: &[usize],
    mode: TopOneMode,
) -> Result<TopOne<T>> {
    if prototype.len() != table.cols() {
        return Err(Error::shape(
            "top_one_distribution",
            format!("prototype dim {} vs table cols {}", prototype.len(), table.cols()),
        ));
    }
    let mut degenerate = false;
    let mut sims = Vec::with_capacity(rows.len());
    let pn = norm(prototype);
    for &j in rows {
        let row = table.row(j);
        let rn = norm(row);
        if pn <= T::zero() || rn <= T::zero() {
            degenerate = true;
            sims.push(T::zero());
        } else {
            sims.push(dot(prototype, row) / (pn * rn));
        }
    }
    let probs = match mode {
        TopOneMode::Softmax => softmax(&sims),
        TopOneMode::LiteralRatio => {
            let lo = T::lit(RATIO_FLOOR);
            let clipped: Vec<T> = sims.iter().map(|&s| s.max(lo).min(T::one())).collect();
            let total: T = clipped.iter().copied().sum();
            DenseVector::from_vec(clipped.into_iter().map(|s| s / total).collect())
        }
    };
    Ok(TopOne {
        probs,
        sims,
        degenerate,
    })
}

/// Cosine similarity of `prototype` against every row, turned into a
/// distribution by `mode`.
pub fn top_one_distribution<T: Real>(
    prototype: &[T],
    table: &DenseMatrix<T>,
    mode: TopOneMode,
) -> Result<TopOne<T>> {
    let rows: Vec<usize> = (0..table.rows()).collect();
    let out = top_one_rows(prototype, table, &rows, mode)?;
    if out.degenerate {
        log::warn!("top-one distribution over zero-norm rows");
    }
    Ok(out)
}

/// Accumulates `scale · ∂/∂(prototype, rows)` of `Σ d_probs · probs`.
#[allow(clippy::too_many_arguments)]
fn top_one_backward<T: Real>(
    prototype: &[T],
    table: &DenseMatrix<T>,
    rows: &[usize],
    top: &TopOne<T>,
    d_probs: &[T],
    mode: TopOneMode,
    scale: T,
    d_proto: &mut [T],
    d_table: &mut DenseMatrix<T>,
) {
    let q = &top.probs;
    let d_sims: Vec<T> = match mode {
        TopOneMode::Softmax => {
            let mean: T = d_probs.iter().zip(q.iter()).map(|(g, p)| *g * *p).sum();
            d_probs.iter().zip(q.iter()).map(|(g, p)| *p * (*g - mean)).collect()
        }
        TopOneMode::LiteralRatio => {
            let lo = T::lit(RATIO_FLOOR);
            let total: T = top.sims.iter().map(|&s| s.max(lo).min(T::one())).sum();
            let mean: T = d_probs.iter().zip(q.iter()).map(|(g, p)| *g * *p).sum();
            top.sims
                .iter()
                .zip(d_probs)
                .map(|(&s, &g)| {
                    if s > lo && s < T::one() {
                        (g - mean) / total
                    } else {
                        T::zero()
                    }
                })
                .collect()
        }
    };
    let pn = norm(prototype);
    if pn <= T::zero() {
        return;
    }
    for ((&j, &ds), &s) in rows.iter().zip(&d_sims).zip(&top.sims) {
        let row = table.row(j);
        let rn = norm(row);
        if rn <= T::zero() || ds == T::zero() {
            continue;
        }
        let g = ds * scale;
        let inv = T::one() / (pn * rn);
        // ∂cos/∂a = b/(|a||b|) - cos·a/|a|²
        let (ca, cb) = (s / (pn * pn), s / (rn * rn));
        for k in 0..prototype.len() {
            d_proto[k] += g * (row[k] * inv - ca * prototype[k]);
        }
        let out = d_table.row_mut(j);
        for k in 0..prototype.len() {
            out[k] += g * (prototype[k] * inv - cb * row[k]);
        }
    }
}

#[inline]
fn floored_ln<T: Real>(x: T) -> T {
    x.max(T::lit(LOG_FLOOR)).ln()
}

/// Symmetric cross-entropy `-½ Σ Pp log Pg - ½ Σ Pg log Pp`.
pub fn consistency_loss<T: Real>(p_personal: &[T], p_global: &[T]) -> Result<T> {
    if p_personal.len() != p_global.len() {
        return Err(Error::shape(
            "consistency_loss",
            format!("{} vs {}", p_personal.len(), p_global.len()),
        ));
    }
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (&p, &g) in p_personal.iter().zip(p_global) {
        total -= half * (p * floored_ln(g) + g * floored_ln(p));
    }
    Ok(total)
}

fn consistency_grads<T: Real>(p_personal: &[T], p_global: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let floor = T::lit(LOG_FLOOR);
    let mut dp = Vec::with_capacity(p_personal.len());
    let mut dg = Vec::with_capacity(p_personal.len());
    for (&p, &g) in p_personal.iter().zip(p_global) {
        let inv_p = if p > floor { T::one() / p } else { T::zero() };
        let inv_g = if g > floor { T::one() / g } else { T::zero() };
        dp.push(-half * (floored_ln(g) + g * inv_p));
        dg.push(-half * (p * inv_g + floored_ln(p)));
    }
    (dp, dg)
}

/// Correlation matrix `C_Eᵀ V` (`d×d`).
pub fn correlation_matrix<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if c_e.shape() != v.shape() {
        return Err(Error::shape(
            "correlation_matrix",
            format!("{:?} vs {:?}", c_e.shape(), v.shape()),
        ));
    }
    c_e.t_matmul(v)
}

/// `(1/d) Σ_ij (C_Eᵀ V)_ij²`
pub fn orthogonality_loss<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>) -> Result<T> {
    let e = correlation_matrix(c_e, v)?;
    Ok(e.sum_squares() / T::lit(c_e.cols() as f64))
}

/// `-(1/M) ‖C_E - V‖²_F`: pushes the two views apart.
pub fn l2_distance_loss<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>) -> Result<T> {
    let diff = c_e.sub(v)?;
    Ok(-diff.sum_squares() / T::lit(c_e.rows() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub degenerate: bool,
}

fn cosine_gram<T: Real>(m: &DenseMatrix<T>) -> (Vec<f64>, bool) {
    let n = m.rows();
    let mut degenerate = false;
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let s = cosine_similarity(m.row(a), m.row(b)).expect("same width");
            degenerate |= s.degenerate;
            g[a * n + b] = s.value.as_f64();
        }
    }
    (g, degenerate)
}

/// Frobenius distance between the cosine Gram matrices of the two tables.
/// Diagnostic only; never part of the training objective.
pub fn similarity_consistency_diagnostic<T: Real>(
    c_e: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
) -> Result<Diagnostic> {
    if c_e.shape() != v.shape() {
        return Err(Error::shape(
            "similarity_consistency_diagnostic",
            format!("{:?} vs {:?}", c_e.shape(), v.shape()),
        ));
    }
    let (ga, da) = cosine_gram(c_e);
    let (gb, db) = cosine_gram(v);
    let value = ga
        .iter()
        .zip(&gb)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(Diagnostic {
        value,
        degenerate: da || db,
    })
}

fn consistency_rows(batch: &[Example], num_items: usize, sample: bool) -> Vec<usize> {
    if sample {
        let mut rows: Vec<usize> = batch.iter().map(|e| e.0).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    } else {
        (0..num_items).collect()
    }
}

/// Loss values and (optionally) head gradients for a fresh forward trace.
fn head<T: Real>(
    user: &[T],
    trace: &ForwardTrace<T>,
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<HeadGrads<T>>)> {
    let (m, d) = trace.v_f.shape();
    if user.len() != d {
        return Err(Error::shape("total_loss", format!("user dim {} vs {d}", user.len())));
    }
    let mut grads = want_grad.then(|| HeadGrads::zeros(m, d));

    let mut l_rec = T::zero();
    let (lo, hi) = (T::lit(PRED_CLAMP), T::lit(1.0 - PRED_CLAMP));
    for &(j, r) in batch {
        if j >= m {
            return Err(Error::shape("total_loss", format!("item {j} out of range")));
        }
        let row = trace.v_f.row(j);
        let p = sigmoid(dot(user, row));
        let pc = clamp_pred(p);
        let label = if r == 1 { T::one() } else { T::zero() };
        l_rec -= if r == 1 { pc.ln() } else { (T::one() - pc).ln() };
        if let Some(g) = grads.as_mut() {
            if p > lo && p < hi {
                let ds = p - label;
                axpy(ds, row, &mut g.d_user);
                // fused table feeds both views
                axpy(ds, user, g.d_c_e.row_mut(j));
                axpy(ds, user, g.d_v_view.row_mut(j));
            }
        }
    }

    let beta_a = if variant.consistency_enabled { hp.beta_a } else { 0.0 };
    let mut l_a = T::zero();
    if variant.consistency_enabled {
        let rows = consistency_rows(batch, m, hp.consistency_sample);
        let mode = hp.eq12_mode;
        let personal = top_one_rows(&trace.p_p, &trace.v_view, &rows, mode)?;
        let global = top_one_rows(&trace.p_e, &trace.c_e, &rows, mode)?;
        l_a = consistency_loss(&personal.probs, &global.probs)?;
        if let Some(g) = grads.as_mut() {
            let (dp, dg) = consistency_grads(&personal.probs, &global.probs);
            let w = T::lit(beta_a);
            top_one_backward(&trace.p_p, &trace.v_view, &rows, &personal, &dp, mode, w, &mut g.d_p_p, &mut g.d_v_view);
            top_one_backward(&trace.p_e, &trace.c_e, &rows, &global, &dg, mode, w, &mut g.d_p_e, &mut g.d_c_e);
        }
    }

    let beta_o = if variant.orthogonality_enabled { hp.beta_o } else { 0.0 };
    let mut l_o = T::zero();
    if variant.orthogonality_enabled {
        let w = T::lit(beta_o);
        match variant.complementarity_kind {
            ComplementarityKind::Orthogonal => {
                let e = correlation_matrix(&trace.c_e, &trace.v_view)?;
                let inv_d = T::one() / T::lit(d as f64);
                l_o = e.sum_squares() * inv_d;
                if let Some(g) = grads.as_mut() {
                    let ge = e.scale(T::lit(2.0) * inv_d * w);
                    g.d_c_e.add_scaled(T::one(), &trace.v_view.matmul_t(&ge)?)?;
                    g.d_v_view.add_scaled(T::one(), &trace.c_e.matmul(&ge)?)?;
                }
            }
            ComplementarityKind::L2Distance => {
                let diff = trace.c_e.sub(&trace.v_view)?;
                let inv_m = T::one() / T::lit(m as f64);
                l_o = -diff.sum_squares() * inv_m;
                if let Some(g) = grads.as_mut() {
                    let k = T::lit(2.0) * inv_m * w;
                    g.d_c_e.add_scaled(-k, &diff)?;
                    g.d_v_view.add_scaled(k, &diff)?;
                }
            }
        }
    }

    let breakdown = LossBreakdown::compose(l_rec.as_f64(), l_a.as_f64(), l_o.as_f64(), beta_a, beta_o);
    Ok((breakdown, grads))
}

/// Weighted objective `l_rec + β_a·l_a + β_o·l_o` for a forward trace.
pub fn total_loss<T: Real>(
    view: ModelView<'_, T>,
    trace: &ForwardTrace<T>,
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<LossBreakdown> {
    head(view.user, trace, batch, hp, variant, false).map(|(l, _)| l)
}

/// Objective plus gradients w.r.t. every trainable client block.
pub fn total_loss_grad<T: Real>(
    view: ModelView<'_, T>,
    trace: &ForwardTrace<T>,
    positives: &[usize],
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<(LossBreakdown, ClientGrads<T>)> {
    let (loss, grads) = head(view.user, trace, batch, hp, variant, true)?;
    let grads = model::backward(view, trace, positives, hp, grads.expect("requested"))?;
    Ok((loss, grads))
}

/// Forward pass followed by [`total_loss_grad`].
pub fn loss_and_grad<T: Real>(
    view: ModelView<'_, T>,
    positives: &[usize],
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<(LossBreakdown, ClientGrads<T>)> {
    let trace = model::forward(view, positives, hp, variant)?;
    total_loss_grad(view, &trace, positives, batch, hp, variant)
}

/// Objective value only.
pub fn loss_value<T: Real>(
    view: ModelView<'_, T>,
    positives: &[usize],
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<LossBreakdown> {
    let trace = model::forward(view, positives, hp, variant)?;
    total_loss(view, &trace, batch, hp, variant)
}

/// Central-difference check of every trainable block of `state` against
/// the analytic gradient of the weighted objective.
pub fn grad_check_client(
    state: &ClientState<f64>,
    positives: &[usize],
    batch: &[Example],
    hp: &HyperParams,
    variant: &VariantConfig,
    eps: f64,
    rtol: f64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let (_, g) = loss_and_grad(state.view(), positives, batch, hp, variant)?;
    let eval = |s: &ClientState<f64>| -> f64 {
        loss_value(s.view(), positives, batch, hp, variant)
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    };
    let mut out = Vec::new();

    let d = state.user_embedding.dim();
    let u = DenseMatrix::new(1, d, state.user_embedding.to_vec())?;
    let gu = DenseMatrix::new(1, d, g.user.to_vec())?;
    let r = grad_check(
        |p| {
            let mut s = state.clone();
            s.user_embedding.copy_from_slice(p.data());
            eval(&s)
        },
        &u,
        &gu,
        eps,
        rtol,
    )?;
    out.push(("user_embedding", r));

    let r = grad_check(
        |p| {
            let mut s = state.clone();
            s.global_table = p.clone();
            eval(&s)
        },
        &state.global_table,
        &g.global,
        eps,
        rtol,
    )?;
    out.push(("global_table", r));

    let r = grad_check(
        |p| {
            let mut s = state.clone();
            s.personal_table = p.clone();
            eval(&s)
        },
        &state.personal_table,
        &g.personal,
        eps,
        rtol,
    )?;
    out.push(("personal_table", r));

    if let Some(gt) = &g.transfer {
        let n = state.transfer.num_params();
        let theta = DenseMatrix::new(1, n, state.transfer.mlp().flatten())?;
        let gtheta = DenseMatrix::new(1, n, gt.flatten())?;
        let r = grad_check(
            |p| {
                let mut s = state.clone();
                s.transfer.mlp_mut().assign_flat(p.data()).expect("same size");
                eval(&s)
            },
            &theta,
            &gtheta,
            eps,
            rtol,
        )?;
        out.push(("transfer", r));
    }

    if let (Some(net), Some(gr)) = (&state.row_transfer, &g.row_transfer) {
        let n = net.num_params();
        let flat = DenseMatrix::new(1, n, net.flatten())?;
        let gflat = DenseMatrix::new(1, n, gr.flatten())?;
        let r = grad_check(
            |p| {
                let mut s = state.clone();
                s.row_transfer
                    .as_mut()
                    .expect("present")
                    .assign_flat(p.data())
                    .expect("same size");
                eval(&s)
            },
            &flat,
            &gflat,
            eps,
            rtol,
        )?;
        out.push(("row_transfer", r));
    }
    Ok(out)
}
