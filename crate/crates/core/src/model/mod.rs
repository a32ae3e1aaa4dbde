//! Client-side parameters and the consensus-enhancement forward pass:
//! prototypes, transfer-matrix generation, per-item enhancement, additive
//! fusion and scoring, together with their hand-written backward pass.

pub mod checkpoint;
pub mod mlp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid, DenseMatrix, DenseVector, Real};
use crate::params::{AceInit, EnhancementKind, HyperParams, VariantConfig};
use crate::rng::{self, purpose};

pub use mlp::{Linear, Mlp, MlpCache, MlpGrads};

/// Generates a `d×d` transfer matrix from the concatenated `[global, personal]`
/// prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferNet<T> {
    dim: usize,
    net: Mlp<T>,
}

impl<T: Real> TransferNet<T> {
    /// `schedule` lists the widths before the `d²` output and must start at `2d`.
    pub fn new<R: Rng>(dim: usize, schedule: &[usize], init: AceInit, scale: f64, rng: &mut R) -> Result<Self> {
        if schedule.first() != Some(&(2 * dim)) {
            return Err(Error::Config(format!(
                "transfer schedule must start at 2d = {}, got {schedule:?}",
                2 * dim
            )));
        }
        let mut widths = schedule.to_vec();
        widths.push(dim * dim);
        let mut net = Mlp::init(&widths, rng);
        if init == AceInit::Identity {
            let out = net.output_layer_mut();
            for i in 0..dim {
                out.bias[i * dim + i] = T::lit(1.0 / scale);
            }
        }
        Ok(Self { dim, net })
    }

    pub fn from_mlp(dim: usize, net: Mlp<T>) -> Result<Self> {
        if net.input_width() != 2 * dim || net.output_width() != dim * dim {
            return Err(Error::shape(
                "TransferNet::from_mlp",
                format!("widths {:?} for d = {dim}", net.widths()),
            ));
        }
        Ok(Self { dim, net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn cast<U: Real>(&self) -> TransferNet<U> {
        TransferNet {
            dim: self.dim,
            net: self.net.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub client_id: usize,
    pub user_embedding: DenseVector<T>,
    /// Working copy of the consensus; replaced by the download at every round.
    pub global_table: DenseMatrix<T>,
    pub personal_table: DenseMatrix<T>,
    pub transfer: TransferNet<T>,
    /// Client-local row-wise transfer used by the alternative enhancement baselines.
    pub row_transfer: Option<Mlp<T>>,
    /// Local SGD steps taken so far (drives the learning-rate decay).
    pub steps: u64,
}

/// Borrowed parameters for one forward pass. The global table may come from
/// the client (training) or the server (evaluation).
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a, T> {
    pub user: &'a [T],
    pub global: &'a DenseMatrix<T>,
    pub personal: &'a DenseMatrix<T>,
    pub transfer: &'a TransferNet<T>,
    pub row_transfer: Option<&'a Mlp<T>>,
}

impl<T: Real> ClientState<T> {
    pub fn view(&self) -> ModelView<'_, T> {
        ModelView {
            user: &self.user_embedding,
            global: &self.global_table,
            personal: &self.personal_table,
            transfer: &self.transfer,
            row_transfer: self.row_transfer.as_ref(),
        }
    }

    pub fn view_with_global<'a>(
        &'a self,
        global: &'a DenseMatrix<T>,
        transfer: &'a TransferNet<T>,
    ) -> ModelView<'a, T> {
        ModelView {
            user: &self.user_embedding,
            global,
            personal: &self.personal_table,
            transfer,
            row_transfer: self.row_transfer.as_ref(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.user_embedding.is_finite()
            && self.global_table.is_finite()
            && self.personal_table.is_finite()
            && self.transfer.net.is_finite()
            && self.row_transfer.as_ref().map_or(true, Mlp::is_finite)
    }
}

fn row_transfer_widths(dim: usize) -> Vec<usize> {
    vec![dim, 2 * dim, dim]
}

/// Seeded client initialisation: embeddings ~ N(0, init_std²), transfer net
/// He-uniform hidden layers with the output layer set by `hp.ace_init`.
pub fn init_client<T: Real>(
    seed: u64,
    client_id: usize,
    num_items: usize,
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<ClientState<T>> {
    let d = hp.dim;
    if d == 0 || num_items == 0 {
        return Err(Error::Config("embedding dim and item count must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[purpose::INIT, client_id as u64]);
    let normal = Normal::new(0.0, hp.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(normal.sample(&mut r))).collect() };
    let user_embedding = DenseVector::from_vec(draw(d));
    let global_table = DenseMatrix::new(num_items, d, draw(num_items * d))?;
    let personal_table = DenseMatrix::new(num_items, d, draw(num_items * d))?;
    let transfer = TransferNet::new(d, &hp.transfer_schedule(), hp.ace_init, hp.ace_scale, &mut r)?;
    let row_transfer = match variant.enhancement_kind {
        EnhancementKind::ConsensusTransfer | EnhancementKind::UnifiedTransfer => {
            Some(Mlp::init(&row_transfer_widths(d), &mut r))
        }
        _ => None,
    };
    Ok(ClientState {
        client_id,
        user_embedding,
        global_table,
        personal_table,
        transfer,
        row_transfer,
        steps: 0,
    })
}

fn mean_rows<T: Real>(table: &DenseMatrix<T>, rows: &[usize]) -> DenseVector<T> {
    let mut acc = DenseVector::zeros(table.cols());
    for &j in rows {
        axpy(T::one(), table.row(j), &mut acc);
    }
    let n = T::lit(rows.len() as f64);
    for a in acc.iter_mut() {
        *a /= n;
    }
    acc
}

/// Mean global and personal rows over the client's positives.
pub fn compute_prototypes<T: Real>(
    global: &DenseMatrix<T>,
    personal: &DenseMatrix<T>,
    positives: &[usize],
) -> Result<(DenseVector<T>, DenseVector<T>)> {
    if positives.is_empty() {
        return Err(Error::Input("prototype of an empty positive set".into()));
    }
    if let Some(&bad) = positives.iter().find(|&&j| j >= global.rows() || j >= personal.rows()) {
        return Err(Error::shape("compute_prototypes", format!("item {bad} out of range")));
    }
    Ok((mean_rows(global, positives), mean_rows(personal, positives)))
}

/// Transfer matrix `W = scale · reshape(F([p_G, p_P]))` (row-major `d×d`).
pub fn generate_transfer_matrix<T: Real>(
    net: &TransferNet<T>,
    p_g: &[T],
    p_p: &[T],
    scale: T,
) -> Result<(DenseMatrix<T>, MlpCache<T>)> {
    let d = net.dim;
    if p_g.len() != d || p_p.len() != d {
        return Err(Error::shape(
            "generate_transfer_matrix",
            format!("prototypes {} and {} for d = {d}", p_g.len(), p_p.len()),
        ));
    }
    let mut input = Vec::with_capacity(2 * d);
    input.extend_from_slice(p_g);
    input.extend_from_slice(p_p);
    let cache = net.net.forward(&DenseMatrix::new(1, 2 * d, input)?)?;
    let w = DenseMatrix::new(d, d, cache.output().data().iter().map(|&x| x * scale).collect())?;
    Ok((w, cache))
}

/// Maps every item row `c_j` to `W c_j`, i.e. returns `C Wᵀ`.
pub fn enhance_consensus<T: Real>(w: &DenseMatrix<T>, c: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if w.rows() != w.cols() || w.cols() != c.cols() {
        return Err(Error::shape(
            "enhance_consensus",
            format!("W {:?} with table {:?}", w.shape(), c.shape()),
        ));
    }
    c.matmul_t(w)
}

pub fn fuse<T: Real>(c_e: &DenseMatrix<T>, v: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    c_e.add(v).map_err(|_| {
        Error::shape("fuse", format!("{:?} vs {:?}", c_e.shape(), v.shape()))
    })
}

/// `σ(u·v)`
pub fn predict<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("predict", format!("{} vs {}", u.len(), v.len())));
    }
    Ok(sigmoid(dot(u, v)))
}

#[derive(Debug, Clone)]
enum EnhanceCache<T> {
    Identity,
    Ace { mlp: MlpCache<T> },
    ConsensusTransfer { c: MlpCache<T> },
    UnifiedTransfer { c: MlpCache<T>, v: MlpCache<T> },
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Prototype of the raw global table.
    pub p_g: DenseVector<T>,
    /// Prototype of the personal view.
    pub p_p: DenseVector<T>,
    /// Transfer matrix (ACE only).
    pub w: Option<DenseMatrix<T>>,
    /// Enhanced consensus (global view after enhancement).
    pub c_e: DenseMatrix<T>,
    /// Global-view prototype after enhancement (`W p_G` for ACE).
    pub p_e: DenseVector<T>,
    /// Personal view: the personal table, or its mapped version for the
    /// unified-transfer baseline.
    pub v_view: DenseMatrix<T>,
    /// Fused table `c_e + v_view` used for scoring.
    pub v_f: DenseMatrix<T>,
    cache: EnhanceCache<T>,
}

fn residual_rows<T: Real>(net: &Mlp<T>, table: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, MlpCache<T>)> {
    let cache = net.forward(table)?;
    let out = table.add(cache.output())?;
    Ok((out, cache))
}

/// Forward pass of the enhancement and fusion stages for one client.
pub fn forward<T: Real>(
    view: ModelView<'_, T>,
    positives: &[usize],
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<ForwardTrace<T>> {
    let (p_g, _) = compute_prototypes(view.global, view.personal, positives)?;
    let scale = T::lit(hp.ace_scale);
    let row_net = || {
        view.row_transfer
            .ok_or_else(|| Error::Config("row transfer network missing for baseline enhancement".into()))
    };
    let (w, c_e, v_view, cache) = match variant.enhancement_kind {
        EnhancementKind::None => (None, view.global.clone(), view.personal.clone(), EnhanceCache::Identity),
        EnhancementKind::Ace => {
            let p_p = mean_rows(view.personal, positives);
            let (w, mlp) = generate_transfer_matrix(view.transfer, &p_g, &p_p, scale)?;
            let c_e = enhance_consensus(&w, view.global)?;
            (Some(w), c_e, view.personal.clone(), EnhanceCache::Ace { mlp })
        }
        EnhancementKind::ConsensusTransfer => {
            let (c_e, c) = residual_rows(row_net()?, view.global)?;
            (None, c_e, view.personal.clone(), EnhanceCache::ConsensusTransfer { c })
        }
        EnhancementKind::UnifiedTransfer => {
            let net = row_net()?;
            let (c_e, c) = residual_rows(net, view.global)?;
            let (v_view, v) = residual_rows(net, view.personal)?;
            (None, c_e, v_view, EnhanceCache::UnifiedTransfer { c, v })
        }
    };
    let p_p = mean_rows(&v_view, positives);
    let p_e = mean_rows(&c_e, positives);
    let v_f = fuse(&c_e, &v_view)?;
    Ok(ForwardTrace {
        p_g,
        p_p,
        w,
        c_e,
        p_e,
        v_view,
        v_f,
        cache,
    })
}

/// Gradients of a scalar objective w.r.t. the quantities the loss head reads.
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub d_user: DenseVector<T>,
    pub d_c_e: DenseMatrix<T>,
    pub d_v_view: DenseMatrix<T>,
    pub d_p_e: DenseVector<T>,
    pub d_p_p: DenseVector<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros(items: usize, dim: usize) -> Self {
        Self {
            d_user: DenseVector::zeros(dim),
            d_c_e: DenseMatrix::zeros(items, dim),
            d_v_view: DenseMatrix::zeros(items, dim),
            d_p_e: DenseVector::zeros(dim),
            d_p_p: DenseVector::zeros(dim),
        }
    }
}

/// Gradients w.r.t. every trainable client block.
#[derive(Debug, Clone)]
pub struct ClientGrads<T> {
    pub user: DenseVector<T>,
    pub global: DenseMatrix<T>,
    pub personal: DenseMatrix<T>,
    pub transfer: Option<MlpGrads<T>>,
    pub row_transfer: Option<MlpGrads<T>>,
}

fn clip_slice<T: Real>(g: &mut [T], max: T) {
    let n = crate::numerics::norm(g);
    if n > max {
        let s = max / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// Rescales `g` so its L2 norm is at most `max`.
pub fn clip_norm<T: Real>(g: &mut [T], max: T) {
    if max > T::zero() {
        clip_slice(g, max);
    }
}

pub(crate) fn clip_mlp_norm<T: Real>(net: &mut Mlp<T>, max: T) {
    let mut flat = net.flatten();
    let before = crate::numerics::norm(&flat);
    if max > T::zero() && before > max {
        clip_slice(&mut flat, max);
        net.assign_flat(&flat).expect("same size");
    }
}

impl<T: Real> ClientGrads<T> {
    /// Caps the L2 norm of every parameter block independently.
    pub fn clip_blocks(&mut self, max: T) {
        clip_norm(&mut self.user, max);
        clip_norm(self.global.data_mut(), max);
        clip_norm(self.personal.data_mut(), max);
        if let Some(t) = self.transfer.as_mut() {
            clip_mlp_norm(t, max);
        }
        if let Some(t) = self.row_transfer.as_mut() {
            clip_mlp_norm(t, max);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.user.is_finite()
            && self.global.is_finite()
            && self.personal.is_finite()
            && self.transfer.as_ref().map_or(true, Mlp::is_finite)
            && self.row_transfer.as_ref().map_or(true, Mlp::is_finite)
    }
}

fn spread_mean_grad<T: Real>(grad: &[T], rows: &[usize], into: &mut DenseMatrix<T>) {
    let inv = T::one() / T::lit(rows.len() as f64);
    for &j in rows {
        axpy(inv, grad, into.row_mut(j));
    }
}

/// Backpropagates head gradients through fusion and enhancement.
pub fn backward<T: Real>(
    view: ModelView<'_, T>,
    trace: &ForwardTrace<T>,
    positives: &[usize],
    hp: &HyperParams,
    head: HeadGrads<T>,
) -> Result<ClientGrads<T>> {
    let HeadGrads {
        d_user,
        mut d_c_e,
        mut d_v_view,
        d_p_e,
        d_p_p,
    } = head;
    // p_e and p_p are row means of the two views
    spread_mean_grad(&d_p_e, positives, &mut d_c_e);
    spread_mean_grad(&d_p_p, positives, &mut d_v_view);

    let out = match &trace.cache {
        EnhanceCache::Identity => ClientGrads {
            user: d_user,
            global: d_c_e,
            personal: d_v_view,
            transfer: None,
            row_transfer: None,
        },
        EnhanceCache::Ace { mlp } => {
            let w = trace.w.as_ref().expect("ACE trace carries W");
            let d = w.rows();
            // c_e = C Wᵀ
            let mut d_global = d_c_e.matmul(w)?;
            let d_w = d_c_e.t_matmul(view.global)?;
            let scale = T::lit(hp.ace_scale);
            let d_out = DenseMatrix::new(1, d * d, d_w.data().iter().map(|&g| g * scale).collect())?;
            let (d_theta, d_in) = view.transfer.net.backward(mlp, &d_out)?;
            let d_in = d_in.row(0);
            spread_mean_grad(&d_in[..d], positives, &mut d_global);
            spread_mean_grad(&d_in[d..], positives, &mut d_v_view);
            ClientGrads {
                user: d_user,
                global: d_global,
                personal: d_v_view,
                transfer: Some(d_theta),
                row_transfer: None,
            }
        }
        EnhanceCache::ConsensusTransfer { c } => {
            let net = view.row_transfer.expect("baseline has a row transfer");
            let (g, dx) = net.backward(c, &d_c_e)?;
            ClientGrads {
                user: d_user,
                global: d_c_e.add(&dx)?,
                personal: d_v_view,
                transfer: None,
                row_transfer: Some(g),
            }
        }
        EnhanceCache::UnifiedTransfer { c, v } => {
            let net = view.row_transfer.expect("baseline has a row transfer");
            let (mut g, dxc) = net.backward(c, &d_c_e)?;
            let (gv, dxv) = net.backward(v, &d_v_view)?;
            g.add_scaled(T::one(), &gv);
            ClientGrads {
                user: d_user,
                global: d_c_e.add(&dxc)?,
                personal: d_v_view.add(&dxv)?,
                transfer: None,
                row_transfer: Some(g),
            }
        }
    };
    Ok(out)
}

/// Plain SGD step with learning rate `lr`.
pub fn sgd_step<T: Real>(state: &mut ClientState<T>, grads: &ClientGrads<T>, lr: T) -> Result<()> {
    let neg = -lr;
    axpy(neg, &grads.user, &mut state.user_embedding);
    state.global_table.add_scaled(neg, &grads.global)?;
    state.personal_table.add_scaled(neg, &grads.personal)?;
    if let Some(g) = &grads.transfer {
        state.transfer.net.add_scaled(neg, g);
    }
    if let (Some(net), Some(g)) = (state.row_transfer.as_mut(), &grads.row_transfer) {
        net.add_scaled(neg, g);
    }
    Ok(())
}
