//! Federated matrix factorisation: one shared item table trained with the
//! recommendation loss only. With the plug-in enabled the downloaded table
//! is treated as the consensus and enhanced per client before scoring:
//! `Q_F = Q + Q Wᵀ`, with `W` generated from the item-table prototype and the
//! user embedding (the model has no personal table).

use rand_distr::{Distribution, Normal};

use super::{eval_candidates, federate, with_pool, Ctx, LocalResult, Participant, RunOptions, ServerState, TrainingOutcome};
use crate::datasets::{Example, InteractionDataset, NegativeSampler};
use crate::error::{Error, Result};
use crate::evaluation::{hr_ndcg_at_k, rank_candidates, ClientEval};
use crate::losses::{LossBreakdown, PRED_CLAMP};
use crate::model::checkpoint::{Checkpoint, USER_BLOCK};
use crate::model::{clip_mlp_norm, clip_norm, compute_prototypes, enhance_consensus, generate_transfer_matrix, Mlp, MlpCache, TransferNet};
use crate::numerics::{axpy, dot, sigmoid, DenseMatrix, DenseVector, Real};
use crate::params::HyperParams;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct FedMfClient<T> {
    pub client_id: usize,
    pub user_embedding: DenseVector<T>,
    /// Working copy of the shared table; empty between rounds.
    pub table: DenseMatrix<T>,
    pub transfer: TransferNet<T>,
    pub ace_plugin: bool,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct FedMfTrace<T> {
    pub w: Option<DenseMatrix<T>>,
    cache: Option<MlpCache<T>>,
    /// Table used for scoring.
    pub scoring: DenseMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct FedMfGrads<T> {
    pub user: DenseVector<T>,
    pub table: DenseMatrix<T>,
    pub transfer: Option<Mlp<T>>,
}

pub fn fedmf_forward<T: Real>(
    user: &[T],
    table: &DenseMatrix<T>,
    transfer: &TransferNet<T>,
    positives: &[usize],
    scale: T,
    plugin: bool,
) -> Result<FedMfTrace<T>> {
    if !plugin {
        return Ok(FedMfTrace {
            w: None,
            cache: None,
            scoring: table.clone(),
        });
    }
    let (p_q, _) = compute_prototypes(table, table, positives)?;
    let (w, cache) = generate_transfer_matrix(transfer, &p_q, user, scale)?;
    let scoring = table.add(&enhance_consensus(&w, table)?)?;
    Ok(FedMfTrace {
        w: Some(w),
        cache: Some(cache),
        scoring,
    })
}

/// Summed BCE over `batch` and its gradients.
#[allow(clippy::too_many_arguments)]
pub fn fedmf_loss_grad<T: Real>(
    user: &[T],
    table: &DenseMatrix<T>,
    transfer: &TransferNet<T>,
    positives: &[usize],
    batch: &[Example],
    scale: T,
    plugin: bool,
) -> Result<(f64, FedMfGrads<T>)> {
    let trace = fedmf_forward(user, table, transfer, positives, scale, plugin)?;
    let (m, d) = table.shape();
    let mut d_user = DenseVector::zeros(d);
    let mut d_scoring = DenseMatrix::zeros(m, d);
    let (lo, hi) = (T::lit(PRED_CLAMP), T::lit(1.0 - PRED_CLAMP));
    let mut loss = T::zero();
    for &(j, r) in batch {
        if j >= m {
            return Err(Error::shape("fedmf_loss_grad", format!("item {j} out of range")));
        }
        let row = trace.scoring.row(j);
        let p = sigmoid(dot(user, row));
        let pc = p.max(lo).min(hi);
        loss -= if r == 1 { pc.ln() } else { (T::one() - pc).ln() };
        if p > lo && p < hi {
            let ds = p - if r == 1 { T::one() } else { T::zero() };
            axpy(ds, row, &mut d_user);
            axpy(ds, user, d_scoring.row_mut(j));
        }
    }
    let (d_table, d_theta) = match (&trace.w, &trace.cache) {
        (Some(w), Some(cache)) => {
            // scoring = Q + Q Wᵀ
            let mut d_table = d_scoring.add(&d_scoring.matmul(w)?)?;
            let d_w = d_scoring.t_matmul(table)?;
            let d_out = DenseMatrix::new(1, d * d, d_w.data().iter().map(|&g| g * scale).collect())?;
            let (d_theta, d_in) = transfer.mlp().backward(cache, &d_out)?;
            let d_in = d_in.row(0);
            let inv = T::one() / T::lit(positives.len() as f64);
            for &j in positives {
                axpy(inv, &d_in[..d], d_table.row_mut(j));
            }
            axpy(T::one(), &d_in[d..], &mut d_user);
            (d_table, Some(d_theta))
        }
        _ => (d_scoring, None),
    };
    Ok((
        loss.as_f64(),
        FedMfGrads {
            user: d_user,
            table: d_table,
            transfer: d_theta,
        },
    ))
}

impl<T: Real> FedMfClient<T> {
    pub fn init(client_id: usize, hp: &HyperParams, ace_plugin: bool, transfer: TransferNet<T>) -> Result<Self> {
        let mut r = rng::stream(hp.seed, &[purpose::INIT, client_id as u64]);
        let normal = Normal::new(0.0, hp.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let user = (0..hp.dim).map(|_| T::lit(normal.sample(&mut r))).collect();
        Ok(Self {
            client_id,
            user_embedding: DenseVector::from_vec(user),
            table: DenseMatrix::zeros(0, hp.dim),
            transfer,
            ace_plugin,
            steps: 0,
        })
    }

    /// Client-private state: the user embedding.
    pub fn to_checkpoint(&self, seed: u64, round: u64) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(seed, round, Some(self.client_id));
        ck.header.steps = self.steps;
        ck.push(USER_BLOCK, vec![self.user_embedding.dim()], &self.user_embedding);
        ck
    }
}

impl<T: Real> Participant<T> for FedMfClient<T> {
    fn train(&mut self, server: &ServerState<T>, round: usize, ctx: &Ctx<'_>) -> Result<LocalResult<T>> {
        let hp = ctx.hp;
        let client = self.client_id;
        let positives = ctx.ds.train_items(client);
        self.table = server.consensus.clone();
        self.transfer = server.transfer.clone();
        let sampler = NegativeSampler::new(ctx.ds, hp.negatives_per_positive, hp.seed);
        let scale = T::lit(hp.ace_scale);
        let mut total = 0.0;
        for it in 0..hp.local_iters {
            let batch = sampler.sample_training_batch(client, hp.batch_size, &[round as u64, it as u64]);
            let (loss, mut g) = fedmf_loss_grad(
                &self.user_embedding,
                &self.table,
                &self.transfer,
                positives,
                &batch.examples,
                scale,
                self.ace_plugin,
            )?;
            let finite = g.user.is_finite() && g.table.is_finite() && g.transfer.as_ref().map_or(true, Mlp::is_finite);
            if !loss.is_finite() || !finite {
                return Err(Error::NonFinite(format!("round {round}, client {client}, local iteration {it}")));
            }
            let cap = T::lit(hp.grad_clip);
            clip_norm(&mut g.user, cap);
            clip_norm(g.table.data_mut(), cap);
            if let Some(t) = g.transfer.as_mut() {
                clip_mlp_norm(t, cap);
            }
            let lr = -T::lit(hp.lr * hp.lr_gamma.powf(self.steps as f64));
            axpy(lr, &g.user, &mut self.user_embedding);
            self.table.add_scaled(lr, &g.table)?;
            if let Some(gt) = &g.transfer {
                self.transfer.mlp_mut().add_scaled(lr, gt);
            }
            self.steps += 1;
            total += loss;
        }
        let consensus = std::mem::replace(&mut self.table, DenseMatrix::zeros(0, hp.dim));
        Ok(LocalResult {
            consensus,
            transfer: self.ace_plugin.then(|| self.transfer.clone()),
            loss: LossBreakdown::compose(total / hp.local_iters as f64, 0.0, 0.0, 0.0, 0.0),
        })
    }

    fn evaluate(&self, server: &ServerState<T>, ctx: &Ctx<'_>) -> Result<ClientEval> {
        let client = self.client_id;
        let trace = fedmf_forward(
            &self.user_embedding,
            &server.consensus,
            &server.transfer,
            ctx.ds.train_items(client),
            T::lit(ctx.hp.ace_scale),
            self.ace_plugin,
        )?;
        let test = ctx.ds.test_item(client).expect("split checked before training");
        let candidates = eval_candidates(ctx.ds, client, ctx.hp, ctx.opts.full_ranking)?;
        let ranked = rank_candidates(&self.user_embedding, &trace.scoring, &candidates)?;
        let (hr, ndcg) = hr_ndcg_at_k(&ranked, test, ctx.hp.top_k)?;
        Ok(ClientEval {
            client,
            hr,
            ndcg,
            rbo: None,
            corr_above_clip: None,
        })
    }
}

/// Federated MF, optionally with the consensus-enhancement plug-in.
pub fn fedmf_baseline<T: Real>(
    ds: &InteractionDataset,
    hp: &HyperParams,
    ace_plugin: bool,
    opts: &RunOptions,
) -> Result<TrainingOutcome<T, FedMfClient<T>>> {
    hp.validate()?;
    let server = ServerState::<T>::init(ds.num_items(), hp)?;
    let clients = (0..ds.num_clients())
        .map(|c| FedMfClient::init(c, hp, ace_plugin, server.transfer.clone()))
        .collect::<Result<Vec<_>>>()?;
    let ctx = Ctx { ds, hp, opts };
    let (server, metrics, clients, final_eval) = with_pool(opts.workers, || federate(server, clients, &ctx))??;
    Ok(TrainingOutcome {
        server,
        metrics,
        clients,
        final_eval,
    })
}
