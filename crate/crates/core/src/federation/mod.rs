//! Server orchestration: client sampling, parallel local updates, ordered
//! aggregation of the consensus table and transfer-network parameters, and
//! periodic evaluation.
//!
//! Every upload crosses a byte channel encoded with the checkpoint container,
//! so the server only ever sees what was serialised. An optional tap observes
//! the raw bytes for auditing.

pub mod fedmf;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::datasets::{build_eval_candidates, InteractionDataset, NegativeSampler};
use crate::error::{Error, Result};
use crate::evaluation::{
    count_above_clip, hr_ndcg_at_k, rank_candidates, view_consistency_rbo, ClientEval, RoundMetrics,
    DEFAULT_CLIP,
};
use crate::losses::{loss_and_grad, LossBreakdown};
use crate::model::checkpoint::{Checkpoint, GLOBAL_BLOCK, TRANSFER_PREFIX};
use crate::model::{self, init_client, sgd_step, ClientState, Mlp, TransferNet};
use crate::numerics::{DenseMatrix, Real};
use crate::params::{HyperParams, VariantConfig};
use crate::rng::{self, purpose};

pub use fedmf::{fedmf_baseline, FedMfClient};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    pub consensus: DenseMatrix<T>,
    pub transfer: TransferNet<T>,
    pub round: usize,
}

impl<T: Real> ServerState<T> {
    pub fn init(num_items: usize, hp: &HyperParams) -> Result<Self> {
        let mut r = rng::stream(hp.seed, &[purpose::SERVER_INIT]);
        let normal = Normal::new(0.0, hp.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let consensus = DenseMatrix::from_fn(num_items, hp.dim, |_, _| T::lit(normal.sample(&mut r)));
        let transfer = TransferNet::new(hp.dim, &hp.transfer_schedule(), hp.ace_init, hp.ace_scale, &mut r)?;
        Ok(Self {
            consensus,
            transfer,
            round: 0,
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(seed, self.round as u64, None);
        ck.push_matrix(GLOBAL_BLOCK, &self.consensus);
        ck.push_mlp(TRANSFER_PREFIX, self.transfer.mlp());
        ck
    }
}

/// Elementwise mean, summed in the given order.
pub fn aggregate_consensus<T: Real>(uploads: &[&DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Aggregation("no consensus uploads to aggregate".into()))?;
    let mut acc = DenseMatrix::zeros(first.rows(), first.cols());
    for u in uploads {
        if u.shape() != first.shape() {
            return Err(Error::shape(
                "aggregate_consensus",
                format!("{:?} vs {:?}", u.shape(), first.shape()),
            ));
        }
        acc.add_scaled(T::one(), u)?;
    }
    Ok(acc.scale(T::one() / T::lit(uploads.len() as f64)))
}

/// Blockwise mean of transfer-network parameters.
pub fn aggregate_theta<T: Real>(uploads: &[&TransferNet<T>]) -> Result<TransferNet<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Aggregation("no transfer-network uploads to aggregate".into()))?;
    let mut acc = Mlp::zeros(&first.mlp().widths());
    for u in uploads {
        if !u.mlp().same_architecture(first.mlp()) {
            return Err(Error::Config(format!(
                "transfer schedules differ: {:?} vs {:?}",
                u.mlp().widths(),
                first.mlp().widths()
            )));
        }
        acc.add_scaled(T::one(), u.mlp());
    }
    let inv = T::one() / T::lit(uploads.len() as f64);
    let mut mean = Mlp::zeros(&first.mlp().widths());
    mean.add_scaled(inv, &acc);
    TransferNet::from_mlp(first.dim(), mean)
}

/// `⌈fraction·n⌉` distinct client ids (sorted), uniform without replacement
/// and deterministic in `(seed, round)`.
pub fn select_clients(n: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    if k >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, &[purpose::SELECT, round as u64]);
    let mut ids = index::sample(&mut r, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// What a client hands back after its local iterations.
#[derive(Debug, Clone)]
pub struct LocalResult<T> {
    pub consensus: DenseMatrix<T>,
    pub transfer: Option<TransferNet<T>>,
    /// Mean loss over the local iterations.
    pub loss: LossBreakdown,
}

fn decayed_lr(hp: &HyperParams, steps: u64) -> f64 {
    hp.lr * hp.lr_gamma.powf(steps as f64)
}

/// Downloads `(c, theta)` into the client, runs the local iterations and
/// returns the updated consensus copy and (for ACE) transfer parameters.
/// The user embedding and personal table stay inside `state`.
#[allow(clippy::too_many_arguments)]
pub fn local_update<T: Real>(
    state: &mut ClientState<T>,
    c: &DenseMatrix<T>,
    theta: &TransferNet<T>,
    ds: &InteractionDataset,
    hp: &HyperParams,
    variant: &VariantConfig,
    round: usize,
) -> Result<LocalResult<T>> {
    let client = state.client_id;
    let positives = ds.train_items(client);
    if positives.is_empty() {
        return Err(Error::Input(format!("client {client} has no training positives")));
    }
    state.global_table = c.clone();
    state.transfer = theta.clone();
    let sampler = NegativeSampler::new(ds, hp.negatives_per_positive, hp.seed);
    let mut sum = LossBreakdown::default();
    for it in 0..hp.local_iters {
        let batch = sampler.sample_training_batch(client, hp.batch_size, &[round as u64, it as u64]);
        let (loss, mut grads) = loss_and_grad(state.view(), positives, &batch.examples, hp, variant)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "round {round}, client {client}, local iteration {it}: loss {}",
                loss.total
            )));
        }
        grads.clip_blocks(T::lit(hp.grad_clip));
        sgd_step(state, &grads, T::lit(decayed_lr(hp, state.steps)))?;
        state.steps += 1;
        sum.l_rec += loss.l_rec;
        sum.l_a += loss.l_a;
        sum.l_o += loss.l_o;
        sum.beta_a = loss.beta_a;
        sum.beta_o = loss.beta_o;
    }
    let n = hp.local_iters as f64;
    let loss = LossBreakdown::compose(sum.l_rec / n, sum.l_a / n, sum.l_o / n, sum.beta_a, sum.beta_o);
    let consensus = std::mem::replace(&mut state.global_table, DenseMatrix::zeros(0, hp.dim));
    let transfer = variant.ace_enabled.then(|| state.transfer.clone());
    Ok(LocalResult {
        consensus,
        transfer,
        loss,
    })
}

/// Serialises an upload: the consensus copy and, when present, the transfer
/// parameters. Nothing else is written.
pub fn encode_upload<T: Real>(
    seed: u64,
    round: usize,
    client: usize,
    consensus: &DenseMatrix<T>,
    transfer: Option<&TransferNet<T>>,
) -> Result<Vec<u8>> {
    let mut ck = Checkpoint::new(seed, round as u64, Some(client));
    ck.push_matrix(GLOBAL_BLOCK, consensus);
    if let Some(t) = transfer {
        ck.push_mlp(TRANSFER_PREFIX, t.mlp());
    }
    ck.encode()
}

#[derive(Debug, Clone)]
pub struct DecodedUpload<T> {
    pub client: usize,
    pub consensus: DenseMatrix<T>,
    pub transfer: Option<TransferNet<T>>,
}

pub fn decode_upload<T: Real>(bytes: &[u8], template: &TransferNet<T>) -> Result<DecodedUpload<T>> {
    let ck = Checkpoint::<T>::decode(bytes)?;
    let client = ck
        .header
        .client_id
        .ok_or_else(|| Error::Checkpoint("upload without a client id".into()))?;
    let consensus = ck.matrix(GLOBAL_BLOCK)?;
    let has_transfer = ck.block_names().iter().any(|n| n.starts_with(TRANSFER_PREFIX));
    let transfer = if has_transfer {
        Some(TransferNet::from_mlp(template.dim(), ck.mlp_like(TRANSFER_PREFIX, template.mlp())?)?)
    } else {
        None
    };
    Ok(DecodedUpload {
        client,
        consensus,
        transfer,
    })
}

/// Observer of raw upload bytes: `(round, client, bytes)`.
pub type UploadTap = Arc<dyn Fn(usize, usize, &[u8]) + Send + Sync>;
pub type RoundHook = Arc<dyn Fn(&RoundMetrics) + Send + Sync>;

#[derive(Clone)]
pub struct RunOptions {
    /// Worker threads for the client map; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Evaluate every this many rounds (the last round is always evaluated).
    pub eval_interval: usize,
    /// Rank against every non-interacted item instead of sampled negatives.
    pub full_ranking: bool,
    /// Compute the view-consistency RBO during evaluation.
    pub rbo: bool,
    /// Clip used when counting correlation entries during evaluation.
    pub correlation_clip: Option<f64>,
    pub upload_tap: Option<UploadTap>,
    /// Called with each round's metrics as soon as the round completes.
    pub on_round: Option<RoundHook>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: None,
            eval_interval: 1,
            full_ranking: false,
            rbo: true,
            correlation_clip: Some(DEFAULT_CLIP),
            upload_tap: None,
            on_round: None,
        }
    }
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("workers", &self.workers)
            .field("eval_interval", &self.eval_interval)
            .field("full_ranking", &self.full_ranking)
            .field("rbo", &self.rbo)
            .field("correlation_clip", &self.correlation_clip)
            .field("upload_tap", &self.upload_tap.is_some())
            .field("on_round", &self.on_round.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T, C = ClientState<T>> {
    pub server: ServerState<T>,
    pub metrics: Vec<RoundMetrics>,
    pub clients: Vec<C>,
    /// Per-client evaluation of the final round.
    pub final_eval: Vec<ClientEval>,
}

pub(crate) struct Ctx<'a> {
    pub ds: &'a InteractionDataset,
    pub hp: &'a HyperParams,
    pub opts: &'a RunOptions,
}

/// One simulated client as seen by the round loop.
pub(crate) trait Participant<T: Real>: Send + Sync {
    fn train(&mut self, server: &ServerState<T>, round: usize, ctx: &Ctx<'_>) -> Result<LocalResult<T>>;
    fn evaluate(&self, server: &ServerState<T>, ctx: &Ctx<'_>) -> Result<ClientEval>;
}

pub(crate) fn eval_candidates(ds: &InteractionDataset, client: usize, hp: &HyperParams, full: bool) -> Result<Vec<usize>> {
    if full {
        let data = ds.client(client);
        let test = data
            .test_item()
            .ok_or_else(|| Error::Protocol(format!("client `{}` has no held-out item", ds.external_user(client))))?;
        let mut items = vec![test];
        items.extend(data.non_interacted(ds.num_items()));
        Ok(items)
    } else {
        Ok(build_eval_candidates(ds, client, hp.eval_negatives, hp.seed)?.items)
    }
}

struct Fed3crClient<'v, T> {
    state: ClientState<T>,
    variant: &'v VariantConfig,
}

impl<T: Real> Participant<T> for Fed3crClient<'_, T> {
    fn train(&mut self, server: &ServerState<T>, round: usize, ctx: &Ctx<'_>) -> Result<LocalResult<T>> {
        local_update(
            &mut self.state,
            &server.consensus,
            &server.transfer,
            ctx.ds,
            ctx.hp,
            self.variant,
            round,
        )
    }

    fn evaluate(&self, server: &ServerState<T>, ctx: &Ctx<'_>) -> Result<ClientEval> {
        let client = self.state.client_id;
        let view = self.state.view_with_global(&server.consensus, &server.transfer);
        let trace = model::forward(view, ctx.ds.train_items(client), ctx.hp, self.variant)?;
        let test = ctx.ds.test_item(client).expect("split checked before training");
        let candidates = eval_candidates(ctx.ds, client, ctx.hp, ctx.opts.full_ranking)?;
        let ranked = rank_candidates(view.user, &trace.v_f, &candidates)?;
        let (hr, ndcg) = hr_ndcg_at_k(&ranked, test, ctx.hp.top_k)?;
        let rbo = if ctx.opts.rbo {
            Some(view_consistency_rbo(view.user, &trace, ctx.hp.rbo_k, ctx.hp.rbo_p)?)
        } else {
            None
        };
        let corr_above_clip = match ctx.opts.correlation_clip {
            Some(clip) => Some(count_above_clip(&trace.c_e, &trace.v_view, clip)?),
            None => None,
        };
        Ok(ClientEval {
            client,
            hr,
            ndcg,
            rbo,
            corr_above_clip,
        })
    }
}

fn with_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// The round loop shared by every federated model.
pub(crate) fn federate<T: Real, P: Participant<T>>(
    mut server: ServerState<T>,
    mut clients: Vec<P>,
    ctx: &Ctx<'_>,
) -> Result<(ServerState<T>, Vec<RoundMetrics>, Vec<P>, Vec<ClientEval>)> {
    let hp = ctx.hp;
    if !ctx.ds.is_split() {
        return Err(Error::Protocol("dataset must be split before training".into()));
    }
    let n = clients.len();
    let interval = ctx.opts.eval_interval.max(1);
    let mut metrics = Vec::with_capacity(hp.rounds);
    let mut final_eval = Vec::new();
    for round in 1..=hp.rounds {
        let started = Instant::now();
        let selected = select_clients(n, hp.client_fraction, round, hp.seed);
        let mut mask = vec![false; n];
        for &c in &selected {
            mask[c] = true;
        }
        let srv = &server;
        let results: Vec<(usize, Result<(Vec<u8>, LossBreakdown)>)> = clients
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| mask[*i])
            .map(|(i, p)| {
                let r = p.train(srv, round, ctx).and_then(|res| {
                    let bytes = encode_upload(hp.seed, round, i, &res.consensus, res.transfer.as_ref())?;
                    Ok((bytes, res.loss))
                });
                (i, r)
            })
            .collect();

        let mut consensus = Vec::with_capacity(results.len());
        let mut thetas = Vec::new();
        let mut loss_sum = LossBreakdown::default();
        let mut excluded = 0;
        for (client, r) in results {
            match r {
                Ok((bytes, loss)) => {
                    if let Some(tap) = &ctx.opts.upload_tap {
                        tap(round, client, &bytes);
                    }
                    let up = decode_upload(&bytes, &server.transfer)?;
                    consensus.push(up.consensus);
                    if let Some(t) = up.transfer {
                        thetas.push(t);
                    }
                    loss_sum.l_rec += loss.l_rec;
                    loss_sum.l_a += loss.l_a;
                    loss_sum.l_o += loss.l_o;
                    loss_sum.beta_a = loss.beta_a;
                    loss_sum.beta_o = loss.beta_o;
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("excluding client from aggregation: {msg}");
                    excluded += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if consensus.is_empty() {
            return Err(Error::Runtime(format!(
                "round {round}: all {} selected clients failed",
                selected.len()
            )));
        }
        server.consensus = aggregate_consensus(&consensus.iter().collect::<Vec<_>>())?;
        if !server.consensus.is_finite() {
            return Err(Error::NonFinite(format!("round {round}: aggregated consensus")));
        }
        if !thetas.is_empty() {
            server.transfer = aggregate_theta(&thetas.iter().collect::<Vec<_>>())?;
        }
        server.round = round;

        let k = consensus.len() as f64;
        let mut m = RoundMetrics {
            round,
            loss: LossBreakdown::compose(
                loss_sum.l_rec / k,
                loss_sum.l_a / k,
                loss_sum.l_o / k,
                loss_sum.beta_a,
                loss_sum.beta_o,
            ),
            clients_trained: consensus.len(),
            clients_excluded: excluded,
            ..Default::default()
        };
        if round % interval == 0 || round == hp.rounds {
            let srv = &server;
            let evals: Vec<ClientEval> = clients
                .par_iter()
                .map(|p| p.evaluate(srv, ctx))
                .collect::<Result<_>>()?;
            m.absorb(&evals);
            if round == hp.rounds {
                final_eval = evals;
            }
        }
        m.wall_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "round {round}: loss {:.4} hr {} ndcg {}",
            m.loss.total,
            m.hr.map_or("-".into(), |v| format!("{v:.4}")),
            m.ndcg.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some(hook) = &ctx.opts.on_round {
            hook(&m);
        }
        metrics.push(m);
    }
    Ok((server, metrics, clients, final_eval))
}

/// Full federated training for one variant. The dataset must be split.
pub fn run_training<T: Real>(
    ds: &InteractionDataset,
    hp: &HyperParams,
    variant: &VariantConfig,
    opts: &RunOptions,
) -> Result<TrainingOutcome<T>> {
    hp.validate()?;
    variant.validate()?;
    let server = ServerState::<T>::init(ds.num_items(), hp)?;
    let clients = (0..ds.num_clients())
        .map(|c| {
            let mut state = init_client::<T>(hp.seed, c, ds.num_items(), hp, variant)?;
            // the consensus copy is always downloaded before use
            state.global_table = DenseMatrix::zeros(0, hp.dim);
            Ok(Fed3crClient { state, variant })
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = Ctx { ds, hp, opts };
    let (server, metrics, clients, final_eval) = with_pool(opts.workers, || federate(server, clients, &ctx))??;
    Ok(TrainingOutcome {
        server,
        metrics,
        clients: clients.into_iter().map(|c| c.state).collect(),
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{leave_one_out_split, HoldoutPolicy, RawInteraction};
    use crate::evaluation::metrics_csv;
    use crate::numerics::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    fn raw(u: &str, i: &str, t: i64) -> RawInteraction {
        RawInteraction {
            user_id: u.into(),
            item_id: i.into(),
            rating: None,
            timestamp: Some(t),
        }
    }

    fn small_dataset() -> InteractionDataset {
        let mut recs = Vec::new();
        for u in 0..6 {
            for k in 0..5 {
                let item = (u * 2 + k * 3) % 12;
                recs.push(raw(&u.to_string(), &item.to_string(), k as i64));
            }
        }
        let ds = InteractionDataset::from_raw(&recs, 1).unwrap();
        leave_one_out_split(&ds, 0, HoldoutPolicy::LatestTimestamp).unwrap()
    }

    fn small_hp() -> HyperParams {
        HyperParams {
            rounds: 3,
            local_iters: 2,
            dim: 4,
            batch_size: 64,
            eval_negatives: 5,
            rbo_k: 5,
            ..Default::default()
        }
    }

    #[test]
    fn consensus_aggregation_examples() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(aggregate_consensus(&[&a, &a]).unwrap(), a);
        let rows = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]].map(|r| DenseMatrix::from_rows(&[r]).unwrap());
        let m = aggregate_consensus(&rows.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0 / 3.0]);
        assert!(matches!(aggregate_consensus::<f64>(&[]), Err(Error::Aggregation(_))));
        let b = DenseMatrix::zeros(1, 2);
        assert!(matches!(aggregate_consensus(&[&a, &b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn theta_aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nets: Vec<TransferNet<f64>> = (0..3)
            .map(|_| {
                let mut t = TransferNet::new(2, &[4, 8], Default::default(), 1.0, &mut rng).unwrap();
                let flat: Vec<f64> = (0..t.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                t.mlp_mut().assign_flat(&flat).unwrap();
                t
            })
            .collect();
        assert_eq!(aggregate_theta(&[&nets[0]]).unwrap(), nets[0]);
        let mut neg = nets[0].clone();
        let flat: Vec<f64> = neg.mlp().flatten().iter().map(|x| -x).collect();
        neg.mlp_mut().assign_flat(&flat).unwrap();
        let z = aggregate_theta(&[&nets[0], &neg]).unwrap();
        assert!(z.mlp().flatten().iter().all(|&x| x == 0.0));

        let mean = aggregate_theta(&nets.iter().collect::<Vec<_>>()).unwrap();
        let flats: Vec<Vec<f64>> = nets.iter().map(|n| n.mlp().flatten()).collect();
        for (k, got) in mean.mlp().flatten().iter().enumerate() {
            let oracle = (flats[0][k] + flats[1][k] + flats[2][k]) / 3.0;
            assert!((got - oracle).abs() < 1e-12);
        }
        nets.push(TransferNet::new(2, &[4, 8, 16], Default::default(), 1.0, &mut rng).unwrap());
        assert!(matches!(
            aggregate_theta(&nets.iter().collect::<Vec<_>>()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn client_selection() {
        assert_eq!(select_clients(7, 1.0, 3, 1), (0..7).collect::<Vec<_>>());
        let s = select_clients(10, 0.3, 2, 9);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_clients(10, 0.3, 2, 9));
        assert_eq!(select_clients(10, 0.01, 1, 0).len(), 1);
        assert_eq!(select_clients(3, 1.0 / 3.0, 1, 0).len(), 1);
    }

    #[test]
    fn zero_lr_uploads_equal_downloads() {
        let ds = small_dataset();
        let hp = HyperParams {
            lr: 0.0,
            ..small_hp()
        };
        let v = VariantConfig::full();
        let server = ServerState::<f64>::init(ds.num_items(), &hp).unwrap();
        let mut s = init_client::<f64>(0, 1, ds.num_items(), &hp, &v).unwrap();
        let up = local_update(&mut s, &server.consensus, &server.transfer, &ds, &hp, &v, 1).unwrap();
        assert_eq!(up.consensus, server.consensus);
        assert_eq!(up.transfer.unwrap(), server.transfer);
    }

    #[test]
    fn one_step_matches_hand_rolled_sgd() {
        let recs = vec![raw("a", "x", 1), raw("a", "y", 2)];
        let ds = leave_one_out_split(&InteractionDataset::from_raw(&recs, 1).unwrap(), 0, HoldoutPolicy::LatestTimestamp)
            .unwrap();
        let hp = HyperParams {
            dim: 3,
            local_iters: 1,
            lr: 0.05,
            init_std: 0.5,
            ..Default::default()
        };
        let v = VariantConfig::from_label("C0").unwrap();
        let mut s = init_client::<f64>(4, 0, 2, &hp, &v).unwrap();
        let server = ServerState::<f64>::init(2, &hp).unwrap();
        let (u0, v0, c0) = (s.user_embedding.clone(), s.personal_table.clone(), server.consensus.clone());
        let j = ds.train_items(0)[0];
        let up = local_update(&mut s, &c0, &server.transfer, &ds, &hp, &v, 1).unwrap();

        let fused: Vec<f64> = (0..3).map(|k| c0[(j, k)] + v0[(j, k)]).collect();
        let g = sigmoid((0..3).map(|k| u0[k] * fused[k]).sum::<f64>()) - 1.0;
        for k in 0..3 {
            assert!((s.user_embedding[k] - (u0[k] - 0.05 * g * fused[k])).abs() < 1e-6);
            assert!((up.consensus[(j, k)] - (c0[(j, k)] - 0.05 * g * u0[k])).abs() < 1e-6);
            assert!((s.personal_table[(j, k)] - (v0[(j, k)] - 0.05 * g * u0[k])).abs() < 1e-6);
        }
        let other = 1 - j;
        assert_eq!(up.consensus.row(other), c0.row(other));
        assert!(up.transfer.is_none());
    }

    #[test]
    fn cloned_clients_upload_identical_tables() {
        let ds = small_dataset();
        let hp = small_hp();
        let v = VariantConfig::full();
        let server = ServerState::<f64>::init(ds.num_items(), &hp).unwrap();
        let base = init_client::<f64>(0, 2, ds.num_items(), &hp, &v).unwrap();
        let (mut a, mut b) = (base.clone(), base);
        let ua = local_update(&mut a, &server.consensus, &server.transfer, &ds, &hp, &v, 1).unwrap();
        let ub = local_update(&mut b, &server.consensus, &server.transfer, &ds, &hp, &v, 1).unwrap();
        let mean = aggregate_consensus(&[&ua.consensus, &ub.consensus]).unwrap();
        assert_eq!(mean, ua.consensus);
    }

    #[test]
    fn single_client_single_round_adopts_upload() {
        let recs: Vec<_> = (0..4).map(|i| raw("solo", &i.to_string(), i)).collect();
        let ds = leave_one_out_split(&InteractionDataset::from_raw(&recs, 1).unwrap(), 0, HoldoutPolicy::LatestTimestamp)
            .unwrap();
        let hp = HyperParams {
            rounds: 1,
            ..small_hp()
        };
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        let opts = RunOptions {
            upload_tap: Some(Arc::new(move |_, _, b: &[u8]| sink.lock().unwrap().push(b.to_vec()))),
            ..Default::default()
        };
        let out = run_training::<f64>(&ds, &hp, &VariantConfig::full(), &opts).unwrap();
        let bytes = seen.lock().unwrap();
        assert_eq!(bytes.len(), 1);
        let up = decode_upload(&bytes[0], &out.server.transfer).unwrap();
        assert_eq!(up.consensus, out.server.consensus);
        assert_eq!(up.transfer.unwrap(), out.server.transfer);
    }

    #[test]
    fn runs_are_deterministic_across_worker_counts() {
        let ds = small_dataset();
        let hp = small_hp();
        let v = VariantConfig::full();
        let csv = |w| {
            let opts = RunOptions {
                workers: Some(w),
                ..Default::default()
            };
            metrics_csv(&run_training::<f32>(&ds, &hp, &v, &opts).unwrap().metrics)
        };
        let one = csv(1);
        assert_eq!(one, csv(1));
        assert_eq!(one, csv(4));
    }

    #[test]
    fn baseline_kinds_run_and_preserve_shapes() {
        let ds = small_dataset();
        let hp = small_hp();
        for label in ["C0", "consensus-transfer", "unified-transfer", "Fed3CR-L2"] {
            let v = VariantConfig::from_label(label).unwrap();
            let out = run_training::<f64>(&ds, &hp, &v, &RunOptions::default()).unwrap();
            assert_eq!(out.server.consensus.shape(), (ds.num_items(), 4));
            assert_eq!(out.metrics.len(), 3);
            assert!(out.metrics.iter().all(|m| m.hr.is_some()));
        }
    }

    #[test]
    fn unsplit_dataset_is_rejected() {
        let recs = vec![raw("a", "x", 1), raw("a", "y", 2)];
        let ds = InteractionDataset::from_raw(&recs, 1).unwrap();
        let r = run_training::<f64>(&ds, &small_hp(), &VariantConfig::full(), &RunOptions::default());
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn mean_never_exceeds_largest_upload(seed in 0u64..300, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups: Vec<DenseMatrix<f64>> = (0..n)
                .map(|_| DenseMatrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0)))
                .collect();
            let mean = aggregate_consensus(&ups.iter().collect::<Vec<_>>()).unwrap();
            let max = ups.iter().map(|u| u.frobenius_norm()).fold(0.0, f64::max);
            prop_assert!(mean.frobenius_norm() <= max + 1e-12);
        }
    }
}
