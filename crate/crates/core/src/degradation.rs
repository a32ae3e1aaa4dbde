//! Consensus-degradation checks: the distance bound on quadratic clients,
//! the 2-D aggregation toy, and a gradient-heterogeneity probe for trained
//! clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::InteractionDataset;
use crate::error::{Error, Result};
use crate::losses::loss_and_grad;
use crate::model::{ClientState, TransferNet};
use crate::numerics::{DenseMatrix, Real};
use crate::params::{HyperParams, VariantConfig};
use crate::rng::{self, purpose};

/// Client with loss `½‖C - C*‖²_F` (unit Hessian).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClient {
    pub c_star: DenseMatrix<f64>,
}

impl QuadraticClient {
    pub fn new(c_star: DenseMatrix<f64>) -> Self {
        Self { c_star }
    }

    pub fn loss(&self, c: &DenseMatrix<f64>) -> Result<f64> {
        Ok(0.5 * c.sub(&self.c_star)?.sum_squares())
    }

    pub fn grad(&self, c: &DenseMatrix<f64>) -> Result<DenseMatrix<f64>> {
        c.sub(&self.c_star)
    }

    pub const LAMBDA_MIN: f64 = 1.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    /// FedAvg fixed point (mean of the optima), flattened row-major.
    pub consensus: Vec<f64>,
    /// `‖C - C_i*‖` per client.
    pub distances: Vec<f64>,
    /// `δ_i` per client.
    pub bounds: Vec<f64>,
    /// `δ_ij` (row `i`, column `j`).
    pub delta: Vec<Vec<f64>>,
    pub satisfied: Vec<bool>,
}

impl DegradationReport {
    pub fn violations(&self) -> usize {
        self.satisfied.iter().filter(|s| !**s).count()
    }

    pub fn all_satisfied(&self) -> bool {
        self.violations() == 0
    }
}

/// Tolerance for floating-point equality in the tight cases.
pub const BOUND_TOL: f64 = 1e-9;

/// Random quadratic instance `index` of a seeded family: 2..=`max_clients`
/// clients with `m × d` optima (`m ≤ 4`, `d ≤ max_dim`) drawn around a common
/// offset with a random spread.
pub fn random_fixture(seed: u64, index: u64, max_clients: usize, max_dim: usize) -> Vec<QuadraticClient> {
    let mut r = rng::stream(seed, &[purpose::QUADRATIC_FIXTURE, index]);
    let n = r.gen_range(2..=max_clients.max(2));
    let (m, d) = (r.gen_range(1..=4), r.gen_range(1..=max_dim.max(1)));
    let spread: f64 = r.gen_range(0.01..10.0);
    let offset: Vec<f64> = (0..m * d).map(|_| r.gen_range(-5.0..5.0)).collect();
    (0..n)
        .map(|_| {
            let data = offset.iter().map(|o| o + spread * r.gen_range(-1.0..1.0)).collect();
            QuadraticClient::new(DenseMatrix::new(m, d, data).expect("shape"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSweep {
    pub instances: usize,
    pub clients_checked: usize,
    pub violations: usize,
    /// Largest `distance / δ_i` over clients with `δ_i > 0`.
    pub max_ratio: f64,
}

/// Checks the bound on `instances` random fixtures.
pub fn sweep_random_fixtures(seed: u64, instances: usize, max_clients: usize, max_dim: usize) -> Result<BoundSweep> {
    let reports: Vec<DegradationReport> = (0..instances as u64)
        .into_par_iter()
        .map(|i| verify_bound(&random_fixture(seed, i, max_clients, max_dim)))
        .collect::<Result<_>>()?;
    let mut out = BoundSweep {
        instances,
        clients_checked: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for r in &reports {
        out.clients_checked += r.distances.len();
        out.violations += r.violations();
        for (d, b) in r.distances.iter().zip(&r.bounds) {
            if *b > 0.0 {
                out.max_ratio = out.max_ratio.max(d / b);
            }
        }
    }
    Ok(out)
}

pub fn verify_bound(clients: &[QuadraticClient]) -> Result<DegradationReport> {
    if clients.len() < 2 {
        return Err(Error::Input("the degradation bound needs at least two clients".into()));
    }
    let shape = clients[0].c_star.shape();
    if let Some(bad) = clients.iter().find(|c| c.c_star.shape() != shape) {
        return Err(Error::shape(
            "verify_bound",
            format!("{:?} vs {:?}", bad.c_star.shape(), shape),
        ));
    }
    let n = clients.len();
    let mut consensus = DenseMatrix::zeros(shape.0, shape.1);
    for c in clients {
        consensus.add_scaled(1.0, &c.c_star)?;
    }
    let consensus = consensus.scale(1.0 / n as f64);

    let mut delta = vec![vec![0.0; n]; n];
    for i in 0..n {
        let at = &clients[i].c_star;
        let own = clients[i].grad(at)?;
        for j in 0..n {
            // ‖∇L_j(C_i*) - ∇L_i(C_i*)‖ + ‖∇L_i(C_i*)‖
            let other = clients[j].grad(at)?;
            delta[i][j] = other.sub(&own)?.frobenius_norm() + own.frobenius_norm();
        }
    }
    let bounds: Vec<f64> = delta.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let distances: Vec<f64> = clients
        .iter()
        .map(|c| consensus.sub(&c.c_star).map(|d| d.frobenius_norm()))
        .collect::<Result<_>>()?;
    let satisfied = distances
        .iter()
        .zip(&bounds)
        .map(|(d, b)| *d <= b / QuadraticClient::LAMBDA_MIN + BOUND_TOL)
        .collect();
    Ok(DegradationReport {
        consensus: consensus.into_data(),
        distances,
        bounds,
        delta,
        satisfied,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPrefix {
    /// Number of clients aggregated.
    pub k: usize,
    pub mean: [f64; 2],
    pub norm: f64,
    /// Cosine of every aggregated client to the mean.
    pub cosines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub prefixes: Vec<ToyPrefix>,
    /// Mean of all vectors is shorter than the longest input.
    pub degraded: bool,
    /// Mean norm never grows as more clients join.
    pub norms_nonincreasing: bool,
    /// Clients ordered from best to worst aligned with the full mean.
    pub alignment_order: Vec<usize>,
}

fn cos2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a[0] * b[0] + a[1] * b[1]) / (na * nb)
}

/// Aggregates every prefix of `vectors` and reports how the mean shrinks.
pub fn toy_example_report(vectors: &[[f64; 2]]) -> Result<ToyReport> {
    if vectors.len() < 2 {
        return Err(Error::Input("the toy example needs at least two vectors".into()));
    }
    let mut prefixes = Vec::with_capacity(vectors.len());
    let mut sum = [0.0, 0.0];
    for (idx, v) in vectors.iter().enumerate() {
        sum[0] += v[0];
        sum[1] += v[1];
        let k = idx + 1;
        let mean = [sum[0] / k as f64, sum[1] / k as f64];
        prefixes.push(ToyPrefix {
            k,
            mean,
            norm: mean[0].hypot(mean[1]),
            cosines: vectors[..k].iter().map(|&x| cos2(x, mean)).collect(),
        });
    }
    let last = prefixes.last().expect("non-empty");
    let longest = vectors.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
    let mut alignment_order: Vec<usize> = (0..vectors.len()).collect();
    alignment_order.sort_by(|&a, &b| last.cosines[b].total_cmp(&last.cosines[a]).then(a.cmp(&b)));
    Ok(ToyReport {
        degraded: last.norm < longest,
        norms_nonincreasing: prefixes.windows(2).all(|w| w[1].norm <= w[0].norm + 1e-12),
        alignment_order,
        prefixes,
    })
}

/// Three unit vectors at 0°, 45° and 90°.
pub fn default_toy_vectors() -> Vec<[f64; 2]> {
    [0.0f64, 45.0, 90.0]
        .iter()
        .map(|deg| {
            let r = deg.to_radians();
            [r.cos(), r.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `‖∇L_j(C_ref) - ∇L_i(C_ref)‖`: symmetric, zero diagonal.
    pub gradient_difference: Vec<Vec<f64>>,
    /// `‖∇L_j(C_ref) - ∇L_i(C_ref)‖ + ‖∇L_i(C_ref)‖`, the two-term form
    /// that reduces to the bound's `δ_ij` at a client optimum.
    pub with_own_gradient: Vec<Vec<f64>>,
    /// `‖∇L_i(C_ref)‖` per client.
    pub own_gradient_norm: Vec<f64>,
}

impl ProbeReport {
    /// Mean off-diagonal gradient difference over pairs selected by `keep`.
    pub fn mean_difference(&self, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let mut s = 0.0;
        let mut n = 0usize;
        for (i, row) in self.gradient_difference.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j && keep(i, j) {
                    s += v;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| s / n as f64)
    }
}

/// Fixed negatives for the probe. They depend only on the client's data, so
/// clients with identical interactions get identical negatives.
fn probe_negatives(ds: &InteractionDataset, client: usize, order: &[usize], count: usize) -> Vec<usize> {
    let data = ds.client(client);
    order
        .iter()
        .copied()
        .filter(|&j| !data.has_interacted(j))
        .take(count)
        .collect()
}

/// Recommendation-loss gradient of every client w.r.t. the item table at
/// `(c_ref, theta_ref)`, over the client's full training set plus fixed
/// negatives, and the pairwise heterogeneity matrices derived from them.
pub fn empirical_heterogeneity_probe<T: Real>(
    ds: &InteractionDataset,
    clients: &[ClientState<T>],
    c_ref: &DenseMatrix<T>,
    theta_ref: &TransferNet<T>,
    hp: &HyperParams,
    variant: &VariantConfig,
) -> Result<ProbeReport> {
    let rec_only = VariantConfig {
        consistency_enabled: false,
        orthogonality_enabled: false,
        ..*variant
    };
    let mut order: Vec<usize> = (0..ds.num_items()).collect();
    order.shuffle(&mut rng::stream(hp.seed, &[purpose::PROBE_NEGATIVES]));
    let grads: Vec<DenseMatrix<f64>> = clients
        .par_iter()
        .map(|s| {
            let pos = ds.train_items(s.client_id);
            let negs = probe_negatives(ds, s.client_id, &order, pos.len() * hp.negatives_per_positive);
            let batch: Vec<(usize, u8)> = pos.iter().map(|&j| (j, 1)).chain(negs.iter().map(|&j| (j, 0))).collect();
            let view = s.view_with_global(c_ref, theta_ref);
            let (_, g) = loss_and_grad(view, pos, &batch, hp, &rec_only)?;
            Ok(g.global.cast::<f64>())
        })
        .collect::<Result<_>>()?;
    let n = grads.len();
    let own: Vec<f64> = grads.iter().map(DenseMatrix::frobenius_norm).collect();
    let mut diff = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = grads[j].sub(&grads[i])?.frobenius_norm();
            diff[i][j] = d;
            diff[j][i] = d;
        }
    }
    let with_own = (0..n)
        .map(|i| (0..n).map(|j| diff[i][j] + own[i]).collect())
        .collect();
    Ok(ProbeReport {
        gradient_difference: diff,
        with_own_gradient: with_own,
        own_gradient_norm: own,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(rows: &[[f64; 2]]) -> Vec<QuadraticClient> {
        rows.iter()
            .map(|r| QuadraticClient::new(DenseMatrix::from_rows(&[*r]).unwrap()))
            .collect()
    }

    #[test]
    fn quadratic_gradient_vanishes_at_optimum() {
        let c = &q(&[[1.5, -2.0]])[0];
        assert_eq!(c.grad(&c.c_star).unwrap().frobenius_norm(), 0.0);
        assert_eq!(c.loss(&c.c_star).unwrap(), 0.0);
    }

    #[test]
    fn three_client_instance() {
        let r = verify_bound(&q(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])).unwrap();
        assert!((r.consensus[0]).abs() < 1e-15 && (r.consensus[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.distances[0] - 10f64.sqrt() / 3.0).abs() < 1e-12);
        assert!((r.distances[0] - 1.0541).abs() < 1e-3);
        assert!((r.bounds[0] - (2f64.sqrt() + 2.0) / 3.0).abs() < 1e-12);
        assert!((r.bounds[0] - 1.1381).abs() < 1e-3);
        assert!(r.all_satisfied());
    }

    #[test]
    fn tight_cases() {
        let r = verify_bound(&q(&[[0.3, 0.7], [0.3, 0.7], [0.3, 0.7]])).unwrap();
        assert!(r.distances.iter().all(|&d| d < 1e-15));
        assert!(r.bounds.iter().all(|&b| b == 0.0));
        let r = verify_bound(&q(&[[2.0, -1.0], [-2.0, 1.0]])).unwrap();
        let x = 5f64.sqrt();
        for i in 0..2 {
            assert!((r.distances[i] - x).abs() < 1e-12);
            assert!((r.bounds[i] - r.distances[i]).abs() < 1e-12);
        }
        assert!(r.all_satisfied());
        assert!(verify_bound(&q(&[[1.0, 0.0]])).is_err());
    }

    #[test]
    fn report_is_invariant_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let a = verify_bound(&q(&rows)).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&i| rows[i]).collect();
        let b = verify_bound(&q(&shuffled)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((a.distances[i] - b.distances[k]).abs() < 1e-12);
            assert!((a.bounds[i] - b.bounds[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_fixtures_never_violate() {
        let s = sweep_random_fixtures(11, 200, 20, 8).unwrap();
        assert_eq!(s.violations, 0);
        assert!(s.max_ratio <= 1.0 + 1e-12 && s.max_ratio > 0.3);
        assert_eq!(random_fixture(3, 7, 20, 8), random_fixture(3, 7, 20, 8));
    }

    #[test]
    fn toy_vectors_degrade() {
        let r = toy_example_report(&default_toy_vectors()).unwrap();
        assert!(r.degraded);
        assert!(r.prefixes[2].norm < 1.0);
        assert!(r.prefixes[2].norm <= r.prefixes[1].norm);
        assert!(r.norms_nonincreasing);
        // 45° sits on the mean; the two extremes are equally and least aligned
        assert_eq!(r.alignment_order[0], 1);
        let c = &r.prefixes[2].cosines;
        assert!(c[0] < c[1] && c[2] < c[1]);
        let lopsided = toy_example_report(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]).unwrap();
        assert_eq!(*lopsided.alignment_order.last().unwrap(), 2);
        assert!(toy_example_report(&[[1.0, 0.0]]).is_err());
    }
}
