//! Fully connected network with ReLU hidden layers and a linear output,
//! evaluated row-wise on a batch and differentiated by hand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `out × in`
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_out, fan_in),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to every layer (post-activation of the previous one).
    inputs: Vec<DenseMatrix<T>>,
    output: DenseMatrix<T>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &DenseMatrix<T> {
        &self.output
    }
}

pub type MlpGrads<T> = Mlp<T>;

impl<T: Real> Mlp<T> {
    /// All-zero network with the given widths `[in, hidden..., out]`.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// He-uniform hidden layers, zero biases, zero output layer.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        let last = net.layers.len() - 1;
        for layer in &mut net.layers[..last] {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        net
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn output_layer_mut(&mut self) -> &mut Linear<T> {
        self.layers.last_mut().expect("non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Named parameter blocks in a fixed order: weight then bias per layer.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{k}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data(),
            ));
            out.push((format!("layer{k}.bias"), vec![l.bias.len()], &l.bias[..]));
        }
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(l.weight.data());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "Mlp::assign_flat",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.widths() == other.widths()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            l.weight
                .add_scaled(alpha, &g.weight)
                .expect("same architecture");
            crate::numerics::axpy(alpha, &g.bias, &mut l.bias);
        }
    }

    /// Forward pass on `x` (`n × in`), one sample per row.
    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<MlpCache<T>> {
        if x.cols() != self.input_width() {
            return Err(Error::shape(
                "Mlp::forward",
                format!("input width {} vs {}", x.cols(), self.input_width()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                for (zi, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *zi += *b;
                }
            }
            if k < last {
                z = z.map(|v| v.max(T::zero()));
            }
            inputs.push(h);
            h = z;
        }
        Ok(MlpCache { inputs, output: h })
    }

    /// Backward pass. Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        d_out: &DenseMatrix<T>,
    ) -> Result<(MlpGrads<T>, DenseMatrix<T>)> {
        if d_out.shape() != cache.output.shape() {
            return Err(Error::shape(
                "Mlp::backward",
                format!("{:?} vs {:?}", d_out.shape(), cache.output.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let d_weight = dz.t_matmul(input)?;
            let mut d_bias = vec![T::zero(); layer.fan_out()];
            for r in 0..dz.rows() {
                for (db, g) in d_bias.iter_mut().zip(dz.row(r)) {
                    *db += *g;
                }
            }
            let mut d_in = dz.matmul(&layer.weight)?;
            if k > 0 {
                // input of layer k is ReLU(z_{k-1}); its mask is input > 0
                for (g, a) in d_in.data_mut().iter_mut().zip(input.data()) {
                    if *a <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            grads.push(Linear {
                weight: d_weight,
                bias: d_bias,
            });
            dz = d_in;
        }
        grads.reverse();
        Ok((Mlp { layers: grads }, dz))
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|b| U::lit(b.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(widths: &[usize], seed: u64) -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::<f64>::init(widths, &mut rng);
        for l in net.layers_mut() {
            for w in l.weight.data_mut() {
                *w = rng.gen_range(-0.8..0.8);
            }
            for b in &mut l.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        net
    }

    #[test]
    fn init_has_zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f64>::init(&[4, 8, 9], &mut rng);
        assert_eq!(net.widths(), vec![4, 8, 9]);
        assert!(net.layers()[0].weight.frobenius_norm() > 0.0);
        assert_eq!(net.layers()[1].weight.frobenius_norm(), 0.0);
        let x = DenseMatrix::from_fn(3, 4, |r, c| (r + c) as f64);
        let out = net.forward(&x).unwrap();
        assert!(out.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let net = randomized(&[3, 5, 2], 1);
        let mut other = Mlp::zeros(&[3, 5, 2]);
        other.assign_flat(&net.flatten()).unwrap();
        assert_eq!(net, other);
        assert_eq!(net.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
        assert!(other.assign_flat(&[0.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = randomized(&[3, 6, 5, 4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DenseMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let target = DenseMatrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        // L = Σ out ⊙ target
        let loss = |net: &Mlp<f64>, x: &DenseMatrix<f64>| -> f64 {
            let o = net.forward(x).unwrap();
            o.output().data().iter().zip(target.data()).map(|(a, b)| a * b).sum()
        };
        let cache = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &target).unwrap();

        let r = grad_check(|xp| loss(&net, xp), &x, &dx, 1e-6, 1e-4).unwrap();
        assert!(r.passed, "input grad {r:?}");

        let flat = DenseMatrix::new(1, net.num_params(), net.flatten()).unwrap();
        let g = DenseMatrix::new(1, net.num_params(), grads.flatten()).unwrap();
        let r = grad_check(
            |p| {
                let mut n = net.clone();
                n.assign_flat(p.data()).unwrap();
                loss(&n, &x)
            },
            &flat,
            &g,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "param grad {r:?}");
    }
}
