//! Fully connected networks stored as plain parameter values and bound into
//! a [`Graph`] on demand.

use metaloss_autodiff::{Graph, Node, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer; `weight` is `inputs × outputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layer sizes `sizes[0] → sizes[1] → …`; weights and biases drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let weight = draw(w[0] * w[1]);
                let bias = draw(w[1]);
                Dense {
                    shape: [w[0], w[1]],
                    weight,
                    bias,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                shape: [w[0], w[1]],
                weight: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(|l| l.shape[0]).collect();
        if let Some(l) = self.layers.last() {
            s.push(l.shape[1]);
        }
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape[0])
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.shape[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.shape[0] * l.shape[1] || l.bias.len() != l.shape[1] {
                return Err(Error::InvalidArgument(format!("layer {i}: arrays do not match shape {:?}", l.shape)));
            }
            if i > 0 && self.layers[i - 1].shape[1] != l.shape[0] {
                return Err(Error::InvalidArgument(format!("layer {i}: input width does not match previous layer")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(())
    }

    /// Parameter arrays in binding order: w0, b0, w1, b1, …
    pub fn arrays(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn array_names(&self) -> Vec<String> {
        (0..self.layers.len()).flat_map(|i| [format!("layer {i} weight"), format!("layer {i} bias")]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for a in self.arrays_mut() {
            let n = a.len();
            a.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Adds the parameters to `g` as leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = Tensor::matrix(l.shape[0], l.shape[1], l.weight.clone())?;
            let b = Tensor::vector(l.bias.clone())?;
            layers.push((g.leaf(w, requires_grad), g.leaf(b, requires_grad)));
        }
        Ok(BoundMlp { layers })
    }

    /// Copies parameter values out of bound nodes (e.g. after an update).
    pub fn from_bound(&self, g: &Graph, bound: &BoundMlp) -> Self {
        let layers = self
            .layers
            .iter()
            .zip(&bound.layers)
            .map(|(l, (w, b))| Dense {
                shape: l.shape,
                weight: g.value(*w).data().to_vec(),
                bias: g.value(*b).data().to_vec(),
            })
            .collect();
        Self { layers }
    }
}

/// Graph nodes holding an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Node, Node)>,
}

impl BoundMlp {
    pub fn params(&self) -> Vec<Node> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Rebuilds from a flat node list in [`BoundMlp::params`] order.
    pub fn from_params(params: &[Node]) -> Self {
        Self {
            layers: params.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    /// `B × in → B × out`; `hidden` after every layer but the last, `output`
    /// after the last.
    pub fn forward(&self, g: &mut Graph, x: Node, hidden: Activation, output: Activation) -> Result<Node> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, *w)?;
            let z = g.add_row(z, *b)?;
            let act = if i == last { output } else { hidden };
            h = match act {
                Activation::Identity => z,
                Activation::Relu => g.relu(z)?,
                Activation::Softplus => g.softplus(z)?,
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&[9, 64, 64, 3], &mut rng);
        assert_eq!(m.sizes(), vec![9, 64, 64, 3]);
        assert_eq!(m.num_params(), 9 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
        let b = 1.0 / 3.0;
        assert!(m.layers[0].weight.iter().all(|w| w.abs() <= b));
        m.validate().unwrap();
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::init(&[2, 3, 1], &mut rng);
        let mut z = Mlp::zeros(&[2, 3, 1]);
        z.set_flat(&m.flat());
        assert_eq!(z, m);
    }
}
