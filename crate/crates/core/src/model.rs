//! Learnable inverse dynamics model `u_ff = f_θ(q, dq, ddq_d)` and the
//! optimizers that train it.

use std::fs;
use std::path::Path;

use metaloss_autodiff::{Graph, Node, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp};

/// Per-feature affine input normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Column statistics of `rows` (std floored at 1e-8).
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            }
            for (i, v) in r.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub joints: usize,
    pub net: Mlp,
    #[serde(default)]
    pub input_norm: Option<Standardizer>,
}

/// Fresh `3J → hidden… → J` network, deterministic in `seed`.
pub fn init_model(joints: usize, hidden: &[usize], seed: u64) -> Result<ModelParams> {
    if hidden.is_empty() || hidden.contains(&0) || joints == 0 {
        return Err(Error::InvalidArgument("model needs joints > 0 and nonempty, nonzero hidden sizes".into()));
    }
    let mut sizes = vec![3 * joints];
    sizes.extend_from_slice(hidden);
    sizes.push(joints);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelParams {
        joints,
        net: Mlp::init(&sizes, &mut rng),
        input_norm: None,
    })
}

/// Task-model architecture plus optional fixed input normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub input_norm: Option<Standardizer>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            input_norm: None,
        }
    }
}

impl ModelSpec {
    pub fn init(&self, joints: usize, seed: u64) -> Result<ModelParams> {
        let mut m = init_model(joints, &self.hidden, seed)?;
        if let Some(n) = &self.input_norm {
            if n.mean.len() != 3 * joints || n.std.len() != 3 * joints {
                return Err(Error::Dimension {
                    expected: 3 * joints,
                    got: n.mean.len(),
                });
            }
        }
        m.input_norm = self.input_norm.clone();
        Ok(m)
    }
}

/// Network forward pass: relu hidden layers, linear output.
pub fn predict(g: &mut Graph, net: &BoundMlp, inputs: Node) -> Result<Node> {
    net.forward(g, inputs, Activation::Relu, Activation::Identity)
}

impl ModelParams {
    /// Writes the parameters as JSON: layer shapes, weights and biases.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.input_dim() != 3 * self.joints || self.net.output_dim() != self.joints {
            return Err(Error::InvalidArgument(format!(
                "network {:?} does not map 3·{j} inputs to {j} outputs",
                self.net.sizes(),
                j = self.joints
            )));
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != 3 * self.joints || n.std.len() != 3 * self.joints {
                return Err(Error::Dimension {
                    expected: 3 * self.joints,
                    got: n.mean.len(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundMlp> {
        self.net.bind(g, requires_grad)
    }

    /// Input matrix for `batch` as a constant node, normalized if configured.
    pub fn input_node(&self, g: &mut Graph, batch: &Batch) -> Result<Node> {
        if batch.q.shape()[1] != self.joints {
            return Err(Error::Dimension {
                expected: self.joints,
                got: batch.q.shape()[1],
            });
        }
        let x = batch.inputs();
        let x = match &self.input_norm {
            None => x,
            Some(n) => {
                let cols = x.shape()[1];
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - n.mean[i % cols]) / n.std[i % cols])
                    .collect();
                Tensor::matrix(x.shape()[0], cols, data)?
            }
        };
        Ok(g.constant(x))
    }

    /// Predicted feedforward torques `B × J` (no gradient tracking).
    pub fn predict_batch(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = self.bind(&mut g, false)?;
        let x = self.input_node(&mut g, batch)?;
        let y = predict(&mut g, &net, x)?;
        Ok(g.value(y).clone())
    }

    /// Mean squared torque error over `batch`.
    pub fn mse(&self, batch: &Batch) -> Result<f64> {
        let pred = self.predict_batch(batch)?;
        Ok(mse_values(pred.data(), batch.tau.data()))
    }
}

pub(crate) fn mse_values(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => *lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

/// Optimizer configuration plus its running state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        if !(kind.lr() >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", kind.lr())));
        }
        Ok(Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to `params` in place. Gradients are checked before
    /// anything is modified; a non-finite entry names the offending array.
    pub fn step(&mut self, params: &mut Mlp, grads: &[Vec<f64>]) -> Result<()> {
        let names = params.array_names();
        let mut arrays = params.arrays_mut();
        if grads.len() != arrays.len() {
            return Err(Error::Dimension {
                expected: arrays.len(),
                got: grads.len(),
            });
        }
        for ((g, a), name) in grads.iter().zip(&arrays).zip(&names) {
            if g.len() != a.len() {
                return Err(Error::Dimension {
                    expected: a.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (a, g) in arrays.iter_mut().zip(grads) {
                    for (p, d) in a.iter_mut().zip(g) {
                        *p -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (k, (a, g)) in arrays.iter_mut().zip(grads).enumerate() {
                    for (i, (p, d)) in a.iter_mut().zip(g).enumerate() {
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                return Ok(());
            }
        }
        self.t += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DynRecord;

    fn batch(n: usize, j: usize) -> Batch {
        let recs: Vec<DynRecord> = (0..n)
            .map(|i| {
                let x = i as f64 * 0.1;
                DynRecord {
                    q: vec![x; j],
                    dq: vec![-x; j],
                    ddq_next: vec![2.0 * x; j],
                    tau: vec![x * x; j],
                }
            })
            .collect();
        Batch::from_records(&recs).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ModelSpec {
            hidden: vec![7, 5],
            input_norm: Standardizer::fit([[1.0; 6].as_slice(), [3.0; 6].as_slice()].into_iter()),
        };
        let m = spec.init(2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("theta.json");
        m.save(&p).unwrap();
        assert_eq!(ModelParams::load(&p).unwrap(), m);
        let mut bad = m.clone();
        bad.joints = 3;
        bad.save(&p).unwrap();
        assert!(ModelParams::load(&p).is_err());
        std::fs::write(&p, "{").unwrap();
        assert!(ModelParams::load(&p).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(3, &[64, 64], 5).unwrap();
        assert_eq!(a, init_model(3, &[64, 64], 5).unwrap());
        assert_ne!(a, init_model(3, &[64, 64], 6).unwrap());
        assert_eq!(a.net.sizes(), vec![9, 64, 64, 3]);
        assert!(init_model(3, &[], 0).is_err());
    }

    #[test]
    fn output_shape_and_zero_network() {
        let mut m = init_model(2, &[8], 0).unwrap();
        let b = batch(5, 2);
        assert_eq!(m.predict_batch(&b).unwrap().shape(), &[5, 2]);
        for l in &mut m.net.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        m.net.layers[1].bias = vec![0.25, -1.5];
        let p = m.predict_batch(&b).unwrap();
        for r in 0..5 {
            assert_eq!(p.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn batch_rows_are_equivariant() {
        let m = init_model(2, &[16, 16], 3).unwrap();
        let b = batch(6, 2);
        let p = m.predict_batch(&b).unwrap();
        let mut recs: Vec<DynRecord> = (0..6)
            .map(|r| DynRecord {
                q: b.q.row(r).to_vec(),
                dq: b.dq.row(r).to_vec(),
                ddq_next: b.ddq.row(r).to_vec(),
                tau: b.tau.row(r).to_vec(),
            })
            .collect();
        recs.reverse();
        let p2 = m.predict_batch(&Batch::from_records(&recs).unwrap()).unwrap();
        for r in 0..6 {
            assert_eq!(p.row(r), p2.row(5 - r));
        }
    }

    #[test]
    fn sgd_steps() {
        let mut m = init_model(1, &[2], 0).unwrap();
        let before = m.net.clone();
        let mut opt = OptState::new(OptimizerKind::sgd(0.001)).unwrap();
        let zeros: Vec<Vec<f64>> = before.arrays().iter().map(|a| vec![0.0; a.len()]).collect();
        opt.step(&mut m.net, &zeros).unwrap();
        assert_eq!(m.net, before);
        let grads: Vec<Vec<f64>> = before.arrays().iter().map(|a| (0..a.len()).map(|i| i as f64 - 1.5).collect()).collect();
        opt.step(&mut m.net, &grads).unwrap();
        for (a, (b, g)) in m.net.arrays().iter().zip(before.arrays().iter().zip(&grads)) {
            for i in 0..a.len() {
                assert_eq!(a[i], b[i] - 0.001 * g[i]);
            }
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut m = init_model(1, &[1], 0).unwrap();
        let before = m.net.flat();
        let g = 0.37;
        let grads: Vec<Vec<f64>> = m.net.arrays().iter().map(|a| vec![g; a.len()]).collect();
        let mut opt = OptState::new(OptimizerKind::adam(0.01)).unwrap();
        opt.step(&mut m.net, &grads).unwrap();
        // m̂ = g, v̂ = g², update = lr · g / (|g| + ε)
        let expect = 0.01 * g / (g + 1e-8);
        for (a, b) in m.net.flat().iter().zip(&before) {
            assert!((b - a - expect).abs() < 1e-15);
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut m = init_model(1, &[2], 0).unwrap();
        let before = m.net.clone();
        let mut grads: Vec<Vec<f64>> = m.net.arrays().iter().map(|a| vec![0.0; a.len()]).collect();
        grads[3][0] = f64::NAN;
        let mut opt = OptState::new(OptimizerKind::sgd(0.1)).unwrap();
        let err = opt.step(&mut m.net, &grads).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in layer 1 bias");
        assert_eq!(m.net, before);
    }

    #[test]
    fn standardizer_fit() {
        let rows = [vec![1.0, 10.0], vec![3.0, 10.0]];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std, vec![1.0, 1e-8]);
    }
}
