//! Fixed and learnable losses over predicted vs. measured joint torques.
//!
//! Every loss reduces over the batch with a mean. The learnable weights of
//! the structured and state-dependent losses pass through softplus, so the
//! effective per-joint weights are always positive.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use metaloss_autodiff::{softplus, Graph, Node, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp};

pub const MLP_LOSS_HIDDEN: [usize; 3] = [40, 40, 40];
pub const STATE_LOSS_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Mse,
    Mlp,
    Structured,
    StateDependent,
}

impl LossVariant {
    pub const LEARNED: [LossVariant; 3] = [LossVariant::Mlp, LossVariant::Structured, LossVariant::StateDependent];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Mlp => "mlp",
            Self::Structured => "structured",
            Self::StateDependent => "state_dependent",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mlp" => Ok(Self::Mlp),
            "structured" => Ok(Self::Structured),
            "state_dependent" | "state-dependent" => Ok(Self::StateDependent),
            other => Err(Error::InvalidArgument(format!("unknown loss variant `{other}`"))),
        }
    }
}

/// Parameters φ of a loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LossParams {
    Mse,
    /// `2J → 40 → 40 → 40 → 1` on `[pred | target]`, softplus output.
    Mlp { net: Mlp },
    /// Raw weights ψ; the effective weights are `softplus(ψ)`.
    Structured { raw: Vec<f64> },
    /// `2J → 32 → J` on `[q | dq]`, softplus output.
    StateDependent { net: Mlp },
}

impl LossParams {
    /// Random initial parameters for `variant` on a `joints`-joint arm.
    pub fn init<R: Rng>(variant: LossVariant, joints: usize, rng: &mut R) -> Self {
        match variant {
            LossVariant::Mse => Self::Mse,
            LossVariant::Mlp => {
                let mut sizes = vec![2 * joints];
                sizes.extend_from_slice(&MLP_LOSS_HIDDEN);
                sizes.push(1);
                Self::Mlp {
                    net: Mlp::init(&sizes, rng),
                }
            }
            LossVariant::Structured => Self::Structured {
                raw: (0..joints).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            LossVariant::StateDependent => Self::StateDependent {
                net: Mlp::init(&[2 * joints, STATE_LOSS_HIDDEN, joints], rng),
            },
        }
    }

    pub fn variant(&self) -> LossVariant {
        match self {
            Self::Mse => LossVariant::Mse,
            Self::Mlp { .. } => LossVariant::Mlp,
            Self::Structured { .. } => LossVariant::Structured,
            Self::StateDependent { .. } => LossVariant::StateDependent,
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let ok = match self {
            Self::Mse => true,
            Self::Mlp { net } => {
                net.validate()?;
                net.input_dim() == 2 * joints && net.output_dim() == 1
            }
            Self::Structured { raw } => raw.len() == joints && raw.iter().all(|v| v.is_finite()),
            Self::StateDependent { net } => {
                net.validate()?;
                net.input_dim() == 2 * joints && net.output_dim() == joints
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{} loss parameters do not fit a {joints}-joint arm", self.variant())))
        }
    }

    pub fn num_params(&self) -> usize {
        self.flat().len()
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            Self::Mse => Vec::new(),
            Self::Structured { raw } => raw.clone(),
            Self::Mlp { net } | Self::StateDependent { net } => net.flat(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        match self {
            Self::Mse => {}
            Self::Structured { raw } => raw.copy_from_slice(flat),
            Self::Mlp { net } | Self::StateDependent { net } => net.set_flat(flat),
        }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundLoss> {
        Ok(match self {
            Self::Mse => BoundLoss::Mse,
            Self::Mlp { net } => BoundLoss::Mlp(net.bind(g, requires_grad)?),
            Self::Structured { raw } => BoundLoss::Structured(g.leaf(Tensor::vector(raw.clone())?, requires_grad)),
            Self::StateDependent { net } => BoundLoss::StateDependent(net.bind(g, requires_grad)?),
        })
    }

    /// Effective per-joint weights of the structured loss.
    pub fn structured_weights(&self) -> Option<Vec<f64>> {
        match self {
            Self::Structured { raw } => Some(raw.iter().map(|r| softplus(*r)).collect()),
            _ => None,
        }
    }

    /// Effective weights of the state-dependent loss at one state.
    pub fn state_weights(&self, q: &[f64], dq: &[f64]) -> Result<Vec<f64>> {
        let Self::StateDependent { net } = self else {
            return Err(Error::UnsupportedVariant {
                op: "state_weights",
                variant: self.variant().to_string(),
            });
        };
        let mut g = Graph::new();
        let b = net.bind(&mut g, false)?;
        let mut x = q.to_vec();
        x.extend_from_slice(dq);
        let n = x.len();
        let x = g.constant(Tensor::matrix(1, n, x)?);
        let w = b.forward(&mut g, x, Activation::Relu, Activation::Softplus)?;
        Ok(g.value(w).data().to_vec())
    }
}

/// Loss parameters bound into a graph.
#[derive(Clone, Debug)]
pub enum BoundLoss {
    Mse,
    Mlp(BoundMlp),
    Structured(Node),
    StateDependent(BoundMlp),
}

impl BoundLoss {
    pub fn params(&self) -> Vec<Node> {
        match self {
            Self::Mse => Vec::new(),
            Self::Mlp(n) | Self::StateDependent(n) => n.params(),
            Self::Structured(p) => vec![*p],
        }
    }

    /// Loss value of `pred` against `target`; `q` and `dq` are only read by
    /// the state-dependent loss. All inputs are `B × J`.
    pub fn eval(&self, g: &mut Graph, q: Node, dq: Node, pred: Node, target: Node) -> Result<Node> {
        match self {
            Self::Mse => mse_loss(g, pred, target),
            Self::Mlp(net) => mlp_loss(g, net, pred, target),
            Self::Structured(raw) => structured_loss(g, *raw, pred, target),
            Self::StateDependent(net) => state_dependent_loss(g, net, q, dq, pred, target),
        }
    }
}

/// Mean over all `B·J` entries of `(pred − target)²`.
pub fn mse_loss(g: &mut Graph, pred: Node, target: Node) -> Result<Node> {
    let d = g.sub(pred, target)?;
    let s = g.square(d)?;
    Ok(g.mean(s)?)
}

fn batch_rows(g: &Graph, n: Node) -> Result<usize> {
    match g.shape(n) {
        [b, _] if *b > 0 => Ok(*b),
        s => Err(Error::InvalidArgument(format!("loss inputs must be nonempty B × J matrices, got {s:?}"))),
    }
}

/// `mean_b Σ_j softplus(ψ_j)·(pred_bj − target_bj)²`.
pub fn structured_loss(g: &mut Graph, raw_phi: Node, pred: Node, target: Node) -> Result<Node> {
    let b = batch_rows(g, pred)?;
    let phi = g.softplus(raw_phi)?;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let per_joint = g.sum_rows(sq)?;
    let weighted = g.mul(phi, per_joint)?;
    let total = g.sum(weighted)?;
    Ok(g.scalar_mul(total, 1.0 / b as f64)?)
}

/// Weights `w_b = φ(q_b, dq_b)` from the state network, then
/// `mean_b Σ_j w_bj·(pred_bj − target_bj)²`.
pub fn state_dependent_loss(g: &mut Graph, net: &BoundMlp, q: Node, dq: Node, pred: Node, target: Node) -> Result<Node> {
    let b = batch_rows(g, pred)?;
    let state = g.concat(&[q, dq])?;
    let w = net.forward(g, state, Activation::Relu, Activation::Softplus)?;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let weighted = g.mul(w, sq)?;
    let total = g.sum(weighted)?;
    Ok(g.scalar_mul(total, 1.0 / b as f64)?)
}

/// Batch mean of `softplus(net([pred_b | target_b]))`.
pub fn mlp_loss(g: &mut Graph, net: &BoundMlp, pred: Node, target: Node) -> Result<Node> {
    if g.shape(pred) != g.shape(target) {
        return Err(metaloss_autodiff::AutodiffError::ShapeMismatch {
            op: "mlp_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        }
        .into());
    }
    let x = g.concat(&[pred, target])?;
    let out = net.forward(g, x, Activation::Relu, Activation::Softplus)?;
    Ok(g.mean(out)?)
}

/// Learned loss weights for plotting.
#[derive(Clone, Debug, PartialEq)]
pub enum PhiTable {
    /// One weight per joint.
    PerJoint(Vec<f64>),
    /// One row per probe state.
    PerState(Vec<PhiRow>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiRow {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub phi: Vec<f64>,
}

impl PhiTable {
    pub fn len(&self) -> usize {
        match self {
            Self::PerJoint(p) => p.len(),
            Self::PerState(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `joint,phi` or `q_0..,dq_0..,phi_0..` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self {
            Self::PerJoint(phi) => {
                s.push_str("joint,phi\n");
                for (j, p) in phi.iter().enumerate() {
                    let _ = writeln!(s, "{j},{p:?}");
                }
            }
            Self::PerState(rows) => {
                let j = rows.first().map_or(0, |r| r.q.len());
                let cols: Vec<String> = ["q", "dq", "phi"]
                    .iter()
                    .flat_map(|p| (0..j).map(move |i| format!("{p}_{i}")))
                    .collect();
                s.push_str(&cols.join(","));
                s.push('\n');
                for r in rows {
                    let vals: Vec<String> = r.q.iter().chain(&r.dq).chain(&r.phi).map(|v| format!("{v:?}")).collect();
                    s.push_str(&vals.join(","));
                    s.push('\n');
                }
            }
        }
        s
    }
}

/// Exports effective weights: per joint for the structured loss, per probe
/// state for the state-dependent loss.
pub fn export_phi(loss: &LossParams, states: &[(Vec<f64>, Vec<f64>)]) -> Result<PhiTable> {
    match loss {
        LossParams::Structured { .. } => Ok(PhiTable::PerJoint(loss.structured_weights().unwrap())),
        LossParams::StateDependent { .. } => {
            let rows = states
                .iter()
                .map(|(q, dq)| {
                    Ok(PhiRow {
                        q: q.clone(),
                        dq: dq.clone(),
                        phi: loss.state_weights(q, dq)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(PhiTable::PerState(rows))
        }
        other => Err(Error::UnsupportedVariant {
            op: "export_phi",
            variant: other.variant().to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn mat(g: &mut Graph, rows: &[&[f64]]) -> Node {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = mat(&mut g, &[&[1.0, 2.0]]);
        let t = mat(&mut g, &[&[0.0, 0.0]]);
        let l = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
        let l0 = mse_loss(&mut g, p, p).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let p2 = mat(&mut g, &[&[2.0, 4.0]]);
        let l2 = mse_loss(&mut g, p2, t).unwrap();
        assert_eq!(g.value(l2).item(), 4.0 * 2.5);
    }

    #[test]
    fn structured_example() {
        let mut g = Graph::new();
        // softplus(ψ) = φ  ⇔  ψ = ln(e^φ − 1)
        let raw: Vec<f64> = [2.0f64, 0.5].iter().map(|p| p.exp_m1().ln()).collect();
        let r = g.constant(Tensor::vector(raw).unwrap());
        let p = mat(&mut g, &[&[1.0, 2.0]]);
        let t = mat(&mut g, &[&[0.0, 0.0]]);
        let l = structured_loss(&mut g, r, p, t).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-12);
        let l0 = structured_loss(&mut g, r, p, p).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
    }

    #[test]
    fn shape_mismatches() {
        let mut g = Graph::new();
        let p = mat(&mut g, &[&[1.0, 2.0]]);
        let t = mat(&mut g, &[&[0.0, 0.0, 1.0]]);
        assert!(mse_loss(&mut g, p, t).is_err());
        let r = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        assert!(structured_loss(&mut g, r, p, p).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::init(&[4, 40, 40, 40, 1], &mut rng).bind(&mut g, false).unwrap();
        assert!(mlp_loss(&mut g, &net, p, t).is_err());
    }

    #[test]
    fn zero_state_net_reduces_to_ln2_structured() {
        let mut g = Graph::new();
        let net = Mlp::zeros(&[4, STATE_LOSS_HIDDEN, 2]).bind(&mut g, false).unwrap();
        let q = mat(&mut g, &[&[0.3, -0.1], &[1.0, 2.0]]);
        let dq = mat(&mut g, &[&[0.5, 0.2], &[-1.0, 0.0]]);
        let p = mat(&mut g, &[&[1.0, 2.0], &[0.5, -0.5]]);
        let t = mat(&mut g, &[&[0.0, 0.5], &[0.0, 0.0]]);
        let l = state_dependent_loss(&mut g, &net, q, dq, p, t).unwrap();
        let m = mse_loss(&mut g, p, t).unwrap();
        let expect = LN_2 * 2.0 * g.value(m).item();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn mlp_loss_positive_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = LossParams::init(LossVariant::Mlp, 2, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false).unwrap();
        let p = mat(&mut g, &[&[1.0, 2.0], &[0.5, -0.5], &[3.0, 1.0]]);
        let t = mat(&mut g, &[&[0.0, 0.5], &[0.0, 0.0], &[-1.0, 2.0]]);
        let pr = mat(&mut g, &[&[3.0, 1.0], &[1.0, 2.0], &[0.5, -0.5]]);
        let tr = mat(&mut g, &[&[-1.0, 2.0], &[0.0, 0.5], &[0.0, 0.0]]);
        let l = bound.eval(&mut g, p, p, p, t).unwrap();
        let lr = bound.eval(&mut g, p, p, pr, tr).unwrap();
        assert!(g.value(l).item() > 0.0);
        assert!((g.value(l).item() - g.value(lr).item()).abs() < 1e-14);
        let l0 = bound.eval(&mut g, p, p, p, p).unwrap();
        assert!(g.value(l0).item() > 0.0);
    }

    #[test]
    fn mlp_loss_hand_built_net() {
        // relu(d) + relu(−d) = |d| with d = pred − target, then softplus
        let net = Mlp {
            layers: vec![
                Dense {
                    shape: [2, 2],
                    weight: vec![1.0, -1.0, -1.0, 1.0],
                    bias: vec![0.0, 0.0],
                },
                Dense {
                    shape: [2, 1],
                    weight: vec![1.0, 1.0],
                    bias: vec![0.0],
                },
            ],
        };
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false).unwrap();
        let p = mat(&mut g, &[&[3.0], &[0.5]]);
        let t = mat(&mut g, &[&[1.0], &[1.0]]);
        let l = mlp_loss(&mut g, &bound, p, t).unwrap();
        let expect = (2.0f64.exp().ln_1p() + 0.5f64.exp().ln_1p()) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-14);
        assert!((expect - 1.5505024976115394).abs() < 1e-15);
    }

    #[test]
    fn export_phi_variants() {
        let s = LossParams::Structured { raw: vec![0.0; 3] };
        let PhiTable::PerJoint(phi) = export_phi(&s, &[]).unwrap() else { panic!() };
        assert!(phi.iter().all(|p| (p - LN_2).abs() < 1e-15));
        assert_eq!(export_phi(&s, &[]).unwrap().to_csv().lines().count(), 4);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sd = LossParams::init(LossVariant::StateDependent, 2, &mut rng);
        let states = vec![(vec![0.1, 0.2], vec![0.0, -1.0]), (vec![1.0, 0.0], vec![3.0, 0.5]), (vec![0.0; 2], vec![0.0; 2])];
        let table = export_phi(&sd, &states).unwrap();
        assert_eq!(table.len(), 3);
        let PhiTable::PerState(rows) = &table else { panic!() };
        assert!(rows.iter().all(|r| r.phi.iter().all(|p| *p > 0.0)));
        assert!(table.to_csv().starts_with("q_0,q_1,dq_0,dq_1,phi_0,phi_1\n"));

        assert!(matches!(export_phi(&LossParams::Mse, &[]), Err(Error::UnsupportedVariant { .. })));
        let m = LossParams::init(LossVariant::Mlp, 2, &mut rng);
        assert!(export_phi(&m, &[]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [LossVariant::Mse, LossVariant::Mlp, LossVariant::Structured, LossVariant::StateDependent] {
            assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
        }
        assert!("huber".parse::<LossVariant>().is_err());
    }
}
