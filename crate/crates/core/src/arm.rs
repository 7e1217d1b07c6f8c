//! Planar n-link revolute arm.
//!
//! Joint angles are relative; the absolute angle of link `i` is the sum of
//! the first `i + 1` joint angles, measured from the downward vertical. The
//! arm moves in a vertical plane with gravity along `-y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// Distance from the proximal joint to the center of mass, m.
    pub com: f64,
    /// Rotational inertia about the center of mass, kg·m².
    pub inertia: f64,
}

impl Link {
    /// Uniform slender rod.
    pub fn rod(mass: f64, length: f64) -> Self {
        Self {
            mass,
            length,
            com: 0.5 * length,
            inertia: mass * length * length / 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub links: Vec<Link>,
    /// m/s²
    pub gravity: f64,
    /// Viscous friction per joint, N·m·s/rad.
    pub viscous: Vec<f64>,
    /// Coulomb friction magnitude per joint, N·m.
    pub coulomb: Vec<f64>,
    /// Velocity scale of the tanh-smoothed Coulomb term, rad/s.
    #[serde(default = "default_coulomb_eps")]
    pub coulomb_eps: f64,
    /// Point mass at the tip of the last link, kg.
    #[serde(default)]
    pub payload: f64,
    /// When set, the gravity load of the links themselves is cancelled.
    /// A payload is an external load and is never compensated.
    #[serde(default)]
    pub gravity_compensated: bool,
}

fn default_coulomb_eps() -> f64 {
    1e-2
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::planar(3)
    }
}

impl ArmModel {
    /// Default `joints`-link arm (1 to 7 joints) with tapering rods, joint
    /// friction and gravity compensation enabled.
    pub fn planar(joints: usize) -> Self {
        let links = (0..joints)
            .map(|i| {
                let taper = 1.0 - 0.12 * i as f64;
                Link::rod(2.0 * taper, 0.45 * taper)
            })
            .collect();
        Self {
            links,
            gravity: 9.81,
            viscous: (0..joints).map(|i| 0.4 * (1.0 - 0.12 * i as f64)).collect(),
            coulomb: (0..joints).map(|i| 0.6 * (1.0 - 0.12 * i as f64)).collect(),
            coulomb_eps: default_coulomb_eps(),
            payload: 0.0,
            gravity_compensated: true,
        }
    }

    /// Same arm without friction.
    pub fn frictionless(mut self) -> Self {
        self.viscous.iter_mut().for_each(|b| *b = 0.0);
        self.coulomb.iter_mut().for_each(|c| *c = 0.0);
        self
    }

    pub fn joints(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 {
            return Err(Error::InvalidModel("arm needs at least one link".into()));
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.mass > 0.0 && l.length > 0.0 && l.inertia > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "link {i}: mass, length and inertia must be positive"
                )));
            }
            if !(l.com.is_finite() && l.com >= 0.0) {
                return Err(Error::InvalidModel(format!("link {i}: bad com offset {}", l.com)));
            }
        }
        if self.viscous.len() != j || self.coulomb.len() != j {
            return Err(Error::InvalidModel(format!(
                "friction vectors must have {j} entries"
            )));
        }
        if self.viscous.iter().chain(&self.coulomb).any(|f| !(*f >= 0.0)) {
            return Err(Error::InvalidModel("friction coefficients must be >= 0".into()));
        }
        if !(self.coulomb_eps > 0.0) || !(self.payload >= 0.0) || !self.gravity.is_finite() {
            return Err(Error::InvalidModel("bad coulomb_eps, payload or gravity".into()));
        }
        Ok(())
    }

    fn check_dims(&self, vs: &[&[f64]]) -> Result<()> {
        let j = self.joints();
        for v in vs {
            if v.len() != j {
                return Err(Error::Dimension {
                    expected: j,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Planar recursive Newton–Euler with separate gravity for the links and
    /// the payload.
    fn rnea(&self, q: &[f64], dq: &[f64], ddq: &[f64], g_links: f64, g_payload: f64) -> Vec<f64> {
        let n = self.joints();
        let mut theta = 0.0;
        let mut omega = 0.0;
        let mut alpha = 0.0;
        let mut a_joint = [0.0f64; 2];
        // Per link: joint position offset to COM and to next joint, COM accel.
        let mut r_com = Vec::with_capacity(n);
        let mut r_next = Vec::with_capacity(n);
        let mut a_com = Vec::with_capacity(n);
        for i in 0..n {
            theta += q[i];
            omega += dq[i];
            alpha += ddq[i];
            let e = [theta.sin(), -theta.cos()];
            let nrm = [theta.cos(), theta.sin()];
            let link = &self.links[i];
            // acceleration of a point at distance s along the link
            let rel = |s: f64| {
                [
                    s * (alpha * nrm[0] - omega * omega * e[0]),
                    s * (alpha * nrm[1] - omega * omega * e[1]),
                ]
            };
            let ac = rel(link.com);
            a_com.push([a_joint[0] + ac[0], a_joint[1] + ac[1]]);
            r_com.push([link.com * e[0], link.com * e[1]]);
            r_next.push([link.length * e[0], link.length * e[1]]);
            let an = rel(link.length);
            a_joint = [a_joint[0] + an[0], a_joint[1] + an[1]];
        }

        let cross = |a: [f64; 2], b: [f64; 2]| a[0] * b[1] - a[1] * b[0];
        // Force and moment transmitted to the distal body.
        let mut f_next = [self.payload * a_joint[0], self.payload * (a_joint[1] + g_payload)];
        let mut n_next = 0.0;
        let mut tau = vec![0.0; n];
        let mut abs_alpha: f64 = ddq.iter().sum();
        for i in (0..n).rev() {
            let link = &self.links[i];
            let fm = [link.mass * a_com[i][0], link.mass * (a_com[i][1] + g_links)];
            let f = [fm[0] + f_next[0], fm[1] + f_next[1]];
            let moment = link.inertia * abs_alpha + n_next + cross(r_com[i], fm) + cross(r_next[i], f_next);
            tau[i] = moment;
            f_next = f;
            n_next = moment;
            abs_alpha -= ddq[i];
        }
        tau
    }

    fn gravity_split(&self) -> (f64, f64) {
        let links = if self.gravity_compensated { 0.0 } else { self.gravity };
        (links, self.gravity)
    }

    /// Joint torques producing `ddq` at state `(q, dq)` with friction off.
    pub fn inverse_dynamics(&self, q: &[f64], dq: &[f64], ddq: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(&[q, dq, ddq])?;
        let (gl, gp) = self.gravity_split();
        Ok(self.rnea(q, dq, ddq, gl, gp))
    }

    /// Joint-space mass matrix, row-major `J × J`.
    pub fn mass_matrix(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(&[q])?;
        let n = self.joints();
        let zero = vec![0.0; n];
        let mut m = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.rnea(q, &zero, &e, 0.0, 0.0);
            for i in 0..n {
                m[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        Ok(m)
    }

    /// Friction torque opposing motion at velocity `dq`.
    pub fn friction(&self, dq: &[f64]) -> Vec<f64> {
        dq.iter()
            .zip(self.viscous.iter().zip(&self.coulomb))
            .map(|(v, (b, c))| b * v + c * (v / self.coulomb_eps).tanh())
            .collect()
    }

    /// Joint accelerations under applied torques `tau`, including friction.
    pub fn forward_dynamics(&self, q: &[f64], dq: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(&[q, dq, tau])?;
        let n = self.joints();
        let (gl, gp) = self.gravity_split();
        let bias = self.rnea(q, dq, &vec![0.0; n], gl, gp);
        let fr = self.friction(dq);
        let rhs: Vec<f64> = (0..n).map(|i| tau[i] - bias[i] - fr[i]).collect();
        let m = self.mass_matrix(q)?;
        cholesky_solve(&m, &rhs, n).ok_or(Error::SingularMassMatrix)
    }

    /// Accelerations for one integration step of length `dt` with friction
    /// evaluated at the end-of-step velocity `v = dq + dt·ddq`: solves
    /// `M·(v − dq)/dt = τ − bias(q, dq) − f(v)`. Any explicit or linearized
    /// treatment of the tanh Coulomb term chatters at control rates once
    /// `dt·c/I` exceeds the velocity. The system is the stationarity
    /// condition of a strictly convex function of `v`, minimized here by
    /// damped Newton.
    fn step_accel(&self, q: &[f64], dq: &[f64], tau: &[f64], dt: f64) -> Result<Vec<f64>> {
        self.check_dims(&[q, dq, tau])?;
        let n = self.joints();
        let (gl, gp) = self.gravity_split();
        let bias = self.rnea(q, dq, &vec![0.0; n], gl, gp);
        let r: Vec<f64> = (0..n).map(|i| tau[i] - bias[i]).collect();
        let m = self.mass_matrix(q)?;
        let eps = self.coulomb_eps;
        let log_cosh = |x: f64| x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2;
        let objective = |v: &[f64]| {
            let mut o = 0.0;
            for i in 0..n {
                let mut mv = 0.0;
                for k in 0..n {
                    mv += m[i * n + k] * (v[k] - dq[k]);
                }
                o += 0.5 * (v[i] - dq[i]) * mv / dt - r[i] * v[i]
                    + 0.5 * self.viscous[i] * v[i] * v[i]
                    + self.coulomb[i] * eps * log_cosh(v[i] / eps);
            }
            o
        };
        let mut v = dq.to_vec();
        let mut obj = objective(&v);
        for _ in 0..100 {
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            for i in 0..n {
                let mut mv = 0.0;
                for k in 0..n {
                    mv += m[i * n + k] * (v[k] - dq[k]);
                    hess[i * n + k] = m[i * n + k] / dt;
                }
                let th = (v[i] / eps).tanh();
                grad[i] = mv / dt - r[i] + self.viscous[i] * v[i] + self.coulomb[i] * th;
                hess[i * n + i] += self.viscous[i] + self.coulomb[i] / eps * (1.0 - th * th);
            }
            let step = cholesky_solve(&hess, &grad, n).ok_or(Error::SingularMassMatrix)?;
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand: Vec<f64> = v.iter().zip(&step).map(|(a, s)| a - t * s).collect();
                let c = objective(&cand);
                if c <= obj {
                    v = cand;
                    obj = c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // converged to rounding, or the objective overflowed
                v.iter_mut().zip(&step).for_each(|(a, s)| *a -= s);
                break;
            }
            let size = step.iter().fold(0.0f64, |a, s| a.max((t * s).abs()));
            if size <= 1e-14 * (1.0 + v.iter().fold(0.0f64, |a, x| a.max(x.abs()))) {
                break;
            }
        }
        Ok(v.iter().zip(dq).map(|(a, b)| (a - b) / dt).collect())
    }

    /// Kinetic plus potential energy (potential zero with every link hanging
    /// straight down), counting every mass including the payload.
    pub fn energy(&self, state: &ArmState) -> f64 {
        let mut theta = 0.0;
        let mut omega = 0.0;
        let mut p = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        let mut depth = 0.0;
        for (i, link) in self.links.iter().enumerate() {
            theta += state.q[i];
            omega += state.dq[i];
            let e = [theta.sin(), -theta.cos()];
            let nrm = [theta.cos(), theta.sin()];
            let pc = [p[0] + link.com * e[0], p[1] + link.com * e[1]];
            let vc = [v[0] + link.com * omega * nrm[0], v[1] + link.com * omega * nrm[1]];
            kinetic += 0.5 * link.mass * (vc[0] * vc[0] + vc[1] * vc[1]) + 0.5 * link.inertia * omega * omega;
            potential += link.mass * self.gravity * (pc[1] + depth + link.com);
            depth += link.length;
            p = [p[0] + link.length * e[0], p[1] + link.length * e[1]];
            v = [v[0] + link.length * omega * nrm[0], v[1] + link.length * omega * nrm[1]];
        }
        kinetic += 0.5 * self.payload * (v[0] * v[0] + v[1] * v[1]);
        potential += self.payload * self.gravity * (p[1] + depth);
        kinetic + potential
    }
}

/// Solves `m x = b` for symmetric positive definite `m` (row-major).
fn cholesky_solve(m: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
}

impl ArmState {
    pub fn new(q: Vec<f64>, dq: Vec<f64>) -> Self {
        Self { q, dq }
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self { q, dq: vec![0.0; n] }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.dq).all(|v| v.is_finite())
    }
}

/// Fixed-step semi-implicit Euler simulation of an arm.
#[derive(Clone, Debug)]
pub struct ArmSim {
    pub model: ArmModel,
    pub state: ArmState,
    pub dt: f64,
    steps: usize,
}

impl ArmSim {
    pub fn new(model: ArmModel, state: ArmState, dt: f64) -> Result<Self> {
        model.validate()?;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if state.q.len() != model.joints() || state.dq.len() != model.joints() {
            return Err(Error::Dimension {
                expected: model.joints(),
                got: state.q.len(),
            });
        }
        Ok(Self {
            model,
            state,
            dt,
            steps: 0,
        })
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advances one step: `dq' = dq + dt·ddq`, then `q' = q + dt·dq'`, with
    /// friction evaluated at `dq'`.
    pub fn step(&mut self, tau: &[f64]) -> Result<&ArmState> {
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite torque at step {}",
                self.steps
            )));
        }
        let ddq = self
            .model
            .step_accel(&self.state.q, &self.state.dq, tau, self.dt)
            .map_err(|e| match e {
                Error::SingularMassMatrix => Error::Diverged { step: self.steps },
                other => other,
            })?;
        let dq: Vec<f64> = self.state.dq.iter().zip(&ddq).map(|(v, a)| v + self.dt * a).collect();
        let q: Vec<f64> = self.state.q.iter().zip(&dq).map(|(p, v)| p + self.dt * v).collect();
        let next = ArmState { q, dq };
        if !next.is_finite() {
            return Err(Error::Diverged { step: self.steps });
        }
        self.state = next;
        self.steps += 1;
        Ok(&self.state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl Gains {
    pub fn uniform(joints: usize, kp: f64, kd: f64) -> Self {
        Self {
            kp: vec![kp; joints],
            kd: vec![kd; joints],
        }
    }

    /// Default tracking gains for the default arm.
    pub fn default_for(joints: usize) -> Self {
        Self {
            kp: (0..joints).map(|i| 200.0 * 0.3f64.powi(i as i32)).collect(),
            kd: (0..joints).map(|i| 20.0 * 0.3f64.powi(i as i32)).collect(),
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.kp.len() != joints || self.kd.len() != joints {
            return Err(Error::Dimension {
                expected: joints,
                got: self.kp.len().min(self.kd.len()),
            });
        }
        if self.kp.iter().chain(&self.kd).any(|k| !(*k >= 0.0)) {
            return Err(Error::InvalidArgument("gains must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `τ = u_ff + Kp∘(q_d − q) + Kd∘(dq_d − dq)`.
pub fn pd_ff_control(q_d: &[f64], dq_d: &[f64], u_ff: &[f64], state: &ArmState, gains: &Gains) -> Result<Vec<f64>> {
    let j = q_d.len();
    for len in [dq_d.len(), u_ff.len(), state.q.len(), state.dq.len(), gains.kp.len(), gains.kd.len()] {
        if len != j {
            return Err(Error::Dimension { expected: j, got: len });
        }
    }
    Ok((0..j)
        .map(|i| u_ff[i] + gains.kp[i] * (q_d[i] - state.q[i]) + gains.kd[i] * (dq_d[i] - state.dq[i]))
        .collect())
}

/// Desired joint positions, velocities and accelerations sampled every `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefTrajectory {
    pub dt: f64,
    pub q: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
    pub ddq: Vec<Vec<f64>>,
}

impl RefTrajectory {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// `q_d(t) = A sin(2π f dt t) + q_rest` for `t = 0..=duration/dt`, with
/// analytic derivatives.
pub fn sine_trajectory(amplitude: &[f64], freq: f64, dt: f64, duration: f64, q_rest: &[f64]) -> Result<RefTrajectory> {
    if !(freq > 0.0) || !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sine trajectory needs f > 0 and dt > 0 (f={freq}, dt={dt})"
        )));
    }
    if amplitude.len() != q_rest.len() {
        return Err(Error::Dimension {
            expected: q_rest.len(),
            got: amplitude.len(),
        });
    }
    let steps = (duration / dt).round() as usize;
    let w = 2.0 * std::f64::consts::PI * freq;
    let mut traj = RefTrajectory {
        dt,
        q: Vec::with_capacity(steps + 1),
        dq: Vec::with_capacity(steps + 1),
        ddq: Vec::with_capacity(steps + 1),
    };
    for t in 0..=steps {
        let time = dt * t as f64;
        let (s, c) = (w * time).sin_cos();
        traj.q.push(amplitude.iter().zip(q_rest).map(|(a, r)| a * s + r).collect());
        traj.dq.push(amplitude.iter().map(|a| w * a * c).collect());
        traj.ddq.push(amplitude.iter().map(|a| -w * w * a * s).collect());
    }
    Ok(traj)
}

/// Minimum-jerk joint-space motion from `from` to `to` over `duration`
/// seconds, zero velocity and acceleration at both ends. Yields
/// `round(duration/dt) + 1` samples including both endpoints.
pub fn min_jerk_trajectory(from: &[f64], to: &[f64], dt: f64, duration: f64) -> Result<RefTrajectory> {
    if !(dt > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidArgument("min-jerk needs dt > 0 and duration > 0".into()));
    }
    if from.len() != to.len() {
        return Err(Error::Dimension {
            expected: from.len(),
            got: to.len(),
        });
    }
    let steps = (duration / dt).round() as usize;
    let mut traj = RefTrajectory {
        dt,
        q: Vec::with_capacity(steps + 1),
        dq: Vec::with_capacity(steps + 1),
        ddq: Vec::with_capacity(steps + 1),
    };
    for t in 0..=steps {
        let s = (t as f64 / steps as f64).min(1.0);
        let pos = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let vel = 30.0 * s * s * (1.0 - s) * (1.0 - s) / duration;
        let acc = 60.0 * s * (1.0 - 3.0 * s + 2.0 * s * s) / (duration * duration);
        traj.q.push(from.iter().zip(to).map(|(a, b)| a + (b - a) * pos).collect());
        traj.dq.push(from.iter().zip(to).map(|(a, b)| (b - a) * vel).collect());
        traj.ddq.push(from.iter().zip(to).map(|(a, b)| (b - a) * acc).collect());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn pendulum() -> ArmModel {
        ArmModel {
            links: vec![Link {
                mass: 1.0,
                length: 1.0,
                com: 1.0,
                inertia: 1e-9,
            }],
            gravity: 9.81,
            viscous: vec![0.0],
            coulomb: vec![0.0],
            coulomb_eps: 1e-2,
            payload: 0.0,
            gravity_compensated: false,
        }
    }

    #[test]
    fn pendulum_gravity_torque() {
        let tau = pendulum().inverse_dynamics(&[FRAC_PI_2], &[0.0], &[0.0]).unwrap();
        assert!((tau[0] - 9.81).abs() < 1e-12);
    }

    #[test]
    fn compensated_static_arm_needs_no_torque() {
        let m = ArmModel::planar(4).frictionless();
        let tau = m.inverse_dynamics(&[0.3, -1.2, 2.0, 0.7], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(tau.iter().all(|t| t.abs() < 1e-12), "{tau:?}");
    }

    #[test]
    fn payload_gravity_is_not_compensated() {
        let mut m = ArmModel::planar(1).frictionless();
        m.payload = 0.857;
        let l = m.links[0].length;
        let tau = m.inverse_dynamics(&[FRAC_PI_2], &[0.0], &[0.0]).unwrap();
        assert!((tau[0] - 0.857 * 9.81 * l).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let m = ArmModel::planar(2);
        assert!(matches!(
            m.inverse_dynamics(&[0.0], &[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
        assert!(m.forward_dynamics(&[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_everything_is_equilibrium() {
        let mut m = ArmModel::planar(3).frictionless();
        m.gravity = 0.0;
        let ddq = m.forward_dynamics(&[0.4, 0.1, -0.3], &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(ddq.iter().all(|a| a.abs() < 1e-14));
    }

    #[test]
    fn viscous_friction_slows_positive_motion() {
        let mut with = ArmModel::planar(1).frictionless();
        with.viscous = vec![0.5];
        let without = ArmModel::planar(1).frictionless();
        let a_with = with.forward_dynamics(&[0.2], &[1.0], &[0.3]).unwrap();
        let a_without = without.forward_dynamics(&[0.2], &[1.0], &[0.3]).unwrap();
        assert!(a_with[0] < a_without[0]);
    }

    #[test]
    fn zero_dynamics_step_is_pure_integration() {
        let mut m = ArmModel::planar(2).frictionless();
        m.gravity = 0.0;
        let state = ArmState::new(vec![0.1, 0.2], vec![0.0, 0.0]);
        let mut sim = ArmSim::new(m, state, 0.01).unwrap();
        let s = sim.step(&[0.0, 0.0]).unwrap();
        assert_eq!(s.q, vec![0.1, 0.2]);
    }

    #[test]
    fn non_finite_torque_rejected() {
        let mut sim = ArmSim::new(ArmModel::planar(1), ArmState::at_rest(vec![0.0]), 0.01).unwrap();
        assert!(matches!(sim.step(&[f64::NAN]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn step_friction_acts_at_new_velocity() {
        let m = ArmModel::planar(3);
        let mut sim = ArmSim::new(m.clone(), ArmState::new(vec![0.2, -0.4, 0.3], vec![0.3, -0.01, 0.002]), 1.0 / 240.0).unwrap();
        let start = sim.state.clone();
        let tau = [0.5, -0.2, 0.1];
        let next = sim.step(&tau).unwrap().clone();
        let ddq: Vec<f64> = next.dq.iter().zip(&start.dq).map(|(a, b)| (a - b) * 240.0).collect();
        let id = m.inverse_dynamics(&start.q, &start.dq, &ddq).unwrap();
        let fr = m.friction(&next.dq);
        for i in 0..3 {
            assert!((id[i] + fr[i] - tau[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn slow_tracking_does_not_chatter() {
        let m = ArmModel::planar(3);
        let tr = sine_trajectory(&[0.5; 3], 0.01, 1.0 / 240.0, 2.0, &[0.0; 3]).unwrap();
        let mut sim = ArmSim::new(m, ArmState::new(tr.q[0].clone(), tr.dq[0].clone()), tr.dt).unwrap();
        let g = Gains::default_for(3);
        let zero = [0.0; 3];
        let mut flips = 0;
        let mut prev = sim.state.dq.clone();
        for t in 0..tr.len() - 1 {
            let tau = pd_ff_control(&tr.q[t], &tr.dq[t], &zero, &sim.state, &g).unwrap();
            let next = sim.step(&tau).unwrap().dq.clone();
            flips += next.iter().zip(&prev).filter(|(a, b)| a.signum() != b.signum() && a.abs() > 0.05).count();
            prev = next;
        }
        assert_eq!(flips, 0);
        let err = sim.state.q.iter().zip(&tr.q[tr.len() - 1]).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 0.05, "tracking error {err}");
    }

    #[test]
    fn divergence_carries_step_index() {
        let m = pendulum();
        let mut sim = ArmSim::new(m, ArmState::at_rest(vec![0.0]), 1.0).unwrap();
        let mut err = None;
        for _ in 0..2000 {
            if let Err(e) = sim.step(&[1e300]) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::Diverged { .. })));
    }

    #[test]
    fn pd_control_examples() {
        let g = Gains::uniform(2, 50.0, 0.0);
        let s = ArmState::new(vec![0.0, 0.0], vec![0.3, 0.3]);
        let tau = pd_ff_control(&[0.1, 0.1], &[0.0, 0.0], &[0.0, 0.0], &s, &g).unwrap();
        assert!((tau[0] - 5.0).abs() < 1e-12 && (tau[1] - 5.0).abs() < 1e-12);
        let on_ref = ArmState::new(vec![0.1, 0.2], vec![0.3, 0.4]);
        let tau = pd_ff_control(&[0.1, 0.2], &[0.3, 0.4], &[0.0, 0.0], &on_ref, &Gains::uniform(2, 10.0, 3.0)).unwrap();
        assert_eq!(tau, vec![0.0, 0.0]);
        let tau = pd_ff_control(&[1.0, 2.0], &[3.0, 4.0], &[0.7, -0.2], &s, &Gains::uniform(2, 0.0, 0.0)).unwrap();
        assert_eq!(tau, vec![0.7, -0.2]);
        assert!(pd_ff_control(&[1.0], &[3.0, 4.0], &[0.7, -0.2], &s, &g).is_err());
    }

    #[test]
    fn sine_trajectory_endpoints() {
        let a = [0.5, 0.25];
        let rest = [0.1, -0.2];
        let f = 0.05;
        let dt = 1.0 / 240.0;
        let tr = sine_trajectory(&a, f, dt, 10.0, &rest).unwrap();
        assert_eq!(tr.len(), 2401);
        assert_eq!(tr.q[0], rest.to_vec());
        assert!((tr.dq[0][0] - 2.0 * PI * f * 0.5).abs() < 1e-15);
        assert_eq!(tr.ddq[0], vec![0.0, 0.0]);
        // quarter period: 1/(4f) = 5 s = step 1200
        assert!((tr.q[1200][0] - (0.1 + 0.5)).abs() < 1e-12);
        assert!(sine_trajectory(&a, 0.0, dt, 1.0, &rest).is_err());
        assert!(sine_trajectory(&a, 0.1, 0.0, 1.0, &rest).is_err());
    }

    #[test]
    fn min_jerk_boundaries() {
        let tr = min_jerk_trajectory(&[0.0, 1.0], &[1.0, -1.0], 0.01, 2.0).unwrap();
        assert_eq!(tr.len(), 201);
        assert_eq!(tr.q[0], vec![0.0, 1.0]);
        assert!((tr.q[200][0] - 1.0).abs() < 1e-12 && (tr.q[200][1] + 1.0).abs() < 1e-12);
        assert!(tr.dq[0].iter().chain(&tr.dq[200]).all(|v| v.abs() < 1e-12));
        assert!((tr.q[100][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_models() {
        let mut m = ArmModel::planar(2);
        m.links[1].inertia = 0.0;
        assert!(m.validate().is_err());
        let mut m = ArmModel::planar(2);
        m.coulomb[0] = -1.0;
        assert!(m.validate().is_err());
        let m = ArmModel {
            links: vec![],
            ..ArmModel::planar(1)
        };
        assert!(m.validate().is_err());
    }
}
