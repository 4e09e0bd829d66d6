//! Governing equations and the Euler-discretized physics block.
//!
//! Every system is advanced with the same stencil. A system of order two
//! estimates the velocity from the two most recent states by a backward
//! difference, updates that velocity with the acceleration, and then
//! advances the position with the updated velocity:
//!
//! ```text
//! v      = (z_t - z_{t-1}) / dt
//! z_next = z_t + dt * (v + dt * accel(z_t, v))
//! ```
//!
//! First-order systems reduce to `z_next = z_t + dt * f(z_t)`, and linear
//! systems of arbitrary order cascade the same update through all backward
//! differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separations below this are replaced by it in the spring force law.
pub const MIN_SEPARATION: f64 = 1e-8;

/// Apparent radii below this are replaced by it in the free-fall scale law.
const MIN_RADIUS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemKind {
    /// `z^(n) + gamma_{n-1} z^(n-1) + ... + gamma_0 z = 0`
    LinearAutonomous { order: usize },
    /// `theta'' = -zeta theta' - (g / L) sin(theta)`
    Pendulum,
    /// `h' = -k sqrt(h)`
    Torricelli,
    /// `x'' = a`
    SlidingBlock,
    /// `I' = -gamma I`
    ExponentialDecay,
    /// Apparent radius of a ball falling away from the camera,
    /// `r(t) = r0 f / (h0 + g t^2 / 2)`, written as the autonomous
    /// `r'' = 2 r'^2 / r - g r^2 / (r0 f)`.
    FreeFallScale,
    /// Two unit masses coupled by `F_ij = -k (p_i - p_j) - l (p_i - p_j) / |p_i - p_j|`.
    TwoBodySpring,
}

impl SystemKind {
    pub fn order(&self) -> usize {
        match self {
            SystemKind::LinearAutonomous { order } => *order,
            SystemKind::Torricelli | SystemKind::ExponentialDecay => 1,
            SystemKind::Pendulum
            | SystemKind::SlidingBlock
            | SystemKind::FreeFallScale
            | SystemKind::TwoBodySpring => 2,
        }
    }

    fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            SystemKind::LinearAutonomous { order } => {
                return (0..*order).map(|i| format!("gamma{i}")).collect();
            }
            SystemKind::Pendulum => &["zeta", "L", "g"],
            SystemKind::Torricelli => &["k"],
            SystemKind::SlidingBlock => &["a"],
            SystemKind::ExponentialDecay => &["gamma"],
            SystemKind::FreeFallScale => &["g", "r0", "f", "h0"],
            SystemKind::TwoBodySpring => &["k", "l"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub unit: String,
    /// Whether the trainer optimizes this parameter.
    pub learnable: bool,
}

impl Param {
    pub fn new(name: &str, value: f64, unit: &str, learnable: bool) -> Self {
        Param {
            name: name.to_string(),
            value,
            unit: unit.to_string(),
            learnable,
        }
    }
}

/// A governing equation together with its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSystem {
    kind: SystemKind,
    params: Vec<Param>,
    latent_dim: usize,
}

impl OdeSystem {
    pub fn new(kind: SystemKind, params: Vec<Param>, latent_dim: usize) -> Result<Self> {
        if kind.order() == 0 {
            return Err(Error::InvalidSystem("order must be at least 1".into()));
        }
        if latent_dim == 0 {
            return Err(Error::InvalidSystem("latent dimension must be at least 1".into()));
        }
        if kind == SystemKind::TwoBodySpring && latent_dim != 4 {
            return Err(Error::InvalidSystem(format!(
                "two-body spring needs latent dimension 4, got {latent_dim}"
            )));
        }
        let expected = kind.param_names();
        let actual: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        if expected.len() != actual.len() || expected.iter().zip(&actual).any(|(e, a)| e != a) {
            return Err(Error::InvalidSystem(format!(
                "{kind:?} expects parameters {expected:?}, got {actual:?}"
            )));
        }
        if params.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::NonFinite("system parameters"));
        }
        Ok(OdeSystem {
            kind,
            params,
            latent_dim,
        })
    }

    /// Linear autonomous system of order `gammas.len()`, all coefficients learnable.
    pub fn linear(gammas: &[f64], latent_dim: usize) -> Result<Self> {
        let params = gammas
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let unit = match gammas.len() - i {
                    1 => "1/s".to_string(),
                    p => format!("1/s^{p}"),
                };
                Param::new(&format!("gamma{i}"), g, &unit, true)
            })
            .collect();
        Self::new(
            SystemKind::LinearAutonomous {
                order: gammas.len(),
            },
            params,
            latent_dim,
        )
    }

    /// The damped oscillator `z'' + gamma1 z' + gamma0 z = 0` on a scalar state.
    pub fn oscillator(gamma0: f64, gamma1: f64) -> Self {
        Self::linear(&[gamma0, gamma1], 1).expect("oscillator parameters are valid")
    }

    /// Damping and length are learnable, gravity is fixed.
    pub fn pendulum(zeta: f64, length: f64, g: f64) -> Self {
        let params = vec![
            Param::new("zeta", zeta, "1/s", true),
            Param::new("L", length, "m", true),
            Param::new("g", g, "m/s^2", false),
        ];
        Self::new(SystemKind::Pendulum, params, 1).expect("pendulum parameters are valid")
    }

    pub fn torricelli(k: f64) -> Self {
        let params = vec![Param::new("k", k, "sqrt(m)/s", true)];
        Self::new(SystemKind::Torricelli, params, 1).expect("torricelli parameters are valid")
    }

    pub fn sliding_block(a: f64) -> Self {
        let params = vec![Param::new("a", a, "m/s^2", true)];
        Self::new(SystemKind::SlidingBlock, params, 1).expect("sliding parameters are valid")
    }

    pub fn exponential_decay(gamma: f64) -> Self {
        let params = vec![Param::new("gamma", gamma, "1/s", true)];
        Self::new(SystemKind::ExponentialDecay, params, 1).expect("decay parameters are valid")
    }

    /// Only gravity is learnable; radius, focal length and drop height are measured.
    pub fn free_fall_scale(g: f64, r0: f64, f: f64, h0: f64) -> Self {
        let params = vec![
            Param::new("g", g, "m/s^2", true),
            Param::new("r0", r0, "m", false),
            Param::new("f", f, "px/m", false),
            Param::new("h0", h0, "m", false),
        ];
        Self::new(SystemKind::FreeFallScale, params, 1).expect("free-fall parameters are valid")
    }

    /// The spring constant is learnable, the equilibrium distance is fixed.
    pub fn two_body_spring(k: f64, l: f64) -> Self {
        let params = vec![
            Param::new("k", k, "1/s^2", true),
            Param::new("l", l, "1/s^2", false),
        ];
        Self::new(SystemKind::TwoBodySpring, params, 4).expect("spring parameters are valid")
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.kind.order()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        p.value = value;
        Ok(())
    }

    pub fn set_learnable(&mut self, name: &str, learnable: bool) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        p.learnable = learnable;
        Ok(())
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Values of the learnable parameters, in declaration order.
    pub fn gammas(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.value)
            .collect()
    }

    pub fn set_gammas(&mut self, values: &[f64]) -> Result<()> {
        let n = self.params.iter().filter(|p| p.learnable).count();
        if n != values.len() {
            return Err(Error::DimensionMismatch {
                context: "learnable parameters",
                expected: n,
                actual: values.len(),
            });
        }
        for (p, &v) in self.params.iter_mut().filter(|p| p.learnable).zip(values) {
            p.value = v;
        }
        Ok(())
    }

    fn value(&self, index: usize) -> f64 {
        self.params[index].value
    }
}

/// The `order` most recent latent states, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHistory {
    states: Vec<Vec<f64>>,
    dt: f64,
}

impl LatentHistory {
    pub fn new(states: Vec<Vec<f64>>, dt: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("history needs at least one state".into()));
        }
        let d = states[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("latent states must be non-empty".into()));
        }
        if let Some(bad) = states.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "history state",
                expected: d,
                actual: bad.len(),
            });
        }
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::InvalidArgument(format!("dt must be finite and non-negative, got {dt}")));
        }
        Ok(LatentHistory { states, dt })
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Drops the oldest state and pushes `next` as the newest.
    pub fn advance(&mut self, next: Vec<f64>) {
        self.states.pop();
        self.states.insert(0, next);
    }
}

/// One physics-block prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    /// Number of elements whose state was clamped to the system's domain.
    pub clamped: usize,
}

/// A prediction with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct StepJacobian {
    pub next: Vec<f64>,
    /// `wrt_history[j]` is the `d x d` row-major matrix `d next_a / d state_j[b]`.
    pub wrt_history: Vec<Vec<f64>>,
    /// `d x p` row-major, `d next_a / d gamma_c` over the learnable parameters.
    pub wrt_gammas: Vec<f64>,
    pub clamped: usize,
}

/// Backward-difference Euler step of the damped oscillator, applied elementwise.
pub fn euler_step_second_order(
    z_t: &[f64],
    z_tm1: &[f64],
    gamma0: f64,
    gamma1: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if z_t.len() != z_tm1.len() {
        return Err(Error::DimensionMismatch {
            context: "euler_step_second_order",
            expected: z_t.len(),
            actual: z_tm1.len(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !all_finite(z_t) || !all_finite(z_tm1) || !gamma0.is_finite() || !gamma1.is_finite() {
        return Err(Error::NonFinite("euler_step_second_order input"));
    }
    Ok(z_t
        .iter()
        .zip(z_tm1)
        .map(|(&z, &zp)| {
            let v = (z - zp) / dt;
            z + dt * (v - dt * (gamma1 * v + gamma0 * z))
        })
        .collect())
}

pub fn euler_step_general(history: &LatentHistory, system: &OdeSystem) -> Result<Step> {
    let jac = step_impl(history, system, false)?;
    Ok(Step {
        next: jac.next,
        clamped: jac.clamped,
    })
}

/// Physics step plus its exact derivatives with respect to every history
/// entry and every learnable parameter.
pub fn euler_step_jacobian(history: &LatentHistory, system: &OdeSystem) -> Result<StepJacobian> {
    step_impl(history, system, true)
}

/// A rolled-out latent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub clamped: usize,
}

/// Iterates the physics block, feeding each prediction back as the newest state.
pub fn rollout(history: &LatentHistory, system: &OdeSystem, steps: usize) -> Result<Rollout> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let mut h = history.clone();
    let mut states = Vec::with_capacity(steps);
    let mut clamped = 0;
    for _ in 0..steps {
        let step = euler_step_general(&h, system)?;
        clamped += step.clamped;
        states.push(step.next.clone());
        h.advance(step.next);
    }
    Ok(Rollout { states, clamped })
}

/// `A e^{-zeta t} cos(omega t + phi)`
pub fn closed_form_oscillator(amplitude: f64, zeta: f64, omega: f64, phi: f64, t: f64) -> f64 {
    amplitude * (-zeta * t).exp() * (omega * t + phi).cos()
}

/// Time derivative of [`closed_form_oscillator`].
pub fn closed_form_oscillator_velocity(amplitude: f64, zeta: f64, omega: f64, phi: f64, t: f64) -> f64 {
    let arg = omega * t + phi;
    amplitude * (-zeta * t).exp() * (-zeta * arg.cos() - omega * arg.sin())
}

/// Maps oscillation frequency and damping to `(gamma0, gamma1)`.
pub fn gamma_from_physical(omega: f64, zeta: f64) -> (f64, f64) {
    (omega * omega + zeta * zeta, 2.0 * zeta)
}

/// Continuous-time right-hand side, used by the reference simulator.
///
/// `state` is `[z, z', ..., z^(n-1)]` flattened element-major blocks:
/// `state[k * d + a]` is the k-th derivative of element `a`. Returns the
/// time derivative of `state` in the same layout.
pub(crate) fn continuous_rhs(system: &OdeSystem, state: &[f64]) -> Vec<f64> {
    let d = system.latent_dim();
    let n = system.order();
    debug_assert_eq!(state.len(), n * d);
    let mut out = vec![0.0; n * d];
    // Lower derivatives shift down.
    out[..(n - 1) * d].copy_from_slice(&state[d..]);
    let top = &mut out[(n - 1) * d..];
    match system.kind() {
        SystemKind::LinearAutonomous { order } => {
            for (a, slot) in top.iter_mut().enumerate() {
                *slot = -(0..order).map(|k| system.value(k) * state[k * d + a]).sum::<f64>();
            }
        }
        SystemKind::Torricelli => {
            let k = system.value(0);
            for (slot, &h) in top.iter_mut().zip(state) {
                *slot = -k * h.max(0.0).sqrt();
            }
        }
        SystemKind::ExponentialDecay => {
            let g = system.value(0);
            for (slot, &z) in top.iter_mut().zip(state) {
                *slot = -g * z;
            }
        }
        SystemKind::Pendulum | SystemKind::SlidingBlock | SystemKind::FreeFallScale => {
            for a in 0..d {
                top[a] = scalar_accel(system, state[a], state[d + a]).value;
            }
        }
        SystemKind::TwoBodySpring => {
            let acc = spring_accel(system, &state[..4]);
            top.copy_from_slice(&acc.value);
        }
    }
    out
}

struct Accel {
    value: f64,
    d_z: f64,
    d_v: f64,
    /// Derivative with respect to each system parameter (all of them).
    d_params: Vec<f64>,
}

fn scalar_accel(system: &OdeSystem, z: f64, v: f64) -> Accel {
    match system.kind() {
        SystemKind::Pendulum => {
            let (zeta, len, g) = (system.value(0), system.value(1), system.value(2));
            let (s, c) = z.sin_cos();
            Accel {
                value: -zeta * v - (g / len) * s,
                d_z: -(g / len) * c,
                d_v: -zeta,
                d_params: vec![-v, g * s / (len * len), -s / len],
            }
        }
        SystemKind::SlidingBlock => Accel {
            value: system.value(0),
            d_z: 0.0,
            d_v: 0.0,
            d_params: vec![1.0],
        },
        SystemKind::FreeFallScale => {
            let (g, r0, f) = (system.value(0), system.value(1), system.value(2));
            let r = if z.abs() < MIN_RADIUS {
                MIN_RADIUS.copysign(z)
            } else {
                z
            };
            let scale = r0 * f;
            let (d_z_inertia, d_z_grav) = if z.abs() < MIN_RADIUS {
                (0.0, 0.0)
            } else {
                (-2.0 * v * v / (r * r), -2.0 * g * r / scale)
            };
            Accel {
                value: 2.0 * v * v / r - g * r * r / scale,
                d_z: d_z_inertia + d_z_grav,
                d_v: 4.0 * v / r,
                d_params: vec![
                    -r * r / scale,
                    g * r * r / (r0 * scale),
                    g * r * r / (f * scale),
                    0.0,
                ],
            }
        }
        _ => unreachable!("scalar_accel only covers nonlinear second-order kinds"),
    }
}

struct SpringAccel {
    value: [f64; 4],
    /// 4x4 row-major `d accel / d position`.
    d_pos: [f64; 16],
    /// `d accel / d k` and `d accel / d l`.
    d_params: [[f64; 4]; 2],
}

fn spring_accel(system: &OdeSystem, p: &[f64]) -> SpringAccel {
    let (k, l) = (system.value(0), system.value(1));
    let delta = [p[0] - p[2], p[1] - p[3]];
    let norm = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    let singular = norm < MIN_SEPARATION;
    let r = if singular { MIN_SEPARATION } else { norm };
    let dir = [delta[0] / r, delta[1] / r];
    let f12 = [-k * delta[0] - l * dir[0], -k * delta[1] - l * dir[1]];

    // d f12 / d delta
    let mut jf = [[0.0; 2]; 2];
    for (i, row) in jf.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            let eye = if i == j { 1.0 } else { 0.0 };
            let d_dir = if singular {
                eye / r
            } else {
                eye / r - delta[i] * delta[j] / (r * r * r)
            };
            *slot = -k * eye - l * d_dir;
        }
    }
    let mut d_pos = [0.0; 16];
    for i in 0..2 {
        for j in 0..2 {
            // a1 = f12, a2 = -f12; delta = p1 - p2
            d_pos[i * 4 + j] = jf[i][j];
            d_pos[i * 4 + 2 + j] = -jf[i][j];
            d_pos[(2 + i) * 4 + j] = -jf[i][j];
            d_pos[(2 + i) * 4 + 2 + j] = jf[i][j];
        }
    }
    SpringAccel {
        value: [f12[0], f12[1], -f12[0], -f12[1]],
        d_pos,
        d_params: [
            [-delta[0], -delta[1], delta[0], delta[1]],
            [-dir[0], -dir[1], dir[0], dir[1]],
        ],
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn step_impl(history: &LatentHistory, system: &OdeSystem, with_jacobian: bool) -> Result<StepJacobian> {
    let n = system.order();
    let d = system.latent_dim();
    if history.len() != n {
        return Err(Error::DimensionMismatch {
            context: "history length vs system order",
            expected: n,
            actual: history.len(),
        });
    }
    if history.states()[0].len() != d {
        return Err(Error::DimensionMismatch {
            context: "latent state vs system latent_dim",
            expected: d,
            actual: history.states()[0].len(),
        });
    }
    if !history.states().iter().all(|s| all_finite(s)) {
        return Err(Error::NonFinite("physics block history"));
    }
    let dt = history.dt();
    if n >= 2 && dt <= 0.0 {
        return Err(Error::InvalidArgument("dt must be positive for systems of order >= 2".into()));
    }

    let learnable: Vec<usize> = system
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.learnable)
        .map(|(i, _)| i)
        .collect();
    let p = learnable.len();
    let mut out = StepJacobian {
        next: vec![0.0; d],
        wrt_history: if with_jacobian { vec![vec![0.0; d * d]; n] } else { Vec::new() },
        wrt_gammas: if with_jacobian { vec![0.0; d * p] } else { Vec::new() },
        clamped: 0,
    };
    let states = history.states();

    match system.kind() {
        SystemKind::LinearAutonomous { order } => {
            linear_step(system, states, dt, order, &learnable, with_jacobian, &mut out);
        }
        SystemKind::Torricelli | SystemKind::ExponentialDecay => {
            for a in 0..d {
                let z = states[0][a];
                let (f, f_z, f_params) = match system.kind() {
                    SystemKind::Torricelli => {
                        let k = system.value(0);
                        if z < 0.0 {
                            out.clamped += 1;
                        }
                        let h = z.max(0.0);
                        let root = h.sqrt();
                        let f_z = if h > 0.0 { -k / (2.0 * root) } else { 0.0 };
                        (-k * root, f_z, vec![-root])
                    }
                    _ => {
                        let g = system.value(0);
                        (-g * z, -g, vec![-z])
                    }
                };
                out.next[a] = z + dt * f;
                if with_jacobian {
                    out.wrt_history[0][a * d + a] = 1.0 + dt * f_z;
                    for (c, &pi) in learnable.iter().enumerate() {
                        out.wrt_gammas[a * p + c] = dt * f_params[pi];
                    }
                }
            }
        }
        SystemKind::Pendulum | SystemKind::SlidingBlock | SystemKind::FreeFallScale => {
            for a in 0..d {
                let z = states[0][a];
                let v = (z - states[1][a]) / dt;
                let acc = scalar_accel(system, z, v);
                out.next[a] = z + dt * (v + dt * acc.value);
                if with_jacobian {
                    out.wrt_history[0][a * d + a] = 2.0 + dt * dt * acc.d_z + dt * acc.d_v;
                    out.wrt_history[1][a * d + a] = -1.0 - dt * acc.d_v;
                    for (c, &pi) in learnable.iter().enumerate() {
                        out.wrt_gammas[a * p + c] = dt * dt * acc.d_params[pi];
                    }
                }
            }
        }
        SystemKind::TwoBodySpring => {
            let acc = spring_accel(system, &states[0]);
            for a in 0..4 {
                let z = states[0][a];
                let v = (z - states[1][a]) / dt;
                out.next[a] = z + dt * (v + dt * acc.value[a]);
            }
            if with_jacobian {
                for a in 0..4 {
                    for b in 0..4 {
                        let eye = if a == b { 1.0 } else { 0.0 };
                        out.wrt_history[0][a * 4 + b] = 2.0 * eye + dt * dt * acc.d_pos[a * 4 + b];
                        out.wrt_history[1][a * 4 + b] = -eye;
                    }
                    for (c, &pi) in learnable.iter().enumerate() {
                        out.wrt_gammas[a * p + c] = dt * dt * acc.d_params[pi][a];
                    }
                }
            }
        }
    }

    if !all_finite(&out.next) {
        return Err(Error::NonFinite("physics block output"));
    }
    Ok(out)
}

/// Backward differences up to order `n - 1`, the top derivative from the
/// linear law, then a cascade from the top derivative down to the state.
fn linear_step(
    system: &OdeSystem,
    states: &[Vec<f64>],
    dt: f64,
    order: usize,
    learnable: &[usize],
    with_jacobian: bool,
    out: &mut StepJacobian,
) {
    let d = out.next.len();
    let p = learnable.len();
    let mut diffs = vec![0.0; order];
    for a in 0..d {
        // diff table over the history, newest first
        let mut column: Vec<f64> = states.iter().map(|s| s[a]).collect();
        for (k, slot) in diffs.iter_mut().enumerate() {
            *slot = column[0];
            if k + 1 < order {
                column = column.windows(2).map(|w| (w[0] - w[1]) / dt).collect();
            }
        }
        let mut weighted = system.value(0) * diffs[0];
        for (k, &dk) in diffs.iter().enumerate().skip(1) {
            weighted += system.value(k) * dk;
        }
        let accel = -weighted;
        let mut carried = accel;
        for &dk in diffs.iter().rev() {
            carried = dk + dt * carried;
        }
        out.next[a] = carried;

        if with_jacobian {
            let dt_n = dt.powi(order as i32);
            // d next / d gamma_k = -dt^n D_k
            for (c, &pi) in learnable.iter().enumerate() {
                out.wrt_gammas[a * p + c] = -dt_n * diffs[pi];
            }
            // d next / d z_{t-j} = sum_{k>=j} (1 - dt^{n-k} gamma_k) (-1)^j C(k, j)
            for j in 0..order {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let total: f64 = (j..order)
                    .map(|k| {
                        let coeff = 1.0 - dt.powi((order - k) as i32) * system.value(k);
                        coeff * sign * binomial(k, j)
                    })
                    .sum();
                out.wrt_history[j][a * d + a] = total;
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hist(states: Vec<Vec<f64>>, dt: f64) -> LatentHistory {
        LatentHistory::new(states, dt).unwrap()
    }

    #[test]
    fn second_order_hand_values() {
        assert_eq!(euler_step_second_order(&[1.0], &[1.0], 4.0, 0.0, 0.1).unwrap()[0], 0.96);
        assert_eq!(euler_step_second_order(&[0.0], &[0.0], 3.3, -2.0, 0.1).unwrap()[0], 0.0);
        let next = euler_step_second_order(&[1.0], &[0.9], 0.0, 0.0, 0.1).unwrap()[0];
        assert_abs_diff_eq!(next, 1.1, epsilon = 1e-12);
    }

    #[test]
    fn second_order_rejects_bad_input() {
        assert!(matches!(
            euler_step_second_order(&[f64::NAN], &[0.0], 1.0, 0.0, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(euler_step_second_order(&[1.0], &[1.0], 1.0, 0.0, 0.0).is_err());
        assert!(euler_step_second_order(&[1.0, 2.0], &[1.0], 1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn general_matches_second_order_bitwise() {
        let sys = OdeSystem::oscillator(4.0016, 0.08);
        for &(z, zp) in &[(0.3, -0.7), (1.234567, 1.2), (-5.0, 3.25), (1e-3, -2e-4)] {
            let a = euler_step_second_order(&[z], &[zp], 4.0016, 0.08, 0.07).unwrap();
            let b = euler_step_general(&hist(vec![vec![z], vec![zp]], 0.07), &sys).unwrap();
            assert_eq!(a[0].to_bits(), b.next[0].to_bits());
        }
    }

    #[test]
    fn torricelli_drains() {
        let step = euler_step_general(&hist(vec![vec![1.0]], 0.1), &OdeSystem::torricelli(0.01)).unwrap();
        assert_abs_diff_eq!(step.next[0], 0.999, epsilon = 1e-15);
        assert_eq!(step.clamped, 0);
    }

    #[test]
    fn torricelli_clamps_negative_heights() {
        let step = euler_step_general(&hist(vec![vec![-0.5]], 0.1), &OdeSystem::torricelli(0.01)).unwrap();
        assert_eq!(step.next[0], -0.5);
        assert_eq!(step.clamped, 1);
    }

    #[test]
    fn zero_step_is_identity() {
        let step =
            euler_step_general(&hist(vec![vec![1.0]], 0.0), &OdeSystem::exponential_decay(2.3)).unwrap();
        assert_eq!(step.next[0], 1.0);
    }

    #[test]
    fn fixed_points_hold_for_all_kinds() {
        let cases: Vec<(OdeSystem, Vec<f64>)> = vec![
            (OdeSystem::oscillator(4.0, 0.1), vec![0.0]),
            (OdeSystem::linear(&[1.0, 2.0, 3.0], 2).unwrap(), vec![0.0, 0.0]),
            (OdeSystem::pendulum(0.3, 1.2, 9.81), vec![0.0]),
            (OdeSystem::torricelli(0.02), vec![0.0]),
            (OdeSystem::sliding_block(0.0), vec![0.7]),
            (OdeSystem::exponential_decay(1.5), vec![0.0]),
            (OdeSystem::free_fall_scale(0.0, 0.03, 1451.0, 0.2), vec![0.5]),
            (OdeSystem::two_body_spring(2.0, 0.0), vec![0.1, -0.2, 0.1, -0.2]),
        ];
        for (sys, z) in cases {
            let states = vec![z.clone(); sys.order()];
            let step = euler_step_general(&hist(states, 0.05), &sys).unwrap();
            assert_eq!(step.next, z, "{:?}", sys.kind());
        }
    }

    #[test]
    fn pendulum_equilibrium() {
        let step = euler_step_general(&hist(vec![vec![0.0], vec![0.0]], 0.1), &OdeSystem::pendulum(0.1, 1.0, 9.81))
            .unwrap();
        assert_eq!(step.next, vec![0.0]);
    }

    #[test]
    fn constant_rollout() {
        let r = rollout(&hist(vec![vec![1.0], vec![1.0]], 0.1), &OdeSystem::oscillator(0.0, 0.0), 5).unwrap();
        assert_eq!(r.states, vec![vec![1.0]; 5]);
        assert!(rollout(&hist(vec![vec![1.0], vec![1.0]], 0.1), &OdeSystem::oscillator(0.0, 0.0), 0).is_err());
    }

    #[test]
    fn exponential_rollout_reaches_inverse_e() {
        let r = rollout(&hist(vec![vec![1.0]], 0.001), &OdeSystem::exponential_decay(1.0), 1000).unwrap();
        assert!((r.states[999][0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn oscillator_rollout_tracks_closed_form() {
        let (g0, g1) = gamma_from_physical(2.0, 0.04);
        let dt = 0.01;
        let cf = |t: f64| closed_form_oscillator(1.0, 0.04, 2.0, 0.0, t);
        let h = hist(vec![vec![cf(dt)], vec![cf(0.0)]], dt);
        let steps = 999;
        let r = rollout(&h, &OdeSystem::oscillator(g0, g1), steps).unwrap();
        let max_err = r
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s[0] - cf((i + 2) as f64 * dt)).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.05, "max err {max_err}");
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(closed_form_oscillator(1.0, 0.0, 2.0, 0.0, 0.0), 1.0);
        let expected = (-0.04 * std::f64::consts::PI).exp();
        assert_abs_diff_eq!(
            closed_form_oscillator(1.0, 0.04, 2.0, 0.0, std::f64::consts::PI),
            expected,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(expected, 0.8819, epsilon = 1e-4);
        assert_eq!(closed_form_oscillator(0.0, 0.3, 1.0, 0.2, 7.0), 0.0);
    }

    #[test]
    fn gamma_mapping() {
        let (g0, g1) = gamma_from_physical(2.0, 0.04);
        assert_abs_diff_eq!(g0, 4.0016, epsilon = 1e-12);
        assert_abs_diff_eq!(g1, 0.08, epsilon = 1e-12);
        assert_eq!(gamma_from_physical(1.0, 0.0), (1.0, 0.0));
        assert_eq!(gamma_from_physical(0.0, 1.0), (1.0, 2.0));
    }

    #[test]
    fn invalid_systems_rejected() {
        assert!(OdeSystem::new(SystemKind::TwoBodySpring, OdeSystem::two_body_spring(1.0, 0.0).params().to_vec(), 2)
            .is_err());
        assert!(OdeSystem::new(SystemKind::Torricelli, vec![], 1).is_err());
        assert!(OdeSystem::linear(&[], 1).is_err());
        assert!(OdeSystem::linear(&[1.0], 0).is_err());
    }

    #[test]
    fn history_length_must_match_order() {
        let err = euler_step_general(&hist(vec![vec![1.0]], 0.1), &OdeSystem::oscillator(1.0, 0.0));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    fn fd_check(sys: &OdeSystem, states: Vec<Vec<f64>>, dt: f64) {
        let h = hist(states.clone(), dt);
        let jac = euler_step_jacobian(&h, sys).unwrap();
        let d = sys.latent_dim();
        let eps = 1e-6;
        for j in 0..states.len() {
            for b in 0..d {
                let mut plus = states.clone();
                let mut minus = states.clone();
                plus[j][b] += eps;
                minus[j][b] -= eps;
                let fp = euler_step_general(&hist(plus, dt), sys).unwrap().next;
                let fm = euler_step_general(&hist(minus, dt), sys).unwrap().next;
                for a in 0..d {
                    let fd = (fp[a] - fm[a]) / (2.0 * eps);
                    let an = jac.wrt_history[j][a * d + b];
                    assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{:?} hist[{j}][{b}] -> {a}: {fd} vs {an}", sys.kind());
                }
            }
        }
        let gammas = sys.gammas();
        for c in 0..gammas.len() {
            let mut sp = sys.clone();
            let mut sm = sys.clone();
            let mut gp = gammas.clone();
            let mut gm = gammas.clone();
            gp[c] += eps;
            gm[c] -= eps;
            sp.set_gammas(&gp).unwrap();
            sm.set_gammas(&gm).unwrap();
            let fp = euler_step_general(&h, &sp).unwrap().next;
            let fm = euler_step_general(&h, &sm).unwrap().next;
            for a in 0..d {
                let fd = (fp[a] - fm[a]) / (2.0 * eps);
                let an = jac.wrt_gammas[a * gammas.len() + c];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{:?} gamma[{c}] -> {a}: {fd} vs {an}", sys.kind());
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        fd_check(&OdeSystem::oscillator(4.0016, 0.08), vec![vec![0.3], vec![0.1]], 0.2);
        fd_check(&OdeSystem::linear(&[1.5, -0.7, 2.0], 2).unwrap(), vec![vec![0.3, 1.0], vec![0.1, 0.8], vec![-0.2, 0.5]], 0.1);
        fd_check(&OdeSystem::linear(&[0.9], 1).unwrap(), vec![vec![0.4]], 0.3);
        let mut pend = OdeSystem::pendulum(0.3, 1.2, 9.81);
        pend.set_learnable("g", true).unwrap();
        fd_check(&pend, vec![vec![0.5], vec![0.45]], 0.05);
        fd_check(&OdeSystem::torricelli(0.02), vec![vec![0.7]], 0.1);
        fd_check(&OdeSystem::exponential_decay(0.9), vec![vec![0.7]], 0.1);
        fd_check(&OdeSystem::sliding_block(1.4), vec![vec![0.7], vec![0.6]], 0.1);
        let mut ff = OdeSystem::free_fall_scale(9.8, 0.0335, 1451.0, 0.2);
        for name in ["r0", "f", "h0"] {
            ff.set_learnable(name, true).unwrap();
        }
        fd_check(&ff, vec![vec![240.0], vec![242.0]], 1.0 / 30.0);
        let mut spring = OdeSystem::two_body_spring(2.0, 0.3);
        spring.set_learnable("l", true).unwrap();
        fd_check(&spring, vec![vec![0.4, -0.1, -0.3, 0.25], vec![0.38, -0.12, -0.28, 0.27]], 0.05);
    }

    #[test]
    fn spring_handles_coincident_positions() {
        let step = euler_step_general(
            &hist(vec![vec![0.1, 0.1, 0.1, 0.1], vec![0.1, 0.1, 0.1, 0.1]], 0.05),
            &OdeSystem::two_body_spring(2.0, 0.5),
        )
        .unwrap();
        assert!(step.next.iter().all(|v| v.is_finite()));
    }
}
