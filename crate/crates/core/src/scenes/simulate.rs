use crate::error::{Error, Result};
use crate::ode::{continuous_rhs, OdeSystem};

/// Reference sub-steps per sampling period.
pub const SUBSTEPS: usize = 100;

/// Integrates `system` from `init` and samples the state every `dt`.
///
/// `init` holds the state followed by its time derivatives up to order
/// `n - 1`, each a block of `d` values. The result has `frames` rows of `d`
/// values each; row 0 is the initial state. Each period is covered by
/// [`SUBSTEPS`] Heun steps.
pub fn simulate_trajectory(system: &OdeSystem, init: &[f64], dt: f64, frames: usize) -> Result<Vec<Vec<f64>>> {
    let d = system.latent_dim();
    let n = system.order();
    if init.len() != n * d {
        return Err(Error::DimensionMismatch {
            context: "simulation initial state",
            expected: n * d,
            actual: init.len(),
        });
    }
    if frames < n {
        return Err(Error::InvalidArgument(format!(
            "need at least {n} frames for an order-{n} system, got {frames}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let h = dt / SUBSTEPS as f64;
    let mut state = init.to_vec();
    let mut out = Vec::with_capacity(frames);
    out.push(state[..d].to_vec());
    for _ in 1..frames {
        for _ in 0..SUBSTEPS {
            let k1 = continuous_rhs(system, &state);
            let predictor: Vec<f64> = state.iter().zip(&k1).map(|(s, k)| s + h * k).collect();
            let k2 = continuous_rhs(system, &predictor);
            for ((s, a), b) in state.iter_mut().zip(&k1).zip(&k2) {
                *s += 0.5 * h * (a + b);
            }
        }
        if state.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("reference simulation"));
        }
        out.push(state[..d].to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{closed_form_oscillator, closed_form_oscillator_velocity, gamma_from_physical};

    #[test]
    fn oscillator_matches_closed_form() {
        let (g0, g1) = gamma_from_physical(2.0, 0.04);
        let sys = OdeSystem::oscillator(g0, g1);
        let phi = 0.7;
        let init = [
            closed_form_oscillator(1.0, 0.04, 2.0, phi, 0.0),
            closed_form_oscillator_velocity(1.0, 0.04, 2.0, phi, 0.0),
        ];
        let traj = simulate_trajectory(&sys, &init, 0.1, 101).unwrap();
        for (i, z) in traj.iter().enumerate() {
            let t = i as f64 * 0.1;
            assert!((z[0] - closed_form_oscillator(1.0, 0.04, 2.0, phi, t)).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_decay_is_constant() {
        let traj = simulate_trajectory(&OdeSystem::exponential_decay(0.0), &[0.8], 0.1, 10).unwrap();
        assert!(traj.iter().all(|z| z[0] == 0.8));
    }

    #[test]
    fn small_angle_pendulum_is_linear() {
        let (g, len) = (9.81, 1.0);
        let sys = OdeSystem::pendulum(0.0, len, g);
        let omega = (g / len).sqrt();
        let period = 2.0 * std::f64::consts::PI / omega;
        let frames = 41;
        let dt = period / (frames - 1) as f64;
        let traj = simulate_trajectory(&sys, &[0.05, 0.0], dt, frames).unwrap();
        for (i, z) in traj.iter().enumerate() {
            let lin = 0.05 * (omega * i as f64 * dt).cos();
            assert!((z[0] - lin).abs() < 0.02 * 0.05, "frame {i}: {} vs {lin}", z[0]);
        }
    }

    #[test]
    fn too_few_frames_rejected() {
        assert!(simulate_trajectory(&OdeSystem::oscillator(1.0, 0.0), &[1.0, 0.0], 0.1, 1).is_err());
        assert!(simulate_trajectory(&OdeSystem::oscillator(1.0, 0.0), &[1.0], 0.1, 5).is_err());
    }
}
