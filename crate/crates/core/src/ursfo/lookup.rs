use crate::agents::{AgentError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LookupFit {
    /// One score per cell; cells without mass stay at their initial value.
    pub d: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

/// Full-batch gradient descent of a per-cell discriminator on
/// `½Σρ_E(D-b)² + ½Σρ_θ(D-a)²`, starting from zero with step `1 / max cell mass`.
/// Stops once no cell moves by more than `tol` in a step.
pub fn train_lookup_discriminator(
    rho_e: &[f64],
    rho_theta: &[f64],
    a: f64,
    b: f64,
    max_steps: usize,
    tol: f64,
) -> Result<LookupFit> {
    if rho_e.len() != rho_theta.len() {
        return Err(AgentError::Argument("occupancy tables differ in length".into()));
    }
    if rho_e.iter().chain(rho_theta).any(|&p| !(p >= 0.0)) {
        return Err(AgentError::Argument("occupancies must be nonnegative".into()));
    }
    let peak = rho_e.iter().zip(rho_theta).map(|(e, t)| e + t).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(AgentError::Argument("occupancy tables carry no mass".into()));
    }
    let lr = 1.0 / peak;
    let mut d = vec![0.0; rho_e.len()];
    for step in 1..=max_steps {
        let mut moved = 0.0f64;
        for ((x, &pe), &pt) in d.iter_mut().zip(rho_e).zip(rho_theta) {
            let g = pe * (*x - b) + pt * (*x - a);
            *x -= lr * g;
            moved = moved.max((lr * g).abs());
        }
        if moved <= tol {
            return Ok(LookupFit { d, steps: step, converged: true });
        }
    }
    Ok(LookupFit { d, steps: max_steps, converged: false })
}
