//! Adaptive-moment descent with backtracking on a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate steps shorter than this fraction of the Adam step freeze the run.
pub const MIN_STEP_FRACTION: f64 = 1e-12;
const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_iterations: usize,
    /// Stop once the relative loss change of an accepted step is below this.
    pub convergence_tol: f64,
    pub backtrack_factor: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            max_iterations: 500,
            convergence_tol: 1e-7,
            backtrack_factor: 0.5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }
}

/// Moment estimates for one parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
    beta1: f64,
    beta2: f64,
    step_size: f64,
}

impl Adam {
    pub fn new(len: usize, config: &OptimizerConfig) -> Self {
        Adam {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            step_size: config.step_size,
        }
    }

    /// No step taken since construction or the last reset.
    pub fn is_fresh(&self) -> bool {
        self.steps <= 1
    }

    /// Folds in `gradient` and returns the update to add to the parameters.
    pub fn step(&mut self, gradient: &[f64]) -> Vec<f64> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        self.first
            .iter_mut()
            .zip(self.second.iter_mut())
            .zip(gradient)
            .map(|((m, v), &g)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.step_size * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON)
            })
            .collect()
    }
}

/// Loss and gradient at a point, plus whatever the caller wants to keep
/// about it (posed geometry, loss breakdown).
#[derive(Clone, Debug)]
pub struct Evaluation<X> {
    pub loss: f64,
    /// Value compared against the current loss when this point is a line
    /// search candidate; `loss` when absent.
    pub trial_loss: Option<f64>,
    pub gradient: Vec<f64>,
    pub extra: X,
}

#[derive(Clone, Debug)]
pub struct Descent<X> {
    pub params: Vec<f64>,
    pub last: Evaluation<X>,
    /// Loss after each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Backtracking shrank the step below [`MIN_STEP_FRACTION`].
    pub frozen: bool,
    pub rejected_steps: usize,
}

/// Each iteration takes one Adam step, halving it (by `backtrack_factor`)
/// until the candidate evaluates, does not increase the loss and passes
/// `admissible`. When no fraction works the moments are reset once before
/// the run is declared frozen. `evaluate` receives the iteration index (0 for the start
/// point); its errors on candidates count as rejections.
pub fn descend<X>(
    start: Vec<f64>,
    config: &OptimizerConfig,
    mut evaluate: impl FnMut(&[f64], usize) -> Result<Evaluation<X>>,
    mut admissible: impl FnMut(&[f64], &Evaluation<X>) -> bool,
    mut project: impl FnMut(&mut [f64]),
) -> Result<Descent<X>> {
    config.validate()?;
    let mut params = start;
    let mut current = evaluate(&params, 0)?;
    let mut adam = Adam::new(params.len(), config);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut frozen = false;
    let mut rejected_steps = 0;
    if current.loss == 0.0 {
        converged = true;
    }
    for iteration in 1..=config.max_iterations {
        if converged {
            break;
        }
        let update = adam.step(&current.gradient);
        let mut fraction = 1.0;
        let accepted = loop {
            let mut candidate: Vec<f64> = params
                .iter()
                .zip(&update)
                .map(|(p, u)| p + fraction * u)
                .collect();
            project(&mut candidate);
            if let Ok(eval) = evaluate(&candidate, iteration) {
                let trial = eval.trial_loss.unwrap_or(eval.loss);
                if eval.loss.is_finite() && trial <= current.loss && admissible(&candidate, &eval) {
                    break Some((candidate, eval, fraction));
                }
            }
            rejected_steps += 1;
            fraction *= config.backtrack_factor;
            if fraction < MIN_STEP_FRACTION {
                break None;
            }
        };
        let Some((candidate, eval, fraction)) = accepted else {
            trace.push(current.loss);
            // Stale momentum can point uphill; only a fresh first-moment step
            // failing means the point is stuck.
            if adam.is_fresh() {
                frozen = true;
                break;
            }
            adam = Adam::new(params.len(), config);
            continue;
        };
        let change = (current.loss - eval.loss).abs();
        let scale = current.loss.abs();
        params = candidate;
        current = eval;
        trace.push(current.loss);
        // A heavily shortened step says nothing about flatness.
        if (fraction == 1.0 && change <= config.convergence_tol * scale) || current.loss == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(Descent {
        params,
        last: current,
        iterations: trace.len(),
        trace,
        converged,
        frozen,
        rejected_steps,
    })
}
