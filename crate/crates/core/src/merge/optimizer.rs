//! Derivative-free coefficient search: Nelder–Mead on a box, with a hard
//! budget on objective evaluations.

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffOptimConfig {
    /// Budget of objective evaluations, the initial point included.
    pub max_iterations: usize,
    pub init_value: f64,
    pub l1_lambda: f64,
    pub lower: f64,
    pub upper: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for CoeffOptimConfig {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            init_value: 0.5,
            l1_lambda: 0.05,
            lower: 0.0,
            upper: 2.0,
            initial_step: 0.25,
        }
    }
}

impl CoeffOptimConfig {
    /// Box `[-upper, upper]` instead of `[0, upper]`.
    pub fn allow_negative(mut self) -> Self {
        self.lower = -self.upper.abs();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(ForgeError::Parameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.l1_lambda >= 0.0) {
            return Err(ForgeError::Parameter(format!(
                "l1_lambda must be non-negative, got {}",
                self.l1_lambda
            )));
        }
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(ForgeError::Parameter(format!(
                "empty coefficient box [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !(self.initial_step > 0.0) {
            return Err(ForgeError::Parameter(
                "initial_step must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn l1_penalty(&self, w: &[f64]) -> f64 {
        self.l1_lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn project(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(self.lower, self.upper);
        }
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub initial_value: f64,
    pub trace: Vec<TracePoint>,
}

struct Budgeted<'a, F> {
    objective: &'a mut F,
    config: &'a CoeffOptimConfig,
    trace: Vec<TracePoint>,
    best: usize,
}

impl<F: FnMut(&[f64]) -> f64> Budgeted<'_, F> {
    fn exhausted(&self) -> bool {
        self.trace.len() >= self.config.max_iterations
    }

    fn eval(&mut self, mut x: Vec<f64>) -> Option<(Vec<f64>, f64)> {
        if self.exhausted() {
            return None;
        }
        self.config.project(&mut x);
        let raw = (self.objective)(&x);
        let value = if raw.is_nan() { f64::INFINITY } else { raw };
        self.trace.push(TracePoint {
            point: x.clone(),
            value,
        });
        if value < self.trace[self.best].value {
            self.best = self.trace.len() - 1;
        }
        Some((x, value))
    }
}

/// Minimises `objective` over the box starting from `init_value` in every
/// coordinate. The returned point is the best one evaluated, so it is never
/// worse than the start.
pub fn optimize_coefficients<F>(
    mut objective: F,
    dim: usize,
    config: &CoeffOptimConfig,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if dim == 0 {
        return Err(ForgeError::Parameter("no coefficients to optimise".into()));
    }
    let mut x0 = vec![config.init_value; dim];
    config.project(&mut x0);
    let f0 = objective(&x0);
    if !f0.is_finite() {
        return Err(ForgeError::Input(format!(
            "objective is {f0} at the initial point"
        )));
    }
    let mut run = Budgeted {
        objective: &mut objective,
        config,
        trace: vec![TracePoint {
            point: x0.clone(),
            value: f0,
        }],
        best: 0,
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.clone(), f0)];
    for i in 0..dim {
        let mut v = x0.clone();
        v[i] = if v[i] + config.initial_step <= config.upper {
            v[i] + config.initial_step
        } else {
            v[i] - config.initial_step
        };
        match run.eval(v) {
            Some(p) => simplex.push(p),
            None => break,
        }
    }

    while simplex.len() == dim + 1 && !run.exhausted() {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n = dim;
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let best_val = simplex[0].1;
        let second_worst = simplex[n - 1].1;
        let worst_val = simplex[n].1;

        let Some(reflected) = run.eval(along(-1.0)) else {
            break;
        };
        if reflected.1 < best_val {
            match run.eval(along(-2.0)) {
                Some(expanded) if expanded.1 < reflected.1 => simplex[n] = expanded,
                _ => simplex[n] = reflected,
            }
            continue;
        }
        if reflected.1 < second_worst {
            simplex[n] = reflected;
            continue;
        }
        let contracted = if reflected.1 < worst_val {
            run.eval(along(-0.5))
        } else {
            run.eval(along(0.5))
        };
        let Some(contracted) = contracted else { break };
        if contracted.1 < worst_val.min(reflected.1) {
            simplex[n] = contracted;
            continue;
        }
        // shrink toward the best vertex
        let anchor = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let p: Vec<f64> = anchor
                .iter()
                .zip(&v.0)
                .map(|(a, x)| a + 0.5 * (x - a))
                .collect();
            match run.eval(p) {
                Some(s) => *v = s,
                None => break,
            }
        }
    }

    let best = run.trace[run.best].clone();
    Ok(OptimResult {
        best: best.point,
        best_value: best.value,
        initial_value: f0,
        trace: run.trace,
    })
}
