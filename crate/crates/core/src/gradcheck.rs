//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the forward pass; it never looks at the
//! backward rules it is used to validate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamKey, ParamSet, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize)>,
    pub worst_pair: (f64, f64),
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            worst_pair: (0.0, 0.0),
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn record(&mut self, loc: (usize, usize), analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(loc);
            self.worst_pair = (analytic, numeric);
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `d f / d inputs` for a scalar function built on a graph.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap_or_default()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            report.record((ti, j), analytic[ti][j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks analytic parameter gradients (`group` = index into `params`)
/// against central differences of `loss`. At most `per_tensor` coordinates
/// are probed in each tensor, chosen with a fixed seed.
pub fn check_params<F>(
    params: &[ParamSet],
    analytic: &crate::tensor::Gradients,
    loss: F,
    h: f64,
    per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[ParamSet]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport::new();
    let mut flat = 0;
    for (group, set) in params.iter().enumerate() {
        for (index, t) in set.tensors().iter().enumerate() {
            let dense = analytic
                .get(ParamKey { group, index })
                .map(|g| g.to_dense(t.len()))
                .unwrap_or_else(|| vec![0.0; t.len()]);
            let picks: Vec<usize> = if t.len() <= per_tensor {
                (0..t.len()).collect()
            } else {
                sample(&mut rng, t.len(), per_tensor).into_vec()
            };
            for j in picks {
                let orig = t.data()[j];
                work[group].get_mut(index).data_mut()[j] = orig + h;
                let up = loss(&work)?;
                work[group].get_mut(index).data_mut()[j] = orig - h;
                let down = loss(&work)?;
                work[group].get_mut(index).data_mut()[j] = orig;
                report.record((flat + index, j), dense[j], (up - down) / (2.0 * h));
            }
        }
        flat += set.len();
    }
    Ok(report)
}
