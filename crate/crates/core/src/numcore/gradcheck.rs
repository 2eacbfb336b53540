use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 64,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Scalar function of a list of parameter leaves, written against a graph.
pub trait ScalarFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Reverse-mode gradients of `f` at `params`.
pub fn analytic_gradients<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect())
}

/// Compares reverse-mode gradients of `f` with central finite differences.
pub fn check_gradients<F: ScalarFn>(
    f: F,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(f, params, &analytic, opts)
}

/// Compares the supplied `analytic` gradients with central differences of `f`.
pub fn compare_gradients<F: ScalarFn>(
    f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(Error::Argument(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for ci in coords {
            let orig = params[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.step;
            let fp = eval(&f, &work)?;
            work[ti].data_mut()[ci] = orig - opts.step;
            let fm = eval(&f, &work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[ti].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((ti, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
