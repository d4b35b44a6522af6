//! Central finite-difference checks of analytic gradients (f64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Fraction of the largest gradient magnitude used as the denominator floor,
/// so near-zero entries are judged against the gradient's own scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Which elements of each input are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Up to this many elements per tensor, drawn with a fixed seed.
    Sample(usize, u64),
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    /// `(tensor name, max relative error, elements checked)`
    pub entries: Vec<(String, f64, usize)>,
    /// `(analytic, numeric)` per entry.
    pub values: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CheckReport {
    fn push(&mut self, name: String, analytic: Vec<f64>, numeric: Vec<f64>) {
        self.entries.push((name, relative_errors(&analytic, &numeric), analytic.len()));
        self.values.push((analytic, numeric));
    }

    /// Rescore with one denominator floor for the whole report, taken from
    /// the largest gradient of any entry.
    pub fn with_global_floor(mut self) -> Self {
        let scale = self.values.iter().flat_map(|(a, n)| a.iter().chain(n)).fold(0.0f64, |m, v| m.max(v.abs()));
        for (e, (a, n)) in self.entries.iter_mut().zip(&self.values) {
            e.1 = errors_with_floor(a, n, (SCALE_FLOOR * scale).max(1e-12));
        }
        self
    }

    pub fn extend(&mut self, other: CheckReport, prefix: &str) {
        self.entries.extend(other.entries.into_iter().map(|(n, e, c)| (format!("{prefix}{n}"), e, c)));
        self.values.extend(other.values);
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64, usize)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `|a - n| / max(|a|, |n|, floor)` with `floor = SCALE_FLOOR * max|n|` (never below 1e-12).
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    errors_with_floor(analytic, numeric, (SCALE_FLOOR * scale).max(1e-12))
}

fn errors_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Fourth-order central difference `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

fn pick(n: usize, coverage: Coverage, salt: u64) -> Vec<usize> {
    match coverage {
        Coverage::Sample(k, seed) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compare analytic gradients of `f(inputs)` with central differences on the inputs.
/// `f` builds a scalar from the bound inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, eps, Coverage::All)?.max_rel_error())
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coverage: Coverage) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let idx = pick(inputs[ti].numel(), coverage, ti as u64);
        let zeros = Tensor::zeros(inputs[ti].shape());
        let analytic_t = grads.get(*v).unwrap_or(&zeros);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work[ti].data()[j];
            let d = central_difference(eps, |delta| {
                work[ti].data_mut()[j] = orig + delta;
                eval(&work)
            })?;
            work[ti].data_mut()[j] = orig;
            numeric.push(d);
            analytic.push(analytic_t.data()[j]);
        }
        report.push(format!("input{ti}"), analytic, numeric);
    }
    Ok(report)
}

/// Finite-difference check over the trainable parameters of a store. `f`
/// binds parameters itself via [`Graph::param`].
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    eps: f64,
    coverage: Coverage,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut work = store.clone();
    let mut report = CheckReport::default();
    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    for (ti, name) in names.iter().enumerate() {
        let n = store.get(name).unwrap().value.numel();
        let idx = pick(n, coverage, ti as u64 + 1);
        let analytic_t = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(store.get(name).unwrap().value.shape()));
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work.get(name).unwrap().value.data()[j];
            let mut fd = |delta: f64| -> Result<f64> {
                work.value_mut(name).unwrap().data_mut()[j] = orig + delta;
                let mut g = Graph::<f64>::inference();
                let out = f(&mut g, &work)?;
                Ok(g.scalar(out))
            };
            let d = central_difference(eps, &mut fd)?;
            work.value_mut(name).unwrap().data_mut()[j] = orig;
            numeric.push(d);
            analytic.push(analytic_t.data()[j]);
        }
        if numeric.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("finite difference for {name} is not finite")));
        }
        report.push(name.clone(), analytic, numeric);
    }
    Ok(report)
}
