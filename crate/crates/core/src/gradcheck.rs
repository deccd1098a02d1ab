//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the loss forward; the reverse sweep under
//! test is compared against `(f(θ+h) − f(θ−h)) / 2h` at sampled coordinates.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Prng;
use crate::tensor::ParamStore;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

/// `|a − b| / max(1e-6, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-6f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&Probe> {
        self.probes.iter().filter(|p| p.rel_err >= tol).collect()
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.failures(tol).is_empty()
    }
}

/// Which coordinates to probe.
#[derive(Clone, Debug)]
pub struct ProbePlan {
    /// Only parameters whose name starts with one of these prefixes (all when empty).
    pub prefixes: Vec<String>,
    pub coords: usize,
    pub seed: u64,
    pub step: f64,
}

impl ProbePlan {
    pub fn new(coords: usize, seed: u64) -> Self {
        ProbePlan {
            prefixes: Vec::new(),
            coords,
            seed,
            step: FD_STEP,
        }
    }

    pub fn under(mut self, prefix: &str) -> Self {
        self.prefixes.push(prefix.to_owned());
        self
    }
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` records a forward pass on the given tape and returns the scalar loss node.
pub fn check<F>(store: &ParamStore<f64>, plan: &ProbePlan, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    let mut analytic = store.clone();
    tape.write_param_grads(&mut analytic);

    let candidates: Vec<(&str, usize)> = store
        .iter()
        .filter(|p| plan.prefixes.is_empty() || plan.prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
        .map(|p| (p.name.as_str(), p.tensor.numel()))
        .collect();
    let total: usize = candidates.iter().map(|c| c.1).sum();
    let mut report = GradCheckReport::default();
    if total == 0 {
        return Ok(report);
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.value(v).data()[0])
    };

    let mut rng = Prng::new(plan.seed);
    let mut probed = std::collections::BTreeSet::new();
    let want = plan.coords.min(total);
    while probed.len() < want {
        // Uniform over scalars, so large matrices get proportionally more probes.
        let mut flat = rng.below(total);
        let (name, index) = candidates
            .iter()
            .find_map(|&(n, len)| {
                if flat < len {
                    Some((n, flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("index within total");
        if !probed.insert((name.to_owned(), index)) {
            continue;
        }
        let mut shifted = store.clone();
        let base = store.tensor(name)?.data()[index];
        shifted.get_mut(name).unwrap().tensor.data_mut()[index] = base + plan.step;
        let up = eval(&shifted)?;
        shifted.get_mut(name).unwrap().tensor.data_mut()[index] = base - plan.step;
        let down = eval(&shifted)?;
        let numeric = (up - down) / (2.0 * plan.step);
        let a = analytic.get(name).unwrap().tensor.grad.as_ref().unwrap()[index];
        report.probes.push(Probe {
            param: name.to_owned(),
            index,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    Ok(report)
}
