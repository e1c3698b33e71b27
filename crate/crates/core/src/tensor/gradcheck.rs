use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over the checked coordinates,
    /// where `floor = max(1e-8, 16 eps_mach max(|f|, 1) / (h tol))` is the
    /// gradient size below which central-difference roundoff alone would
    /// exceed the tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Distance to the nearest derivative discontinuity at the base point.
    pub kink_margin: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    /// Combines reports of several points; keeps the worst error.
    pub fn merge(mut self, other: &GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
        self.kink_margin = self.kink_margin.min(other.kink_margin);
        self
    }
}

/// Central-difference gradient checker.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Per-input cap on the number of checked coordinates (seeded subsample).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck { eps, tol, max_coords: None, seed: 0 }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, at: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = at.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::invalid(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        tape.backward(out)?;
        let analytic: Vec<Vec<f64>> =
            vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
        let kink_margin = tape.kink_margin();
        let base = tape.value(out).item();
        let floor = (16.0 * f64::EPSILON * base.abs().max(1.0) / (self.eps * self.tol)).max(1e-8);

        let eval = |inputs: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs)?;
            Ok(t.value(o).item())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            worst: None,
            kink_margin,
            tol: self.tol,
        };
        let mut inputs: Vec<Tensor> = at.to_vec();
        for (i, grads) in analytic.iter().enumerate() {
            let n = at[i].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(cap) if cap < n => {
                    let mut c = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = at[i].data()[j];
                inputs[i].data_mut()[j] = orig + self.eps;
                let plus = eval(&inputs)?;
                inputs[i].data_mut()[j] = orig - self.eps;
                let minus = eval(&inputs)?;
                inputs[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = grads[j];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(floor);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = Some((i, j));
                }
            }
        }
        Ok(report)
    }
}

/// Checks the gradient of scalar `f` at a single input tensor, every coordinate.
pub fn finite_diff_check<F>(f: F, at: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradCheck::new(eps, tol).run(|t, v| f(t, v[0]), std::slice::from_ref(at))
}
