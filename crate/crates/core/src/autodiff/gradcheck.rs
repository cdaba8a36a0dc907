//! Central finite-difference verification of analytic adjoints.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

/// An operation with a forward map and its vector-Jacobian product over
/// every input (parameters included).
pub trait Differentiable {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_probes: Option<usize>,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    /// Probes over tolerance are retried with the step divided by 10 this
    /// many times; the smallest error counts. A step that straddles a ReLU
    /// or max-pool switch stops mattering once the step is small enough,
    /// while a wrong adjoint keeps its error.
    pub refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_probes: Some(512),
            abs_floor: 1e-6,
            refinements: 2,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Worst coordinate as (input index, flat offset).
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
    pub tolerance: f64,
    pub non_finite: bool,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<24} max_rel_err={:.3e} tol={:.0e} probes={}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_error,
            self.tolerance,
            self.probes,
            if self.non_finite { " (non-finite gradient)" } else { "" }
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `op` at `inputs` with the scalar objective `<r, op(x)>` for a
/// seeded random projection `r`.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(op, inputs, tolerance, &GradCheckConfig::default())
}

pub fn grad_check_with(
    op: &dyn Differentiable,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = op.forward(inputs)?;
    let proj = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0))?;
    let analytic = op.adjoint(inputs, &proj)?;

    let mut report = GradCheckReport {
        op: op.name(),
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
        tolerance,
        non_finite: false,
        passed: false,
    };
    if analytic.len() != inputs.len() || analytic.iter().any(|g| !g.is_finite()) {
        report.non_finite = true;
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }

    let objective = |xs: &[Tensor<f64>]| -> Result<f64> { op.forward(xs)?.dot(&proj) };
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let len = inputs[which].len();
        let coords: Vec<usize> = match cfg.max_probes {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for j in coords {
            let orig = work[which].data()[j];
            let mut err = f64::INFINITY;
            let mut step = cfg.step;
            for _ in 0..=cfg.refinements {
                work[which].data_mut()[j] = orig + step;
                let plus = objective(&work)?;
                work[which].data_mut()[j] = orig - step;
                let minus = objective(&work)?;
                work[which].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                err = err.min(rel_error(grad.data()[j], numeric, cfg.abs_floor));
                if err < tolerance {
                    break;
                }
                step /= 10.0;
            }
            report.probes += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((which, j));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// Wraps an operation and scales its adjoint; a factor other than one is a
/// deliberately broken gradient.
pub struct ScaledAdjoint<D> {
    pub inner: D,
    pub factor: f64,
}

impl<D: Differentiable> Differentiable for ScaledAdjoint<D> {
    fn name(&self) -> String {
        format!("{}*{}", self.inner.name(), self.factor)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.inner.forward(inputs)
    }

    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(self
            .inner
            .adjoint(inputs, grad_out)?
            .into_iter()
            .map(|g| g.scale(self.factor))
            .collect())
    }
}

/// Seeded tensor with entries uniform in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// Like [`random_tensor`] but with magnitudes in `[margin, 1]`, keeping
/// every entry away from zero.
pub fn random_off_kink(shape: &[usize], margin: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
    .expect("valid shape")
}
