//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericError, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Worst relative error per input, over the coordinates that could be checked.
    pub per_input_errors: Vec<f64>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
    /// Set when no coordinate could be checked at all.
    pub inconclusive: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.inconclusive {
            "INCONCLUSIVE"
        } else if self.pass {
            "PASS"
        } else {
            "FAIL"
        };
        write!(
            f,
            "{:<24} {verdict:<12} max_rel_err={:.3e} (tol {:.0e}) checked={} skipped={}",
            self.op_name, self.max_relative_error, self.tolerance, self.checked, self.skipped
        )
    }
}

/// Gradients smaller than this are compared in absolute terms. A central difference at
/// step 1e-5 of an O(1) loss carries 1e-10 or more of rounding noise, which would dominate
/// the ratio for smaller components.
pub const GRADIENT_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// `op` may fail with any error that a [`NumericError`] converts into.
pub fn gradcheck<F, E>(
    op_name: &str,
    op: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    let opts = GradCheckOptions {
        step,
        tolerance,
        ..GradCheckOptions::default()
    };
    gradcheck_with(op_name, op, inputs, &opts)
}

pub fn gradcheck_with<F, E>(
    op_name: &str,
    op: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    if !(opts.step > 0.0) {
        return Err(NumericError::Config(format!("gradcheck step {} must be positive", opts.step)).into());
    }
    let eval = |xs: &[Tensor]| -> Result<(f64, u64), E> {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(NumericError::Dimension(format!(
                "gradcheck needs a scalar output, got shape {:?}",
                v.shape()
            ))
            .into());
        }
        Ok((v.data()[0], g.branch_signature()))
    };

    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_input_errors = Vec::with_capacity(inputs.len());
    let (mut checked, mut skipped) = (0, 0);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get_or_zeros(*var, n);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for j in coords {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let (fp, sp) = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.step;
            let (fm, sm) = eval(&work)?;
            work[i].data_mut()[j] = x0;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
        per_input_errors.push(worst);
    }
    let max_relative_error = per_input_errors.iter().copied().fold(0.0, f64::max);
    let inconclusive = checked == 0;
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error,
        tolerance: opts.tolerance,
        pass: !inconclusive && max_relative_error <= opts.tolerance,
        per_input_errors,
        checked,
        skipped,
        inconclusive,
    })
}
