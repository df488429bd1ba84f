//! Central finite-difference gradient oracle.
//!
//! Each checked coordinate is compared against
//! `(f(x + h·e) − f(x − h·e)) / 2h` using the relative error
//! `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
//!
//! Coordinates whose ± perturbation flips a ReLU are skipped: the function is
//! not differentiable across the kink, so neither side of the comparison is
//! meaningful there. Skips are counted in the report.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REL_ERROR_FLOOR: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Which coordinates of the inputs to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// A seeded uniform sample without replacement over all input elements.
    Sample {
        count: usize,
        seed: u64,
    },
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor, over every element.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        Coords::All,
    )
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = scalar(&tape, out)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check: f(x) = {base}")));
    }
    tape.backward(out)?;
    let base_sig = tape.activation_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let flat: Vec<usize> = match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, count.min(total)).into_vec();
            picked.sort_unstable();
            picked
        }
    };

    let eval = |which: usize, idx: usize, delta: f64| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let v = scalar(&tape, out)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite value at input {which}[{idx}]"
            )));
        }
        Ok((v, tape.activation_signature()))
    };

    let mut report = GradCheckReport::default();
    for g in flat {
        let which = offsets.partition_point(|&o| o <= g) - 1;
        let idx = g - offsets[which];
        let (plus, sig_p) = eval(which, idx, step)?;
        let (minus, sig_m) = eval(which, idx, -step)?;
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[which][idx], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((which, idx));
        }
    }
    Ok(report)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
