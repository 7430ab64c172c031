use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, coordinate) of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-8)
}

/// `|a - b| / max(|a|, |b|, floor)`; below `floor` the error is absolute.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)`. Coordinates for which
/// `keep(input, coord, inputs)` is false are skipped (e.g. points within
/// `eps` of a max tie).
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    keep: impl Fn(usize, usize, &[Tensor<f64>]) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(k) if k < x.numel() => sample(&mut rng, x.numel(), k).into_vec(),
            _ => (0..x.numel()).collect(),
        };
        for c in coords {
            if !keep(i, c, inputs) {
                continue;
            }
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + opts.eps;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.eps;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = rel_err(analytic[i][c], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
