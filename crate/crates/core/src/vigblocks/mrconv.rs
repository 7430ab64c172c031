//! Shift-based max-relative graph convolution.
//!
//! Graph edges are realized as circular shifts of the feature map: shifting
//! by `d` along an axis aligns every pixel with its neighbor `d` positions
//! away on the torus. The fold keeps the running maximum of the relative
//! features, starting from zero.

use std::collections::BTreeSet;

use crate::error::{domain, Result};
use crate::graphkit::{lsgc_offsets, svga_offsets};
use crate::tensor::{Axis, Conv2dSpec, Scalar, Tape, Tensor, Var};

use super::config::{GrapherKind, RelativeSign};

/// Ordered list of `(axis, shift)` pairs the fold visits.
pub type ShiftSchedule = Vec<(Axis, isize)>;

/// Appends `d` (reduced mod `dim`) unless it is the self residue or was
/// already visited on that axis.
fn push_shift(out: &mut ShiftSchedule, seen: &mut BTreeSet<(bool, usize)>, axis: Axis, dim: usize, d: i128) {
    let r = d.rem_euclid(dim as i128) as usize;
    if r != 0 && seen.insert((axis == Axis::H, r)) {
        out.push((axis, r as isize));
    }
}

/// LSGC schedule: forward H, forward W, backward H, backward W over the raw
/// offsets `K^i - 1`, `i = 1..=bit_depth`, skipping self and repeated residues.
pub fn lsgc_schedule(height: usize, width: usize, k: usize) -> Result<ShiftSchedule> {
    let rows = lsgc_offsets(height, k)?;
    let cols = lsgc_offsets(width, k)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for sign in [1i128, -1] {
        for &d in &rows {
            push_shift(&mut out, &mut seen, Axis::H, height, sign * d as i128);
        }
        for &d in &cols {
            push_shift(&mut out, &mut seen, Axis::W, width, sign * d as i128);
        }
    }
    Ok(out)
}

/// SVGA schedule: shifts by every multiple of `K` below the axis length,
/// forward then backward.
pub fn svga_schedule(height: usize, width: usize, k: usize) -> Result<ShiftSchedule> {
    svga_offsets(height, k)?;
    svga_offsets(width, k)?;
    let rows: Vec<usize> = (k..height).step_by(k).collect();
    let cols: Vec<usize> = (k..width).step_by(k).collect();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for sign in [1i128, -1] {
        for &d in &rows {
            push_shift(&mut out, &mut seen, Axis::H, height, sign * d as i128);
        }
        for &d in &cols {
            push_shift(&mut out, &mut seen, Axis::W, width, sign * d as i128);
        }
    }
    Ok(out)
}

pub fn schedule_for(kind: GrapherKind, height: usize, width: usize, k: usize) -> Result<ShiftSchedule> {
    match kind {
        GrapherKind::Lsgc => lsgc_schedule(height, width, k),
        GrapherKind::Svga => svga_schedule(height, width, k),
    }
}

/// Zero-initialized max fold of relative features; the result is `>= 0`
/// elementwise.
pub fn max_relative<T: Scalar>(tape: &mut Tape<T>, x: Var, schedule: &[(Axis, isize)], sign: RelativeSign) -> Result<Var> {
    let mut acc = tape.constant(Tensor::zeros(tape.shape(x)));
    for &(axis, d) in schedule {
        let shifted = tape.circular_shift(x, axis, d);
        let rel = match sign {
            RelativeSign::SelfMinusNeighbor => tape.sub(x, shifted)?,
            RelativeSign::NeighborMinusSelf => tape.sub(shifted, x)?,
        };
        acc = tape.max(rel, acc)?;
    }
    Ok(acc)
}

/// Output of a max-relative convolution: the fold `x_j` and `conv([x, x_j])`.
#[derive(Debug, Clone, Copy)]
pub struct MrConvOutput {
    pub folded: Var,
    pub out: Var,
}

/// Max-relative fold followed by a 1x1 convolution over the channel
/// concatenation of `x` and the fold (`2C -> C'`).
pub fn mrconv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    schedule: &[(Axis, isize)],
    sign: RelativeSign,
    weight: Var,
    bias: Option<Var>,
) -> Result<MrConvOutput> {
    let [_, c, ..] = tape.shape(x);
    let [_, cin, kh, kw] = tape.shape(weight);
    if cin != 2 * c || kh != 1 || kw != 1 {
        return Err(domain(format!(
            "mrconv needs a 1x1 kernel over {} channels, got {:?}",
            2 * c,
            tape.shape(weight)
        )));
    }
    let folded = max_relative(tape, x, schedule, sign)?;
    let cat = tape.concat_channels(x, folded)?;
    let out = tape.conv2d(cat, weight, bias, Conv2dSpec::default())?;
    Ok(MrConvOutput { folded, out })
}

pub fn mrconv_lsgc<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    weight: Var,
    bias: Option<Var>,
) -> Result<MrConvOutput> {
    let [_, _, h, w] = tape.shape(x);
    let schedule = lsgc_schedule(h, w, k)?;
    mrconv(tape, x, &schedule, RelativeSign::SelfMinusNeighbor, weight, bias)
}

pub fn mrconv_svga<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    weight: Var,
    bias: Option<Var>,
) -> Result<MrConvOutput> {
    let [_, _, h, w] = tape.shape(x);
    let schedule = svga_schedule(h, w, k)?;
    mrconv(tape, x, &schedule, RelativeSign::SelfMinusNeighbor, weight, bias)
}

/// The fold alone on a detached tensor.
pub fn fold_tensor<T: Scalar>(x: &Tensor<T>, kind: GrapherKind, k: usize, sign: RelativeSign) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape();
    let schedule = schedule_for(kind, h, w, k)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = max_relative(&mut tape, xv, &schedule, sign)?;
    Ok(tape.value(out).clone())
}
