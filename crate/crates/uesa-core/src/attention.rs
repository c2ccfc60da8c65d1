//! Parameter-free directional self-attention.
//!
//! One attention kernel serves all three directions: the feature tensor is
//! permuted so the chosen axis leads, flattened to N row-vectors, attended,
//! and restored to its original [C,H,W] layout. There are no learned
//! projections — similarity is the raw dot product between rows.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{inverse_permutation, Tensor};

/// Axis along which attention operates on a [C,H,W] feature tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Rows lead: N = H, D = C*W.
    Horizontal,
    /// Columns lead: N = W, D = C*H.
    Vertical,
    /// Channels lead: N = C, D = H*W.
    Depth,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Horizontal, Direction::Vertical, Direction::Depth];

    /// Permutation bringing this direction's axis to the front of [C,H,W].
    fn order(self) -> [usize; 3] {
        match self {
            Direction::Horizontal => [1, 0, 2],
            Direction::Vertical => [2, 0, 1],
            Direction::Depth => [0, 1, 2],
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::Depth => "depth",
        };
        f.write_str(s)
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(Direction::Horizontal),
            "vertical" => Ok(Direction::Vertical),
            "depth" => Ok(Direction::Depth),
            other => Err(Error::invalid(format!(
                "unknown direction `{other}` (expected horizontal, vertical or depth)"
            ))),
        }
    }
}

/// Refined feature plus the attention coefficients that produced it.
/// `alpha[i][j]` weights row `i` in the output at position `j`; each column
/// of `alpha` is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: Tensor,
    pub alpha: Tensor,
}

/// Node handles produced by [`self_attend_on`].
#[derive(Debug, Clone, Copy)]
pub struct SelfAttendNodes {
    pub output: NodeId,
    pub alpha: NodeId,
}

/// Differentiable self-attention over an [N,D] view.
///
/// The similarity matrix S[i][j] = dot(row_i, row_j) is exactly symmetric,
/// so the column softmax required for alpha equals the row softmax of S
/// transposed; output_j = sum_i alpha[i][j] * row_i collapses to a single
/// matrix product.
pub fn self_attend_on(tape: &mut Tape, view: NodeId) -> Result<SelfAttendNodes> {
    let shape = tape.value(view).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "self_attend expects an [N,D] view, got {shape:?}"
        )));
    }
    let view_t = tape.permute(view, &[1, 0])?;
    let scores = tape.matmul(view, view_t)?;
    let weights = tape.softmax_rows(scores)?;
    let output = tape.matmul(weights, view)?;
    let alpha = tape.permute(weights, &[1, 0])?;
    Ok(SelfAttendNodes { output, alpha })
}

/// Value-level [`self_attend_on`].
pub fn self_attend(view: &Tensor) -> Result<AttentionResult> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(view.clone(), false);
    let nodes = self_attend_on(&mut tape, leaf)?;
    Ok(AttentionResult {
        output: tape.value(nodes.output).clone(),
        alpha: tape.value(nodes.alpha).clone(),
    })
}

/// Differentiable directional attention: permute so `direction` leads,
/// attend, restore the original [C,H,W] layout.
pub fn attend_direction_on(tape: &mut Tape, f: NodeId, direction: Direction) -> Result<NodeId> {
    let shape = tape.value(f).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "attend_direction expects a [C,H,W] tensor, got {shape:?}"
        )));
    }
    let order = direction.order();
    let permuted = tape.permute(f, &order)?;
    let view_shape = tape.value(permuted).shape().to_vec();
    let (n, d) = (view_shape[0], view_shape[1] * view_shape[2]);
    let view = tape.reshape(permuted, &[n, d])?;
    let attended = self_attend_on(tape, view)?;
    let restored = tape.reshape(attended.output, &view_shape)?;
    tape.permute(restored, &inverse_permutation(&order))
}

/// Value-level [`attend_direction_on`].
pub fn attend_direction(f: &Tensor, direction: Direction) -> Result<Tensor> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(f.clone(), false);
    let out = attend_direction_on(&mut tape, leaf, direction)?;
    Ok(tape.value(out).clone())
}

/// Reference attention: a literal double loop over (i, j) with no
/// vectorization or stabilization tricks. Only meant for test-scale inputs.
pub fn brute_force_attention(view: &Tensor) -> Result<AttentionResult> {
    if view.rank() != 2 {
        return Err(Error::invalid(format!(
            "brute_force_attention expects an [N,D] view, got {:?}",
            view.shape()
        )));
    }
    let (n, d) = (view.shape()[0], view.shape()[1]);
    if n * d > 4096 {
        return Err(Error::invalid(format!(
            "brute_force_attention is a test oracle; {n}x{d} exceeds the 4096-element budget"
        )));
    }
    let row = |i: usize| &view.data()[i * d..(i + 1) * d];
    let dot = |i: usize, j: usize| -> f64 { row(i).iter().zip(row(j)).map(|(&a, &b)| a * b).sum() };

    let mut alpha = vec![0.0; n * n];
    let mut output = vec![0.0; n * d];
    for j in 0..n {
        let mut denom = 0.0;
        for i in 0..n {
            denom += dot(i, j).exp();
        }
        for i in 0..n {
            let a = dot(i, j).exp() / denom;
            alpha[i * n + j] = a;
            for (o, &v) in output[j * d..(j + 1) * d].iter_mut().zip(row(i)) {
                *o += a * v;
            }
        }
    }
    Ok(AttentionResult {
        output: Tensor::new(vec![n, d], output)?,
        alpha: Tensor::new(vec![n, n], alpha)?,
    })
}
