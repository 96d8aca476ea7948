use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Group normalization applied to the block input before projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
    pub eps: f64,
}

/// Pointwise (1×1×1) projections of a spatial self-attention block.
/// Weights are `[C, C, 1, 1, 1]`, biases `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub norm: Option<AttentionNorm>,
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub out: (Var, Var),
}

/// Residual self-attention over the `D·H·W` voxels of `x: [N, C, D, H, W]`:
/// `x + proj(softmax(QᵀK / √(C/heads)) · V)`, with every voxel a token.
/// Q, K and V are projected from the normalized input when `norm` is set;
/// the residual always uses the raw input.
pub fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(TensorError::Rank {
            op: "attention_block",
            expected: 5,
            found: shape,
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::Config(format!(
            "attention: {c} channels not divisible by {heads} heads"
        )));
    }
    let tokens: usize = shape[2..].iter().product();
    let head_dim = c / heads;
    let split = vec![n * heads, head_dim, tokens];

    let h = match weights.norm {
        Some(nm) => tape.group_norm(x, nm.gamma, nm.beta, nm.groups, nm.eps)?,
        None => x,
    };
    let project = |tape: &mut Tape<T>, (w, b): (Var, Var)| -> Result<Var> {
        let p = tape.conv3d_bias(h, w, Some(b), 1, 0)?;
        tape.reshape(p, split.clone())
    };
    let q = project(tape, weights.query)?;
    let k = project(tape, weights.key)?;
    let v = project(tape, weights.value)?;

    // scores[i, j]: query token i against key token j
    let qt = tape.transpose_last2(q)?;
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let attn_t = tape.transpose_last2(attn)?;
    let mixed = tape.matmul(v, attn_t)?;
    let mixed = tape.reshape(mixed, shape)?;
    let projected = tape.conv3d_bias(mixed, weights.out.0, Some(weights.out.1), 1, 0)?;
    tape.add(x, projected)
}
