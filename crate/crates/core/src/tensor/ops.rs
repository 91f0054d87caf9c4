use std::str::FromStr;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The op kinds exposed through [`forward_op`].
///
/// Parameterised kinds carry their static arguments; [`FromStr`] accepts the
/// bare names and fills defaults (`layer-norm` eps 1e-5, `transpose` swaps
/// the last two axes, `concat` joins along axis 0).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Softmax,
    LayerNorm { eps: f64 },
    Relu,
    Softplus,
    EmbeddingLookup { ids: Vec<u32>, ids_shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Mean,
    Sum,
    Transpose { axes: Option<(usize, usize)> },
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "softmax" => OpKind::Softmax,
            "layer-norm" => OpKind::LayerNorm { eps: 1e-5 },
            "relu" => OpKind::Relu,
            "softplus" => OpKind::Softplus,
            "mean" => OpKind::Mean,
            "sum" => OpKind::Sum,
            "transpose" => OpKind::Transpose { axes: None },
            "concat" => OpKind::Concat { axis: 0 },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

impl OpKind {
    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Applies `kind` to `inputs`, recording the node on `g`.
pub fn forward_op<S: Scalar>(g: &mut Graph<'_, S>, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(format!(
                "{kind:?} takes {n} inputs, got {}",
                inputs.len()
            )));
        }
    }
    match kind {
        OpKind::Add => g.add(inputs[0], inputs[1]),
        OpKind::Mul => g.mul(inputs[0], inputs[1]),
        OpKind::MatMul => g.matmul(inputs[0], inputs[1]),
        OpKind::Softmax => g.softmax(inputs[0]),
        OpKind::LayerNorm { eps } => g.layer_norm(inputs[0], inputs[1], inputs[2], *eps),
        OpKind::Relu => Ok(g.relu(inputs[0])),
        OpKind::Softplus => Ok(g.softplus(inputs[0])),
        OpKind::EmbeddingLookup { ids, ids_shape } => g.embedding(inputs[0], ids, ids_shape),
        OpKind::Reshape { shape } => g.reshape(inputs[0], shape),
        OpKind::Concat { axis } => g.concat(inputs, *axis),
        OpKind::Slice { axis, start, end } => g.slice(inputs[0], *axis, *start, *end),
        OpKind::Mean => Ok(g.mean(inputs[0])),
        OpKind::Sum => Ok(g.sum(inputs[0])),
        OpKind::Transpose { axes } => {
            let rank = g.shape(inputs[0]).len();
            let (a, b) = match axes {
                Some(ax) => *ax,
                None if rank >= 2 => (rank - 2, rank - 1),
                None => return Err(Error::shape("transpose", format!("rank {rank}"))),
            };
            g.transpose(inputs[0], a, b)
        }
    }
}
