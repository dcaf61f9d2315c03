use crate::graph::Var;

/// Recorded operation for one graph node.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Gelu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Extremum {
        x: Var,
        axis: usize,
        arg: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Where {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Diagonal(Var),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | BatchMatMul(a, b) => {
                vec![*a, *b]
            }
            Neg(x)
            | Scale(x, _)
            | AddScalar(x)
            | Exp(x)
            | Log(x)
            | Sqrt(x)
            | Tanh(x)
            | Gelu(x)
            | Permute(x, _)
            | Reshape(x)
            | SumAll(x)
            | Diagonal(x) => vec![*x],
            Sum { x, .. }
            | Mean { x, .. }
            | Extremum { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | L2Normalize { x, .. }
            | LayerNorm { x, .. }
            | Select { x, .. }
            | Slice { x, .. } => vec![*x],
            Where { a, b, .. } => vec![*a, *b],
            Embedding { table, .. } => vec![*table],
            Concat { xs, .. } => xs.clone(),
        }
    }

    /// Inputs whose values the backward rule reads.
    pub(crate) fn saved_inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Mul(a, b) | Div(a, b) | MatMul(a, b) | BatchMatMul(a, b) => vec![*a, *b],
            Log(x) | Gelu(x) => vec![*x],
            _ => vec![],
        }
    }

    /// Whether the backward rule reads this node's own output.
    pub(crate) fn saves_output(&self) -> bool {
        matches!(
            self,
            Op::Exp(_)
                | Op::Sqrt(_)
                | Op::Tanh(_)
                | Op::Softmax { .. }
                | Op::LogSoftmax { .. }
                | Op::L2Normalize { .. }
                | Op::LayerNorm { .. }
        )
    }

    /// Layout-only ops. The memory model treats their outputs as aliases of
    /// the input buffer, as strided-view frameworks do.
    pub(crate) fn is_view(&self) -> bool {
        matches!(
            self,
            Op::Permute(..) | Op::Reshape(_) | Op::Select { .. } | Op::Slice { .. } | Op::Diagonal(_)
        )
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(_) => "neg",
            Scale(..) => "scale",
            AddScalar(_) => "add_scalar",
            Exp(_) => "exp",
            Log(_) => "log",
            Sqrt(_) => "sqrt",
            Tanh(_) => "tanh",
            Gelu(_) => "gelu",
            MatMul(..) => "matmul",
            BatchMatMul(..) => "bmm",
            Permute(..) => "permute",
            Reshape(_) => "reshape",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SumAll(_) => "sum_all",
            Extremum { .. } => "extremum",
            Softmax { .. } => "softmax",
            LogSoftmax { .. } => "log_softmax",
            L2Normalize { .. } => "l2_normalize",
            LayerNorm { .. } => "layer_norm",
            Where { .. } => "where",
            Embedding { .. } => "embedding",
            Select { .. } => "select",
            Slice { .. } => "slice",
            Concat { .. } => "concat",
            Diagonal(_) => "diagonal",
        }
    }
}
