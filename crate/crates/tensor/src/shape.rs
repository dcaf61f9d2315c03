/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = dim_from_right(a, rank - 1 - k);
        let db = dim_from_right(b, rank - 1 - k);
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Maps flat output indices to flat input indices under broadcasting.
pub(crate) enum IndexMap {
    Identity,
    Scalar,
    Table(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return IndexMap::Identity;
        }
        if input.iter().product::<usize>() == 1 {
            return IndexMap::Scalar;
        }
        let rank = out.len();
        let offset = rank - input.len();
        // input strides expressed in output-dimension space; 0 where broadcast
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for k in (0..input.len()).rev() {
            if input[k] != 1 {
                strides[k + offset] = acc;
            }
            acc *= input[k];
        }
        let n: usize = out.iter().product();
        let mut table = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..n {
            table.push(flat);
            for k in (0..rank).rev() {
                idx[k] += 1;
                flat += strides[k];
                if idx[k] < out[k] {
                    break;
                }
                flat -= strides[k] * idx[k];
                idx[k] = 0;
            }
        }
        IndexMap::Table(table)
    }

    #[inline]
    pub(crate) fn at(&self, o: usize) -> usize {
        match self {
            IndexMap::Identity => o,
            IndexMap::Scalar => 0,
            IndexMap::Table(t) => t[o],
        }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}
