//! Shape arithmetic shared by the kernels.

/// Numpy-style broadcast of two shapes (trailing alignment, size-1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` viewed as broadcast to `out` (zero on stretched dims).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits `out` row by row. For each innermost row the callback receives the
/// flat offsets of the row start in the output and in both operands, the row
/// length, and the operands' innermost strides.
pub(crate) fn visit_rows2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    if out.is_empty() {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    if inner == 0 || out.iter().any(|&d| d == 0) {
        return;
    }
    let outer_dims = &out[..rank - 1];
    let rows: usize = outer_dims.iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for row in 0..rows {
        f(row * inner, oa, ob, inner, sa[rank - 1], sb[rank - 1]);
        // odometer increment
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < outer_dims[d] {
                break;
            }
            oa -= sa[d] * outer_dims[d];
            ob -= sb[d] * outer_dims[d];
            idx[d] = 0;
        }
    }
}

/// Resolves a possibly negative axis against `rank`.
pub(crate) fn resolve_axis(axis: isize, rank: usize) -> Option<usize> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    (0..r).contains(&a).then_some(a as usize)
}
