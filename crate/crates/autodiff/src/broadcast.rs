//! Numpy-style broadcasting for binary elementwise primitives.

/// Index mapping from the broadcast output into both operands.
#[derive(Debug, Clone)]
pub(crate) enum Layout {
    /// Both operands already have the output shape.
    Same,
    /// `b` has one element.
    ScalarRhs,
    /// `a` has one element.
    ScalarLhs,
    /// `b` matches a trailing suffix of `a`, which has the output shape.
    SuffixRhs(usize),
    /// `a` matches a trailing suffix of `b`, which has the output shape.
    SuffixLhs(usize),
    General {
        out: Vec<usize>,
        a_strides: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i + shape.len() < rank {
            break;
        }
        let dim = shape[i + shape.len() - rank];
        strides[i] = if dim == 1 { 0 } else { acc };
        acc *= dim;
    }
    strides
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Layout {
    pub(crate) fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let no: usize = out.iter().product();
        if a == out && b == out {
            Layout::Same
        } else if nb == 1 && na == no {
            Layout::ScalarRhs
        } else if na == 1 && nb == no {
            Layout::ScalarLhs
        } else if na == no && is_suffix(b, out) {
            Layout::SuffixRhs(nb)
        } else if nb == no && is_suffix(a, out) {
            Layout::SuffixLhs(na)
        } else {
            Layout::General {
                out: out.to_vec(),
                a_strides: aligned_strides(a, out),
                b_strides: aligned_strides(b, out),
            }
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    #[inline]
    pub(crate) fn for_each(&self, n_out: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Layout::Same => (0..n_out).for_each(|i| f(i, i, i)),
            Layout::ScalarRhs => (0..n_out).for_each(|i| f(i, i, 0)),
            Layout::ScalarLhs => (0..n_out).for_each(|i| f(i, 0, i)),
            Layout::SuffixRhs(nb) => (0..n_out).for_each(|i| f(i, i, i % nb)),
            Layout::SuffixLhs(na) => (0..n_out).for_each(|i| f(i, i % na, i)),
            Layout::General {
                out,
                a_strides,
                b_strides,
            } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for i in 0..n_out {
                    f(i, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += a_strides[d];
                        ib += b_strides[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        ia -= a_strides[d] * out[d];
                        ib -= b_strides[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_align_from_the_right() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn general_layout_visits_expected_offsets() {
        let layout = Layout::new(&[2, 1], &[1, 3], &[2, 3]);
        let mut seen = Vec::new();
        layout.for_each(6, |i, a, b| seen.push((i, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 0, 1),
                (2, 0, 2),
                (3, 1, 0),
                (4, 1, 1),
                (5, 1, 2)
            ]
        );
    }
}
