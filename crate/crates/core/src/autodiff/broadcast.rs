//! NumPy-style broadcasting for binary elementwise ops.

use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off { 1 } else { s[i - off] }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
            }
        })
        .collect()
}

/// Maps a linear index of the broadcast output to a linear index of one input.
#[derive(Debug, Clone)]
pub(crate) enum Plan {
    Same,
    Scalar,
    /// Input equals the trailing dims of the output: `i % n`.
    Suffix(usize),
    /// Input equals the leading dims followed by ones: `i / inner`.
    Prefix(usize),
    General(Vec<usize>),
}

impl Plan {
    pub fn new(out: &[usize], input: &[usize]) -> Self {
        let n_out: usize = out.iter().product();
        let n_in: usize = input.iter().product();
        if n_in == n_out {
            return Plan::Same;
        }
        if n_in == 1 {
            return Plan::Scalar;
        }
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if out.ends_with(&trimmed) {
            return Plan::Suffix(n_in);
        }
        let off = out.len() - input.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, off).chain(input.iter().copied()).collect();
        let last_real = padded.iter().rposition(|&d| d != 1).unwrap_or(0);
        if padded[..=last_real] == out[..=last_real] {
            return Plan::Prefix(out[last_real + 1..].iter().product());
        }
        // General strided mapping.
        let mut in_strides = vec![0usize; out.len()];
        let mut s = 1;
        for i in (0..out.len()).rev() {
            in_strides[i] = if padded[i] == 1 { 0 } else { s };
            s *= padded[i];
        }
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..n_out {
            map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Plan::General(map)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Plan::Same => i,
            Plan::Scalar => 0,
            Plan::Suffix(n) => i % n,
            Plan::Prefix(inner) => i / inner,
            Plan::General(map) => map[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn plans() {
        let p = Plan::new(&[2, 3], &[3]);
        assert!(matches!(p, Plan::Suffix(3)));
        assert_eq!((0..6).map(|i| p.index(i)).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
        let p = Plan::new(&[2, 3], &[2, 1]);
        assert!(matches!(p, Plan::Prefix(3)));
        assert_eq!((0..6).map(|i| p.index(i)).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        let p = Plan::new(&[2, 3, 2], &[2, 1, 2]);
        assert_eq!((0..12).map(|i| p.index(i)).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }
}
