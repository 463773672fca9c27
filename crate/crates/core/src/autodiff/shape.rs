use super::{Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let xd = x.data();
    while data.len() < n {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        data.extend((0..inner).map(|k| xd[base + k * inner_stride]));
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(super) fn permute_backward<T: Scalar>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute_data(g, &inverse)
}

pub(super) fn narrow_backward<T: Scalar>(shape: &[usize], dim: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let len = g.shape()[dim];
    let mut d = vec![T::zero(); shape.iter().product()];
    for o in 0..outer {
        let dst = (o * shape[dim] + start) * inner;
        let src = o * len * inner;
        d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), d)
}

pub(super) fn concat_backward<'a, T: Scalar>(
    parts: &[Var],
    shape_of: impl Fn(Var) -> &'a [usize],
    dim: usize,
    g: &Tensor<T>,
) -> Contributions<T> {
    let mut start = 0;
    parts
        .iter()
        .map(|&v| {
            let len = shape_of(v)[dim];
            let piece = g.narrow(dim, start, len).expect("concat slice");
            start += len;
            (v, piece)
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(a)).clone().reshaped(shape)?;
        Ok(self.record(value, Op::Reshape(a), &[a]))
    }

    /// Reorders dims: output dim `i` is input dim `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for {:?}", x.shape())));
        }
        let value = permute_data(&x, perm);
        Ok(self.record(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the two trailing dims.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn narrow(&self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(dim, start, len)?;
        Ok(self.record(value, Op::Narrow(a, dim, start), &[a]))
    }

    /// Joins tensors along `dim`; all other dims must agree.
    pub fn concat(&self, parts: &[Var], dim: usize) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if dim >= rank {
            return Err(Error::Contract(format!("concat dim {dim} out of range for rank {rank}")));
        }
        for v in &values[1..] {
            let compatible = v.rank() == rank
                && (0..rank).all(|d| d == dim || v.shape()[d] == first.shape()[d]);
            if !compatible {
                return Err(Error::dim("concat", first.shape(), v.shape()));
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[dim]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let span = v.shape()[dim] * inner;
                data.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = total;
        Ok(self.record(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), dim), parts))
    }
}
