use super::{Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

pub(super) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    va: Var,
    vb: Var,
    g: &Tensor<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let mut out = Vec::new();
    if needs(va) {
        // dA = dC * B^T
        let mut da = vec![T::zero(); p * q];
        gemm(p, r, q, T::one(), g.data(), Layout::Normal, b.data(), Layout::Transposed, T::zero(), &mut da);
        out.push((va, Tensor::from_parts(vec![p, q], da)));
    }
    if needs(vb) {
        // dB = A^T * dC
        let mut db = vec![T::zero(); q * r];
        gemm(q, p, r, T::one(), a.data(), Layout::Transposed, g.data(), Layout::Normal, T::zero(), &mut db);
        out.push((vb, Tensor::from_parts(vec![q, r], db)));
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Matrix product of `a: [P, Q]` and `b: [Q, R]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::dim("matmul", x.shape(), y.shape()));
        }
        let (p, q, r) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut c = vec![T::zero(); p * r];
        gemm(p, q, r, T::one(), x.data(), Layout::Normal, y.data(), Layout::Normal, T::zero(), &mut c);
        Ok(self.record(Tensor::from_parts(vec![p, r], c), Op::MatMul(a, b), &[a, b]))
    }
}
