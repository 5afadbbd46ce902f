//! Matrix products used by the layers. All operands are row-major.

use super::{Real, Tensor};

/// `out = beta * out + x · wᵀ` for `x: [B, in]`, `w: [out, in]`.
pub fn matmul_nt<T: Real>(x: &Tensor<T>, w: &Tensor<T>, beta: T, out: &mut Tensor<T>) {
    let (b, k) = (x.rows(), x.cols());
    let n = w.rows();
    assert_eq!(w.cols(), k, "matmul_nt inner dimension");
    assert_eq!((out.rows(), out.cols()), (b, n), "matmul_nt output shape");
    if b == 0 {
        return;
    }
    T::gemm(
        b,
        k,
        n,
        T::one(),
        x.data(),
        k as isize,
        1,
        w.data(),
        1,
        k as isize,
        beta,
        out.data_mut(),
        n as isize,
        1,
    );
}

/// `out = beta * out + dy · w` for `dy: [B, out]`, `w: [out, in]`.
pub fn matmul_nn<T: Real>(dy: &Tensor<T>, w: &Tensor<T>, beta: T, out: &mut Tensor<T>) {
    let (b, k) = (dy.rows(), dy.cols());
    let n = w.cols();
    assert_eq!(w.rows(), k, "matmul_nn inner dimension");
    assert_eq!((out.rows(), out.cols()), (b, n), "matmul_nn output shape");
    if b == 0 {
        return;
    }
    T::gemm(
        b,
        k,
        n,
        T::one(),
        dy.data(),
        k as isize,
        1,
        w.data(),
        n as isize,
        1,
        beta,
        out.data_mut(),
        n as isize,
        1,
    );
}

/// `acc += dyᵀ · x` for `dy: [B, out]`, `x: [B, in]`, `acc: [out, in]`.
pub fn matmul_tn_acc<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, acc: &mut Tensor<T>) {
    let (b, m) = (dy.rows(), dy.cols());
    let n = x.cols();
    assert_eq!(x.rows(), b, "matmul_tn batch dimension");
    assert_eq!((acc.rows(), acc.cols()), (m, n), "matmul_tn output shape");
    if b == 0 {
        return;
    }
    T::gemm(
        m,
        b,
        n,
        T::one(),
        dy.data(),
        1,
        m as isize,
        x.data(),
        n as isize,
        1,
        T::one(),
        acc.data_mut(),
        n as isize,
        1,
    );
}

/// Adds the column sums of `dy: [B, n]` into `acc: [n]`.
pub fn sum_rows_acc<T: Real>(dy: &Tensor<T>, acc: &mut Tensor<T>) {
    assert_eq!(dy.cols(), acc.len());
    for r in 0..dy.rows() {
        for (a, v) in acc.data_mut().iter_mut().zip(dy.row(r)) {
            *a += *v;
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
