use crate::float::Float;

/// Row-major `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` holds `m×k` (or `k×m` when `ta`), `b` holds `k×n` (or `n×k` when `tb`),
/// `c` holds `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { S::one() } else { S::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = S::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    S::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}
