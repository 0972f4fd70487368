//! Dense row-major kernels shared by the tape's forward and backward rules.

use super::Scalar;

/// Rows and columns of `c` held in registers by [`matmul_acc`].
const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Tiled, but every element still accumulates its `k` products in
/// ascending order onto its starting value, so the result does not depend
/// on the tiling.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (m_main, n_main) = (m - m % MR, n - n % NR);
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            let arows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for (row, arow) in acc.iter_mut().zip(&arows) {
                    let av = arow[p];
                    for q in 0..NR {
                        row[q] = row[q] + av * brow[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        for r in i..i + MR {
            matmul_row_tail(a, b, c, r, k, n, n_main);
        }
    }
    for r in m_main..m {
        matmul_row_tail(a, b, c, r, k, n, 0);
    }
}

/// Columns `from..n` of row `r` of [`matmul_acc`].
fn matmul_row_tail<T: Scalar>(a: &[T], b: &[T], c: &mut [T], r: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let crow = &mut c[r * n + from..(r + 1) * n];
    for p in 0..k {
        axpy(a[r * k + p], &b[p * n + from..(p + 1) * n], crow);
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            axpy(av, brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, c, m, n, k);
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        out.extend(x[c..].iter().step_by(cols).take(rows));
    }
    out
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiled_product_matches_ordered_sum_exactly() {
        for (m, k, n) in [(1, 1, 1), (4, 3, 8), (5, 7, 9), (9, 16, 17), (3, 2, 30)] {
            let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
            let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
            let c0: Vec<f32> = (0..m * n).map(|i| (i as f32 * 0.53).sin()).collect();
            let mut c = c0.clone();
            matmul_acc(&a, &b, &mut c, m, k, n);
            for i in 0..m {
                for j in 0..n {
                    let want = (0..k).fold(c0[i * n + j], |s, p| s + a[i * k + p] * b[p * n + j]);
                    assert_eq!(c[i * n + j].to_bits(), want.to_bits(), "{m}x{k}x{n} at {i},{j}");
                }
            }
        }
    }

    #[test]
    fn three_products_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n
        let mut atc = vec![0.0; k * n];
        matmul_at_b_acc(&a, &c, &mut atc, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((atc[p * n + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ has shape m×k
        let mut cbt = vec![0.0; m * k];
        matmul_a_bt_acc(&c, &b, &mut cbt, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((cbt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }
}
