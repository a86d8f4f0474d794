//! Bounds-checked wrapper over `matrixmultiply::dgemm`.

/// Strided view of a matrix inside a slice: element `(i, j)` lives at
/// `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

pub(crate) fn mat(data: &[f64], rs: usize, cs: usize) -> Mat<'_> {
    Mat { data, rs, cs }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C (m×n) = A (m×k) · B (k×n) + beta · C`, with `C` row-major of row stride
/// `ldc`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A out of bounds");
    assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B out of bounds");
    assert!(span(m, n, ldc, 1) <= c.len(), "gemm: C out of bounds");
    // SAFETY: the spans above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, mat(&a, 3, 1), mat(&b, 4, 1), 1.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], s + 1.0);
            }
        }
        // Aᵀ (3x2) · A (2x3)
        let mut c = vec![0.0; 9];
        gemm(3, 2, 3, mat(&a, 1, 3), mat(&a, 3, 1), 0.0, &mut c, 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..2).map(|t| a[t * 3 + i] * a[t * 3 + j]).sum();
                assert_eq!(c[i * 3 + j], s);
            }
        }
    }
}
