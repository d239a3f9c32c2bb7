//! Dense inner loops. Each output row is produced by one closure call, so the
//! parallel and sequential paths accumulate in the same order.

use crate::par;

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::rows_mut(&mut out, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    par::rows_mut(&mut out, n, m * n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`
pub(crate) fn mm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    par::rows_mut(&mut out, k, k * n, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b[j * n..(j + 1) * n]);
        }
    });
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let c = naive(&a, &b, m, k, n);
        let d = mm(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&d) {
            assert!((x - y).abs() < 1e-14);
        }
        // aᵀ·c where a is m×k and c is m×n gives k×n
        let at = transpose(&a, m, k);
        let e = naive(&at, &c, k, m, n);
        let f = mm_at_b(&a, &c, m, k, n);
        for (x, y) in e.iter().zip(&f) {
            assert!((x - y).abs() < 1e-12);
        }
        // c·bᵀ where c is m×n, b is k×n gives m×k
        let bt = transpose(&b, k, n);
        let g = naive(&c, &bt, m, n, k);
        let h = mm_a_bt(&c, &b, m, n, k);
        for (x, y) in g.iter().zip(&h) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
