//! Dense helpers for the small square matrices used by the graph and
//! analysis modules. Matrices are row-major `Vec<f64>` of side `n`.

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `MᵀM` for a square `M`.
pub(crate) fn gram(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

fn matvec(a: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) const POWER_MAX_ITER: usize = 1000;
pub(crate) const POWER_REL_TOL: f64 = 1e-12;
const MAX_SQUARINGS: usize = 64;

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
///
/// The power method is run on repeated squares of the matrix first, which
/// isolates the dominant eigenspace even when the top two eigenvalues are
/// close, then plain power steps on the matrix itself polish the Rayleigh
/// quotient until its relative change drops below [`POWER_REL_TOL`] or
/// [`POWER_MAX_ITER`] steps have run.
pub(crate) fn largest_eigenvalue_psd(a: &[f64], n: usize) -> f64 {
    let scale = max_abs(a);
    if scale == 0.0 {
        return 0.0;
    }
    let mut b: Vec<f64> = a.iter().map(|x| x / scale).collect();
    for _ in 0..MAX_SQUARINGS {
        let mut c = matmul(&b, &b, n);
        let s = max_abs(&c);
        if s == 0.0 {
            break;
        }
        c.iter_mut().for_each(|x| *x /= s);
        let delta = c
            .iter()
            .zip(&b)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        b = c;
        if delta < 1e-15 {
            break;
        }
    }

    // Start from the column of the squared operator with the largest norm.
    let mut v: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| b[i * n + j]).collect::<Vec<_>>())
        .max_by(|x, y| norm(x).total_cmp(&norm(y)))
        .unwrap_or_else(|| vec![1.0; n]);
    let nv = norm(&v);
    if nv == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= nv);

    let mut q = rayleigh(a, &v, n);
    for _ in 0..POWER_MAX_ITER {
        let mut w = matvec(a, &v, n);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        let next = rayleigh(a, &v, n);
        let done = (next - q).abs() <= POWER_REL_TOL * next.abs();
        q = next;
        if done {
            break;
        }
    }
    q
}

fn rayleigh(a: &[f64], v: &[f64], n: usize) -> f64 {
    let av = matvec(a, v, n);
    av.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_top_eigenvalue() {
        let a = vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0];
        assert!((largest_eigenvalue_psd(&a, 3) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn nearly_degenerate_top_pair() {
        let a = vec![1.0, 0.0, 0.0, 0.999_999];
        assert!((largest_eigenvalue_psd(&a, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(largest_eigenvalue_psd(&[0.0; 4], 2), 0.0);
    }
}
