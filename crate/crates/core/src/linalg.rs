//! Small complex linear-algebra helpers shared by the solver, the network and
//! the oracle. Matrices are `nalgebra` dynamic matrices over `Complex<f64>`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

/// One draw of a standard circularly-symmetric complex Gaussian, `E|z|^2 = 1`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn complex_gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    // Column-major fill so that the draw order is fixed for a given shape.
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = complex_gaussian(rng);
        }
    }
    m
}

/// Haar-distributed unitary matrix: QR of a complex Gaussian matrix with the
/// phases of `R`'s diagonal pushed back into `Q`.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let g = complex_gaussian_matrix(rng, n, n);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)];
        let norm = d.norm();
        let phase = if norm > 0.0 { d / norm } else { C64::new(1.0, 0.0) };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Uniform random permutation as an index map: `perm[i]` is the source index
/// that lands at position `i`.
pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Permutation matrix `Π` with `Π[i, perm[i]] = 1`, so `(Π x)_i = x_{perm[i]}`.
pub fn permutation_matrix(perm: &[usize]) -> RMat {
    let k = perm.len();
    let mut m = RMat::zeros(k, k);
    for (i, &p) in perm.iter().enumerate() {
        m[(i, p)] = 1.0;
    }
    m
}

/// `M Πᵀ`: column `i` of the result is column `perm[i]` of `m`.
pub fn permute_columns(m: &CMat, perm: &[usize]) -> CMat {
    CMat::from_fn(m.nrows(), perm.len(), |r, c| m[(r, perm[c])])
}

/// `Π x` for a real vector.
pub fn permute_vec(x: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&p| x[p]).collect()
}

/// `Π M Πᵀ` for a square real matrix.
pub fn conjugate_by_permutation(m: &RMat, perm: &[usize]) -> RMat {
    RMat::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

pub fn frobenius_sq(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `Re <A, B>` under the Frobenius inner product, i.e. `Re Σ conj(a) b`.
pub fn real_inner(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn to_complex(m: &RMat) -> CMat {
    m.map(|x| C64::new(x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 8] {
            let u = random_unitary(&mut rng, n);
            let err = (u.adjoint() * &u - CMat::identity(n, n)).norm();
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn permutation_helpers_agree_with_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let perm = random_permutation(&mut rng, 5);
        let p = permutation_matrix(&perm);
        let m = complex_gaussian_matrix(&mut rng, 3, 5);
        let direct = &m * to_complex(&p.transpose());
        assert!((direct - permute_columns(&m, &perm)).norm() < 1e-15);

        let y = RMat::from_fn(5, 5, |i, j| (i * 7 + j) as f64);
        let conj = &p * &y * p.transpose();
        assert_eq!(conj, conjugate_by_permutation(&y, &perm));

        let x: Vec<f64> = (0..5).map(|i| i as f64 * 1.5).collect();
        let px = &p * nalgebra::DVector::from_vec(x.clone());
        assert_eq!(px.as_slice(), permute_vec(&x, &perm).as_slice());
    }

    #[test]
    fn complex_gaussian_has_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let p: f64 = (0..n).map(|_| complex_gaussian(&mut rng).norm_sqr()).sum::<f64>() / n as f64;
        assert!((p - 1.0).abs() < 0.01, "{p}");
    }
}
