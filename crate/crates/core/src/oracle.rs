//! Numerical recovery of equivariant linear-layer solution spaces.
//!
//! For a group acting on the layer input and output, the admissible linear
//! weights form the null space of the stacked constraints `L_g(W) = 0` over a
//! sample of group elements `g`. Continuous groups are sampled at random;
//! generic samples cut out the same null space as the whole group, and the
//! solver checks that the dimension does not move when the sample is doubled.

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{permutation_matrix, random_permutation, random_unitary, to_complex, CMat, RMat, C64};

/// Relative eigenvalue cut used to separate the null space of the Gram matrix.
const NULL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `(I_K ⊗ U) W = W (I_K ⊗ U)` for every unitary `U`, `W` is `NK x NK`.
    UnitaryLeft,
    /// `(I_K ⊗ U) W = W` for every unitary `U`, `W` is `NK x K`.
    UnitaryAbsorb,
    /// `(Π ⊗ Π) W = W (Π ⊗ Π)` for every permutation `Π`, `W` is `K² x K²`.
    PermDiag,
    /// `(Π1 ⊗ Π2) W = W (Π1 ⊗ Π2)` for independent permutations.
    PermPair,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] =
        [FamilyKind::UnitaryLeft, FamilyKind::UnitaryAbsorb, FamilyKind::PermDiag, FamilyKind::PermPair];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::UnitaryLeft => "unitary_left",
            FamilyKind::UnitaryAbsorb => "unitary_absorb",
            FamilyKind::PermDiag => "perm_diag",
            FamilyKind::PermPair => "perm_pair",
        }
    }

    fn is_unitary(self) -> bool {
        matches!(self, FamilyKind::UnitaryLeft | FamilyKind::UnitaryAbsorb)
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyKind::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown constraint family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFamily {
    pub kind: FamilyKind,
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_group_samples")]
    pub num_group_samples: usize,
}

fn default_group_samples() -> usize {
    64
}

impl ConstraintFamily {
    pub fn new(kind: FamilyKind, n: usize, k: usize) -> Self {
        Self { kind, n, k, num_group_samples: default_group_samples() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Domain("family sizes must be >= 1".into()));
        }
        if self.num_group_samples < 20 {
            return Err(Error::Domain(format!(
                "need at least 20 group samples, got {}",
                self.num_group_samples
            )));
        }
        Ok(())
    }

    /// Shape `(rows, cols)` of the unknown weight matrix.
    pub fn weight_shape(&self) -> (usize, usize) {
        let (n, k) = (self.n, self.k);
        match self.kind {
            FamilyKind::UnitaryLeft => (n * k, n * k),
            FamilyKind::UnitaryAbsorb => (n * k, k),
            FamilyKind::PermDiag | FamilyKind::PermPair => (k * k, k * k),
        }
    }

    /// A random group element in its matrix representation.
    pub fn sample_element<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        match self.kind {
            FamilyKind::UnitaryLeft | FamilyKind::UnitaryAbsorb => {
                let u = random_unitary(rng, self.n);
                CMat::identity(self.k, self.k).kronecker(&u)
            }
            FamilyKind::PermDiag => {
                let p = permutation_matrix(&random_permutation(rng, self.k));
                to_complex(&p.kronecker(&p))
            }
            FamilyKind::PermPair => {
                let p1 = permutation_matrix(&random_permutation(rng, self.k));
                let p2 = permutation_matrix(&random_permutation(rng, self.k));
                to_complex(&p1.kronecker(&p2))
            }
        }
    }

    /// `-I` in the representation (only meaningful for the unitary kinds).
    fn negative_identity(&self) -> CMat {
        let m = self.n * self.k;
        -CMat::identity(m, m)
    }

    /// Constraint residual `L_g(W)`.
    pub fn apply(&self, g: &CMat, w: &CMat) -> CMat {
        match self.kind {
            FamilyKind::UnitaryAbsorb => g * w - w,
            _ => g * w - w * g,
        }
    }

    /// Matrix of `vec(W) -> vec(L_g(W))` (column-major vec).
    fn constraint_matrix(&self, g: &CMat) -> CMat {
        let (rows, cols) = self.weight_shape();
        match self.kind {
            FamilyKind::UnitaryAbsorb => CMat::identity(cols, cols).kronecker(g) - CMat::identity(rows * cols, rows * cols),
            _ => {
                CMat::identity(cols, cols).kronecker(g) - g.transpose().kronecker(&CMat::identity(rows, rows))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSpace {
    pub family: ConstraintFamily,
    /// Orthonormal basis under the Frobenius inner product.
    pub basis: Vec<CMat>,
    /// Complex dimension.
    pub dimension: usize,
    /// Largest constraint violation of a basis element over the sampled elements.
    pub residual: f64,
}

/// `[[Re, -Im], [Im, Re]]`, the real form of a complex linear map.
fn realify(m: &CMat) -> RMat {
    let (r, c) = m.shape();
    let mut out = RMat::zeros(2 * r, 2 * c);
    for j in 0..c {
        for i in 0..r {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(i, j + c)] = -z.im;
            out[(i + r, j)] = z.im;
            out[(i + r, j + c)] = z.re;
        }
    }
    out
}

fn unvec(v: &[C64], rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, v)
}

/// Null space of the stacked constraints, as complex vectors (vec(W)).
fn null_space(family: &ConstraintFamily, elements: &[CMat]) -> Vec<Vec<C64>> {
    let (rows, cols) = family.weight_shape();
    let unknowns = rows * cols;
    // Permutation representations are real, so real and imaginary parts of
    // W decouple and the real system already has the complex dimension.
    let real_group = !family.kind.is_unitary();
    let width = if real_group { unknowns } else { 2 * unknowns };
    let mut gram = RMat::zeros(width, width);
    for g in elements {
        let m = family.constraint_matrix(g);
        let a = if real_group { m.map(|z| z.re) } else { realify(&m) };
        gram.gemm_tr(1.0, &a, &a, 1.0);
    }
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let cut = NULL_TOL * lmax.max(1.0);

    let mut raw: Vec<Vec<C64>> = Vec::new();
    for (idx, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > cut {
            continue;
        }
        let col = eig.eigenvectors.column(idx);
        let z: Vec<C64> = if real_group {
            col.iter().map(|&x| C64::new(x, 0.0)).collect()
        } else {
            (0..unknowns).map(|i| C64::new(col[i], col[i + unknowns])).collect()
        };
        raw.push(z);
    }

    // Complex Gram-Schmidt; in the realified case each complex direction
    // shows up twice (z and i z).
    let mut basis: Vec<Vec<C64>> = Vec::new();
    for mut z in raw {
        for b in &basis {
            let proj: C64 = b.iter().zip(&z).map(|(x, y)| x.conj() * y).sum();
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi -= proj * bi;
            }
        }
        let norm = z.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-6 {
            z.iter_mut().for_each(|x| *x /= norm);
            basis.push(z);
        }
    }
    basis
}

fn sample_elements<R: Rng + ?Sized>(family: &ConstraintFamily, rng: &mut R, count: usize) -> Vec<CMat> {
    let mut out: Vec<CMat> = (0..count).map(|_| family.sample_element(rng)).collect();
    if family.kind.is_unitary() {
        out.push(family.negative_identity());
    }
    out
}

/// Max constraint violation of `basis` over `elements`.
pub fn max_violation(family: &ConstraintFamily, basis: &[CMat], elements: &[CMat]) -> f64 {
    basis
        .iter()
        .flat_map(|b| elements.iter().map(move |g| family.apply(g, b).norm()))
        .fold(0.0, f64::max)
}

/// Solve the commutation constraints of `family` numerically.
pub fn solve_commutant<R: Rng + ?Sized>(family: &ConstraintFamily, rng: &mut R) -> Result<SolutionSpace> {
    family.validate()?;
    let (rows, cols) = family.weight_shape();

    let coarse_elems = sample_elements(family, rng, family.num_group_samples);
    let coarse = null_space(family, &coarse_elems);

    let mut fine_elems = coarse_elems;
    fine_elems.extend(sample_elements(family, rng, family.num_group_samples));
    let fine = null_space(family, &fine_elems);

    if coarse.len() != fine.len() {
        return Err(Error::UnstableDimension { coarse: coarse.len(), fine: fine.len() });
    }
    let basis: Vec<CMat> = fine.iter().map(|v| unvec(v, rows, cols)).collect();
    let residual = max_violation(family, &basis, &fine_elems);
    Ok(SolutionSpace { family: *family, dimension: basis.len(), basis, residual })
}

/// Constraint violation of a solved space on freshly drawn group elements.
pub fn out_of_sample_residual<R: Rng + ?Sized>(space: &SolutionSpace, rng: &mut R, count: usize) -> f64 {
    let elems: Vec<CMat> = (0..count).map(|_| space.family.sample_element(rng)).collect();
    max_violation(&space.family, &space.basis, &elems)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFit {
    pub g: CMat,
    /// `||W - G^T ⊗ I_N||_F / ||W||_F`, zero for `W = 0`.
    pub residual: f64,
}

/// Least-squares fit `W ≈ G^T ⊗ I_N` for an `NK x NK` matrix.
pub fn verify_kronecker_structure(w: &CMat, n: usize, k: usize) -> Result<KroneckerFit> {
    if w.shape() != (n * k, n * k) {
        return Err(Error::Shape(format!("expected {0}x{0}, got {1:?}", n * k, w.shape())));
    }
    // Block (a, b) of G^T ⊗ I_N is G[b, a] I_N; the LS fit is its mean diagonal.
    let g = CMat::from_fn(k, k, |b, a| {
        (0..n).map(|r| w[(a * n + r, b * n + r)]).sum::<C64>() / n as f64
    });
    let fit = g.transpose().kronecker(&CMat::identity(n, n));
    let wn = w.norm();
    let residual = if wn == 0.0 { 0.0 } else { (w - fit).norm() / wn };
    Ok(KroneckerFit { g, residual })
}

/// One row of a structure report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub family: FamilyKind,
    pub n: usize,
    pub k: usize,
    pub dimension: usize,
    pub residual: f64,
    pub out_of_sample_residual: f64,
}

impl StructureRow {
    pub fn from_space<R: Rng + ?Sized>(space: &SolutionSpace, rng: &mut R) -> Self {
        Self {
            family: space.family.kind,
            n: space.family.n,
            k: space.family.k,
            dimension: space.dimension,
            residual: space.residual,
            out_of_sample_residual: out_of_sample_residual(space, rng, 100),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solve(kind: FamilyKind, n: usize, k: usize, seed: u64) -> SolutionSpace {
        solve_commutant(&ConstraintFamily::new(kind, n, k), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn assert_orthonormal(basis: &[CMat]) {
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let ip: C64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - C64::new(expect, 0.0)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn unitary_left_is_kronecker_with_identity() {
        let space = solve(FamilyKind::UnitaryLeft, 3, 2, 1);
        assert_eq!(space.dimension, 4);
        assert!(space.residual < 1e-8);
        assert_orthonormal(&space.basis);
        for b in &space.basis {
            assert!(verify_kronecker_structure(b, 3, 2).unwrap().residual < 1e-8);
        }
        assert!(out_of_sample_residual(&space, &mut ChaCha8Rng::seed_from_u64(99), 100) < 1e-8);
    }

    #[test]
    fn unitary_left_single_ue_is_scalar() {
        let space = solve(FamilyKind::UnitaryLeft, 3, 1, 2);
        assert_eq!(space.dimension, 1);
        let b = &space.basis[0];
        let scale = b[(0, 0)];
        assert!((b - CMat::identity(3, 3) * scale).norm() < 1e-8);
    }

    #[test]
    fn weight_absorbing_layer_vanishes() {
        let space = solve(FamilyKind::UnitaryAbsorb, 3, 2, 3);
        assert_eq!(space.dimension, 0);
    }

    #[test]
    fn permutation_families() {
        let diag = solve(FamilyKind::PermDiag, 1, 4, 4);
        assert_eq!(diag.dimension, 15);
        assert!(diag.residual < 1e-8);
        assert_orthonormal(&diag.basis);
        let pair = solve(FamilyKind::PermPair, 1, 4, 5);
        assert_eq!(pair.dimension, 4);
        assert!(pair.dimension < diag.dimension);
        assert!(out_of_sample_residual(&pair, &mut ChaCha8Rng::seed_from_u64(6), 100) < 1e-8);
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut fam = ConstraintFamily::new(FamilyKind::PermPair, 1, 3);
        fam.num_group_samples = 5;
        assert!(solve_commutant(&fam, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn kronecker_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = complex_gaussian_matrix(&mut rng, 3, 3);
        let w = g.transpose().kronecker(&CMat::identity(4, 4));
        let fit = verify_kronecker_structure(&w, 4, 3).unwrap();
        assert!(fit.residual < 1e-12);
        assert!((fit.g - g).norm() < 1e-12);

        for _ in 0..20 {
            let dense = complex_gaussian_matrix(&mut rng, 12, 12);
            assert!(verify_kronecker_structure(&dense, 4, 3).unwrap().residual > 0.1);
        }

        let zero = verify_kronecker_structure(&CMat::zeros(12, 12), 4, 3).unwrap();
        assert_eq!(zero.residual, 0.0);
        assert!(zero.g.iter().all(|z| z.norm() == 0.0));
    }
}
