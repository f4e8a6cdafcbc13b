//! Quantum states, observables, and parametrized observable frames.
//!
//! [`DensityMatrix`] enforces the state invariants (Hermitian, unit trace,
//! positive semidefinite) at construction. [`Observable`] wraps a Hermitian
//! matrix; measurement observables with a prescribed spectrum are built from
//! [`UnitaryParams`] as X = U D U†, where U is a product of complex Givens
//! rotations (one angle pair per plane) and D is the fixed diagonal of
//! eigenvalues. Diagonal phase factors commute with D under conjugation, so
//! the plane angles alone cover the whole conjugation orbit.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

/// Dense complex matrix used throughout the crate.
pub type CMatrix = DMatrix<Complex64>;
/// Dense complex vector.
pub type CVector = DVector<Complex64>;

/// Hermiticity tolerance enforced at construction.
pub const HERM_TOL: f64 = 1e-12;
/// Unit-trace tolerance enforced at construction.
pub const TRACE_TOL: f64 = 1e-12;
/// Lower bound on the minimum eigenvalue enforced at construction.
pub const PSD_TOL: f64 = -1e-10;
/// Maximum imaginary part tolerated in an expectation value.
pub const EXPECT_IM_TOL: f64 = 1e-10;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// (m + m†)/2.
pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5, 0.0)
}

fn max_abs_entry(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs_entry(&(m - m.adjoint()))
}

/// A validated density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    /// Validates and wraps `mat`. Fails if `mat` is not square, not
    /// Hermitian to 1e-12, not unit-trace to 1e-12, or has an eigenvalue
    /// below −1e-10.
    pub fn new(mat: CMatrix) -> Result<Self> {
        Self::with_psd_tol(mat, PSD_TOL)
    }

    /// Like [`DensityMatrix::new`] but with a caller-chosen positivity
    /// tolerance (`min eigenvalue ≥ psd_tol`). Integrators pass a step-scaled
    /// tolerance here; `psd_tol` must not be above zero by more than is
    /// meaningful for the application.
    pub fn with_psd_tol(mat: CMatrix, psd_tol: f64) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "density matrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let herm = hermiticity_defect(&mat);
        if herm > HERM_TOL {
            return Err(Error::InvalidState(format!(
                "density matrix not Hermitian: max |ρ - ρ†| entry = {herm:.3e}"
            )));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!(
                "density matrix trace {} + {}i differs from 1",
                tr.re, tr.im
            )));
        }
        let min_eig = nalgebra::SymmetricEigen::new(hermitize(&mat))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < psd_tol {
            return Err(Error::InvalidState(format!(
                "density matrix not positive semidefinite: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { mat })
    }

    /// Pure state |ψ⟩⟨ψ| from a (not necessarily normalized) vector.
    pub fn from_pure(psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("zero state vector".into()));
        }
        let psi = psi / c(norm, 0.0);
        let mat = &psi * psi.adjoint();
        Self::new(mat)
    }

    /// Diagonal state from a probability vector.
    pub fn diagonal(probs: &[f64]) -> Result<Self> {
        let mat = CMatrix::from_diagonal(&CVector::from_iterator(
            probs.len(),
            probs.iter().map(|&p| c(p, 0.0)),
        ));
        Self::new(mat)
    }

    /// Maximally mixed state I/n.
    pub fn maximally_mixed(dim: usize) -> Self {
        let mat = CMatrix::identity(dim, dim) * c(1.0 / dim as f64, 0.0);
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }
}

/// A Hermitian observable.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    mat: CMatrix,
}

impl Observable {
    /// Validates Hermiticity to 1e-12 and wraps the matrix.
    pub fn new(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "observable must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let herm = hermiticity_defect(&mat);
        if herm > HERM_TOL {
            return Err(Error::InvalidState(format!(
                "observable not Hermitian: max |X - X†| entry = {herm:.3e}"
            )));
        }
        Ok(Self { mat })
    }

    /// Real diagonal observable.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mat = CMatrix::from_diagonal(&CVector::from_iterator(
            diag.len(),
            diag.iter().map(|&d| c(d, 0.0)),
        ));
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }
}

/// Which side the adjoint sits on in the sandwich term of the dissipator.
///
/// Both conventions share the anticommutator part −c†cρ − ρc†c and coincide
/// whenever c is Hermitian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DissipatorConvention {
    /// 𝒟[c]ρ = 2c†ρc − c†cρ − ρc†c.
    AdjointOutside,
    /// 𝒟[c]ρ = 2cρc† − c†cρ − ρc†c (the standard Lindblad form).
    AdjointInside,
}

/// Dissipation superoperator applied to a state, 𝒟[c]ρ = 2c†ρc − c†cρ − ρc†c.
///
/// For the Hermitian `c` accepted here the two adjoint conventions coincide;
/// the result is Hermitian and traceless.
pub fn dissipator(c_op: &Observable, rho: &DensityMatrix) -> Result<CMatrix> {
    if c_op.dim() != rho.dim() {
        return Err(Error::DimensionMismatch(format!(
            "dissipator: operator dim {} vs state dim {}",
            c_op.dim(),
            rho.dim()
        )));
    }
    Ok(dissipator_general(
        c_op.matrix(),
        rho.matrix(),
        DissipatorConvention::AdjointOutside,
    ))
}

/// Dissipator for a general (possibly non-Hermitian, possibly non-normal)
/// operator, with an explicit adjoint-placement convention.
///
/// The result is traceless only when c is normal ([c, c†] = 0).
pub fn dissipator_general(
    c_op: &CMatrix,
    rho: &CMatrix,
    convention: DissipatorConvention,
) -> CMatrix {
    let cd = c_op.adjoint();
    let cdc = &cd * c_op;
    let sandwich = match convention {
        DissipatorConvention::AdjointOutside => &cd * rho * c_op,
        DissipatorConvention::AdjointInside => c_op * rho * &cd,
    };
    sandwich * c(2.0, 0.0) - &cdc * rho - rho * &cdc
}

/// Expectation value ⟨X⟩ = Tr[Xρ].
///
/// Fails if the imaginary part of the trace exceeds 1e-10 (a symptom of a
/// corrupted state or observable).
pub fn expectation(x: &Observable, rho: &DensityMatrix) -> Result<f64> {
    if x.dim() != rho.dim() {
        return Err(Error::DimensionMismatch(format!(
            "expectation: observable dim {} vs state dim {}",
            x.dim(),
            rho.dim()
        )));
    }
    let tr = (x.matrix() * rho.matrix()).trace();
    if tr.im.abs() > EXPECT_IM_TOL {
        return Err(Error::InvalidState(format!(
            "expectation has imaginary part {:.3e}",
            tr.im
        )));
    }
    Ok(tr.re)
}

/// Parameters of an observable frame X = U D U†.
///
/// `diag` holds the eigenvalues of D. `angles` holds one (θ, φ) pair per
/// rotation plane, planes ordered (0,1), (0,2), …, (0,n−1), (1,2), …,
/// (n−2,n−1), flattened as [θ₀, φ₀, θ₁, φ₁, …]; n(n−1) reals in total.
/// U is the product of the plane rotations in that order. Right-multiplied
/// diagonal phases leave U D U† unchanged, so this family is surjective onto
/// the conjugation orbit of D.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitaryParams {
    pub angles: Vec<f64>,
    pub diag: Vec<f64>,
}

/// Rotation planes (i, j), i < j, in the fixed construction order.
pub fn plane_order(n: usize) -> Vec<(usize, usize)> {
    let mut planes = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            planes.push((i, j));
        }
    }
    planes
}

/// Complex Givens rotation in plane (i, j): the 2×2 block
/// [[cos θ, e^{−iφ} sin θ], [−e^{iφ} sin θ, cos θ]] embedded in the identity.
fn givens(n: usize, i: usize, j: usize, theta: f64, phi: f64) -> CMatrix {
    let mut g = CMatrix::identity(n, n);
    let (s, ct) = theta.sin_cos();
    g[(i, i)] = c(ct, 0.0);
    g[(j, j)] = c(ct, 0.0);
    g[(i, j)] = Complex64::from_polar(s, -phi);
    g[(j, i)] = -Complex64::from_polar(s, phi);
    g
}

impl UnitaryParams {
    /// Number of angle entries required for dimension `n`.
    pub fn angle_len(n: usize) -> usize {
        n * (n - 1)
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.diag.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty diagonal".into()));
        }
        if self.angles.len() != Self::angle_len(n) {
            return Err(Error::InvalidArgument(format!(
                "expected {} angles for dimension {n}, got {}",
                Self::angle_len(n),
                self.angles.len()
            )));
        }
        Ok(())
    }

    /// The frame unitary U (product of the plane rotations).
    pub fn unitary(&self) -> Result<CMatrix> {
        self.validate()?;
        let n = self.diag.len();
        let mut u = CMatrix::identity(n, n);
        for (k, &(i, j)) in plane_order(n).iter().enumerate() {
            let theta = self.angles[2 * k];
            let phi = self.angles[2 * k + 1];
            u = u * givens(n, i, j, theta, phi);
        }
        Ok(u)
    }
}

/// Builds the observable X = U D U† from frame parameters.
pub fn observable_from(params: &UnitaryParams) -> Result<Observable> {
    let u = params.unitary()?;
    let d = Observable::from_diagonal(&params.diag);
    let x = hermitize(&(&u * d.matrix() * u.adjoint()));
    Observable::new(x)
}

/// Recovers frame angles reproducing `u`'s conjugation action: the returned
/// params satisfy observable_from(params) = u D u† for any real diagonal D
/// with eigenvalues `diag`. Inverts the Givens product by column elimination;
/// the leftover diagonal phase factor is dropped (it commutes with D).
pub fn params_for_unitary(u: &CMatrix, diag: Vec<f64>) -> Result<UnitaryParams> {
    let n = diag.len();
    if u.nrows() != n || u.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "unitary is {}x{}, diagonal has length {n}",
            u.nrows(),
            u.ncols()
        )));
    }
    let defect = max_abs_entry(&(u.adjoint() * u - CMatrix::identity(n, n)));
    if defect > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "matrix is not unitary: max |U†U - I| entry = {defect:.3e}"
        )));
    }
    let mut m = u.clone();
    let mut angles = Vec::with_capacity(UnitaryParams::angle_len(n));
    for &(i, j) in &plane_order(n) {
        // Eliminate entry (j, i) using rows i and j; the rotations applied
        // here, inverted in the same plane order, rebuild U up to a right
        // diagonal-phase factor.
        let a = m[(i, i)];
        let b = m[(j, i)];
        let theta = b.norm().atan2(a.norm());
        let phi = if b.norm() == 0.0 { 0.0 } else { b.arg() - a.arg() };
        let g = givens(n, i, j, theta, phi);
        m = g * m;
        angles.push(-theta);
        angles.push(phi);
    }
    Ok(UnitaryParams { angles, diag })
}

/// Spectral decomposition with eigenvalues sorted in descending order.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Corresponding eigenvectors as matrix columns.
    pub vectors: CMatrix,
}

/// Eigendecomposition of a density matrix, eigenvalues descending.
///
/// Ties (degenerate eigenvalues) are returned in the order produced by the
/// underlying symmetric eigensolver; the decomposition still reconstructs ρ.
pub fn eig_sorted(rho: &DensityMatrix) -> EigenDecomposition {
    eig_sorted_hermitian(rho.matrix())
}

/// Eigendecomposition of any Hermitian matrix, eigenvalues descending.
pub fn eig_sorted_hermitian(m: &CMatrix) -> EigenDecomposition {
    let eig = nalgebra::SymmetricEigen::new(hermitize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    EigenDecomposition { values, vectors }
}

/// Random Hermitian matrix with entries of order 1 (test/scenario helper).
pub fn random_hermitian<R: Rng>(rng: &mut R, n: usize) -> Observable {
    let raw = CMatrix::from_fn(n, n, |_, _| {
        c(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
    });
    Observable::new(hermitize(&raw)).expect("hermitized matrix is Hermitian")
}

/// Random full-rank density matrix, ρ = AA†/Tr[AA†] (test/scenario helper).
pub fn random_density<R: Rng>(rng: &mut R, n: usize) -> DensityMatrix {
    let a = CMatrix::from_fn(n, n, |_, _| {
        c(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
    });
    let mut m = &a * a.adjoint();
    // Mix toward the identity so eigenvalues stay comfortably positive.
    m += CMatrix::identity(n, n) * c(0.1, 0.0);
    let tr = m.trace().re;
    let m = hermitize(&(m * c(1.0 / tr, 0.0)));
    DensityMatrix::new(m).expect("constructed matrix is a valid state")
}
