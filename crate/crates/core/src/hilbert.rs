//! Truncated composite Hilbert space TLS ⊗ F₁ ⊗ F₂.
//!
//! The basis is ordered row-major with the TLS index slowest: the basis index
//! of |s, n₁, n₂⟩ is `s·c₁·c₂ + n₁·c₂ + n₂` where `c₁`, `c₂` are the Fock
//! cutoffs (number of retained levels) of the two photonic modes. Equivalently
//! a full-space operator is `kron(tls, kron(mode1, mode2))`.
//!
//! TLS convention: |0⟩ is the ground/ancilla state with σ_z|0⟩ = +|0⟩, and σ⁺
//! raises |0⟩ → |1⟩, so that σ⁺a_j + σ⁻a_j† conserves the total excitation
//! number n₁ + n₂ + (1−σ_z)/2.

use std::sync::OnceLock;

use ndarray::{linalg::kron, Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// TLS dimension; the ancilla is always a two-level system.
pub const TLS_DIM: usize = 2;

/// Unit-norm tolerance enforced on any constructed or propagated state.
pub const NORM_TOL: f64 = 1e-10;

/// Max-norm tolerance for the Hermiticity check on hinted operators.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Tolerance on the imaginary part when a Hermitian expectation is reduced
/// to a real number.
pub const IMAG_TOL: f64 = 1e-10;

/// Dimensions and basis indexing of the composite space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceDescriptor {
    cutoff1: usize,
    cutoff2: usize,
}

impl SpaceDescriptor {
    /// Create a space with the given number of Fock levels per mode
    /// (levels 0..cutoff−1). Each cutoff must be at least 2.
    pub fn new(cutoff1: usize, cutoff2: usize) -> Result<Self> {
        if cutoff1 < 2 {
            return Err(Error::InvalidCutoff(cutoff1));
        }
        if cutoff2 < 2 {
            return Err(Error::InvalidCutoff(cutoff2));
        }
        Ok(Self { cutoff1, cutoff2 })
    }

    /// Space sized for a target occupation of `n` photons in either mode,
    /// with `headroom` guard levels above it (cutoff = n + headroom).
    ///
    /// The σ_x drive does not conserve excitation number, so at least one
    /// guard level is needed to make truncation error observable.
    pub fn for_photon_number(n: usize, headroom: usize) -> Result<Self> {
        Self::new(n + headroom, n + headroom)
    }

    pub fn cutoff1(&self) -> usize {
        self.cutoff1
    }

    pub fn cutoff2(&self) -> usize {
        self.cutoff2
    }

    /// Total dimension D = 2·c₁·c₂.
    pub fn dim(&self) -> usize {
        TLS_DIM * self.cutoff1 * self.cutoff2
    }

    /// Basis index of |s, n₁, n₂⟩.
    pub fn index_of(&self, s: usize, n1: usize, n2: usize) -> Result<usize> {
        if s >= TLS_DIM || n1 >= self.cutoff1 || n2 >= self.cutoff2 {
            return Err(Error::OutOfRange {
                s,
                n1,
                n2,
                c1: self.cutoff1,
                c2: self.cutoff2,
            });
        }
        Ok(s * self.cutoff1 * self.cutoff2 + n1 * self.cutoff2 + n2)
    }

    /// Quantum numbers (s, n₁, n₂) of a basis index.
    pub fn labels(&self, index: usize) -> (usize, usize, usize) {
        debug_assert!(index < self.dim());
        let per_tls = self.cutoff1 * self.cutoff2;
        let s = index / per_tls;
        let rem = index % per_tls;
        (s, rem / self.cutoff2, rem % self.cutoff2)
    }
}

/// A normalized state vector on a [`SpaceDescriptor`].
#[derive(Debug, Clone)]
pub struct PureState {
    space: SpaceDescriptor,
    amplitudes: Array1<C64>,
}

impl PureState {
    /// Wrap an amplitude vector, checking length and unit norm (±1e-10).
    pub fn try_new(space: SpaceDescriptor, amplitudes: Array1<C64>) -> Result<Self> {
        if amplitudes.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: amplitudes.len(),
                context: "state vector length",
            });
        }
        let norm = vec_norm(&amplitudes);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NumericalConsistency(format!(
                "state norm {norm} deviates from 1 by more than {NORM_TOL:.0e}"
            )));
        }
        Ok(Self { space, amplitudes })
    }

    /// Wrap an amplitude vector after rescaling it to unit norm.
    pub fn normalized(space: SpaceDescriptor, amplitudes: Array1<C64>) -> Result<Self> {
        if amplitudes.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: amplitudes.len(),
                context: "state vector length",
            });
        }
        let norm = vec_norm(&amplitudes);
        if norm < 1e-14 {
            return Err(Error::InvalidInput(
                "cannot normalize a (near-)zero vector".into(),
            ));
        }
        let amplitudes = amplitudes.mapv(|z| z / norm);
        Ok(Self { space, amplitudes })
    }

    /// Construction without the norm check, for propagation-internal use
    /// where the norm is tracked separately.
    pub(crate) fn unchecked(space: SpaceDescriptor, amplitudes: Array1<C64>) -> Self {
        Self { space, amplitudes }
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.space
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        vec_norm(&self.amplitudes)
    }

    /// Inner product ⟨self|other⟩.
    pub fn inner(&self, other: &PureState) -> C64 {
        inner(&self.amplitudes, &other.amplitudes)
    }

    /// |⟨self|other⟩|².
    pub fn overlap_sq(&self, other: &PureState) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// Expectation ⟨ψ|O|ψ⟩ reduced to a real number.
    ///
    /// Requires the operator to carry the Hermitian hint; errors if the
    /// residual imaginary part exceeds 1e-10.
    pub fn expectation(&self, op: &OperatorMatrix) -> Result<f64> {
        real_expectation(self.expectation_complex(op)?, op)
    }

    /// Expectation ⟨ψ|O|ψ⟩ as a complex number.
    pub fn expectation_complex(&self, op: &OperatorMatrix) -> Result<C64> {
        if op.space != self.space {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: op.space.dim(),
                context: "operator/state space",
            });
        }
        Ok(inner(&self.amplitudes, &op.entries.dot(&self.amplitudes)))
    }
}

/// ⟨a|b⟩ with conjugation on the left argument.
pub fn inner(a: &Array1<C64>, b: &Array1<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Euclidean norm of a complex vector.
pub fn vec_norm(v: &Array1<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn real_expectation(value: C64, op: &OperatorMatrix) -> Result<f64> {
    if !op.hermitian_hint {
        return Err(Error::InvalidInput(
            "real expectation requires a Hermitian-hinted operator; \
             use expectation_complex"
                .into(),
        ));
    }
    if value.im.abs() >= IMAG_TOL {
        return Err(Error::NumericalConsistency(format!(
            "expectation of a Hermitian-hinted operator has imaginary part {:.3e}",
            value.im
        )));
    }
    Ok(value.re)
}

/// Dense operator on the composite space.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    space: SpaceDescriptor,
    entries: Array2<C64>,
    hermitian_hint: bool,
}

impl OperatorMatrix {
    /// Wrap a matrix asserting Hermiticity (max |M − M†| < 1e-12).
    pub fn hermitian(space: SpaceDescriptor, entries: Array2<C64>) -> Result<Self> {
        check_square(space, &entries)?;
        let dev = hermiticity_deviation(&entries);
        if dev >= HERMITICITY_TOL {
            return Err(Error::NotHermitian { deviation: dev });
        }
        Ok(Self {
            space,
            entries,
            hermitian_hint: true,
        })
    }

    /// Wrap a matrix with no symmetry assumption.
    pub fn general(space: SpaceDescriptor, entries: Array2<C64>) -> Result<Self> {
        check_square(space, &entries)?;
        Ok(Self {
            space,
            entries,
            hermitian_hint: false,
        })
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.space
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn hermitian_hint(&self) -> bool {
        self.hermitian_hint
    }

    /// Matrix-vector product on raw amplitudes.
    pub fn apply_vec(&self, v: &Array1<C64>) -> Array1<C64> {
        self.entries.dot(v)
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> OperatorMatrix {
        OperatorMatrix {
            space: self.space,
            entries: dagger(&self.entries),
            hermitian_hint: self.hermitian_hint,
        }
    }

    /// Product self·other (no symmetry hint on the result).
    pub fn matmul(&self, other: &OperatorMatrix) -> Result<OperatorMatrix> {
        if self.space != other.space {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: other.space.dim(),
                context: "operator product spaces",
            });
        }
        Ok(OperatorMatrix {
            space: self.space,
            entries: self.entries.dot(&other.entries),
            hermitian_hint: false,
        })
    }

    /// max |U†U − I|, the deviation from unitarity.
    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.entries.nrows();
        let prod = dagger(&self.entries).dot(&self.entries);
        let mut dev = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                dev = dev.max((prod[[i, j]] - target).norm());
            }
        }
        dev
    }
}

fn check_square(space: SpaceDescriptor, entries: &Array2<C64>) -> Result<()> {
    let d = space.dim();
    if entries.nrows() != d || entries.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: entries.nrows().max(entries.ncols()),
            context: "operator matrix shape",
        });
    }
    Ok(())
}

/// max |M − M†|.
pub fn hermiticity_deviation(m: &Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    dev
}

/// Conjugate transpose of a raw matrix.
pub fn dagger(m: &Array2<C64>) -> Array2<C64> {
    m.t().mapv(|z| z.conj())
}

/// Whether the LAPACK backend hands back conjugated eigenvectors for our
/// standard-layout arrays (it solves the transposed problem, and for a
/// Hermitian matrix the transpose is the conjugate). Probed once.
static EIGVECS_CONJUGATED: OnceLock<bool> = OnceLock::new();

fn probe_eigvec_convention() -> bool {
    let m = ndarray::array![
        [C64::new(1.0, 0.0), C64::new(0.0, -1.0)],
        [C64::new(0.0, 1.0), C64::new(2.0, 0.0)]
    ];
    let (vals, vecs) = m.eigh(UPLO::Lower).expect("2x2 eigendecomposition");
    let residual = |v: &Array1<C64>, lambda: f64| -> f64 {
        let hv = m.dot(v);
        hv.iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b * lambda).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    let v0 = vecs.column(0).to_owned();
    let direct = residual(&v0, vals[0]);
    let conjugated = residual(&v0.mapv(|z| z.conj()), vals[0]);
    if direct.min(conjugated) > 1e-10 {
        panic!("eigensolver returned vectors matching neither convention");
    }
    conjugated < direct
}

/// Hermitian eigendecomposition H = V·diag(λ)·V† with the eigenvector
/// convention normalized across LAPACK layout quirks: columns of the returned
/// matrix are genuine eigenvectors.
pub fn eigh_hermitian(m: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let (vals, vecs) = m.eigh(UPLO::Lower)?;
    if *EIGVECS_CONJUGATED.get_or_init(probe_eigvec_convention) {
        Ok((vals, vecs.mapv(|z| z.conj())))
    } else {
        Ok((vals, vecs))
    }
}

/// Eigendecomposition of a real symmetric matrix (real vectors have no
/// conjugation ambiguity).
pub fn eigh_real_symmetric(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    Ok(m.eigh(UPLO::Lower)?)
}

/// Single-mode annihilation operator on `d` Fock levels:
/// (a)_{n−1,n} = √n for n = 1..d−1.
pub fn annihilation(d: usize) -> Result<Array2<C64>> {
    if d < 2 {
        return Err(Error::InvalidCutoff(d));
    }
    let mut a = Array2::zeros((d, d));
    for n in 1..d {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(a)
}

/// Single-mode number operator a†a, diagonal on `d` Fock levels.
pub fn number_operator(d: usize) -> Array2<C64> {
    Array2::from_diag(&Array1::from_iter(
        (0..d).map(|n| C64::new(n as f64, 0.0)),
    ))
}

/// σ_x in the {|0⟩, |1⟩} basis.
pub fn sigma_x() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    ]
}

/// σ_z with σ_z|0⟩ = +|0⟩.
pub fn sigma_z() -> Array2<C64> {
    ndarray::array![
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]
    ]
}

/// σ⁺ = |1⟩⟨0|, raising the TLS out of the ground state.
pub fn sigma_plus() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.0, 0.0)],
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    ]
}

/// σ⁻ = |0⟩⟨1|.
pub fn sigma_minus() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(0.0, 0.0)]
    ]
}

/// The tensor factor an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    Tls,
    Mode1,
    Mode2,
}

impl Subsystem {
    fn dim(&self, space: SpaceDescriptor) -> usize {
        match self {
            Subsystem::Tls => TLS_DIM,
            Subsystem::Mode1 => space.cutoff1(),
            Subsystem::Mode2 => space.cutoff2(),
        }
    }
}

/// Place a single-subsystem operator into the full space, acting as the
/// identity on the other two factors. The Hermitian hint is set when the
/// input passes the Hermiticity check.
pub fn embed(op: &Array2<C64>, slot: Subsystem, space: SpaceDescriptor) -> Result<OperatorMatrix> {
    let d = slot.dim(space);
    if op.nrows() != d || op.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: op.nrows().max(op.ncols()),
            context: "embedded operator shape",
        });
    }
    let eye = |n: usize| Array2::<C64>::eye(n);
    let full = match slot {
        Subsystem::Tls => kron(op, &eye(space.cutoff1() * space.cutoff2())),
        Subsystem::Mode1 => kron(&eye(TLS_DIM), &kron(op, &eye(space.cutoff2()))),
        Subsystem::Mode2 => kron(&eye(TLS_DIM * space.cutoff1()), op),
    };
    if hermiticity_deviation(op) < HERMITICITY_TOL {
        OperatorMatrix::hermitian(space, full)
    } else {
        OperatorMatrix::general(space, full)
    }
}

/// Basis state |s, n₁, n₂⟩.
pub fn fock_state(space: SpaceDescriptor, s: usize, n1: usize, n2: usize) -> Result<PureState> {
    let idx = space.index_of(s, n1, n2)?;
    let mut amplitudes = Array1::zeros(space.dim());
    amplitudes[idx] = C64::new(1.0, 0.0);
    Ok(PureState::unchecked(space, amplitudes))
}

/// Relative sign between the two branches of a NOON superposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn signum(&self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// (|0, N, 0⟩ + sign·|0, 0, N⟩)/√2.
pub fn noon_state(space: SpaceDescriptor, n: usize, sign: Sign) -> Result<PureState> {
    if n == 0 {
        return Err(Error::InvalidInput("NOON state requires N ≥ 1".into()));
    }
    let i1 = space.index_of(0, n, 0)?;
    let i2 = space.index_of(0, 0, n)?;
    let mut amplitudes = Array1::zeros(space.dim());
    let r = std::f64::consts::FRAC_1_SQRT_2;
    amplitudes[i1] = C64::new(r, 0.0);
    amplitudes[i2] = C64::new(sign.signum() * r, 0.0);
    Ok(PureState::unchecked(space, amplitudes))
}

/// Total photon number N̂ = a₁†a₁ + a₂†a₂ on the full space (diagonal).
pub fn total_photon_operator(space: SpaceDescriptor) -> OperatorMatrix {
    let d = space.dim();
    let mut m = Array2::zeros((d, d));
    for i in 0..d {
        let (_, n1, n2) = space.labels(i);
        m[[i, i]] = C64::new((n1 + n2) as f64, 0.0);
    }
    OperatorMatrix {
        space,
        entries: m,
        hermitian_hint: true,
    }
}

/// Weighted mixture of pure states representing a rank-k density matrix.
#[derive(Debug, Clone)]
pub struct Ensemble {
    components: Vec<(f64, PureState)>,
}

impl Ensemble {
    /// Weights must be nonnegative and sum to 1 within 1e-10; all component
    /// states must share one space.
    pub fn try_new(components: Vec<(f64, PureState)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("ensemble must be non-empty".into()));
        }
        let space = components[0].1.space();
        let mut total = 0.0;
        for (w, state) in &components {
            if *w < -1e-12 {
                return Err(Error::InvalidInput(format!("negative weight {w}")));
            }
            if state.space() != space {
                return Err(Error::DimensionMismatch {
                    expected: space.dim(),
                    got: state.space().dim(),
                    context: "ensemble component space",
                });
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "ensemble weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// The trivial ensemble {(1, ψ)}.
    pub fn pure(state: PureState) -> Self {
        Self {
            components: vec![(1.0, state)],
        }
    }

    pub fn components(&self) -> &[(f64, PureState)] {
        &self.components
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.components[0].1.space()
    }

    /// Σ w_k ⟨ψ_k|O|ψ_k⟩ reduced to a real number.
    pub fn expectation(&self, op: &OperatorMatrix) -> Result<f64> {
        real_expectation(self.expectation_complex(op)?, op)
    }

    /// Σ w_k ⟨ψ_k|O|ψ_k⟩.
    pub fn expectation_complex(&self, op: &OperatorMatrix) -> Result<C64> {
        let mut acc = C64::new(0.0, 0.0);
        for (w, state) in &self.components {
            acc += state.expectation_complex(op)? * C64::new(*w, 0.0);
        }
        Ok(acc)
    }

    /// Dense ρ = Σ w_k |ψ_k⟩⟨ψ_k|.
    pub fn density_matrix(&self) -> Array2<C64> {
        let d = self.space().dim();
        let mut rho = Array2::zeros((d, d));
        for (w, state) in &self.components {
            let amp = state.amplitudes();
            for i in 0..d {
                for j in 0..d {
                    rho[[i, j]] += amp[i] * amp[j].conj() * *w;
                }
            }
        }
        rho
    }
}
