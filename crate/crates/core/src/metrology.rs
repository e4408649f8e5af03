//! The time-reversal phase-estimation protocol and its estimators.
//!
//! A synthesis unitary U prepares the photonic resource state from vacuum,
//! the unknown phase acts on mode 2 through U_φ = exp(iφ·a₂†a₂), and the
//! reversed unitary U† maps the phase information onto a two-outcome photon
//! count:
//!
//! ```text
//! |ψ_R⟩ = U†·U_φ·U|0⟩|0,0⟩
//! ```
//!
//! With an ideal U the total photon count ⟨N̂⟩ = N_x·sin²(Nφ/2) estimates φ
//! with uncertainty δφ = ΔN/|d⟨N̂⟩/dφ| = 1/N at every non-singular phase,
//! and the quantum Fisher information is N² independent of φ.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{inner, vec_norm, OperatorMatrix, PureState, SpaceDescriptor};

/// Phases with |sin(Nφ)| below this are flagged as singular (the uncertainty
/// estimator divides 0 by 0 there) and excluded from aggregates.
pub const SINGULAR_SIN_THRESHOLD: f64 = 1e-3;

/// Central finite-difference step for d⟨N̂⟩/dφ.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Unitarity required of the completion construction.
pub const COMPLETION_UNITARITY_TOL: f64 = 1e-12;

/// External phase on mode 2: diagonal with entries e^{iφ·n₂}.
pub fn phase_gate(space: SpaceDescriptor, phi: f64) -> OperatorMatrix {
    let d = space.dim();
    let mut m = Array2::zeros((d, d));
    for i in 0..d {
        let (_, _, n2) = space.labels(i);
        m[[i, i]] = C64::from_polar(1.0, phi * n2 as f64);
    }
    OperatorMatrix::general(space, m).expect("square by construction")
}

/// True when φ lies in the singular band of the N-photon estimator.
pub fn is_singular_phase(n: usize, phi: f64) -> bool {
    (n as f64 * phi).sin().abs() < SINGULAR_SIN_THRESHOLD
}

/// Any unitary realizing the given initial→target mappings exactly, completed
/// on the orthogonal complement by scanning canonical basis vectors in
/// ascending index order.
pub fn exact_completion_unitary(
    space: SpaceDescriptor,
    pairs: &[(PureState, PureState)],
) -> Result<OperatorMatrix> {
    let order: Vec<usize> = (0..space.dim()).collect();
    exact_completion_with_scan(space, pairs, &order)
}

/// Completion variant with an explicit canonical-vector scan order; different
/// orders yield different unitaries that agree on the span of the pairs.
pub fn exact_completion_with_scan(
    space: SpaceDescriptor,
    pairs: &[(PureState, PureState)],
    scan_order: &[usize],
) -> Result<OperatorMatrix> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("completion needs at least one pair".into()));
    }
    let d = space.dim();
    for (a, b) in pairs {
        if a.space() != space || b.space() != space {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.space().dim().max(b.space().dim()),
                context: "completion pair space",
            });
        }
    }
    check_orthonormal_set(pairs.iter().map(|(i, _)| i), "initial")?;
    check_orthonormal_set(pairs.iter().map(|(_, t)| t), "target")?;

    let ins = complete_basis(
        pairs.iter().map(|(i, _)| i.amplitudes().clone()).collect(),
        scan_order,
        d,
    )?;
    let outs = complete_basis(
        pairs.iter().map(|(_, t)| t.amplitudes().clone()).collect(),
        scan_order,
        d,
    )?;

    // U = Σ_k |out_k⟩⟨in_k|
    let mut u = Array2::zeros((d, d));
    for (in_vec, out_vec) in ins.iter().zip(&outs) {
        for row in 0..d {
            if out_vec[row].norm_sqr() == 0.0 {
                continue;
            }
            for col in 0..d {
                u[[row, col]] += out_vec[row] * in_vec[col].conj();
            }
        }
    }
    let op = OperatorMatrix::general(space, u)?;
    let dev = op.unitarity_deviation();
    if dev >= COMPLETION_UNITARITY_TOL {
        return Err(Error::NotUnitary { deviation: dev });
    }
    Ok(op)
}

fn check_orthonormal_set<'a>(
    states: impl Iterator<Item = &'a PureState>,
    label: &str,
) -> Result<()> {
    let states: Vec<&PureState> = states.collect();
    for (i, a) in states.iter().enumerate() {
        for (j, b) in states.iter().enumerate() {
            let expected = if i == j { 1.0 } else { 0.0 };
            if (a.inner(b) - C64::new(expected, 0.0)).norm() > crate::krotov::ORTHONORMALITY_TOL {
                return Err(Error::NonOrthonormalPairs(format!(
                    "{label} states {i}, {j} are not orthonormal"
                )));
            }
        }
    }
    Ok(())
}

/// Extend an orthonormal seed set to a full orthonormal basis via twice-applied
/// Gram-Schmidt over canonical vectors in the given scan order.
fn complete_basis(
    mut basis: Vec<Array1<C64>>,
    scan_order: &[usize],
    d: usize,
) -> Result<Vec<Array1<C64>>> {
    for &idx in scan_order {
        if basis.len() == d {
            break;
        }
        if idx >= d {
            return Err(Error::InvalidInput(format!(
                "scan index {idx} out of range for dimension {d}"
            )));
        }
        let mut v: Array1<C64> = Array1::zeros(d);
        v[idx] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for b in &basis {
                let c = inner(b, &v);
                v.scaled_add(-c, b);
            }
        }
        let norm = vec_norm(&v);
        if norm > 1e-3 {
            basis.push(v.mapv(|z| z / norm));
        }
    }
    if basis.len() != d {
        return Err(Error::NumericalConsistency(format!(
            "basis completion produced {} of {} vectors",
            basis.len(),
            d
        )));
    }
    Ok(basis)
}

/// The protocol instance: resource size, auxiliary occupation, and the
/// synthesis unitary with cached derived operators.
#[derive(Debug, Clone)]
pub struct ProtocolSpec {
    n_photons: usize,
    n_aux: usize,
    space: SpaceDescriptor,
    unitary: OperatorMatrix,
    u_dagger: Array2<C64>,
    /// U|0,0,0⟩, the resource state entering the phase stage.
    resource: Array1<C64>,
    /// Total photon number per basis index.
    photon_diag: Vec<f64>,
    /// Mode-2 occupation per basis index (the phase generator).
    mode2_diag: Vec<f64>,
}

impl ProtocolSpec {
    pub fn new(n_photons: usize, n_aux: usize, unitary: OperatorMatrix) -> Result<Self> {
        let space = unitary.space();
        if n_photons == 0 {
            return Err(Error::InvalidInput("protocol requires N ≥ 1".into()));
        }
        if n_aux == 0 {
            return Err(Error::InvalidInput(
                "the auxiliary occupation N_x must be nonzero".into(),
            ));
        }
        if n_photons >= space.cutoff1() || n_photons >= space.cutoff2() || n_aux >= space.cutoff2()
        {
            return Err(Error::InvalidInput(format!(
                "N={n_photons}, N_x={n_aux} exceed the cutoffs ({}, {})",
                space.cutoff1(),
                space.cutoff2()
            )));
        }
        let dev = unitary.unitarity_deviation();
        if dev >= crate::dynamics::UNITARITY_TOL {
            return Err(Error::NotUnitary { deviation: dev });
        }
        let u_dagger = crate::hilbert::dagger(unitary.entries());
        let vacuum_idx = space.index_of(0, 0, 0)?;
        let resource = unitary.entries().column(vacuum_idx).to_owned();
        let photon_diag = (0..space.dim())
            .map(|i| {
                let (_, n1, n2) = space.labels(i);
                (n1 + n2) as f64
            })
            .collect();
        let mode2_diag = (0..space.dim())
            .map(|i| {
                let (_, _, n2) = space.labels(i);
                n2 as f64
            })
            .collect();
        Ok(Self {
            n_photons,
            n_aux,
            space,
            unitary,
            u_dagger,
            resource,
            photon_diag,
            mode2_diag,
        })
    }

    /// Protocol backed by an exact completion of the two defining mappings,
    /// bypassing pulse optimization.
    pub fn exact(space: SpaceDescriptor, n_photons: usize, n_aux: usize) -> Result<Self> {
        let pairs = crate::krotov::noon_pairs(space, n_photons, n_aux)?;
        let unitary = exact_completion_unitary(space, &pairs)?;
        Self::new(n_photons, n_aux, unitary)
    }

    pub fn n_photons(&self) -> usize {
        self.n_photons
    }

    pub fn n_aux(&self) -> usize {
        self.n_aux
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.space
    }

    pub fn unitary(&self) -> &OperatorMatrix {
        &self.unitary
    }

    /// U|0,0,0⟩.
    pub fn resource_state(&self) -> Result<PureState> {
        PureState::try_new(self.space, self.resource.clone())
    }

    pub(crate) fn apply_phase(&self, v: &Array1<C64>, phi: f64) -> Array1<C64> {
        let mut out = v.clone();
        for (x, &n2) in out.iter_mut().zip(&self.mode2_diag) {
            *x *= C64::from_polar(1.0, phi * n2);
        }
        out
    }

    pub(crate) fn apply_u_dagger(&self, v: &Array1<C64>) -> Array1<C64> {
        self.u_dagger.dot(v)
    }

    /// |ψ_R⟩ = U†·U_φ·U|0,0,0⟩.
    pub fn run(&self, phi: f64) -> PureState {
        let phased = self.apply_phase(&self.resource, phi);
        PureState::unchecked(self.space, self.apply_u_dagger(&phased))
    }

    /// ∂_φ|ψ_R⟩ = U†·(i·n̂₂·U_φ)·U|0,0,0⟩, exact in φ.
    pub fn state_derivative(&self, phi: f64) -> Array1<C64> {
        let mut phased = self.apply_phase(&self.resource, phi);
        for (x, &n2) in phased.iter_mut().zip(&self.mode2_diag) {
            *x *= C64::new(0.0, n2);
        }
        self.apply_u_dagger(&phased)
    }

    /// (⟨N̂⟩, ⟨N̂²⟩) of a state, via the diagonal photon-number operator.
    pub fn photon_stats(&self, state: &PureState) -> (f64, f64) {
        photon_moments(state.amplitudes(), &self.photon_diag)
    }

    fn mean_photons(&self, phi: f64) -> f64 {
        let phased = self.apply_phase(&self.resource, phi);
        let out = self.apply_u_dagger(&phased);
        photon_moments(&out, &self.photon_diag).0
    }

    /// δφ = ΔN/|d⟨N̂⟩/dφ| with a central finite difference of step `h`.
    /// Returns `None` inside the singular band where the ratio degenerates
    /// to 0/0.
    pub fn uncertainty(&self, phi: f64, h: f64) -> Option<f64> {
        if is_singular_phase(self.n_photons, phi) {
            return None;
        }
        let state = self.run(phi);
        let (mean, mean2) = self.photon_stats(&state);
        let variance = (mean2 - mean * mean).max(0.0);
        let derivative = (self.mean_photons(phi + h) - self.mean_photons(phi - h)) / (2.0 * h);
        Some(variance.sqrt() / derivative.abs())
    }

    /// Quantum Fisher information 4[⟨∂ψ|∂ψ⟩ − |⟨∂ψ|ψ⟩|²] of the output state.
    pub fn fisher(&self, phi: f64) -> f64 {
        let psi = self.run(phi);
        let dpsi = self.state_derivative(phi);
        let dd = inner(&dpsi, &dpsi).re;
        let dp = inner(&dpsi, psi.amplitudes()).norm_sqr();
        4.0 * (dd - dp)
    }

    /// Evaluate all estimators over a uniform φ grid on [−π, π).
    pub fn sweep(&self, n_points: usize) -> Result<SweepResult> {
        if n_points < 2 {
            return Err(Error::InvalidInput("sweep needs at least 2 points".into()));
        }
        let phi_grid: Vec<f64> = (0..n_points)
            .map(|i| {
                -std::f64::consts::PI
                    + 2.0 * std::f64::consts::PI * i as f64 / n_points as f64
            })
            .collect();
        let rows: Vec<(f64, f64, f64, Option<f64>)> = phi_grid
            .par_iter()
            .map(|&phi| {
                let state = self.run(phi);
                let (mean, mean2) = self.photon_stats(&state);
                let fisher = self.fisher(phi);
                let delta = self.uncertainty(phi, DEFAULT_FD_STEP);
                (mean, mean2, fisher, delta)
            })
            .collect();

        let mut result = SweepResult {
            phi: phi_grid,
            mean_n: Vec::with_capacity(n_points),
            mean_n2: Vec::with_capacity(n_points),
            delta_phi: Vec::with_capacity(n_points),
            inv_delta_phi: Vec::with_capacity(n_points),
            fisher: Vec::with_capacity(n_points),
            excluded: Vec::with_capacity(n_points),
        };
        for (mean, mean2, fisher, delta) in rows {
            result.mean_n.push(mean);
            result.mean_n2.push(mean2);
            result.fisher.push(fisher);
            match delta {
                Some(d) => {
                    result.delta_phi.push(d);
                    result.inv_delta_phi.push(1.0 / d);
                    result.excluded.push(false);
                }
                None => {
                    result.delta_phi.push(f64::NAN);
                    result.inv_delta_phi.push(f64::NAN);
                    result.excluded.push(true);
                }
            }
        }
        Ok(result)
    }

    /// Average infidelity of this unitary against a set of mappings; zero for
    /// an exact completion of the same pairs.
    pub fn infidelity_for_pairs(&self, pairs: &[(PureState, PureState)]) -> f64 {
        let evolved: Vec<PureState> = pairs
            .iter()
            .map(|(i, _)| {
                PureState::unchecked(self.space, self.unitary.apply_vec(i.amplitudes()))
            })
            .collect();
        let targets: Vec<PureState> = pairs.iter().map(|(_, t)| t.clone()).collect();
        crate::krotov::infidelity(&evolved, &targets)
    }
}

/// Per-φ record of the sweep estimators. Excluded (singular) grid points
/// carry NaN in the uncertainty columns; `excluded` is authoritative.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub phi: Vec<f64>,
    pub mean_n: Vec<f64>,
    pub mean_n2: Vec<f64>,
    pub delta_phi: Vec<f64>,
    pub inv_delta_phi: Vec<f64>,
    pub fisher: Vec<f64>,
    pub excluded: Vec<bool>,
}

impl SweepResult {
    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    /// Non-excluded inverse uncertainties.
    pub fn included_inv_delta_phi(&self) -> Vec<f64> {
        self.inv_delta_phi
            .iter()
            .zip(&self.excluded)
            .filter(|(_, &e)| !e)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn summary(&self, n_photons: usize, n_aux: usize, unitary_infidelity: f64) -> SweepSummary {
        let inv = self.included_inv_delta_phi();
        SweepSummary {
            n_photons,
            n_aux,
            phi_points: self.phi.len(),
            excluded_count: self.excluded_count(),
            fisher_min: fold_min(&self.fisher),
            fisher_max: fold_max(&self.fisher),
            fisher_mean: mean(&self.fisher),
            inv_delta_phi_max: fold_max(&inv),
            inv_delta_phi_median: median(&inv),
            inv_delta_phi_mean: mean(&inv),
            unitary_infidelity,
        }
    }
}

/// Aggregates of one sweep, serialized as the protocol summary.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub n_photons: usize,
    pub n_aux: usize,
    pub phi_points: usize,
    pub excluded_count: usize,
    pub fisher_min: f64,
    pub fisher_max: f64,
    pub fisher_mean: f64,
    pub inv_delta_phi_max: f64,
    pub inv_delta_phi_median: f64,
    pub inv_delta_phi_mean: f64,
    pub unitary_infidelity: f64,
}

fn fold_min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn fold_max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median via total order; the average of the middle two for even counts.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn photon_moments(amplitudes: &Array1<C64>, photon_diag: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut mean2 = 0.0;
    for (z, &n) in amplitudes.iter().zip(photon_diag) {
        let p = z.norm_sqr();
        mean += p * n;
        mean2 += p * n * n;
    }
    (mean, mean2)
}

/// One protocol run feeding the scaling fit.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub n_photons: usize,
    pub inv_delta_phi_max: f64,
    pub inv_delta_phi_median: f64,
    pub inv_delta_phi_mean: f64,
    pub fisher_mean: f64,
}

/// Through-origin least-squares slopes of the inverse uncertainty against N
/// and of the Fisher information against N².
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub slope_inv_max: f64,
    pub slope_inv_median: f64,
    pub slope_inv_mean: f64,
    pub slope_fisher_vs_n2: f64,
    pub residual_inv_max: f64,
    pub residual_inv_median: f64,
    pub residual_inv_mean: f64,
    pub residual_fisher_vs_n2: f64,
}

/// Fit slopes and RMS residuals; requires at least two N values.
pub fn scaling_fit(points: &[ScalingPoint]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("scaling fit needs at least two points".into()));
    }
    let fit = |xy: Vec<(f64, f64)>| -> (f64, f64) {
        let sxx: f64 = xy.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = xy.iter().map(|(x, y)| x * y).sum();
        let slope = sxy / sxx;
        let rss: f64 = xy.iter().map(|(x, y)| (y - slope * x).powi(2)).sum();
        (slope, (rss / xy.len() as f64).sqrt())
    };
    let n_axis = |f: &dyn Fn(&ScalingPoint) -> f64| -> Vec<(f64, f64)> {
        points
            .iter()
            .map(|p| (p.n_photons as f64, f(p)))
            .collect()
    };
    let (slope_inv_max, residual_inv_max) = fit(n_axis(&|p| p.inv_delta_phi_max));
    let (slope_inv_median, residual_inv_median) = fit(n_axis(&|p| p.inv_delta_phi_median));
    let (slope_inv_mean, residual_inv_mean) = fit(n_axis(&|p| p.inv_delta_phi_mean));
    let (slope_fisher_vs_n2, residual_fisher_vs_n2) = fit(points
        .iter()
        .map(|p| ((p.n_photons * p.n_photons) as f64, p.fisher_mean))
        .collect());
    Ok(ScalingFit {
        slope_inv_max,
        slope_inv_median,
        slope_inv_mean,
        slope_fisher_vs_n2,
        residual_inv_max,
        residual_inv_median,
        residual_inv_mean,
        residual_fisher_vs_n2,
    })
}

/// Serialize a sweep as CSV with one row per grid point.
pub fn write_sweep_csv<W: std::io::Write>(w: &mut W, result: &SweepResult) -> Result<()> {
    use crate::dynamics::fmt_f64;
    let mut out = String::from("phi,mean_N,mean_N2,delta_phi,inv_delta_phi,fisher,excluded\n");
    for i in 0..result.phi.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(result.phi[i]),
            fmt_f64(result.mean_n[i]),
            fmt_f64(result.mean_n2[i]),
            fmt_f64(result.delta_phi[i]),
            fmt_f64(result.inv_delta_phi[i]),
            fmt_f64(result.fisher[i]),
            u8::from(result.excluded[i]),
        ));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}
