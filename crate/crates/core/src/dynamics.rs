//! Time-dependent Hamiltonian assembly and piecewise-constant propagation.
//!
//! The Hamiltonian has a diagonal photonic drift ω₁a₁†a₁ + ω₂a₂†a₂ and four
//! control channels
//!
//! ```text
//! H(t) = Σ_j ω_j a_j†a_j + f_x(t)σ_x + f_z(t)σ_z + Σ_j g_j(t)(σ⁺a_j + σ⁻a_j†)
//! ```
//!
//! Controls are piecewise constant on a uniform grid with the left-sample
//! convention: the value on [k·dt, (k+1)·dt) is sample k. Each interval is
//! propagated exactly through the Hermitian eigendecomposition of its
//! Hamiltonian, so the only discretization error is the pulse representation
//! itself, never the integrator.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::hilbert::{
    annihilation, dagger, embed, sigma_minus, sigma_plus, sigma_x, sigma_z, vec_norm,
    OperatorMatrix, PureState, SpaceDescriptor, Subsystem,
};

/// Norm drift beyond this aborts a propagation.
pub const NORM_DRIFT_TOL: f64 = 1e-8;

/// Guard-level population above this flags a truncation warning.
pub const LEAK_WARN_THRESHOLD: f64 = 1e-6;

/// Unitarity tolerance for assembled propagators.
pub const UNITARITY_TOL: f64 = 1e-10;

/// Number of control channels.
pub const N_CHANNELS: usize = 4;

/// Channel names in storage order.
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["f_x", "f_z", "g1", "g2"];

/// Mode frequencies of the uncontrolled Hamiltonian (ħ = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSpec {
    pub omega1: f64,
    pub omega2: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 2.0,
        }
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.omega1.is_finite() || !self.omega2.is_finite() {
            return Err(Error::InvalidInput("drift frequencies must be finite".into()));
        }
        Ok(())
    }

    /// ω₁a₁†a₁ + ω₂a₂†a₂ on the full space.
    pub fn matrix(&self, space: SpaceDescriptor) -> Result<OperatorMatrix> {
        self.validate()?;
        let d = space.dim();
        let mut m = Array2::zeros((d, d));
        for i in 0..d {
            let (_, n1, n2) = space.labels(i);
            m[[i, i]] = C64::new(self.omega1 * n1 as f64 + self.omega2 * n2 as f64, 0.0);
        }
        OperatorMatrix::hermitian(space, m)
    }
}

/// Piecewise-constant samples of the four control channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSet {
    t_final: f64,
    n_steps: usize,
    channels: [Vec<f64>; N_CHANNELS],
}

impl PulseSet {
    pub fn new(t_final: f64, n_steps: usize, channels: [Vec<f64>; N_CHANNELS]) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) || n_steps == 0 {
            return Err(Error::InvalidInput(format!(
                "pulse grid requires t_final > 0 and n_steps ≥ 1, got ({t_final}, {n_steps})"
            )));
        }
        for (l, ch) in channels.iter().enumerate() {
            if ch.len() != n_steps {
                return Err(Error::DimensionMismatch {
                    expected: n_steps,
                    got: ch.len(),
                    context: "pulse channel length",
                });
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "channel {} contains a non-finite sample",
                    CHANNEL_NAMES[l]
                )));
            }
        }
        Ok(Self {
            t_final,
            n_steps,
            channels,
        })
    }

    pub fn zeros(t_final: f64, n_steps: usize) -> Result<Self> {
        Self::new(t_final, n_steps, std::array::from_fn(|_| vec![0.0; n_steps]))
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        &self.channels[l]
    }

    pub fn sample(&self, l: usize, k: usize) -> f64 {
        self.channels[l][k]
    }

    pub(crate) fn set_sample(&mut self, l: usize, k: usize, value: f64) {
        self.channels[l][k] = value;
    }

    /// Samples in reversed time order (for forward-then-backward checks).
    pub fn time_reversed(&self) -> PulseSet {
        let channels = std::array::from_fn(|l| {
            let mut ch = self.channels[l].clone();
            ch.reverse();
            ch
        });
        PulseSet {
            t_final: self.t_final,
            n_steps: self.n_steps,
            channels,
        }
    }

    /// Largest absolute sample difference across all channels.
    pub fn max_abs_diff(&self, other: &PulseSet) -> f64 {
        let mut dev = 0.0f64;
        for l in 0..N_CHANNELS {
            for (a, b) in self.channels[l].iter().zip(&other.channels[l]) {
                dev = dev.max((a - b).abs());
            }
        }
        dev
    }
}

/// States at every grid point of a propagation, plus the largest guard-level
/// population seen along the way.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<PureState>,
    pub leak_max: f64,
}

impl Trajectory {
    pub fn initial(&self) -> &PureState {
        &self.states[0]
    }

    pub fn final_state(&self) -> &PureState {
        self.states.last().expect("trajectory is never empty")
    }

    /// True when the guard-level population stayed below the warning
    /// threshold, i.e. the Fock truncation was adequate.
    pub fn truncation_ok(&self) -> bool {
        self.leak_max <= LEAK_WARN_THRESHOLD
    }
}

/// The four control generators [σ_x, σ_z, σ⁺a₁+σ⁻a₁†, σ⁺a₂+σ⁻a₂†]
/// embedded in the full space.
pub fn control_generators(space: SpaceDescriptor) -> Result<Vec<OperatorMatrix>> {
    let sx = embed(&sigma_x(), Subsystem::Tls, space)?;
    let sz = embed(&sigma_z(), Subsystem::Tls, space)?;
    let sp = embed(&sigma_plus(), Subsystem::Tls, space)?;
    let sm = embed(&sigma_minus(), Subsystem::Tls, space)?;

    let coupling = |mode: Subsystem| -> Result<OperatorMatrix> {
        let d = match mode {
            Subsystem::Mode1 => space.cutoff1(),
            Subsystem::Mode2 => space.cutoff2(),
            Subsystem::Tls => unreachable!(),
        };
        let a = embed(&annihilation(d)?, mode, space)?;
        let entries = sp.entries().dot(a.entries()) + sm.entries().dot(&dagger(a.entries()));
        OperatorMatrix::hermitian(space, entries)
    };

    Ok(vec![sx, sz, coupling(Subsystem::Mode1)?, coupling(Subsystem::Mode2)?])
}

/// Drift matrix plus control generators, cached for repeated propagation.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    space: SpaceDescriptor,
    drift: DriftSpec,
    drift_matrix: Array2<C64>,
    generators: Vec<OperatorMatrix>,
    /// Basis indices with n₁ or n₂ at the top retained Fock level.
    guard_indices: Vec<usize>,
}

impl ControlSystem {
    pub fn new(space: SpaceDescriptor, drift: DriftSpec) -> Result<Self> {
        let drift_matrix = drift.matrix(space)?.entries().clone();
        let generators = control_generators(space)?;
        let guard_indices = (0..space.dim())
            .filter(|&i| {
                let (_, n1, n2) = space.labels(i);
                n1 == space.cutoff1() - 1 || n2 == space.cutoff2() - 1
            })
            .collect();
        Ok(Self {
            space,
            drift,
            drift_matrix,
            generators,
            guard_indices,
        })
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.space
    }

    pub fn drift(&self) -> DriftSpec {
        self.drift
    }

    pub fn generators(&self) -> &[OperatorMatrix] {
        &self.generators
    }

    /// H_k = drift + f_x[k]σ_x + f_z[k]σ_z + g₁[k]G₁ + g₂[k]G₂.
    pub fn hamiltonian(&self, pulse: &PulseSet, k: usize) -> Result<OperatorMatrix> {
        if k >= pulse.n_steps() {
            return Err(Error::InvalidInput(format!(
                "interval index {k} out of range for {} steps",
                pulse.n_steps()
            )));
        }
        let mut h = self.drift_matrix.clone();
        for (l, gen) in self.generators.iter().enumerate() {
            let c = pulse.sample(l, k);
            if c != 0.0 {
                h.scaled_add(C64::new(c, 0.0), gen.entries());
            }
        }
        OperatorMatrix::hermitian(self.space, h)
    }

    /// Population of the guard (top) Fock levels in a raw amplitude vector.
    pub fn guard_population(&self, amplitudes: &Array1<C64>) -> f64 {
        self.guard_indices
            .iter()
            .map(|&i| amplitudes[i].norm_sqr())
            .sum()
    }

    /// Propagate through every interval, recording the state at each grid
    /// point. Errors if the accumulated norm drift exceeds 1e-8.
    pub fn propagate(&self, initial: &PureState, pulse: &PulseSet) -> Result<Trajectory> {
        if initial.space() != self.space {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: initial.space().dim(),
                context: "initial state space",
            });
        }
        let dt = pulse.dt();
        let mut states = Vec::with_capacity(pulse.n_steps() + 1);
        let mut leak_max = self.guard_population(initial.amplitudes());
        let mut current = initial.amplitudes().clone();
        states.push(initial.clone());
        for k in 0..pulse.n_steps() {
            let h = self.hamiltonian(pulse, k)?;
            let prop = Propagator::new(&h)?;
            current = prop.apply(&current, dt);
            let norm = vec_norm(&current);
            if (norm - 1.0).abs() > NORM_DRIFT_TOL {
                return Err(Error::NumericalConsistency(format!(
                    "norm drifted to {norm} at step {k}"
                )));
            }
            leak_max = leak_max.max(self.guard_population(&current));
            states.push(PureState::unchecked(self.space, current.clone()));
        }
        Ok(Trajectory { states, leak_max })
    }

    /// Assemble the full propagator as the ordered product of per-interval
    /// exponentials; verified unitary to 1e-10.
    pub fn build_unitary(&self, pulse: &PulseSet) -> Result<OperatorMatrix> {
        let d = self.space.dim();
        let dt = pulse.dt();
        let mut u: Array2<C64> = Array2::eye(d);
        for k in 0..pulse.n_steps() {
            let h = self.hamiltonian(pulse, k)?;
            let prop = Propagator::new(&h)?;
            u = prop.matrix(dt).dot(&u);
        }
        let op = OperatorMatrix::general(self.space, u)?;
        let dev = op.unitarity_deviation();
        if dev >= UNITARITY_TOL {
            return Err(Error::NotUnitary { deviation: dev });
        }
        Ok(op)
    }
}

/// Eigendecomposition H = V·diag(λ)·V† of one interval Hamiltonian,
/// reusable for propagation in either time direction.
///
/// Purely real Hamiltonians (the case for every drift/control combination of
/// this system) are routed through the real-symmetric eigensolver, which is
/// substantially cheaper than the complex one.
#[derive(Debug, Clone)]
pub struct Propagator {
    eigvals: Array1<f64>,
    eigvecs: Array2<C64>,
    eigvecs_dagger: Array2<C64>,
}

impl Propagator {
    pub fn new(h: &OperatorMatrix) -> Result<Self> {
        if !h.hermitian_hint() {
            return Err(Error::NotHermitian {
                deviation: crate::hilbert::hermiticity_deviation(h.entries()),
            });
        }
        let entries = h.entries();
        let all_real = entries.iter().all(|z| z.im == 0.0);
        let (eigvals, eigvecs) = if all_real {
            let (vals, vecs) = crate::hilbert::eigh_real_symmetric(&entries.mapv(|z| z.re))?;
            (vals, vecs.mapv(|v| C64::new(v, 0.0)))
        } else {
            crate::hilbert::eigh_hermitian(entries)?
        };
        let eigvecs_dagger = dagger(&eigvecs);
        Ok(Self {
            eigvals,
            eigvecs,
            eigvecs_dagger,
        })
    }

    /// exp(−iH·dt)·v. Negative `dt` propagates backwards.
    pub fn apply(&self, v: &Array1<C64>, dt: f64) -> Array1<C64> {
        let mut coeffs = self.eigvecs_dagger.dot(v);
        for (c, &lambda) in coeffs.iter_mut().zip(self.eigvals.iter()) {
            *c *= C64::from_polar(1.0, -lambda * dt);
        }
        self.eigvecs.dot(&coeffs)
    }

    /// Dense exp(−iH·dt).
    pub fn matrix(&self, dt: f64) -> Array2<C64> {
        let d = self.eigvals.len();
        let mut phased = Array2::zeros((d, d));
        for j in 0..d {
            let phase = C64::from_polar(1.0, -self.eigvals[j] * dt);
            for i in 0..d {
                phased[[i, j]] = self.eigvecs[[i, j]] * phase;
            }
        }
        phased.dot(&self.eigvecs_dagger)
    }
}

/// One exact piecewise-constant step exp(−iH·dt)ψ.
pub fn expm_step(h: &OperatorMatrix, dt: f64, state: &PureState) -> Result<PureState> {
    if h.space() != state.space() {
        return Err(Error::DimensionMismatch {
            expected: state.space().dim(),
            got: h.space().dim(),
            context: "step Hamiltonian space",
        });
    }
    let prop = Propagator::new(h)?;
    let out = prop.apply(state.amplitudes(), dt);
    PureState::try_new(state.space(), out)
}

// --- pulse file format -----------------------------------------------------
//
// Plain-text CSV, one row per interval:
//     # revmet pulse
//     # t_final = <float>
//     # n_steps = <int>
//     # columns = t,f_x,f_z,g1,g2
//     <t>,<f_x>,<f_z>,<g1>,<g2>
// Floats are printed with 17 significant digits so a write/read round trip
// is bit-exact.

/// Format a float with enough digits for an exact round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

/// Serialize a pulse to the CSV format above.
pub fn write_pulse<W: Write>(w: &mut W, pulse: &PulseSet) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# revmet pulse").unwrap();
    writeln!(out, "# t_final = {}", fmt_f64(pulse.t_final())).unwrap();
    writeln!(out, "# n_steps = {}", pulse.n_steps()).unwrap();
    writeln!(out, "# columns = t,{}", CHANNEL_NAMES.join(",")).unwrap();
    let dt = pulse.dt();
    for k in 0..pulse.n_steps() {
        let t = k as f64 * dt;
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(t),
            fmt_f64(pulse.sample(0, k)),
            fmt_f64(pulse.sample(1, k)),
            fmt_f64(pulse.sample(2, k)),
            fmt_f64(pulse.sample(3, k)),
        )
        .unwrap();
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a pulse from the CSV format.
pub fn read_pulse<R: BufRead>(r: R) -> Result<PulseSet> {
    let mut t_final: Option<f64> = None;
    let mut n_steps: Option<usize> = None;
    let mut channels: [Vec<f64>; N_CHANNELS] = std::array::from_fn(|_| Vec::new());

    for (line_no, line) in r.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((key, value)) = rest.split_once('=') {
                match key.trim() {
                    "t_final" => {
                        t_final = Some(value.trim().parse().map_err(|e| Error::Parse {
                            line: line_no,
                            message: format!("bad t_final: {e}"),
                        })?)
                    }
                    "n_steps" => {
                        n_steps = Some(value.trim().parse().map_err(|e| Error::Parse {
                            line: line_no,
                            message: format!("bad n_steps: {e}"),
                        })?)
                    }
                    _ => {} // descriptive header lines
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 1 + N_CHANNELS {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", 1 + N_CHANNELS, fields.len()),
            });
        }
        for (l, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad sample in column {}: {e}", CHANNEL_NAMES[l]),
            })?;
            channels[l].push(v);
        }
    }

    let t_final = t_final.ok_or(Error::Parse {
        line: 0,
        message: "missing '# t_final = ...' header".into(),
    })?;
    let n_steps = n_steps.ok_or(Error::Parse {
        line: 0,
        message: "missing '# n_steps = ...' header".into(),
    })?;
    if channels[0].len() != n_steps {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "header declares {} steps but file contains {} rows",
                n_steps,
                channels[0].len()
            ),
        });
    }
    PulseSet::new(t_final, n_steps, channels)
}

/// Write a pulse file at `path`.
pub fn write_pulse_file(path: &Path, pulse: &PulseSet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_pulse(&mut f, pulse)
}

/// Read a pulse file from `path`.
pub fn read_pulse_file(path: &Path) -> Result<PulseSet> {
    let f = std::fs::File::open(path)?;
    read_pulse(std::io::BufReader::new(f))
}
