//! The experiment subcommands.

use std::path::{Path, PathBuf};

use serde_json::json;

use revmet::dynamics::{self, ControlSystem, DriftSpec, PulseSet};
use revmet::hilbert::SpaceDescriptor;
use revmet::krotov::{self, noon_pairs, GuessPulse, KrotovConfig};
use revmet::loss::{self, AdaptedProtocolSpec, LossSpec};
use revmet::metrology::{scaling_fit, ProtocolSpec, ScalingPoint};

use crate::config::{LossParams, RunConfig};
use crate::output::{
    convergence_cache_path, pulse_cache_path, write_atomic, write_json, SynthesisMode,
};
use crate::CliError;

fn space_for(config: &RunConfig, n: usize) -> Result<SpaceDescriptor, CliError> {
    let top = n.max(config.n_x_for(n));
    Ok(SpaceDescriptor::for_photon_number(
        top,
        config.cutoff_headroom,
    )?)
}

fn drift(config: &RunConfig) -> DriftSpec {
    DriftSpec {
        omega1: config.omega1,
        omega2: config.omega2,
    }
}

fn krotov_config(config: &RunConfig) -> KrotovConfig {
    KrotovConfig {
        lambda_a: [config.lambda_a; 4],
        ramp_fraction: config.ramp_fraction,
        max_iters: config.max_iters,
        target_infidelity: config.target_infidelity,
        guess: GuessPulse::Shaped {
            amplitude: config.guess_amplitude,
            seed: config.guess_seed,
        },
        active_channels: [true; 4],
    }
}

fn loss_spec(config: &RunConfig) -> Result<LossSpec, CliError> {
    Ok(match config.loss {
        LossParams::Probabilities { p0, p1, p2 } => LossSpec::probabilities(p0, p1, p2)?,
        LossParams::Rates {
            lambda1,
            lambda2,
            dt,
        } => LossSpec::rates(lambda1, lambda2, dt)?,
    })
}

/// Synthesize (or reuse from cache) the pulse realizing the closed-system or
/// loss-adapted mappings for the configured N.
pub fn cmd_synthesize(config: &RunConfig, adapted: bool) -> Result<(), CliError> {
    let mode = if adapted {
        SynthesisMode::Adapted
    } else {
        SynthesisMode::Closed
    };
    let n = config.n_or(if adapted { 3 } else { 1 });
    let n_x = config.n_x_for(n);
    let space = space_for(config, n)?;

    let pulse_path = pulse_cache_path(config, n, mode);
    if pulse_path.exists() {
        println!("cache hit: {}", pulse_path.display());
        return Ok(());
    }

    let problem = match mode {
        SynthesisMode::Closed => {
            krotov::noon_control_problem(space, n, n_x, drift(config), config.t_final, config.n_steps)?
        }
        SynthesisMode::Adapted => {
            if n_x != n {
                return Err(CliError::Validation(format!(
                    "the adapted problem fixes N_x = N; got n_x = {n_x} with n = {n}"
                )));
            }
            loss::adapted_control_problem(space, n, drift(config), config.t_final, config.n_steps)?
        }
    };

    println!(
        "optimizing {} pulse for n = {n} ({} pairs, {} intervals)",
        mode.tag(),
        problem.pairs().len(),
        config.n_steps
    );
    let record = krotov::optimize(&problem, &krotov_config(config))?;

    let mut convergence = Vec::new();
    krotov::write_convergence_csv(&mut convergence, &record)?;
    write_atomic(&convergence_cache_path(config, n, mode), &convergence)?;

    if record.leak_max > dynamics::LEAK_WARN_THRESHOLD {
        eprintln!(
            "warning: guard-level population reached {:.3e} during optimization; \
             raise cutoff_headroom to tighten the truncation",
            record.leak_max
        );
    }

    let mut pulse_bytes = Vec::new();
    dynamics::write_pulse(&mut pulse_bytes, &record.final_pulse)?;
    if record.converged {
        write_atomic(&pulse_path, &pulse_bytes)?;
        println!(
            "converged: J_T = {:.3e} after {} iterations",
            record.final_infidelity(),
            record.iterations.len() - 1
        );
        println!("wrote {}", pulse_path.display());
        Ok(())
    } else {
        let failed = pulse_path.with_extension("csv.failed");
        write_atomic(&failed, &pulse_bytes)?;
        Err(CliError::Convergence(format!(
            "stopped at J_T = {:.3e} after {} iterations (target {:.1e}); \
             partial pulse kept at {}",
            record.final_infidelity(),
            record.iterations.len() - 1,
            config.target_infidelity,
            failed.display()
        )))
    }
}

/// The synthesis unitary for a protocol run: exact completion or a cached
/// optimized pulse.
fn resolve_unitary(
    config: &RunConfig,
    n: usize,
    mode: SynthesisMode,
    exact: bool,
    pulse_override: Option<&Path>,
) -> Result<(revmet::OperatorMatrix, String, PathBuf), CliError> {
    let space = space_for(config, n)?;
    if exact {
        let n_x = config.n_x_for(n);
        let pairs = match mode {
            SynthesisMode::Closed => noon_pairs(space, n, n_x)?,
            SynthesisMode::Adapted => loss::adapted_pairs(space, n)?,
        };
        let u = revmet::metrology::exact_completion_unitary(space, &pairs)?;
        return Ok((u, "exact".into(), PathBuf::new()));
    }
    let path = match pulse_override {
        Some(p) => p.to_path_buf(),
        None => pulse_cache_path(config, n, mode),
    };
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "no pulse at {}; run `revmet synthesize{}` first (or pass --exact)",
            path.display(),
            if mode == SynthesisMode::Adapted {
                " --adapted"
            } else {
                ""
            }
        )));
    }
    let pulse: PulseSet = dynamics::read_pulse_file(&path)?;
    let system = ControlSystem::new(space, drift(config))?;
    let u = system.build_unitary(&pulse)?;
    Ok((u, "pulse".into(), path))
}

/// Run the phase-estimation sweep and write the CSV plus a JSON summary.
pub fn cmd_protocol(
    config: &RunConfig,
    exact: bool,
    pulse_override: Option<&Path>,
) -> Result<(), CliError> {
    let n = config.n_or(1);
    let n_x = config.n_x_for(n);
    let space = space_for(config, n)?;
    let (unitary, source, _) =
        resolve_unitary(config, n, SynthesisMode::Closed, exact, pulse_override)?;
    let spec = ProtocolSpec::new(n, n_x, unitary)?;
    let infidelity = spec.infidelity_for_pairs(&noon_pairs(space, n, n_x)?);

    let sweep = spec.sweep(config.phi_points)?;
    let mut csv = Vec::new();
    revmet::metrology::write_sweep_csv(&mut csv, &sweep)?;
    let csv_path = config.out_dir.join(format!("sweep_n{n}_{source}.csv"));
    write_atomic(&csv_path, &csv)?;

    let summary = sweep.summary(n, n_x, infidelity);
    let report = json!({
        "source": source,
        "summary": summary,
        // reference value of the ideal estimator, for the cross-check column
        "delta_phi_ideal": 1.0 / n as f64,
    });
    let json_path = config.out_dir.join(format!("summary_n{n}_{source}.json"));
    write_json(&json_path, &report)?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    println!(
        "n = {n}: fisher mean {:.6}, median 1/δφ {:.6}, {} of {} points excluded",
        summary.fisher_mean,
        summary.inv_delta_phi_median,
        summary.excluded_count,
        summary.phi_points
    );
    Ok(())
}

/// Run the lossy pipeline with measurement-based recovery.
pub fn cmd_loss(
    config: &RunConfig,
    exact: bool,
    pulse_override: Option<&Path>,
) -> Result<(), CliError> {
    let n = config.n_or(3);
    let n_x = config.n_x_for(n);
    if n_x != n {
        return Err(CliError::Validation(format!(
            "the loss pipeline fixes N_x = N; got n_x = {n_x} with n = {n}"
        )));
    }
    let space = space_for(config, n)?;
    let (unitary, source, _) =
        resolve_unitary(config, n, SynthesisMode::Adapted, exact, pulse_override)?;
    let infidelity = {
        let spec = ProtocolSpec::new(n, n, unitary.clone())?;
        spec.infidelity_for_pairs(&loss::adapted_pairs(space, n)?)
    };
    let spec = if exact {
        AdaptedProtocolSpec::exact(space, n)?
    } else {
        AdaptedProtocolSpec::from_unitary(space, n, unitary, 0.05)?
    };
    let loss_model = loss_spec(config)?;

    let sweep = loss::loss_sweep(&spec, &loss_model, config.phi_points)?;
    let mut csv = Vec::new();
    loss::write_loss_csv(&mut csv, &sweep)?;
    let csv_path = config.out_dir.join(format!("loss_sweep_n{n}_{source}.csv"));
    write_atomic(&csv_path, &csv)?;

    let included = |values: &[f64]| -> Vec<f64> {
        values
            .iter()
            .zip(&sweep.excluded)
            .filter(|(_, &e)| !e)
            .map(|(&v, _)| v)
            .collect()
    };
    let inv_recovered: Vec<f64> = included(&sweep.delta_phi_recovered)
        .iter()
        .map(|d| 1.0 / d)
        .collect();
    let min_delta_closed = sweep
        .delta_phi_closed
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let report = json!({
        "source": source,
        "n": n,
        "phi_points": sweep.phi.len(),
        "excluded_count": sweep.excluded.iter().filter(|&&e| e).count(),
        "povm_success": sweep.povm_success[0],
        "min_delta_phi_closed": min_delta_closed,
        "max_inv_delta_phi_sim": included(&sweep.delta_phi_sim)
            .iter()
            .map(|d| 1.0 / d)
            .fold(f64::NEG_INFINITY, f64::max),
        "recovered_inv_delta_phi_median": revmet::metrology::median(&inv_recovered),
        "fisher_sim_mean": sweep.fisher_sim.iter().sum::<f64>() / sweep.fisher_sim.len() as f64,
        "fisher_closed": sweep.fisher_closed[0],
        "unitary_infidelity": infidelity,
    });
    let json_path = config.out_dir.join(format!("loss_summary_n{n}_{source}.json"));
    write_json(&json_path, &report)?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

/// Protocol sweeps for N = 1..n_max plus the scaling fit.
pub fn cmd_scaling(
    config: &RunConfig,
    exact: bool,
    pulse_override: Option<&Path>,
) -> Result<(), CliError> {
    let n_max = config.n_or(if exact { 10 } else { 3 });
    let mut points: Vec<ScalingPoint> = Vec::new();
    let mut infidelities: Vec<f64> = Vec::new();
    let mut failed: Vec<usize> = Vec::new();

    for n in 1..=n_max {
        let run = || -> Result<(ScalingPoint, f64), CliError> {
            let n_x = config.n_x.unwrap_or(n).min(n).max(1);
            let space = SpaceDescriptor::for_photon_number(
                n.max(n_x),
                config.cutoff_headroom,
            )?;
            let mut per_n = config.clone();
            per_n.n = Some(n);
            per_n.n_x = Some(n_x);
            let (unitary, _, _) =
                resolve_unitary(&per_n, n, SynthesisMode::Closed, exact, pulse_override)?;
            let spec = ProtocolSpec::new(n, n_x, unitary)?;
            let infidelity = spec.infidelity_for_pairs(&noon_pairs(space, n, n_x)?);
            let sweep = spec.sweep(config.phi_points)?;
            let summary = sweep.summary(n, n_x, infidelity);
            Ok((
                ScalingPoint {
                    n_photons: n,
                    inv_delta_phi_max: summary.inv_delta_phi_max,
                    inv_delta_phi_median: summary.inv_delta_phi_median,
                    inv_delta_phi_mean: summary.inv_delta_phi_mean,
                    fisher_mean: summary.fisher_mean,
                },
                infidelity,
            ))
        };
        match run() {
            Ok((point, infidelity)) => {
                println!(
                    "n = {n}: median 1/δφ = {:.6}, fisher mean = {:.6}",
                    point.inv_delta_phi_median, point.fisher_mean
                );
                points.push(point);
                infidelities.push(infidelity);
            }
            Err(e) => {
                eprintln!("n = {n}: {e}");
                failed.push(n);
            }
        }
    }
    if points.len() < 2 {
        return Err(CliError::Validation(format!(
            "scaling fit needs at least two successful runs; {} succeeded",
            points.len()
        )));
    }
    let fit = scaling_fit(&points)?;

    let source = if exact { "exact" } else { "pulse" };
    let mut csv = String::from("n,inv_delta_phi_max,inv_delta_phi_median,inv_delta_phi_mean,fisher_mean\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.n_photons,
            dynamics::fmt_f64(p.inv_delta_phi_max),
            dynamics::fmt_f64(p.inv_delta_phi_median),
            dynamics::fmt_f64(p.inv_delta_phi_mean),
            dynamics::fmt_f64(p.fisher_mean),
        ));
    }
    let csv_path = config
        .out_dir
        .join(format!("scaling_points_{source}_n{n_max}.csv"));
    write_atomic(&csv_path, csv.as_bytes())?;

    let report = json!({
        "source": source,
        "n_values": points.iter().map(|p| p.n_photons).collect::<Vec<_>>(),
        "unitary_infidelities": infidelities,
        "fit": fit,
        "partial": !failed.is_empty(),
        "failed_n": failed,
    });
    let json_path = config.out_dir.join(format!("scaling_{source}_n{n_max}.json"));
    write_json(&json_path, &report)?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    println!(
        "slopes: max {:.6}, median {:.6}, mean {:.6}, fisher-vs-n² {:.6}",
        fit.slope_inv_max, fit.slope_inv_median, fit.slope_inv_mean, fit.slope_fisher_vs_n2
    );
    Ok(())
}

/// Independent cross-checks of the numerical machinery.
pub fn cmd_verify(config: &RunConfig) -> Result<(), CliError> {
    let mut failures = Vec::new();
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("verify {name}: {} ({detail})", if ok { "OK" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // jump decomposition against an explicit Euler step of the dissipator:
    // the deviation is second order in dt, so halving dt divides it by ~4
    {
        let n = 3;
        let space = SpaceDescriptor::for_photon_number(n, config.cutoff_headroom)?;
        let spec = AdaptedProtocolSpec::exact(space, n)?;
        let state = {
            let resource = spec.protocol().resource_state()?;
            resource
        };
        let dev_at = |dt: f64| -> Result<f64, CliError> {
            let model = LossSpec::rates(0.1, 0.1, dt)?;
            let jump = loss::jump_decompose(&state, &model)?.density_matrix();
            let euler = loss::lindblad_euler_step(&state, 0.1, 0.1, dt)?;
            Ok((&jump - &euler)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max))
        };
        let coarse = dev_at(1e-2)?;
        let fine = dev_at(5e-3)?;
        let ratio = coarse / fine;
        report(
            "jump-vs-dissipator",
            (3.5..=4.5).contains(&ratio),
            format!("halving dt scales the deviation by {ratio:.3}"),
        );
    }

    // analytic Fisher information against a finite-difference state derivative
    {
        let n = 3;
        let space = SpaceDescriptor::for_photon_number(n, config.cutoff_headroom)?;
        let spec = ProtocolSpec::exact(space, n, n)?;
        let phi = 0.37;
        let h = 1e-4;
        let plus = spec.run(phi + h);
        let minus = spec.run(phi - h);
        let dpsi: Vec<num_complex::Complex64> = plus
            .amplitudes()
            .iter()
            .zip(minus.amplitudes())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let dpsi = ndarray::Array1::from(dpsi);
        let psi = spec.run(phi);
        let fd = 4.0
            * (revmet::hilbert::inner(&dpsi, &dpsi).re
                - revmet::hilbert::inner(&dpsi, psi.amplitudes()).norm_sqr());
        let analytic = spec.fisher(phi);
        report(
            "finite-difference-fisher",
            (fd - analytic).abs() < 1e-5,
            format!("analytic {analytic:.9} vs finite difference {fd:.9}"),
        );
    }

    // two different unitary completions must give the same protocol output
    {
        let n = 3;
        let space = SpaceDescriptor::for_photon_number(n, config.cutoff_headroom)?;
        let pairs = noon_pairs(space, n, n)?;
        let forward: Vec<usize> = (0..space.dim()).collect();
        let rotated: Vec<usize> = (0..space.dim()).map(|i| (i + n + 1) % space.dim()).collect();
        let u1 = revmet::metrology::exact_completion_with_scan(space, &pairs, &forward)?;
        let u2 = revmet::metrology::exact_completion_with_scan(space, &pairs, &rotated)?;
        let s1 = ProtocolSpec::new(n, n, u1)?;
        let s2 = ProtocolSpec::new(n, n, u2)?;
        let worst = (0..7)
            .map(|i| {
                let phi = -3.0 + i as f64;
                (s1.run(phi).inner(&s2.run(phi)).norm() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        report(
            "completion-invariance",
            worst < 1e-10,
            format!("max | |⟨ψ₁|ψ₂⟩| − 1 | = {worst:.3e}"),
        );
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "verification failed: {}",
            failures.join(", ")
        )))
    }
}
