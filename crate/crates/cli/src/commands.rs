use doublepass_core::ensemble::{bias_convergence_scan, run_scan, BiasScanResult, ScanResult};
use doublepass_core::filters::{run_filter, simulate_truth_record, sse_trajectory_from_innovations};
use doublepass_core::spin::build_collective_ops;
use doublepass_core::{CouplingParams, FilterKind, NoiseStream, ScanConfig, ScanTask, Spin, TruthModel};
use serde_json::json;

use crate::config::{CompareConfig, ScanSection, TrajectoryConfig};
use crate::error::CliError;
use crate::output::{Cell, Staging, Table};
use crate::plot;

fn n_steps(t_final: f64, dt: f64) -> usize {
    (t_final / dt).round() as usize
}

/// Single pass (K = 0) and double pass driven by the same innovations.
pub fn trajectory(cfg: &TrajectoryConfig, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let spin = Spin::new(cfg.f)?;
    let ops = build_collective_ops(spin)?;
    let n = n_steps(cfg.t_final, cfg.dt);
    let dws = NoiseStream::new(cfg.master_seed, 0, cfg.dt)?.take_increments(n);
    let double = CouplingParams::new(cfg.m, cfg.k)?.with_gamma(cfg.gamma).with_rate(cfg.omega);
    let single = double.single_pass();
    let pi_double = sse_trajectory_from_innovations(spin, &ops, &double, &dws, cfg.dt, cfg.scheme)?;
    let pi_single = sse_trajectory_from_innovations(spin, &ops, &single, &dws, cfg.dt, cfg.scheme)?;

    let c = 2.0 * double.sqrt_m() * cfg.dt;
    let mut table = Table::new(&["t", "dW", "dZ_single", "dZ_double", "pi_fz_single", "pi_fz_double"]);
    table.push(vec![0.0.into(), Cell::Empty, Cell::Empty, Cell::Empty, pi_single[0].into(), pi_double[0].into()]);
    for j in 1..=n {
        let dw = dws[j - 1];
        table.push(vec![
            (j as f64 * cfg.dt).into(),
            dw.into(),
            (dw + c * pi_single[j - 1]).into(),
            (dw + c * pi_double[j - 1]).into(),
            pi_single[j].into(),
            pi_double[j].into(),
        ]);
    }
    out.write_csv("trajectory.csv", &table)?;
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    out.write_json(
        "summary.json",
        &json!({
            "max_abs_pi_fz_single": max_abs(&pi_single),
            "max_abs_pi_fz_double": max_abs(&pi_double),
        }),
    )?;
    if plots {
        let times: Vec<f64> = (0..=n).map(|j| j as f64 * cfg.dt).collect();
        plot::lines(
            out,
            "trajectory.svg",
            "conditional <F_z>",
            ("t", "pi(F_z)"),
            &[("single pass", zip(&times, &pi_single)), ("double pass", zip(&times, &pi_double))],
            false,
        )?;
    }
    Ok(())
}

fn zip(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter().copied().zip(y.iter().copied()).collect()
}

/// Exact (SSE) truth record filtered by the projection filter, with and
/// without the second pass.
pub fn compare_filters(cfg: &CompareConfig, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let spin = Spin::new(cfg.f)?;
    spin.check_exact_cap()?;
    let n = n_steps(cfg.t_final, cfg.dt);
    let b = cfg.omega / cfg.gamma;
    let floor = cfg.floor_fraction * cfg.f;
    let double = CouplingParams::new(cfg.m, cfg.k)?.with_gamma(cfg.gamma).with_field(b);

    let mut errors = Vec::new();
    let mut summary = serde_json::Map::new();
    for (label, p) in [("double", double.clone()), ("single", double.single_pass())] {
        let mut noise = NoiseStream::new(cfg.master_seed, 0, cfg.dt)?;
        let truth = simulate_truth_record(&p, b, spin, &mut noise, n, TruthModel::Full)?;
        let proj = run_filter(&truth, FilterKind::Projection, &p, spin)?;
        let (theta, xi) = (proj.theta.as_ref().unwrap(), proj.xi.as_ref().unwrap());
        let mut table = Table::new(&["t", "dZ", "pi_exact", "pi_projection", "theta", "xi"]);
        let mut rel = Vec::with_capacity(truth.times.len());
        let mut worst = 0.0f64;
        for j in 0..truth.times.len() {
            let (e, a) = (truth.pi_fz[j], proj.pi_fz[j]);
            table.push(vec![
                truth.times[j].into(),
                truth.dz[j].into(),
                e.into(),
                a.into(),
                theta[j].into(),
                xi[j].into(),
            ]);
            let r = (e.abs() > floor).then(|| (a - e).abs() / e.abs());
            if let Some(r) = r {
                worst = worst.max(r);
            }
            rel.push(r);
        }
        out.write_csv(&format!("overlay_{label}.csv"), &table)?;
        summary.insert(format!("max_relative_error_{label}"), json!(worst));
        if plots {
            plot::lines(
                out,
                &format!("overlay_{label}.svg"),
                &format!("{label} pass: exact vs projection"),
                ("t", "pi(F_z)"),
                &[("exact", zip(&truth.times, &truth.pi_fz)), ("projection", zip(&truth.times, &proj.pi_fz))],
                false,
            )?;
        }
        errors.push((truth.times, rel));
    }
    let mut table = Table::new(&["t", "relative_error_double", "relative_error_single"]);
    let (times, rel_double) = &errors[0];
    let rel_single = &errors[1].1;
    for j in 0..times.len() {
        table.push(vec![times[j].into(), rel_double[j].into(), rel_single[j].into()]);
    }
    out.write_csv("relative_error.csv", &table)?;
    summary.insert("floor".into(), json!(floor));
    out.write_json("summary.json", &summary)?;
    Ok(())
}

pub fn scan_config(task: ScanTask, s: &ScanSection, workers: Option<usize>) -> Result<ScanConfig, CliError> {
    let mut cfg = ScanConfig::new(task, s.f_values.clone(), s.realizations);
    cfg.coupling = s.coupling()?;
    cfg.gamma = s.gamma;
    cfg.b_true = s.b_true;
    cfg.t_final = s.t_final;
    cfg.dt = s.dt;
    cfg.master_seed = s.master_seed;
    cfg.delta = s.delta;
    cfg.crb_mode = s.crb_mode;
    cfg.richardson = s.richardson;
    cfg.d = s.d;
    cfg.np = s.np;
    cfg.innovation = s.innovation;
    cfg.workers = workers;
    cfg.validate()?;
    Ok(cfg)
}

pub fn scan(task: ScanTask, s: &ScanSection, workers: Option<usize>, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    let cfg = scan_config(task, s, workers)?;
    let result = run_scan(&cfg)?;
    write_scan(&result, task, out, plots)
}

fn write_scan(r: &ScanResult, task: ScanTask, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    let mut points = Table::new(&[
        "F",
        "mean",
        "std",
        "n",
        "failures",
        "standard_error",
        "M",
        "K",
        "bound_from_mean_information",
        "mean_estimate",
        "mean_abs_estimate",
        "mean_xi_posterior",
        "mean_xi_truth",
    ]);
    for p in &r.points {
        points.push(vec![
            p.f.into(),
            p.mean.into(),
            p.std.into(),
            p.n.into(),
            p.failures.into(),
            p.standard_error().into(),
            p.m.into(),
            p.k.into(),
            p.bound_from_mean_information.into(),
            p.mean_estimate.into(),
            p.mean_abs_estimate.into(),
            p.mean_xi_posterior.into(),
            p.mean_xi_truth.into(),
        ]);
    }
    out.write_csv("points.csv", &points)?;

    let curve = match task {
        ScanTask::Crb => "bound_from_mean_information",
        _ => "mean",
    };
    let fit = r.fit.as_ref().map(|f| {
        json!({"slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared, "curve": curve})
    });
    out.write_json("fit.json", &fit)?;

    let mut reference = Table::new(&["F", "shotnoise", "heisenberg"]);
    for p in &r.reference {
        reference.push(vec![p.f.into(), p.shotnoise.into(), p.heisenberg.into()]);
    }
    out.write_csv("reference.csv", &reference)?;

    let mut reals = Table::new(&[
        "F",
        "realization",
        "stream_index",
        "value",
        "secondary",
        "xi_posterior",
        "xi_truth",
        "clamp_events",
    ]);
    for o in &r.outcomes {
        reals.push(vec![
            o.f.into(),
            o.realization.into(),
            o.stream_index.into(),
            o.value.into(),
            o.secondary.into(),
            o.xi_posterior.into(),
            o.xi_truth.into(),
            o.clamp_events.map_or(Cell::Empty, Cell::U),
        ]);
    }
    out.write_csv("realizations.csv", &reals)?;
    out.failures.extend(r.failures.iter().cloned());

    if plots {
        let value = |p: &doublepass_core::ensemble::ScanPoint| match task {
            ScanTask::Crb => p.bound_from_mean_information.unwrap_or(f64::NAN),
            _ => p.mean,
        };
        plot::lines(
            out,
            "scan.svg",
            "field uncertainty vs F",
            ("F", "dB"),
            &[
                ("simulated", r.points.iter().map(|p| (p.f, value(p))).collect()),
                ("shotnoise", r.reference.iter().map(|p| (p.f, p.shotnoise)).collect()),
                ("heisenberg", r.reference.iter().map(|p| (p.f, p.heisenberg)).collect()),
            ],
            true,
        )?;
    }
    Ok(())
}

pub fn bias(s: &ScanSection, workers: Option<usize>, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    let [f] = s.f_values[..] else {
        return Err(CliError::Config(format!("bias-scan takes exactly one F value, got {}", s.f_values.len())));
    };
    let base = scan_config(ScanTask::Particle, s, workers)?;
    let r = bias_convergence_scan(&s.d_values, f, &base)?;
    write_bias(&r, out, plots)
}

pub fn posterior_file(d: f64) -> String {
    format!("posterior_D{d:e}.csv")
}

fn write_bias(r: &BiasScanResult, out: &mut Staging, plots: bool) -> Result<(), CliError> {
    let mut rows = Table::new(&[
        "D",
        "mean_abs_estimate",
        "mean_estimate",
        "std_estimate",
        "mean_posterior_std",
        "n",
        "failures",
        "gaussian_r_squared",
    ]);
    for row in &r.rows {
        rows.push(vec![
            row.d.into(),
            row.mean_abs_estimate.into(),
            row.mean_estimate.into(),
            row.std_estimate.into(),
            row.mean_posterior_std.into(),
            row.n.into(),
            row.failures.into(),
            row.gaussian_r_squared.into(),
        ]);
        if row.failures > 0 {
            out.failures.push(format!("D = {}: {} realizations failed", row.d, row.failures));
        }
    }
    out.write_csv("bias.csv", &rows)?;
    for (row, post) in r.rows.iter().zip(&r.posteriors) {
        let mut t = Table::new(&["B", "weight"]);
        for &(b, w) in post {
            t.push(vec![b.into(), w.into()]);
        }
        out.write_csv(&posterior_file(row.d), &t)?;
    }
    let strictly = r.rows.windows(2).all(|w| w[1].mean_abs_estimate < w[0].mean_abs_estimate);
    out.write_json(
        "summary.json",
        &json!({"f": r.f, "bias_decreases": r.bias_decreases, "strictly_decreasing": strictly}),
    )?;
    if plots {
        let series: Vec<(String, Vec<(f64, f64)>)> = r
            .rows
            .iter()
            .zip(&r.posteriors)
            .map(|(row, post)| (format!("D = {:e}", row.d), post.clone()))
            .collect();
        let refs: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        plot::lines(out, "posteriors.svg", "final posterior, realization 0", ("B", "weight"), &refs, false)?;
    }
    Ok(())
}
