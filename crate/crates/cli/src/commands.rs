//! One function per CLI verb.

use std::path::PathBuf;

use bbi_core::control::{design_michelson_components, OptimizedComponent};
use bbi_core::dynamics::{
    simulate_bloch_oscillations, simulate_kapitza_dirac, simulate_michelson_1d, AccelerationVector, ControlWaveform,
    MichelsonComponents, MichelsonRun, MomentumGrid, VectorInterferometer,
};
use bbi_core::estimation::{
    build_empirical_model, fisher_bound, fit_bloch_period, least_squares_estimate, magnitude_angle, posterior_stats,
    scaling_projection, shot_marginals, simulate_calibration, simulate_shots, BlochFit, ModelPair,
    PosteriorAccumulator,
};
use bbi_core::imaging::{sample_shots, sub_seed, ShotRecord};
use bbi_core::dynamics::Axis;
use bbi_core::estimation::EmpiricalModel;
use bbi_core::lattice::{solve_bands, PORTS};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{exists, fmt, number, port_columns, Sink};
use crate::CliError;

pub fn bands(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let lattice = cfg.lattice()?;
    let n = cfg.bands.q_points;
    let q: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let b = solve_bands(&lattice, &q)?;
    let mut header = vec!["q".to_owned()];
    header.extend((0..cfg.bands.bands).map(|k| format!("E{k}")));
    let rows: Vec<Vec<String>> = q
        .iter()
        .zip(&b.energies)
        .map(|(q, e)| std::iter::once(fmt(*q)).chain(e[..cfg.bands.bands].iter().map(|v| fmt(*v))).collect())
        .collect();
    out.csv("bands.csv", &header, &rows)?;
    if !b.converged {
        eprintln!("warning: band energies changed by {:.2e} E_r on doubling the truncation", b.truncation_error);
    }
    Ok(())
}

fn fit_entry(fit: &Result<BlochFit, bbi_core::Error>) -> Value {
    match fit {
        Ok(f) => json!({
            "accel_g": f.accel_g,
            "sigma_g": number(f.sigma_g),
            "period_us": f.period_us,
            "sigma_period_us": number(f.sigma_period_us),
            "r_squared": f.r_squared,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

pub fn bloch(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let lattice = cfg.lattice()?;
    let holds = cfg.hold_times();
    let [ax, az] = cfg.bloch.accel;
    let (sx, sz) = rayon::join(
        || simulate_bloch_oscillations(&lattice, ax, &holds),
        || simulate_bloch_oscillations(&lattice, az, &holds),
    );
    let (sx, sz) = (sx?, sz?);

    // (hold, repeat, x marginal, z marginal)
    let mut samples: Vec<(f64, usize, [f64; PORTS], [f64; PORTS])> = Vec::new();
    if cfg.bloch.noise {
        let det = cfg.detection()?;
        let per_hold = holds
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let grid = MomentumGrid::outer(&sx.populations[i].probabilities, &sz.populations[i].probabilities);
                let shots = sample_shots(&grid, &det.with_seed(sub_seed(det.seed, i as u64)), cfg.bloch.repeats)?;
                shots
                    .iter()
                    .enumerate()
                    .map(|(r, s)| shot_marginals(s).map(|(mx, mz)| (t, r, mx, mz)))
                    .collect::<bbi_core::Result<Vec<_>>>()
            })
            .collect::<bbi_core::Result<Vec<_>>>()?;
        samples.extend(per_hold.into_iter().flatten());
    } else {
        for (i, &t) in holds.iter().enumerate() {
            samples.push((t, 0, sx.populations[i].probabilities, sz.populations[i].probabilities));
        }
    }

    let mut header = vec!["hold_us".to_owned(), "repeat".to_owned()];
    header.extend(port_columns("x"));
    header.extend(port_columns("z"));
    let rows: Vec<Vec<String>> = samples
        .iter()
        .map(|(t, r, mx, mz)| {
            [fmt(*t), r.to_string()]
                .into_iter()
                .chain(mx.iter().chain(mz).map(|v| fmt(*v)))
                .collect()
        })
        .collect();
    out.csv("bloch_series.csv", &header, &rows)?;

    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let xs: Vec<[f64; PORTS]> = samples.iter().map(|s| s.2).collect();
    let zs: Vec<[f64; PORTS]> = samples.iter().map(|s| s.3).collect();
    let fit_cfg = cfg.bloch_fit();
    let phys = lattice.physical;
    let fx = fit_bloch_period(&times, &xs, &fit_cfg, &phys);
    let fz = fit_bloch_period(&times, &zs, &fit_cfg, &phys);
    let expected = [ax, az].map(|a| number(phys.bloch_period(a) * 1e6));
    out.json(
        "bloch_fit.json",
        &json!({
            "applied_g": cfg.bloch.accel,
            "expected_period_us": expected,
            "landau_zener_flagged": [sx.landau_zener_flagged(), sz.landau_zener_flagged()],
            "x": fit_entry(&fx),
            "z": fit_entry(&fz),
        }),
    )?;
    let failed: Vec<String> = [("x", &fx), ("z", &fz)]
        .into_iter()
        .filter_map(|(axis, f)| f.as_ref().err().map(|e| format!("{axis}: {e}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(format!("Bloch fit failed ({})", failed.join("; "))))
    }
}

pub fn kapitza(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let lattice = cfg.lattice()?;
    let rows = cfg
        .kapitza
        .pulse_us
        .par_iter()
        .map(|&t| {
            let p = simulate_kapitza_dirac(&lattice, t)?;
            let area = 0.5 * lattice.depth * lattice.physical.micros_to_natural(t);
            Ok([fmt(t), fmt(area)]
                .into_iter()
                .chain(p.probabilities.iter().map(|v| fmt(*v)))
                .chain(std::iter::once(fmt(p.leakage)))
                .collect())
        })
        .collect::<bbi_core::Result<Vec<Vec<String>>>>()?;
    let mut header = vec!["pulse_us".to_owned(), "area".to_owned()];
    header.extend(port_columns("p"));
    header.push("leakage".to_owned());
    out.csv("kapitza.csv", &header, &rows)?;
    Ok(())
}

fn write_component(out: &Sink, name: &str, c: &OptimizedComponent) -> Result<Value, CliError> {
    out.text(&format!("{name}.wf"), &c.waveform.to_text()?)?;
    let mut trace = Vec::new();
    c.write_trace_csv(&mut trace)?;
    out.text(&format!("{name}_trace.csv"), &String::from_utf8_lossy(&trace))?;
    Ok(json!({
        "fidelity": c.fidelity,
        "converged": c.converged,
        "iterations": c.iterations,
        "restarts": c.restarts,
        "duration_us": c.waveform.duration_us(),
        "samples": c.waveform.len(),
    }))
}

pub fn qoc(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let lattice = cfg.lattice()?;
    let timing = cfg.timing()?;
    let opt = cfg.optimizer()?;
    let d = design_michelson_components(&lattice, &timing, &opt)?;
    let bs = write_component(out, "beamsplitter", &d.beamsplitter)?;
    let mirror = write_component(out, "mirror", &d.mirror)?;
    out.json(
        "qoc.json",
        &json!({
            "depth": lattice.depth,
            "fidelity_goal": opt.fidelity_goal,
            "optimizer_seed": opt.seed,
            "beamsplitter": bs,
            "mirror": mirror,
        }),
    )?;
    if d.beamsplitter.converged && d.mirror.converged {
        Ok(())
    } else {
        Err(CliError::Convergence(format!(
            "component fidelities {:.4} / {:.4} below the goal {}",
            d.beamsplitter.fidelity, d.mirror.fidelity, opt.fidelity_goal
        )))
    }
}

/// Components from the configured waveform files, or designed with the `[qoc]` settings.
fn components(cfg: &RunConfig) -> Result<(MichelsonComponents, MichelsonComponents), CliError> {
    match &cfg.waveforms {
        Some(w) => {
            let read = |p: &PathBuf| -> Result<ControlWaveform, CliError> {
                exists(p)?;
                Ok(ControlWaveform::read(p)?)
            };
            let x = MichelsonComponents {
                beamsplitter: read(&w.beamsplitter)?,
                mirror: read(&w.mirror)?,
            };
            let z = MichelsonComponents {
                beamsplitter: read(w.beamsplitter_z.as_ref().unwrap_or(&w.beamsplitter))?,
                mirror: read(w.mirror_z.as_ref().unwrap_or(&w.mirror))?,
            };
            Ok((x, z))
        }
        None => {
            eprintln!("no [waveforms] given; designing components with the [qoc] settings");
            let d = design_michelson_components(&cfg.lattice()?, &cfg.timing()?, &cfg.optimizer()?)?;
            Ok((d.michelson(), d.michelson()))
        }
    }
}

fn interferometer(cfg: &RunConfig) -> Result<VectorInterferometer, CliError> {
    let (x, z) = components(cfg)?;
    Ok(VectorInterferometer {
        lattice: cfg.lattice()?,
        x,
        z,
        timing: cfg.timing()?,
    })
}

fn stage_label(run: &MichelsonRun, i: usize) -> String {
    serde_json::to_value(run.stages[i].stage)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn michelson(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let ifo = interferometer(cfg)?;
    let accels = cfg.michelson.accel.accelerations()?;
    let runs = accels
        .par_iter()
        .map(|a| {
            let x = simulate_michelson_1d(&ifo.lattice, &ifo.x.beamsplitter, &ifo.x.mirror, a.a_x, &ifo.timing)?;
            let z = simulate_michelson_1d(&ifo.lattice, &ifo.z.beamsplitter, &ifo.z.mirror, a.a_z, &ifo.timing)?;
            Ok((x, z))
        })
        .collect::<bbi_core::Result<Vec<(MichelsonRun, MichelsonRun)>>>()?;

    let mut grid_header = vec!["index".to_owned(), "a_x".to_owned(), "a_z".to_owned()];
    for z in -3..=3 {
        for x in -3..=3 {
            grid_header.push(format!("z{z}_x{x}"));
        }
    }
    let mut grid_rows = Vec::new();
    let mut stage_rows = Vec::new();
    let mut summary = Vec::new();
    for (i, (a, (rx, rz))) in accels.iter().zip(&runs).enumerate() {
        let grid = MomentumGrid::outer(&rx.final_ports.probabilities, &rz.final_ports.probabilities);
        let initial = MomentumGrid::outer(&rx.stages[0].ports.probabilities, &rz.stages[0].ports.probabilities);
        grid_rows.push(
            [i.to_string(), fmt(a.a_x), fmt(a.a_z)]
                .into_iter()
                .chain(grid.row_major().iter().map(|v| fmt(*v)))
                .collect(),
        );
        for (axis, run) in [("x", rx), ("z", rz)] {
            for (k, s) in run.stages.iter().enumerate() {
                stage_rows.push(
                    [i.to_string(), axis.to_owned(), stage_label(run, k)]
                        .into_iter()
                        .chain(s.ports.probabilities.iter().map(|v| fmt(*v)))
                        .collect(),
                );
            }
        }
        summary.push(json!({
            "index": i,
            "a": [a.a_x, a.a_z],
            "center": grid.center(),
            "lower_left_mass": grid.lower_left_mass(),
            "upper_right_mass": grid.upper_right_mass(),
            "max_diff_from_initial": grid.max_abs_diff(&initial),
            "edge_leakage": [rx.edge_leakage, rz.edge_leakage],
        }));
    }
    out.csv("michelson_grids.csv", &grid_header, &grid_rows)?;
    let mut stage_header = vec!["index".to_owned(), "axis".to_owned(), "stage".to_owned()];
    stage_header.extend(port_columns("p"));
    out.csv("michelson_stages.csv", &stage_header, &stage_rows)?;
    out.json("michelson.json", &json!({ "points": summary }))?;
    Ok(())
}

fn model_json(model: &EmpiricalModel) -> Result<Value, CliError> {
    Ok(serde_json::to_value(model).map_err(bbi_core::Error::from)?)
}

pub fn calibrate(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let spline = cfg.spline()?;
    let accels = cfg.calibrate.scan.accelerations()?;
    let ifo = interferometer(cfg)?;
    let cal = simulate_calibration(&ifo, &accels, &cfg.detection()?, cfg.calibrate.shots_per_point)?;
    let mut report = serde_json::Map::new();
    for axis in [Axis::X, Axis::Z] {
        let model = build_empirical_model(&cal, axis, &spline)?;
        let rms = model.rms_residual(&cal.points(axis)?);
        out.json(&format!("model_{}.json", axis.label()), &model_json(&model)?)?;
        report.insert(
            axis.label().to_owned(),
            json!({
                "rms_residual": rms,
                "floor_fraction": model.floor_fraction(),
                "range": model.range,
                "knots": model.knots.len(),
            }),
        );
    }
    report.insert("points".into(), json!(accels.len()));
    report.insert("shots_per_point".into(), json!(cfg.calibrate.shots_per_point));
    out.json("calibration.json", &Value::Object(report))?;
    Ok(())
}

fn load_models(cfg: &RunConfig, out: &Sink, x: &Option<PathBuf>, z: &Option<PathBuf>) -> Result<ModelPair, CliError> {
    let pick = |p: &Option<PathBuf>, axis: &str| p.clone().unwrap_or_else(|| out.path(&format!("model_{axis}.json")));
    let (px, pz) = (pick(x, "x"), pick(z, "z"));
    exists(&px)?;
    exists(&pz)?;
    let _ = cfg;
    let models = ModelPair {
        x: EmpiricalModel::read(&px)?,
        z: EmpiricalModel::read(&pz)?,
    };
    if models.x.axis != Axis::X || models.z.axis != Axis::Z {
        return Err(CliError::Config("model files are for the wrong axes".into()));
    }
    Ok(models)
}

struct PointInput {
    applied: Option<AccelerationVector>,
    shots: Vec<ShotRecord>,
}

pub fn estimate(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let e = &cfg.estimate;
    let models = load_models(cfg, out, &e.model_x, &e.model_z)?;
    let n_trial = cfg.detection.n_trial;

    let inputs: Vec<PointInput> = if !e.shot_files.is_empty() {
        let shots = e
            .shot_files
            .iter()
            .map(|p| {
                exists(p)?;
                Ok(ShotRecord::read(p)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let applied = shots[0].a_applied.map(|[x, z]| AccelerationVector { a_x: x, a_z: z });
        let same = shots.iter().all(|s| s.a_applied == shots[0].a_applied);
        vec![PointInput {
            applied: applied.filter(|_| same),
            shots,
        }]
    } else {
        let accels = e.accel.accelerations()?;
        let ifo = interferometer(cfg)?;
        let shots = if e.noiseless {
            ifo.grids(&accels)?
                .iter()
                .enumerate()
                .map(|(i, g)| vec![ShotRecord::from_grid(g, sub_seed(cfg.seed, i as u64))])
                .collect()
        } else {
            simulate_shots(&ifo, &accels, &cfg.detection()?, e.shots)?
        };
        accels
            .into_iter()
            .zip(shots)
            .map(|(a, mut shots)| {
                for s in &mut shots {
                    s.a_applied = Some([a.a_x, a.a_z]);
                }
                PointInput { applied: Some(a), shots }
            })
            .collect()
    };

    let results = inputs
        .par_iter()
        .map(|p| estimate_point(p, &models, n_trial, e.resolution))
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut failed = 0;
    for (i, (p, r)) in inputs.iter().zip(results).enumerate() {
        let applied = p.applied.map(|a| [a.a_x, a.a_z]);
        let polar = |a: [f64; 2]| {
            let m = magnitude_angle(&AccelerationVector { a_x: a[0], a_z: a[1] });
            (m.magnitude, m.theta)
        };
        let post = r.posterior.as_ref();
        if post.is_none() {
            failed += 1;
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_owned(), fmt);
        rows.push(vec![
            i.to_string(),
            opt(applied.map(|a| a[0])),
            opt(applied.map(|a| a[1])),
            opt(applied.map(|a| polar(a).0)),
            opt(applied.map(|a| polar(a).1)),
            fmt(r.ls_mean[0]),
            fmt(r.ls_mean[1]),
            fmt(r.ls_sd[0]),
            fmt(r.ls_sd[1]),
            opt(post.map(|q| q.0[0])),
            opt(post.map(|q| q.0[1])),
            opt(post.map(|q| q.1[0])),
            opt(post.map(|q| q.1[1])),
            opt(post.map(|q| polar(q.0).0)),
            opt(post.map(|q| polar(q.0).1)),
            r.used.to_string(),
        ]);
        if let (true, Some(csv)) = (cfg.estimate.posterior_csv, &r.posterior_csv) {
            out.text(&format!("posterior_{i:03}.csv"), csv)?;
        }
        points.push(json!({
            "index": i,
            "applied": applied,
            "shots": r.shots,
            "least_squares": { "mean": r.ls_mean.map(number), "delta_a": r.ls_sd.map(number) },
            "posterior": post.map(|q| json!({ "mean": q.0, "std": q.1, "shots": r.used })),
        }));
    }
    let header: Vec<String> = [
        "index", "applied_x", "applied_z", "applied_mag", "applied_theta", "ls_x", "ls_z", "ls_dx", "ls_dz",
        "post_x", "post_z", "post_sx", "post_sz", "post_mag", "post_theta", "shots_used",
    ]
    .map(str::to_owned)
    .to_vec();
    out.csv("estimates.csv", &header, &rows)?;
    out.json("estimate.json", &json!({ "n_trial": n_trial, "points": points }))?;
    if failed > 0 {
        return Err(CliError::Estimation(format!("{failed} point(s) had no usable shot")));
    }
    Ok(())
}

struct PointResult {
    shots: Vec<Value>,
    ls_mean: [f64; 2],
    ls_sd: [f64; 2],
    posterior: Option<([f64; 2], [f64; 2])>,
    posterior_csv: Option<String>,
    used: usize,
}

fn estimate_point(p: &PointInput, models: &ModelPair, n_trial: f64, resolution: usize) -> Result<PointResult, CliError> {
    let mut acc = PosteriorAccumulator::new(models.clone(), n_trial, resolution)?;
    let mut entries = Vec::with_capacity(p.shots.len());
    let mut ls = Vec::new();
    for (k, s) in p.shots.iter().enumerate() {
        let est = shot_marginals(s).and_then(|(mx, mz)| least_squares_estimate((&mx, &mz), models));
        let added = acc.add(s);
        let mut entry = json!({ "index": k, "seed": s.seed });
        match &est {
            Ok(e) => {
                entry["least_squares"] = json!({ "a_x": e.accel.a_x, "a_z": e.accel.a_z, "residual": e.residual });
                ls.push(e.accel);
            }
            Err(err) => entry["least_squares_error"] = json!(err.to_string()),
        }
        if let Err(err) = &added {
            entry["error"] = json!(err.to_string());
        }
        entries.push(entry);
    }
    let stat = |f: fn(&AccelerationVector) -> f64| {
        let v: Vec<f64> = ls.iter().map(f).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        (mean, sd)
    };
    let (mx, sx) = stat(|a| a.a_x);
    let (mz, sz) = stat(|a| a.a_z);
    let used = acc.shots();
    let (posterior, posterior_csv) = if used > 0 {
        let post = acc.posterior()?;
        let s = posterior_stats(&post);
        let mut csv = Vec::new();
        post.write_csv(&mut csv)?;
        (
            Some(([s.mean.a_x, s.mean.a_z], s.std)),
            Some(String::from_utf8_lossy(&csv).into_owned()),
        )
    } else {
        (None, None)
    };
    Ok(PointResult {
        shots: entries,
        ls_mean: [mx, mz],
        ls_sd: [sx, sz],
        posterior,
        posterior_csv,
        used,
    })
}

pub fn sensitivity(cfg: &RunConfig, out: &Sink) -> Result<(), CliError> {
    let s = &cfg.sensitivity;
    let models = load_models(cfg, out, &s.model_x, &s.model_z)?;
    let n_trial = cfg.detection.n_trial;
    let a = AccelerationVector::new(s.a[0], s.a[1])?;
    let bound = fisher_bound(&models, a, n_trial)?;
    let baseline_ms = cfg.timing()?.total_us * 1e-3;
    let baseline = bound.sigma_for(n_trial * s.shots as f64);
    let per_axis = [0, 1].map(|k| scaling_projection(baseline_ms, baseline[k], &s.times_ms));
    let [px, pz] = per_axis;
    let (px, pz) = (px?, pz?);

    let rows: Vec<Vec<String>> = px
        .iter()
        .zip(&pz)
        .map(|(x, z)| vec![fmt(x.time_ms), fmt(x.delta_a), fmt(z.delta_a)])
        .collect();
    out.csv(
        "scaling.csv",
        &["time_ms", "delta_a_x", "delta_a_z"].map(str::to_owned),
        &rows,
    )?;
    let pair = |v: [f64; 2]| [number(v[0]), number(v[1])];
    out.json(
        "sensitivity.json",
        &json!({
            "a": s.a,
            "information_per_trial": pair(bound.information),
            "bounds": [
                { "atoms": 1.0, "delta_a": pair(bound.sigma_for(1.0)) },
                { "atoms": n_trial, "delta_a": pair(bound.sigma_for(n_trial)) },
                { "atoms": s.n_atoms, "delta_a": pair(bound.sigma_for(s.n_atoms)) },
            ],
            "baseline": {
                "time_ms": baseline_ms,
                "shots": s.shots,
                "delta_a": pair(baseline),
            },
            "projection": px.iter().zip(&pz).map(|(x, z)| json!({
                "time_ms": x.time_ms,
                "delta_a": [number(x.delta_a), number(z.delta_a)],
            })).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}
