use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use sdecluster::closure::{
    cluster_histograms, fit_closure, reconstruct_theta_path, simulate_closed, uniform_edges, ClosureFit,
};
use sdecluster::hyperselect::{gap_statistic, select_eps2, stationary_density_at};
use sdecluster::io::{load_dataset, load_sidecar, save_synthetic, time_column, write_columns, Dataset};
use sdecluster::likelihood::fitness_matrix;
use sdecluster::models::{builtin, ModelRef};
use sdecluster::series::ParamVector;
use sdecluster::subspace::{log_grid, run_subspace, scan_eps2, ClusteringResult, SubspaceConfig};
use sdecluster::synth::{generate_example, Example};
use sdecluster::theta_solver::fit_theta;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, ClosureArgs, ClusterArgs, DataArgs, GenerateArgs, ScanArgs, SimulateArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let f = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Dataset plus the model to fit it with.
fn load_input(cfg: &RunConfig, args: &DataArgs) -> Result<(Dataset, ModelRef), CliError> {
    let path = args
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| usage("no dataset given (--data or `data` in the config)"))?;
    let data = load_dataset(&path)?;
    let id = match args.model.clone().or_else(|| cfg.model.clone()) {
        Some(id) => id,
        None => load_sidecar(&path)?
            .map(|s| s.meta.model)
            .ok_or_else(|| usage("no model given and the dataset has no sidecar"))?,
    };
    let model = builtin(&id).map_err(|e| usage(e.to_string()))?;
    Ok((data, model))
}

fn solver_config(cfg: &RunConfig, model: &ModelRef) -> SubspaceConfig {
    let mut s = cfg
        .subspace
        .clone()
        .unwrap_or_else(|| SubspaceConfig::for_model(model.id()));
    if let Some(seed) = cfg.seed {
        s.seed = seed;
    }
    s
}

pub fn generate(cfg: &RunConfig, args: GenerateArgs) -> Result<(), CliError> {
    let example: Example = args
        .example
        .parse()
        .map_err(|_| usage(format!("unknown example `{}` (ou, logdrift, doublewell)", args.example)))?;
    let seed = cfg.seed.unwrap_or(0);
    let mut ex = match &cfg.example {
        Some(e) if e.example == example => e.clone(),
        _ => example.default_config(seed),
    };
    if let Some(n) = args.n {
        ex.n = n;
    }
    if let Some(h) = args.dt_internal {
        ex.dt_internal = h;
    }
    let d = generate_example(&ex)?;
    let path = out_dir(cfg)?.join(format!("{}.csv", example.model_id()));
    save_synthetic(&path, &d)?;
    println!(
        "wrote {} ({} samples, dt = {}, model {}, seed {})",
        path.display(),
        d.x.len(),
        d.x.dt,
        d.meta.model,
        ex.seed
    );
    Ok(())
}

/// Payload of `result.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub result: ClusteringResult,
    /// Direct maximum-likelihood fit over the whole series, reported for K = 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mle_check: Option<MleCheck>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MleCheck {
    pub theta: ParamVector,
    pub objective: f64,
}

fn write_result(
    dir: &Path,
    result: &ClusteringResult,
    data: &Dataset,
    model: &ModelRef,
    solver: &SubspaceConfig,
) -> Result<(), CliError> {
    let mle_check = if result.k == 1 {
        let fit = fit_theta(
            model.as_ref(),
            &data.x,
            &vec![1.0; data.x.len()],
            &solver.theta_solver,
            None,
        )?;
        Some(MleCheck {
            theta: fit.theta,
            objective: fit.objective,
        })
    } else {
        None
    };
    let out = ClusterOutput {
        result: result.clone(),
        mle_check,
    };
    write_json(&dir.join("result.json"), &out)?;
    result.gamma_fine.write_csv(
        BufWriter::new(File::create(dir.join("gamma.csv"))?),
        data.x.t0,
        data.x.dt,
    )?;
    let path = reconstruct_theta_path(result);
    let t = time_column(&data.x);
    let names: Vec<String> = (1..=path.len()).map(|m| format!("theta_{m}")).collect();
    let mut header = vec!["t"];
    header.extend(names.iter().map(String::as_str));
    let mut cols: Vec<&[f64]> = vec![&t];
    cols.extend(path.iter().map(Vec::as_slice));
    write_columns(
        BufWriter::new(File::create(dir.join("theta_path.csv"))?),
        &header,
        &cols,
    )?;
    Ok(())
}

fn report(result: &ClusteringResult) {
    println!(
        "K = {}, eps2 = {}, functional = {:.9e}, iterations = {}, converged = {}",
        result.k,
        result.eps2,
        result.functional(),
        result.iterations,
        result.converged
    );
    for (k, (th, nu)) in result.theta.iter().zip(result.activity()).enumerate() {
        println!("  cluster {}: theta = {:?}, activity = {nu:.3}", k + 1, th.0);
    }
}

pub fn cluster(cfg: &RunConfig, args: ClusterArgs) -> Result<(), CliError> {
    let (data, model) = load_input(cfg, &args.data)?;
    let k = args.k.or(cfg.k).ok_or_else(|| usage("K is required (--k)"))?;
    let eps2 = args
        .eps2
        .or(cfg.eps2)
        .ok_or_else(|| usage("eps2 is required (--eps2)"))?;
    let mut solver = solver_config(cfg, &model);
    if let Some(a) = args.alpha {
        solver.alpha = a;
    }
    let result = run_subspace(model.as_ref(), &data.x, k, eps2, &solver)?;
    let dir = out_dir(cfg)?;
    write_result(&dir, &result, &data, &model, &solver)?;
    if args.dump_fitness {
        let fitness = fitness_matrix(model.as_ref(), &data.x, &result.theta)?;
        fitness.write_csv(
            BufWriter::new(File::create(dir.join("fitness.csv"))?),
            data.x.t0,
            data.x.dt,
        )?;
    }
    report(&result);
    if !result.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} iterations; results were written",
            result.iterations
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScanSummary {
    k: usize,
    recommended_eps2: Option<f64>,
    recommended_k: Option<usize>,
}

pub fn scan(cfg: &RunConfig, args: ScanArgs) -> Result<(), CliError> {
    let sc = &cfg.scan;
    let do_energy = args.eps2.is_none() && sc.energy;
    let do_gap = args.gap || sc.gap;
    if !do_energy && !do_gap {
        return Err(usage("nothing to scan: enable the energy scan or the gap statistic"));
    }
    if do_energy && (sc.eps2_points == 0 || !(sc.eps2_min > 0.0 && sc.eps2_min <= sc.eps2_max)) {
        return Err(usage("the eps2 grid is empty or invalid"));
    }
    if do_gap && sc.k_values.is_empty() {
        return Err(usage("the K grid is empty"));
    }
    let (data, model) = load_input(cfg, &args.data)?;
    let solver = solver_config(cfg, &model);
    let dir = out_dir(cfg)?;
    let k = args.k.or(cfg.k);
    let mut summary = ScanSummary {
        k: k.unwrap_or(0),
        recommended_eps2: args.eps2.or(cfg.eps2),
        recommended_k: None,
    };
    if do_energy {
        let k = k.ok_or_else(|| usage("the eps2 scan needs K (--k)"))?;
        let grid = log_grid(sc.eps2_min, sc.eps2_max, sc.eps2_points);
        let results = scan_eps2(model.as_ref(), &data.x, k, &grid, &solver, sc.round_trip)?;
        let curve = select_eps2(&results)?;
        curve.write_csv(BufWriter::new(File::create(dir.join("energy.csv"))?))?;
        let best = curve.argmax_index(0);
        summary.recommended_eps2 = Some(grid[best]);
        write_result(&dir, &results[best], &data, &model, &solver)?;
        println!("recommended eps2 = {} (K = {k})", grid[best]);
    }
    if do_gap {
        let eps2 = summary
            .recommended_eps2
            .ok_or_else(|| usage("the gap statistic needs eps2 (--eps2 or an energy scan)"))?;
        let b = args.b.unwrap_or(sc.b);
        let report = gap_statistic(model.as_ref(), &data.x, &sc.k_values, eps2, b, &solver)?;
        report.write_csv(BufWriter::new(File::create(dir.join("gap.csv"))?))?;
        summary.recommended_k = Some(report.recommended_k);
        println!("recommended K = {}", report.recommended_k);
    }
    write_json(&dir.join("scan.json"), &summary)?;
    Ok(())
}

fn aux_of(data: &Dataset) -> Result<(), CliError> {
    if data.aux.is_empty() {
        return Err(usage("the dataset has no auxiliary columns"));
    }
    Ok(())
}

fn write_prediction(path: &Path, data: &Dataset, x: &[f64]) -> Result<(), CliError> {
    let t = time_column(&data.x);
    let mut header = vec!["t", "x"];
    header.extend(data.aux_names.iter().map(String::as_str));
    let mut cols: Vec<&[f64]> = vec![&t, x];
    cols.extend(data.aux.iter().map(|a| a.values.as_slice()));
    write_columns(BufWriter::new(File::create(path)?), &header, &cols)?;
    Ok(())
}

pub fn closure(cfg: &RunConfig, args: ClosureArgs) -> Result<(), CliError> {
    let (data, model) = load_input(cfg, &args.data)?;
    aux_of(&data)?;
    let result_path = args
        .result
        .clone()
        .or_else(|| cfg.result.clone())
        .ok_or_else(|| usage("no clustering result given (--result)"))?;
    let result = read_json::<ClusterOutput>(&result_path)?.result;
    if result.model != model.id() {
        return Err(usage(format!(
            "result was fitted with `{}`, not `{}`",
            result.model,
            model.id()
        )));
    }
    let mut section = cfg.closure.clone();
    if let Some(d) = args.degree {
        section.degrees = vec![d];
    }
    let fit = fit_closure(&result, &data.aux, &section.fit_config())?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("closure.json"), &fit)?;
    for (m, r) in fit.regressions.iter().enumerate() {
        println!(
            "theta_{} ~ {} coefficients {:?} over u in [{:.4}, {:.4}]",
            m + 1,
            data.aux_names[r.aux_index],
            r.coefficients,
            r.u_range.0,
            r.u_range.1
        );
    }

    let x0 = section.x0.unwrap_or(data.x.values[0]);
    let seed = cfg.seed.unwrap_or(0).wrapping_add(1);
    let pred = simulate_closed(model.as_ref(), &fit, &data.aux, x0, section.substeps, seed)?;
    write_prediction(&dir.join("prediction.csv"), &data, &pred.values)?;

    let (lo1, hi1) = data.x.min_max();
    let (lo2, hi2) = pred.min_max();
    let edges = uniform_edges(lo1.min(lo2), hi1.max(hi2), section.bins.max(1));
    let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let train = cluster_histograms(&data.x.values, &result.gamma_fine, &edges);
    let predicted = cluster_histograms(&pred.values, &result.gamma_fine, &edges);
    let stationary: Vec<Vec<f64>> = result
        .theta
        .iter()
        .map(|th| stationary_density_at(model.as_ref(), th, &centers).unwrap_or_else(|_| vec![f64::NAN; centers.len()]))
        .collect();
    let names: Vec<String> = (1..=result.k)
        .flat_map(|k| [format!("train_{k}"), format!("pred_{k}"), format!("stationary_{k}")])
        .collect();
    let mut header = vec!["x"];
    header.extend(names.iter().map(String::as_str));
    let mut cols: Vec<&[f64]> = vec![&centers];
    for k in 0..result.k {
        cols.extend([train[k].as_slice(), predicted[k].as_slice(), stationary[k].as_slice()]);
    }
    write_columns(
        BufWriter::new(File::create(dir.join("histograms.csv"))?),
        &header,
        &cols,
    )?;
    info!("closure outputs written to {}", dir.display());
    Ok(())
}

pub fn simulate(cfg: &RunConfig, args: SimulateArgs) -> Result<(), CliError> {
    let (data, model) = load_input(cfg, &args.data)?;
    aux_of(&data)?;
    let path = args
        .closure
        .clone()
        .or_else(|| cfg.closure_file.clone())
        .ok_or_else(|| usage("no closure given (--closure)"))?;
    let fit: ClosureFit = read_json(&path)?;
    if fit.model != model.id() {
        return Err(usage(format!(
            "closure was fitted with `{}`, not `{}`",
            fit.model,
            model.id()
        )));
    }
    let x0 = args.x0.or(cfg.closure.x0).unwrap_or(data.x.values[0]);
    let substeps = args.substeps.unwrap_or(cfg.closure.substeps);
    let sim = simulate_closed(model.as_ref(), &fit, &data.aux, x0, substeps, cfg.seed.unwrap_or(0))?;
    let out = out_dir(cfg)?.join("simulated.csv");
    write_prediction(&out, &data, &sim.values)?;
    println!("wrote {} ({} samples)", out.display(), sim.len());
    Ok(())
}
