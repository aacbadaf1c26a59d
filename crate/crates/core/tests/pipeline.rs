//! End-to-end runs through the public API on small synthetic data.

use sdecluster::closure::{fit_closure, reconstruct_theta_path, simulate_closed, ClosureConfig};
use sdecluster::hyperselect::select_eps2;
use sdecluster::io::{load_dataset, load_sidecar, save_synthetic};
use sdecluster::models::builtin;
use sdecluster::subspace::{log_grid, scan_eps2, SubspaceConfig};
use sdecluster::synth::{generate_example, Example};
use sdecluster::theta_solver::ThetaSolverConfig;

fn quick(model: &str) -> SubspaceConfig {
    SubspaceConfig {
        max_iter: 6,
        n_restarts: 1,
        seed: 2,
        theta_solver: ThetaSolverConfig {
            population: 200,
            global_evals: 100,
            local_evals: 100,
            warm_population: 20,
            ..Default::default()
        },
        ..SubspaceConfig::for_model(model)
    }
}

#[test]
fn generate_save_load_cluster_close_simulate() {
    let mut cfg = Example::Ou.default_config(9);
    cfg.n = 1024;
    cfg.dt_internal = 1e-3;
    let data = generate_example(&cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ou.csv");
    save_synthetic(&csv, &data).unwrap();
    let loaded = load_dataset(&csv).unwrap();
    assert_eq!(loaded.x.len(), data.x.len());
    for (a, b) in loaded.x.values.iter().zip(&data.x.values) {
        assert_eq!(a, b);
    }
    assert_eq!(loaded.aux.len(), 1);
    assert_eq!(load_sidecar(&csv).unwrap().unwrap().meta.model, "ou");

    let model = builtin("ou").unwrap();
    let grid = log_grid(0.5, 50.0, 3);
    let results = scan_eps2(model.as_ref(), &loaded.x, 3, &grid, &quick("ou"), false).unwrap();
    assert_eq!(results.len(), 3);
    for (r, e) in results.iter().zip(&grid) {
        assert_eq!(r.eps2, *e);
        assert!(r.gamma_fine.is_feasible(1e-9));
    }
    let curve = select_eps2(&results).unwrap();
    let best = &results[curve.argmax_index(0)];

    let path = reconstruct_theta_path(best);
    assert_eq!(path.len(), 3);
    assert!(path
        .iter()
        .all(|p| p.len() == loaded.x.len() && p.iter().all(|v| v.is_finite())));

    let closure = fit_closure(
        best,
        &loaded.aux,
        &ClosureConfig {
            degrees: vec![0],
            ..Default::default()
        },
    )
    .unwrap();
    let run = |seed| simulate_closed(model.as_ref(), &closure, &loaded.aux, loaded.x.values[0], 5, seed).unwrap();
    let a = run(4);
    assert_eq!(a.len(), loaded.x.len());
    assert!(a.values.iter().all(|v| v.is_finite()));
    assert_eq!(a, run(4));
    assert_ne!(a, run(5));
}

#[test]
fn every_example_generates_within_its_domain() {
    for example in [Example::Ou, Example::Logdrift, Example::Doublewell] {
        let mut cfg = example.default_config(3);
        cfg.n = 512;
        cfg.dt_internal = cfg.dt / 10.0;
        let d = generate_example(&cfg).unwrap();
        let model = builtin(&d.meta.model).unwrap();
        assert_eq!(d.x.len(), 512);
        assert_eq!(d.theta_true.len(), model.n_params());
        assert!(
            d.x.values.iter().all(|&x| model.state_domain().contains(x)),
            "{}",
            d.meta.model
        );
    }
}
