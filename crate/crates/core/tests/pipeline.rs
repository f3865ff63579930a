use caustiq::cluster::{analyze_clusters, synthetic_bundles};
use caustiq::manifold::{pin_test, sweep, MomentumBox};
use caustiq::mlp::{shoot_bvp, MlpPath, PhasePoint, ShootOptions};
use caustiq::pathprob::{mlp_by_distance, PostselectRule};
use caustiq::purestate::{fixed_points, separatrix_energy, winding_bvp, Motion};
use caustiq::sde::{simulate_filtered, Scheme};
use caustiq::{BlochState, PhysParams, RunConfig, TimeGrid};

#[test]
fn shooting_solutions_sit_in_pin_components() {
    let p = PhysParams::reference();
    let (q_i, q_f, t) = (BlochState::xz(0.0, -1.0), BlochState::xz(-0.62, 0.21), 1.4);
    let shot = shoot_bvp(q_i, q_f, t, &p, &ShootOptions::default()).unwrap();
    assert!(!shot.solutions.is_empty());
    let grid = MomentumBox::default();
    let sheet = sweep(q_i, &p, t, &grid);
    let pin = pin_test(&sheet, q_f, 0.05);
    let axis = grid.axis();
    let h = grid.spacing();
    for s in &shot.solutions {
        let end = s.end();
        assert!((end.x - q_f.x).hypot(end.z - q_f.z) < 1e-5);
        assert!(s.energy_drift(&p) < 1e-6);
        let (px, pz) = (s.start().px, s.start().pz);
        let inside = pin
            .components
            .iter()
            .flatten()
            .any(|&(i, j)| (axis[i] - px).abs() <= 1.5 * h && (axis[j] - pz).abs() <= 1.5 * h);
        assert!(inside, "solution at ({px}, {pz}) not in any pin component");
    }
    // most probable (largest action) first
    assert!(shot.solutions.windows(2).all(|w| w[0].action >= w[1].action));
}

#[test]
fn distance_estimate_follows_theory_on_small_ensemble() {
    let p = PhysParams::reference();
    let g = TimeGrid::from_horizon(0.002, 1.94).unwrap();
    let (q_i, q_f) = (BlochState::xz(0.0, -0.97), BlochState::xz(-0.6, -0.3));
    let theory = shoot_bvp(q_i, q_f, g.total(), &p, &ShootOptions::default()).unwrap();
    let best = theory.solutions[0].states();
    let rule = PostselectRule::new(q_i, q_f, g.total(), 0.05).unwrap();
    let ens = simulate_filtered(Scheme::Euler, q_i, &p, &g, 20_000, 11, |s| rule.accepts_final(s));
    assert!(ens.len() > 20, "{} kept", ens.len());
    let est = mlp_by_distance(&ens, 0.05).unwrap();
    assert!(est.rms_gap(&best) < 0.2, "{}", est.rms_gap(&best));
}

#[test]
fn cluster_analysis_matches_bundles_to_their_paths() {
    let p = PhysParams::reference();
    let g = TimeGrid::from_horizon(0.01, 1.5).unwrap();
    let ens = synthetic_bundles(30, 20, &g, 4);
    // theory stand-ins: the two bundle centres
    let centre = |lo: usize, hi: usize| {
        let n = (hi - lo) as f64;
        let points = (0..g.n_points())
            .map(|k| {
                let x = ens[lo..hi].iter().map(|t| t.states[k].x).sum::<f64>() / n;
                let z = ens[lo..hi].iter().map(|t| t.states[k].z).sum::<f64>() / n;
                PhasePoint::new(x, z, 0.0, 0.0)
            })
            .collect();
        MlpPath { grid: g, points, readout: vec![0.0; g.n_points()], energy: 0.0, action: lo as f64, winding: 0 }
    };
    let theory = vec![centre(0, 30), centre(30, 50)];
    let an = analyze_clusters(&ens, &theory, &p, 0, 0.2).unwrap();
    let mut paths: Vec<usize> = an.clusters.iter().map(|c| c.path).collect();
    paths.sort_unstable();
    assert_eq!(paths, vec![0, 1]);
    assert_eq!(an.action_difference.abs(), 30.0);
    for c in &an.clusters {
        assert!(c.rms_gap < 0.05, "{}", c.rms_gap);
    }
}

#[test]
fn default_run_config_gives_the_reference_fixed_point() {
    let run = RunConfig::default();
    let p = run.params().unwrap();
    let fps = fixed_points(p.omega_ratio(), p.gamma).unwrap();
    assert_eq!(fps.len(), 1);
    assert!((fps[0].theta_bar - 4.1553).abs() < 1e-3);
    assert!((separatrix_energy(&p).unwrap().unwrap() + 2.126).abs() < 1e-3);
    let direct = winding_bvp(std::f64::consts::PI, -1.24 - std::f64::consts::TAU, 1.4, &p, Motion::Direct).unwrap();
    assert!(direct.iter().all(|w| w.max_energy_drift(&p) < 1e-6));
}
