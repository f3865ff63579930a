use std::path::PathBuf;

use caustiq::cluster::{analyze_clusters, bipartition, synthetic_bundles, weights};
use caustiq::manifold::{detect_fold, pin_test, sweep, write_fold_csv, MomentumBox};
use caustiq::mlp::{shoot_bvp, MlpPath, ShootOptions};
use caustiq::pathprob::{mlp_by_distance, mlp_by_probability, plain_mean, MlpEstimate};
use caustiq::{BlochState, Error, PhysParams, RunConfig};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cmd_ensemble::{selected, SelectionFlags, Source, SourceFlags, Target, TargetFlags};
use crate::failure::Failure;
use crate::run::Run;
use crate::{PhysFlags, RunOpts};

/// Momentum search box of the shooting and sweep commands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Search {
    pub p_min: f64,
    pub p_max: f64,
    pub n_grid: usize,
}

impl Default for Search {
    fn default() -> Self {
        let b = MomentumBox::default();
        Self { p_min: b.p_min, p_max: b.p_max, n_grid: b.n_grid }
    }
}

impl Search {
    fn shoot_options(&self, dt: f64) -> ShootOptions {
        ShootOptions {
            p_min: self.p_min,
            p_max: self.p_max,
            n_grid: self.n_grid,
            dt_out: dt,
            ..ShootOptions::default()
        }
    }

    fn momentum_box(&self) -> MomentumBox {
        MomentumBox { p_min: self.p_min, p_max: self.p_max, n_grid: self.n_grid }
    }
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SearchFlags {
    /// Lower edge of the initial-momentum box.
    #[arg(long, allow_hyphen_values = true)]
    pub p_min: Option<f64>,
    /// Upper edge of the initial-momentum box.
    #[arg(long, allow_hyphen_values = true)]
    pub p_max: Option<f64>,
    /// Momentum grid nodes per axis.
    #[arg(long)]
    pub n_grid: Option<usize>,
}

fn run_config(t_final: f64) -> RunConfig {
    RunConfig { t_final_us: t_final, ..RunConfig::default() }
}

/// Theory MLPs between the source's initial state and the target.
fn theory(
    run: &RunConfig,
    q_i: BlochState,
    q_f: BlochState,
    search: &Search,
) -> Result<(PhysParams, Vec<MlpPath>), Failure> {
    let p = run.params()?;
    let g = run.grid()?;
    let res = shoot_bvp(q_i, q_f, g.total(), &p, &search.shoot_options(g.dt))?;
    Ok((p, res.solutions))
}

fn emit_theory(run: &mut Run, paths: &[MlpPath], p: &PhysParams) -> Result<Value, Failure> {
    let mut list = Vec::new();
    for (k, path) in paths.iter().enumerate() {
        run.emit(&format!("theory_{k}.csv"), |w| Ok(path.write_csv(p, w)?))?;
        list.push(json!({
            "index": k,
            "p_x0": path.start().px,
            "p_z0": path.start().pz,
            "energy": path.energy,
            "action": path.action,
            "winding": path.winding,
            "energy_drift": path.energy_drift(p),
        }));
    }
    let v = Value::Array(list);
    run.emit_json("theory.json", &v)?;
    Ok(v)
}

fn emit_estimate(run: &mut Run, name: &str, est: &MlpEstimate) -> Result<(), Failure> {
    run.emit(name, |w| Ok(est.write_csv(w)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(flatten)]
    pub source: Source,
    #[serde(flatten)]
    pub target: Target,
    #[serde(flatten)]
    pub search: Search,
    /// Fraction of trajectories averaged by the ranked estimators.
    pub frac: f64,
    /// Skip the ensemble and only solve for theory paths.
    pub theory_only: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            run: run_config(1.94),
            source: Source::default(),
            target: Target::default(),
            search: Search::default(),
            frac: 0.05,
            theory_only: false,
        }
    }
}

#[derive(Args, Debug)]
pub struct MlpArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: MlpFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct MlpFlags {
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
    #[command(flatten)]
    #[serde(flatten)]
    search: SearchFlags,
    /// Fraction averaged by the ranked estimators.
    #[arg(long)]
    frac: Option<f64>,
    /// Only solve for theory paths.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    theory_only: bool,
}

pub fn mlp(a: MlpArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: MlpConfig = a.opts.load("mlp", &a.flags)?;
    if !(cfg.frac > 0.0 && cfg.frac <= 1.0) {
        return Err(Failure::Config(format!("frac must lie in (0, 1], got {}", cfg.frac)));
    }
    let Some(mut run) = a.opts.start("mlp", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let (p, paths) = theory(&cfg.run, cfg.source.initial(), cfg.target.state(), &cfg.search)?;
    run.lap("shoot");
    let listed = emit_theory(&mut run, &paths, &p)?;
    let mut summary = json!({ "solutions": paths.len(), "theory": listed });
    if !cfg.theory_only {
        let (ens, seen) = selected(&cfg.run, &cfg.source, &cfg.target)?;
        run.lap("select");
        let by_distance = mlp_by_distance(&ens, cfg.frac)?;
        let by_probability = mlp_by_probability(&ens, &p, cfg.frac)?;
        let mean = plain_mean(&ens)?;
        run.lap("estimate");
        emit_estimate(&mut run, "estimate_distance.csv", &by_distance)?;
        emit_estimate(&mut run, "estimate_probability.csv", &by_probability)?;
        emit_estimate(&mut run, "estimate_mean.csv", &mean)?;
        let comparison = match paths.first() {
            Some(best) => {
                let th = best.states();
                json!({
                    "distance_coverage": by_distance.band_coverage(&th)?,
                    "probability_coverage": by_probability.band_coverage(&th)?,
                    "distance_rms_gap": by_distance.rms_gap(&th),
                    "probability_rms_gap": by_probability.rms_gap(&th),
                    "mean_rms_gap": mean.rms_gap(&th),
                    "mean_outside_distance_band": 1.0 - by_distance.band_coverage(&mean.mean)?,
                    "mean_outside_probability_band": 1.0 - by_probability.band_coverage(&mean.mean)?,
                })
            }
            None => Value::Null,
        };
        summary["examined"] = json!(seen);
        summary["accepted"] = json!(ens.len());
        summary["against_theory_0"] = comparison;
    }
    run.emit_json("summary.json", &summary)?;
    run.finish(summary).map(Some)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub x0: f64,
    pub z0: f64,
    pub xf: f64,
    pub zf: f64,
    #[serde(flatten)]
    pub search: Search,
    pub radius: f64,
    /// Additional pin tests at the final states of a `probe × probe` subgrid of the sheet.
    pub probe: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            run: run_config(1.4),
            x0: 0.0,
            z0: -1.0,
            xf: -0.62,
            zf: 0.21,
            search: Search::default(),
            radius: caustiq::manifold::DEFAULT_PIN_RADIUS,
            probe: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct ManifoldArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: ManifoldFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ManifoldFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    /// Initial x.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<f64>,
    /// Initial z.
    #[arg(long, allow_hyphen_values = true)]
    z0: Option<f64>,
    /// Pin-test x.
    #[arg(long, allow_hyphen_values = true)]
    xf: Option<f64>,
    /// Pin-test z.
    #[arg(long, allow_hyphen_values = true)]
    zf: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    search: SearchFlags,
    /// Pin radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Probe subgrid size for extra pin tests.
    #[arg(long)]
    probe: Option<usize>,
}

pub fn manifold(a: ManifoldArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: ManifoldConfig = a.opts.load("manifold", &a.flags)?;
    let p = cfg.run.params()?;
    let t = cfg.run.grid()?.total();
    if !(cfg.radius > 0.0) || cfg.search.n_grid < 2 || !(cfg.search.p_max > cfg.search.p_min) {
        return Err(Failure::Config("need radius > 0 and a non-empty momentum box with n_grid >= 2".into()));
    }
    let Some(mut run) = a.opts.start("manifold", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let sheet = sweep(BlochState::xz(cfg.x0, cfg.z0), &p, t, &cfg.search.momentum_box());
    run.lap("sweep");
    let folds = detect_fold(&sheet);
    let mut targets = vec![BlochState::xz(cfg.xf, cfg.zf)];
    if cfg.probe > 0 {
        let n = sheet.n();
        let picks: Vec<usize> = (0..cfg.probe).map(|k| (k * (n - 1)) / (cfg.probe.max(2) - 1).max(1)).collect();
        for &i in &picks {
            for &j in &picks {
                let node = sheet.node(i, j);
                if node.valid {
                    targets.push(BlochState::xz(node.x_f, node.z_f));
                }
            }
        }
    }
    let pins: Vec<Value> = targets
        .iter()
        .map(|q| {
            let r = pin_test(&sheet, *q, cfg.radius);
            json!({
                "x": q.x,
                "z": q.z,
                "layers": r.layers,
                "component_sizes": r.components.iter().map(Vec::len).collect::<Vec<_>>(),
            })
        })
        .collect();
    run.lap("pin");
    let max_layers = pins.iter().filter_map(|v| v["layers"].as_u64()).max().unwrap_or(0);
    let spacing = sheet.median_final_spacing();
    run.emit("sheet.csv", |w| Ok(sheet.write_csv(w)?))?;
    run.emit("folds.csv", |w| Ok(write_fold_csv(&folds, w)?))?;
    let report = json!({
        "layers": pins[0]["layers"],
        "max_layers": max_layers,
        "final_spacing": spacing,
        "resolved": cfg.radius > spacing,
        "invalid_fraction": sheet.invalid_fraction(),
        "fold_points": folds.len(),
        "pins": pins,
    });
    run.emit_json("pin.json", &report)?;
    let summary = json!({
        "layers": report["layers"],
        "max_layers": max_layers,
        "pin_tests": targets.len(),
        "fold_points": folds.len(),
    });
    run.finish(summary).map(Some)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(flatten)]
    pub source: Source,
    #[serde(flatten)]
    pub target: Target,
    #[serde(flatten)]
    pub search: Search,
    /// Use two constructed bundles instead of a simulated ensemble.
    pub synthetic: bool,
    pub m1: usize,
    pub m2: usize,
    /// Seed of the random initial split.
    pub cluster_seed: u64,
    pub frac: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            run: run_config(1.4),
            source: Source { n: 1_000_000, ..Source::default() },
            target: Target { xf: -0.62, zf: 0.21, tol: 0.05 },
            search: Search::default(),
            synthetic: false,
            m1: 30,
            m2: 20,
            cluster_seed: 0,
            frac: 0.05,
        }
    }
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: ClusterFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ClusterFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    #[command(flatten)]
    #[serde(flatten)]
    source: SourceFlags,
    #[command(flatten)]
    #[serde(flatten)]
    target: TargetFlags,
    #[command(flatten)]
    #[serde(flatten)]
    search: SearchFlags,
    /// Cluster the synthetic two-bundle benchmark.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
    /// Members of the first synthetic bundle.
    #[arg(long)]
    m1: Option<usize>,
    /// Members of the second synthetic bundle.
    #[arg(long)]
    m2: Option<usize>,
    /// Seed of the random initial split.
    #[arg(long)]
    cluster_seed: Option<u64>,
    /// Fraction averaged by the per-cluster estimators.
    #[arg(long)]
    frac: Option<f64>,
}

pub fn cluster(a: ClusterArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: ClusterConfig = a.opts.load("cluster", &a.flags)?;
    let p = cfg.run.params()?;
    let g = cfg.run.grid()?;
    let Some(mut run) = a.opts.start("cluster", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    if cfg.synthetic {
        if cfg.m1 == 0 || cfg.m2 == 0 {
            return Err(Failure::Config("synthetic bundles need m1, m2 >= 1".into()));
        }
        let ens = synthetic_bundles(cfg.m1, cfg.m2, &g, cfg.run.seed);
        let part = bipartition(&ens, &weights(&ens, &p)?, cfg.cluster_seed)?;
        run.lap("cluster");
        run.emit("partition.ndjson", |w| Ok(part.write_ndjson(w)?))?;
        let labels = part.canonical_labels();
        let recovered = labels.iter().enumerate().all(|(i, &b)| b == (i >= cfg.m1));
        let summary = json!({
            "sizes": [part.set1().len(), part.set2().len()],
            "objective": part.objective(),
            "iterations": part.iterations,
            "converged": part.converged,
            "bundles_recovered": recovered,
        });
        run.emit_json("summary.json", &summary)?;
        return run.finish(summary).map(Some);
    }
    let (_, paths) = theory(&cfg.run, cfg.source.initial(), cfg.target.state(), &cfg.search)?;
    if paths.is_empty() {
        return Err(Error::EndpointMismatch("no MLP reaches the target in the momentum box".into()).into());
    }
    run.lap("shoot");
    emit_theory(&mut run, &paths, &p)?;
    let (ens, seen) = selected(&cfg.run, &cfg.source, &cfg.target)?;
    if ens.len() < 2 {
        return Err(Failure::EmptySelection);
    }
    run.lap("select");
    let an = analyze_clusters(&ens, &paths, &p, cfg.cluster_seed, cfg.frac)?;
    run.lap("cluster");
    run.emit("partition.ndjson", |w| Ok(an.partition.write_ndjson(w)?))?;
    for (k, c) in an.clusters.iter().enumerate() {
        emit_estimate(&mut run, &format!("cluster_{}.csv", k + 1), &c.estimate)?;
    }
    if let Some((h1, h2)) = &an.histograms {
        run.emit("hist_1.csv", |w| Ok(h1.write_csv(w)?))?;
        run.emit("hist_2.csv", |w| Ok(h2.write_csv(w)?))?;
    }
    let clusters: Vec<Value> = an
        .clusters
        .iter()
        .map(|c| json!({ "members": c.members.len(), "theory_path": c.path, "coverage": c.coverage, "rms_gap": c.rms_gap }))
        .collect();
    let summary = json!({
        "examined": seen,
        "accepted": ens.len(),
        "solutions": paths.len(),
        "objective": an.partition.objective(),
        "converged": an.partition.converged,
        "clusters": clusters,
        "fit": an.fit,
        "action_difference": an.action_difference,
        "z_score": an.z_score(),
    });
    run.emit_json("analysis.json", &summary)?;
    run.finish(summary).map(Some)
}
