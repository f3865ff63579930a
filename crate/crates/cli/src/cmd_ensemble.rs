use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use caustiq::io::{read_binary, read_ndjson, write_binary, write_ndjson, MAGIC};
use caustiq::pathprob::{postselect as keep, PostselectRule};
use caustiq::sde::{
    lindblad_mean, simulate_ensemble, simulate_filtered, simulate_trajectory_with, trajectory_seed, Scheme, Trajectory,
};
use caustiq::{BlochState, RunConfig};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Format;
use crate::failure::Failure;
use crate::{PhysFlags, RunOpts};

/// Trajectories processed per batch by `stats` when simulating.
const STATS_BATCH: usize = 256;

pub fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "euler" => Ok(Scheme::Euler),
        "kraus" => Ok(Scheme::Kraus),
        _ => Err(format!("unknown scheme `{s}` (euler | kraus)")),
    }
}

/// Where trajectories come from: an input file, or a fresh simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Source {
    pub n: usize,
    pub x0: f64,
    pub z0: f64,
    pub scheme: Scheme,
    pub input: Option<PathBuf>,
}

impl Default for Source {
    fn default() -> Self {
        Self { n: 100_000, x0: 0.0, z0: -0.97, scheme: Scheme::Euler, input: None }
    }
}

impl Source {
    pub fn initial(&self) -> BlochState {
        BlochState::xz(self.x0, self.z0)
    }
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SourceFlags {
    /// Number of trajectories to simulate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Initial x.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<f64>,
    /// Initial z.
    #[arg(long, allow_hyphen_values = true)]
    pub z0: Option<f64>,
    /// Update rule: euler | kraus.
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Read trajectories from an NDJSON or CAUSTIQ1 file instead of simulating.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

/// Final-state window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Target {
    pub xf: f64,
    pub zf: f64,
    pub tol: f64,
}

impl Default for Target {
    fn default() -> Self {
        Self { xf: -0.6, zf: -0.3, tol: 0.05 }
    }
}

impl Target {
    pub fn state(&self) -> BlochState {
        BlochState::xz(self.xf, self.zf)
    }
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct TargetFlags {
    /// Final x.
    #[arg(long, allow_hyphen_values = true)]
    pub xf: Option<f64>,
    /// Final z.
    #[arg(long, allow_hyphen_values = true)]
    pub zf: Option<f64>,
    /// Half-width of the selection window.
    #[arg(long)]
    pub tol: Option<f64>,
}

/// Reads NDJSON or binary ensembles, telling them apart by the header.
pub fn read_ensemble(path: &Path) -> Result<Vec<Trajectory>, Failure> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?);
    let mut head = [0u8; 8];
    let n = f.read(&mut head)?;
    let f = BufReader::new(File::open(path)?);
    if n == 8 && &head == MAGIC {
        Ok(read_binary(f)?)
    } else {
        Ok(read_ndjson(f)?)
    }
}

/// Post-selected trajectories and the number examined.
pub fn selected(run: &RunConfig, src: &Source, tgt: &Target) -> Result<(Vec<Trajectory>, usize), Failure> {
    let p = run.params()?;
    let g = run.grid()?;
    let rule = PostselectRule::new(src.initial(), tgt.state(), g.total(), tgt.tol)?;
    let (kept, seen) = match &src.input {
        Some(path) => {
            let all = read_ensemble(path)?;
            (keep(&all, &rule)?, all.len())
        }
        None => {
            (simulate_filtered(src.scheme, src.initial(), &p, &g, src.n, run.seed, |s| rule.accepts_final(s)), src.n)
        }
    };
    if kept.is_empty() {
        return Err(Failure::EmptySelection);
    }
    Ok((kept, seen))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub n: usize,
    pub x0: f64,
    pub z0: f64,
    pub scheme: Scheme,
    pub format: Format,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { run: RunConfig::default(), n: 1000, x0: 0.0, z0: -0.97, scheme: Scheme::Euler, format: Format::Ndjson }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: SimulateFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimulateFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    /// Number of trajectories.
    #[arg(long)]
    n: Option<usize>,
    /// Initial x.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<f64>,
    /// Initial z.
    #[arg(long, allow_hyphen_values = true)]
    z0: Option<f64>,
    /// Update rule: euler | kraus.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

pub fn simulate(a: SimulateArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: SimulateConfig = a.opts.load("simulate", &a.flags)?;
    let p = cfg.run.params()?;
    let g = cfg.run.grid()?;
    if cfg.n == 0 {
        return Err(Failure::Config("n must be at least 1".into()));
    }
    let s0 = BlochState::xz(cfg.x0, cfg.z0);
    if s0.norm() > 1.0 + 1e-12 {
        return Err(Failure::Config(format!("initial state {s0} lies outside the Bloch ball")));
    }
    let Some(mut run) = a.opts.start("simulate", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let ens = simulate_ensemble(cfg.scheme, s0, &p, &g, cfg.n, cfg.run.seed);
    run.lap("simulate");
    if matches!(cfg.format, Format::Ndjson | Format::Both) {
        run.emit("ensemble.ndjson", |w| Ok(write_ndjson(&ens, w)?))?;
    }
    if matches!(cfg.format, Format::Binary | Format::Both) {
        run.emit("ensemble.bin", |w| Ok(write_binary(&ens, w)?))?;
    }
    run.lap("write");
    let clamps: usize = ens.iter().map(|t| t.clamp_events).sum();
    let n = ens.len() as f64;
    let (mx, mz) = ens.iter().fold((0.0, 0.0), |acc, t| (acc.0 + t.final_state().x / n, acc.1 + t.final_state().z / n));
    let summary = json!({
        "trajectories": ens.len(),
        "n_steps": g.n_steps,
        "dt_us": g.dt,
        "clamp_fraction": clamps as f64 / (n * g.n_steps as f64),
        "final_mean": { "x": mx, "z": mz },
    });
    run.emit_json("summary.json", &summary)?;
    run.finish(summary).map(Some)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PostselectConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(flatten)]
    pub source: Source,
    #[serde(flatten)]
    pub target: Target,
}

#[derive(Args, Debug)]
pub struct PostselectArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: SelectionFlags,
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SelectionFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub phys: PhysFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
}

pub fn postselect(a: PostselectArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: PostselectConfig = a.opts.load("postselect", &a.flags)?;
    let Some(mut run) = a.opts.start("postselect", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let (kept, seen) = selected(&cfg.run, &cfg.source, &cfg.target)?;
    run.lap("select");
    run.emit("postselected.ndjson", |w| Ok(write_ndjson(&kept, w)?))?;
    let summary = json!({
        "examined": seen,
        "accepted": kept.len(),
        "acceptance": kept.len() as f64 / seen as f64,
    });
    run.emit_json("summary.json", &summary)?;
    run.finish(summary).map(Some)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(flatten)]
    pub source: Source,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { run: RunConfig::default(), source: Source { n: 10_000, ..Source::default() } }
    }
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: StatsFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct StatsFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    #[command(flatten)]
    #[serde(flatten)]
    source: SourceFlags,
}

/// Running sums over trajectories.
struct Moments {
    n: usize,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    sz: Vec<f64>,
    szz: Vec<f64>,
    xi: (f64, f64, usize),
    clamps: usize,
    steps: usize,
    max_norm: f64,
}

impl Moments {
    fn new(points: usize) -> Self {
        Self {
            n: 0,
            sx: vec![0.0; points],
            sxx: vec![0.0; points],
            sz: vec![0.0; points],
            szz: vec![0.0; points],
            xi: (0.0, 0.0, 0),
            clamps: 0,
            steps: 0,
            max_norm: 0.0,
        }
    }

    fn add(&mut self, t: &Trajectory, p: &caustiq::PhysParams) {
        self.n += 1;
        for (k, s) in t.states.iter().enumerate() {
            self.sx[k] += s.x;
            self.sxx[k] += s.x * s.x;
            self.sz[k] += s.z;
            self.szz[k] += s.z * s.z;
            self.max_norm = self.max_norm.max(s.norm());
        }
        for k in 0..t.record.len() {
            let xi = t.noise_at(k, p);
            self.xi.0 += xi;
            self.xi.1 += xi * xi;
            self.xi.2 += 1;
        }
        self.clamps += t.clamp_events;
        self.steps += t.grid.n_steps;
    }
}

pub fn stats(a: StatsArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: StatsConfig = a.opts.load("stats", &a.flags)?;
    let p = cfg.run.params()?;
    let mut g = cfg.run.grid()?;
    let Some(mut run) = a.opts.start("stats", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let s0 = cfg.source.initial();
    let mut m;
    match &cfg.source.input {
        Some(path) => {
            let ens = read_ensemble(path)?;
            let first = ens.first().ok_or(Failure::EmptySelection)?;
            g = first.grid;
            m = Moments::new(g.n_points());
            for t in &ens {
                if t.grid != g {
                    return Err(caustiq::Error::GridMismatch("ensemble mixes time grids".into()).into());
                }
                m.add(t, &p);
            }
        }
        None => {
            if cfg.source.n == 0 {
                return Err(Failure::EmptySelection);
            }
            m = Moments::new(g.n_points());
            let mut start = 0;
            while start < cfg.source.n {
                let len = STATS_BATCH.min(cfg.source.n - start);
                let batch: Vec<Trajectory> = (start..start + len)
                    .into_par_iter()
                    .map(|i| {
                        let seed = trajectory_seed(cfg.run.seed, i as u64);
                        simulate_trajectory_with(cfg.source.scheme, s0, &p, &g, seed)
                    })
                    .collect();
                for t in &batch {
                    m.add(t, &p);
                }
                start += len;
            }
        }
    }
    run.lap("simulate");
    let initial = run_initial(&cfg.source, &m);
    let reference = lindblad_mean(initial, &p, &g);
    let n = m.n as f64;
    let mut worst_abs: f64 = 0.0;
    let mut rows = Vec::with_capacity(g.n_points());
    for k in 0..g.n_points() {
        let (mx, mz) = (m.sx[k] / n, m.sz[k] / n);
        let se = |ss: f64, mean: f64| ((ss / n - mean * mean).max(0.0) / n).sqrt();
        let (ex, ez) = (se(m.sxx[k], mx), se(m.szz[k], mz));
        let (dx, dz) = (mx - reference[k].x, mz - reference[k].z);
        worst_abs = worst_abs.max(dx.abs()).max(dz.abs());
        rows.push([g.time(k), mx, mz, reference[k].x, reference[k].z, ex, ez]);
    }
    run.emit("mean_vs_lindblad.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "x_mean", "z_mean", "x_lindblad", "z_lindblad", "x_se", "z_se"])
            .map_err(|e| Failure::Config(e.to_string()))?;
        for r in &rows {
            out.write_record(r.map(|v| v.to_string())).map_err(|e| Failure::Config(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    })?;
    let cnt = m.xi.2 as f64;
    let xi_mean = m.xi.0 / cnt;
    let xi_var = m.xi.1 / cnt - xi_mean * xi_mean;
    let expected_var = 1.0 / g.dt;
    let summary = json!({
        "trajectories": m.n,
        "xi_mean": xi_mean,
        "xi_mean_z": xi_mean / (expected_var / cnt).sqrt(),
        "xi_var": xi_var,
        "xi_var_expected": expected_var,
        "xi_var_z": (xi_var - expected_var) / (expected_var * (2.0 / cnt).sqrt()),
        "clamp_fraction": m.clamps as f64 / m.steps as f64,
        "max_norm": m.max_norm,
        "mean_vs_lindblad_max_abs": worst_abs,
        "mean_vs_lindblad_bound": 5.0 / n.sqrt(),
        "mean_within_mc_error": worst_abs < 5.0 / n.sqrt(),
    });
    run.emit_json("stats.json", &summary)?;
    run.finish(summary).map(Some)
}

fn run_initial(src: &Source, m: &Moments) -> BlochState {
    match src.input {
        Some(_) => BlochState::xz(m.sx[0] / m.n as f64, m.sz[0] / m.n as f64),
        None => src.initial(),
    }
}
