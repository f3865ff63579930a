use std::f64::consts::{PI, TAU};
use std::path::PathBuf;

use caustiq::purestate::{
    bifurcation_scan, fixed_points, separatrix_energy, winding_bvp, write_fixed_points_csv, write_portrait_csv, Motion,
};
use caustiq::{Error, PhysParams, RunConfig};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::failure::Failure;
use crate::{PhysFlags, RunOpts};

/// Parameters with Ω replaced by ω·γ when a drive ratio is given.
fn pure_params(run: &RunConfig, omega_ratio: Option<f64>) -> Result<PhysParams, Failure> {
    let p = run.params()?;
    Ok(match omega_ratio {
        Some(w) if w.is_finite() && w >= 0.0 => p.with_omega(w * p.gamma),
        Some(w) => return Err(Failure::Config(format!("omega_ratio must be finite and non-negative, got {w}"))),
        None => p,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PurestateConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    /// Ω/γ; defaults to the value implied by the physical parameters.
    pub omega_ratio: Option<f64>,
    pub scan: bool,
    pub scan_lo: f64,
    pub scan_hi: f64,
    pub scan_n: usize,
    pub winding: bool,
    pub theta_i: f64,
    pub theta_f: f64,
    pub winding_t: f64,
    /// Extra revolutions of the direct path (θ_f is shifted by −2π per revolution).
    pub direct_revolutions: u32,
    /// Turning-point counts of the bounce paths to θ_f.
    pub bounce_turns: Vec<u32>,
}

impl Default for PurestateConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            omega_ratio: None,
            scan: true,
            scan_lo: 0.05,
            scan_hi: 0.5,
            scan_n: 100,
            winding: true,
            theta_i: PI,
            theta_f: -1.24,
            winding_t: 1.4,
            direct_revolutions: 1,
            bounce_turns: vec![1, 2],
        }
    }
}

#[derive(Args, Debug)]
pub struct PurestateArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: PurestateFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PurestateFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    /// Drive ratio Ω/γ.
    #[arg(long)]
    omega_ratio: Option<f64>,
    /// Lower end of the bifurcation scan in ω.
    #[arg(long)]
    scan_lo: Option<f64>,
    /// Upper end of the bifurcation scan in ω.
    #[arg(long)]
    scan_hi: Option<f64>,
    /// Samples of the bifurcation scan.
    #[arg(long)]
    scan_n: Option<usize>,
    /// Initial angle of the winding paths.
    #[arg(long, allow_hyphen_values = true)]
    theta_i: Option<f64>,
    /// Final angle of the winding paths.
    #[arg(long, allow_hyphen_values = true)]
    theta_f: Option<f64>,
    /// Duration of the winding paths, μs.
    #[arg(long)]
    winding_t: Option<f64>,
}

pub fn purestate(a: PurestateArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: PurestateConfig = a.opts.load("purestate", &a.flags)?;
    let p = pure_params(&cfg.run, cfg.omega_ratio)?;
    let Some(mut run) = a.opts.start("purestate", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    let points = fixed_points(p.omega_ratio(), p.gamma)?;
    let e_c = separatrix_energy(&p)?;
    run.emit("fixed_points.csv", |w| Ok(write_fixed_points_csv(&points, w)?))?;
    run.lap("fixed_points");
    let mut summary = json!({
        "omega_ratio": p.omega_ratio(),
        "gamma": p.gamma,
        "fixed_points": points,
        "separatrix_energy": e_c,
    });
    if cfg.scan {
        let scan = bifurcation_scan(cfg.scan_lo, cfg.scan_hi, cfg.scan_n)?;
        run.emit("bifurcation.csv", |w| Ok(scan.write_csv(w)?))?;
        summary["bifurcation"] = json!({
            "omega_c": scan.omega_c,
            "bracket": scan.bracket,
            "count_below": scan.count_below,
            "count_above": scan.count_above,
            "new_pair_theta": scan.new_pair()?,
        });
        run.lap("bifurcation");
    }
    if cfg.winding {
        let mut found = Vec::new();
        let theta_direct = cfg.theta_f - TAU * cfg.direct_revolutions as f64;
        let mut cases = vec![("direct".to_string(), theta_direct, Motion::Direct)];
        for &turns in &cfg.bounce_turns {
            cases.push((format!("bounce{turns}"), cfg.theta_f, Motion::Bounce { turns }));
        }
        for (label, theta_f, motion) in cases {
            let paths = match winding_bvp(cfg.theta_i, theta_f, cfg.winding_t, &p, motion) {
                Ok(paths) => paths,
                Err(e @ Error::NoEnergyBracket(_)) => {
                    found.push(json!({ "motion": label, "theta_f": theta_f, "error": e.to_string() }));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            for (k, w) in paths.iter().enumerate() {
                run.emit(&format!("winding_{label}_{k}.csv"), |out| Ok(w.write_csv(&p, out)?))?;
                found.push(json!({
                    "motion": label,
                    "theta_f": theta_f,
                    "energy": w.energy,
                    "action": w.action,
                    "end_theta": w.end().theta,
                    "max_energy_drift": w.max_energy_drift(&p),
                }));
            }
        }
        summary["winding"] = Value::Array(found);
        run.lap("winding");
    }
    run.emit_json("purestate.json", &summary)?;
    run.finish(summary).map(Some)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PortraitConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub omega_ratio: Option<f64>,
    pub theta_min: f64,
    pub theta_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub n_theta: usize,
    pub n_p: usize,
}

impl Default for PortraitConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            omega_ratio: None,
            theta_min: 0.0,
            theta_max: TAU,
            p_min: -4.0,
            p_max: 4.0,
            n_theta: 181,
            n_p: 161,
        }
    }
}

#[derive(Args, Debug)]
pub struct PortraitArgs {
    #[command(flatten)]
    opts: RunOpts,
    #[command(flatten)]
    flags: PortraitFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PortraitFlags {
    #[command(flatten)]
    #[serde(flatten)]
    phys: PhysFlags,
    /// Drive ratio Ω/γ.
    #[arg(long)]
    omega_ratio: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p_max: Option<f64>,
    /// Grid points in θ.
    #[arg(long)]
    n_theta: Option<usize>,
    /// Grid points in p.
    #[arg(long)]
    n_p: Option<usize>,
}

pub fn portrait(a: PortraitArgs) -> Result<Option<PathBuf>, Failure> {
    let cfg: PortraitConfig = a.opts.load("portrait", &a.flags)?;
    let p = pure_params(&cfg.run, cfg.omega_ratio)?;
    if cfg.n_theta < 2 || cfg.n_p < 2 || !(cfg.theta_max > cfg.theta_min) || !(cfg.p_max > cfg.p_min) {
        return Err(Failure::Config("portrait needs non-empty ranges and at least 2 points per axis".into()));
    }
    let Some(mut run) = a.opts.start("portrait", &cfg, &cfg.run)? else {
        return Ok(None);
    };
    run.emit("portrait.csv", |w| {
        Ok(write_portrait_csv(&p, (cfg.theta_min, cfg.theta_max), (cfg.p_min, cfg.p_max), cfg.n_theta, cfg.n_p, w)?)
    })?;
    let points = fixed_points(p.omega_ratio(), p.gamma)?;
    run.emit("fixed_points.csv", |w| Ok(write_fixed_points_csv(&points, w)?))?;
    let summary = json!({
        "grid": [cfg.n_theta, cfg.n_p],
        "fixed_points": points.len(),
        "separatrix_energy": separatrix_energy(&p)?,
    });
    run.finish(summary).map(Some)
}
