//! Ensemble files.
//!
//! NDJSON: one trajectory per line,
//! `{"seed":…, "dt":…, "clamp_events":…, "states":[[x,z],…], "record":[…]}`.
//!
//! Binary (columnar, little-endian):
//!
//! ```text
//! b"CAUSTIQ1"
//! u64 n_trajectories
//! u64 n_steps
//! f64 dt
//! u64 seed              × n_trajectories
//! u64 clamp_events      × n_trajectories
//! f64 x, f64 z          × n_points      × n_trajectories   (states)
//! f64 dI                × n_steps       × n_trajectories   (record)
//! ```
//!
//! All trajectories in a binary file share one grid.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BlochState, TimeGrid};
use crate::sde::Trajectory;

pub const MAGIC: &[u8; 8] = b"CAUSTIQ1";

#[derive(Serialize, Deserialize)]
struct Line {
    seed: u64,
    dt: f64,
    #[serde(default)]
    clamp_events: usize,
    states: Vec<[f64; 2]>,
    record: Vec<f64>,
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_ndjson<W: Write>(ens: &[Trajectory], mut w: W) -> Result<()> {
    for t in ens {
        let line = Line {
            seed: t.seed,
            dt: t.grid.dt,
            clamp_events: t.clamp_events,
            states: t.states.iter().map(|s| [s.x, s.z]).collect(),
            record: t.record.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(json_error)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let t = Trajectory {
            grid: TimeGrid::new(l.dt, l.record.len())?,
            states: l.states.iter().map(|s| BlochState::xz(s[0], s[1])).collect(),
            record: l.record,
            seed: l.seed,
            clamp_events: l.clamp_events,
        };
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_binary<W: Write>(ens: &[Trajectory], mut w: W) -> Result<()> {
    let grid = match ens.first() {
        Some(t) => t.grid,
        None => return Err(Error::TooFewTrajectories { need: 1, got: 0 }),
    };
    for t in ens {
        t.validate()?;
        if t.grid != grid {
            return Err(Error::GridMismatch("binary files need a common grid".into()));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&(ens.len() as u64).to_le_bytes())?;
    w.write_all(&(grid.n_steps as u64).to_le_bytes())?;
    w.write_all(&grid.dt.to_le_bytes())?;
    for t in ens {
        w.write_all(&t.seed.to_le_bytes())?;
    }
    for t in ens {
        w.write_all(&(t.clamp_events as u64).to_le_bytes())?;
    }
    for t in ens {
        for s in &t.states {
            w.write_all(&s.x.to_le_bytes())?;
            w.write_all(&s.z.to_le_bytes())?;
        }
    }
    for t in ens {
        for v in &t.record {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated binary ensemble".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<Trajectory>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing CAUSTIQ1 header".into()));
    }
    let n = read_u64(&mut r)? as usize;
    let n_steps = read_u64(&mut r)? as usize;
    let grid = TimeGrid::new(read_f64(&mut r)?, n_steps)?;
    let seeds = (0..n).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
    let clamps = (0..n).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let row = (0..grid.n_points())
            .map(|_| Ok(BlochState::xz(read_f64(&mut r)?, read_f64(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        states.push(row);
    }
    let mut out = Vec::with_capacity(n);
    for (i, st) in states.into_iter().enumerate() {
        let record = (0..n_steps).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        out.push(Trajectory { grid, states: st, record, seed: seeds[i], clamp_events: clamps[i] as usize });
    }
    Ok(out)
}
