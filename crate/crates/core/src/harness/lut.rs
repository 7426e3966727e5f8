//! Lookup-table export of a gain schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::train::{write_atomic, Checkpoint};
use crate::control::GainSchedule;
use crate::error::{Error, Result};

pub const LUT_HEADER: &str = "axis0,axis1,value";

/// Reads a schedule from `schedule.json` as written by `evaluate`, or from a
/// checkpoint, which yields the schedule of its current episode (the
/// baseline when no episode is running).
pub fn load_schedule(path: &Path) -> Result<GainSchedule> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{} is not JSON: {e}", path.display())))?;
    if value.get("kp").is_some() && value.get("ki").is_some() {
        let s: GainSchedule =
            serde_json::from_value(value).map_err(|e| Error::invalid(format!("bad schedule: {e}")))?;
        return GainSchedule::new(s.kp, s.ki, s.operating_box);
    }
    if value.get("version").is_some() {
        let ck = Checkpoint::load(path)?;
        return match ck.env.state {
            Some(st) => Ok(st.schedule),
            None => GainSchedule::baseline(&ck.config.bsg, &ck.config.env.operating_box),
        };
    }
    Err(Error::invalid(format!("{} holds neither a schedule nor a checkpoint", path.display())))
}

/// Parses `"N,M"` into sample counts, each at least 2.
pub fn parse_samples(s: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::invalid(format!("--samples expects N,M with N, M >= 2, got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let n: usize = parts[0].parse().map_err(|_| bad())?;
    let m: usize = parts[1].parse().map_err(|_| bad())?;
    if n < 2 || m < 2 {
        return Err(bad());
    }
    Ok([n, m])
}

/// Parses a LUT CSV back into `(axis0, axis1, value)` rows.
pub fn read_lut(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines();
    if lines.next() != Some(LUT_HEADER) {
        return Err(Error::invalid(format!("LUT must start with the header {LUT_HEADER}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::invalid(format!("LUT row {} has {} columns", i + 1, cols.len())));
            }
            let mut row = [0.0; 3];
            for (r, c) in row.iter_mut().zip(cols) {
                *r = c
                    .parse()
                    .map_err(|_| Error::invalid(format!("LUT row {}: bad number {c:?}", i + 1)))?;
            }
            Ok(row)
        })
        .collect()
}

pub fn write_lut(rows: &[[f64; 3]]) -> String {
    let mut out = String::from(LUT_HEADER);
    out.push('\n');
    for [a, b, v] in rows {
        let _ = writeln!(out, "{a},{b},{v}");
    }
    out
}

/// Writes `kp_lut.csv` and `ki_lut.csv` into `out`.
pub fn export(sched: &GainSchedule, samples: [usize; 2], out: &Path) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(out)?;
    let kp = out.join("kp_lut.csv");
    let ki = out.join("ki_lut.csv");
    write_atomic(&kp, sched.kp.export_lut(&samples)?.to_csv().as_bytes())?;
    write_atomic(&ki, sched.ki.export_lut(&samples)?.to_csv().as_bytes())?;
    Ok([kp, ki])
}
