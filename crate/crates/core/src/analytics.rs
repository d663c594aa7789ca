//! Label-aware instrumentation of mining quality.
//!
//! Labels are read here and nowhere in the training path, so turning
//! analytics on or off cannot change what the encoder learns.
//!
//! # curves.csv
//!
//! Header `step,round,n_batch_pos_raw,n_batch_pos_smooth,batch_prec_raw,batch_prec_smooth,n_mem_pos_raw,n_mem_pos_smooth,mem_prec_raw,mem_prec_smooth`.
//! Smoothed columns are trailing window means over the steps where the raw
//! value is present. Absent values are written as empty fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::synthdata::Labels;
use crate::trainer::StepRecord;
use crate::{Error, Result};

pub const CURVES_HEADER: &str = "step,round,n_batch_pos_raw,n_batch_pos_smooth,batch_prec_raw,batch_prec_smooth,n_mem_pos_raw,n_mem_pos_smooth,mem_prec_raw,mem_prec_smooth";

/// Fraction of `selected` sharing the anchor's class; `None` when nothing
/// was selected.
pub fn mining_precision(selected: &[usize], anchor_class: usize, labels: &Labels) -> Result<Option<f64>> {
    if selected.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for &id in selected {
        if labels.class_of(id)? == anchor_class {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / selected.len() as f64))
}

/// Number of `selected` ids that share the anchor's class.
pub fn true_positive_count(selected: &[usize], anchor_class: usize, labels: &Labels) -> Result<usize> {
    let mut hits = 0;
    for &id in selected {
        if labels.class_of(id)? == anchor_class {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Mean of the present values, `None` if there are none.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Trailing mean over the last `window` entries (ending at each index),
/// skipping absent ones.
pub fn trailing_mean(series: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let w = window.max(1);
    (0..series.len())
        .map(|i| mean_present(series[(i + 1).saturating_sub(w)..=i].iter().copied()))
        .collect()
}

/// One row of curves.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub round: usize,
    pub n_batch_pos: (f64, f64),
    pub batch_prec: (Option<f64>, Option<f64>),
    pub n_mem_pos: (f64, f64),
    pub mem_prec: (Option<f64>, Option<f64>),
}

pub fn curves(history: &[StepRecord], window: usize) -> Vec<CurvePoint> {
    let col = |f: fn(&StepRecord) -> Option<f64>| -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let raw: Vec<Option<f64>> = history.iter().map(f).collect();
        let smooth = trailing_mean(&raw, window);
        (raw, smooth)
    };
    let (nb, nb_s) = col(|r| Some(r.n_batch_pos));
    let (bp, bp_s) = col(|r| r.batch_precision);
    let (nm, nm_s) = col(|r| Some(r.n_mem_pos));
    let (mp, mp_s) = col(|r| r.mem_precision);
    history
        .iter()
        .enumerate()
        .map(|(i, r)| CurvePoint {
            step: r.step,
            round: r.round,
            n_batch_pos: (nb[i].unwrap_or_default(), nb_s[i].unwrap_or_default()),
            batch_prec: (bp[i], bp_s[i]),
            n_mem_pos: (nm[i].unwrap_or_default(), nm_s[i].unwrap_or_default()),
            mem_prec: (mp[i], mp_s[i]),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(history: &[StepRecord], window: usize) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for p in curves(history, window) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            p.step,
            p.round,
            p.n_batch_pos.0,
            p.n_batch_pos.1,
            opt(p.batch_prec.0),
            opt(p.batch_prec.1),
            p.n_mem_pos.0,
            p.n_mem_pos.1,
            opt(p.mem_prec.0),
            opt(p.mem_prec.1),
        );
    }
    out
}

/// Writes curves.csv for a non-empty history.
pub fn export_curves(history: &[StepRecord], path: &Path, window: usize) -> Result<()> {
    if history.is_empty() {
        return Err(Error::InvalidInput("cannot export curves of an empty history".into()));
    }
    fs::write(path, curves_csv(history, window)).map_err(|e| Error::io(path, e))
}

/// Parses curves.csv back into points.
pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::format(path, "unexpected curves header"));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::format(path, format!("bad number {s:?}"))) };
    let maybe = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(Error::format(path, format!("expected 10 fields, got {}", f.len())));
            }
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| Error::format(path, "bad step"))?,
                round: f[1].parse().map_err(|_| Error::format(path, "bad round"))?,
                n_batch_pos: (num(f[2])?, num(f[3])?),
                batch_prec: (maybe(f[4])?, maybe(f[5])?),
                n_mem_pos: (num(f[6])?, num(f[7])?),
                mem_prec: (maybe(f[8])?, maybe(f[9])?),
            })
        })
        .collect()
}
