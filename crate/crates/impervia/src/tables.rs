//! Plain-text tables and CSV exports.

use std::fmt::Write as _;

use impervia_core::camarkov::CLASS_COUNT;
use impervia_core::clustering::ClusterModel;
use impervia_core::evaluation::MaeCurve;

use crate::{Error, Result};

/// Positional decimal with `sig` significant digits.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", sig.saturating_sub(1), v);
    }
    let exp = v.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// `C`×2 transition probabilities, one `pervious impervious` row per class.
pub fn probs_table(probs: &[[f64; 2]]) -> String {
    let mut s = String::from("# pervious impervious\n");
    for r in probs {
        let _ = writeln!(s, "{} {}", format_sig(r[0], 9), format_sig(r[1], 9));
    }
    s
}

fn parse_rows(text: &str, cols: usize) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let row = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad table value {t}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols {
                return Err(Error::Format(format!("table row has {} columns, expected {cols}", row.len())));
            }
            Ok(row)
        })
        .collect()
}

pub fn parse_probs_table(text: &str) -> Result<Vec<[f64; 2]>> {
    Ok(parse_rows(text, 2)?.into_iter().map(|r| [r[0], r[1]]).collect())
}

/// Square Markov matrix, one row per source class.
pub fn markov_table(p: &[[f64; CLASS_COUNT]; CLASS_COUNT]) -> String {
    let mut s = String::new();
    for row in p {
        let cells: Vec<String> = row.iter().map(|&v| format_sig(v, 9)).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

pub fn parse_markov_table(text: &str) -> Result<[[f64; CLASS_COUNT]; CLASS_COUNT]> {
    let rows = parse_rows(text, CLASS_COUNT)?;
    if rows.len() != CLASS_COUNT {
        return Err(Error::Format(format!("{} rows, expected {CLASS_COUNT}", rows.len())));
    }
    let mut p = [[0.0; CLASS_COUNT]; CLASS_COUNT];
    for (dst, src) in p.iter_mut().zip(rows) {
        dst.copy_from_slice(&src);
    }
    Ok(p)
}

pub fn curve_csv(model: &MaeCurve, null: &MaeCurve) -> Result<String> {
    if model.resolutions_km != null.resolutions_km {
        return Err(Error::Schema("model and null curves use different scales".into()));
    }
    let mut s = String::from("resolution_km,model_mae,null_mae\n");
    for i in 0..model.len() {
        let _ = writeln!(s, "{},{},{}", model.resolutions_km[i], model.values[i], null.values[i]);
    }
    Ok(s)
}

pub fn parse_curve_csv(text: &str) -> Result<(MaeCurve, MaeCurve)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("resolution_km,model_mae,null_mae") {
        return Err(Error::Format("curve CSV header must be resolution_km,model_mae,null_mae".into()));
    }
    let (mut r, mut m, mut n) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let f: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad curve value {t}"))))
            .collect::<Result<_>>()?;
        if f.len() != 3 {
            return Err(Error::Format(format!("curve row {line:?} needs 3 fields")));
        }
        r.push(f[0]);
        m.push(f[1]);
        n.push(f[2]);
    }
    Ok((MaeCurve::new(r.clone(), m)?, MaeCurve::new(r, n)?))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn clusters_csv(model: &ClusterModel, patch_ids: &[String]) -> String {
    let mut s = String::from("patch_id,cluster_label,distance\n");
    for (i, id) in patch_ids.iter().enumerate() {
        let _ = writeln!(s, "{id},{},{}", ClusterModel::label(model.assignments[i]), model.distances[i]);
    }
    s
}

pub fn signatures_csv(signatures: &[Vec<f64>], patch_ids: &[String]) -> String {
    let mut s = String::new();
    for (id, sig) in patch_ids.iter().zip(signatures) {
        let cells: Vec<String> = sig.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{id},{}", cells.join(","));
    }
    s
}
