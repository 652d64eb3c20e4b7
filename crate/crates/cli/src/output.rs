//! CSV files and log–log SVG plots.
//!
//! Column orders:
//! - prediction.csv: `exponent_re,exponent_im,re_coef,im_coef,provenance`
//! - series.csv: `t,re_trace,im_trace,modes,margin,symmetry_defect`
//! - fit.csv: `exponent,re_coef,im_coef`, preceded by `#` summary lines
//! - residuals.csv: `t,residual`
//! - corrections.csv: `t,leading_residual,corrected_residual`

use psido::expand::ExpansionPrediction;
use psido::oracle::{CorrectionStudy, OracleSeries, PowerFit};
use std::fmt::Write;
use std::fs;
use std::io;
use std::path::Path;

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn prediction_csv(pred: &ExpansionPrediction) -> String {
    let mut s = String::from("exponent_re,exponent_im,re_coef,im_coef,provenance\n");
    for t in pred.all_terms() {
        writeln!(
            s,
            "{:e},{:e},{:e},{:e},{}",
            t.exponent.re,
            t.exponent.im,
            t.coefficient.re,
            t.coefficient.im,
            quote(&t.provenance.join("; "))
        )
        .unwrap();
    }
    s
}

pub fn series_csv(series: &OracleSeries) -> String {
    let mut s = String::from("t,re_trace,im_trace,modes,margin,symmetry_defect\n");
    for x in &series.samples {
        writeln!(s, "{:e},{:e},{:e},{},{:e},{:e}", x.t, x.value.re, x.value.im, x.modes, x.margin, x.symmetry_defect).unwrap();
    }
    s
}

pub fn fit_csv(fit: &PowerFit) -> String {
    let mut s = String::new();
    writeln!(s, "# condition {:e}", fit.condition).unwrap();
    writeln!(s, "# residual_norm {:e}", fit.residual_norm).unwrap();
    writeln!(s, "# usable {}", fit.usable).unwrap();
    s.push_str("exponent,re_coef,im_coef\n");
    for (e, c) in fit.exponents.iter().zip(&fit.coefficients) {
        writeln!(s, "{:e},{:e},{:e}", e, c.re, c.im).unwrap();
    }
    s
}

pub fn residuals_csv(residuals: &[(f64, f64)]) -> String {
    let mut s = String::from("t,residual\n");
    for (t, r) in residuals {
        writeln!(s, "{t:e},{r:e}").unwrap();
    }
    s
}

pub fn corrections_csv(study: &CorrectionStudy) -> String {
    let mut s = String::from("t,leading_residual,corrected_residual\n");
    for (t, a, b) in &study.residuals {
        writeln!(s, "{t:e},{a:e},{b:e}").unwrap();
    }
    s
}

/// Reads the named columns of a CSV written above (`#` lines skipped).
fn columns(csv: &str, names: &[&str]) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or(format!("no column `{n}`")))
        .collect::<Result<_, _>>()?;
    let mut out = vec![Vec::new(); names.len()];
    for l in lines {
        let cells: Vec<&str> = l.split(',').collect();
        for (o, &i) in out.iter_mut().zip(&idx) {
            let v = cells.get(i).ok_or("short row")?.parse::<f64>().map_err(|e| e.to_string())?;
            o.push(v);
        }
    }
    Ok(out)
}

const COLORS: [&str; 4] = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad"];

/// Log–log plot of columns `ys` against column `x`; non-positive values are
/// dropped.
pub fn loglog_svg(csv: &str, title: &str, x: &str, ys: &[&str]) -> Result<String, String> {
    let mut names = vec![x];
    names.extend_from_slice(ys);
    let cols = columns(csv, &names)?;
    let curves: Vec<Vec<(f64, f64)>> = cols[1..]
        .iter()
        .map(|c| cols[0].iter().zip(c).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.log10(), b.log10())).collect())
        .collect();
    let all: Vec<&(f64, f64)> = curves.iter().flatten().collect();
    if all.is_empty() {
        return Err("nothing positive to plot".into());
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let px = |v: f64| left + (v - x0) / (x1 - x0) * (w - left - right);
    let py = |v: f64| h - bottom - (v - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    )
    .unwrap();
    for d in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let gx = px(d as f64);
        writeln!(s, r##"<line x1="{gx:.1}" y1="{top}" x2="{gx:.1}" y2="{}" stroke="#ddd"/>"##, h - bottom).unwrap();
        writeln!(s, r#"<text x="{gx:.1}" y="{}" text-anchor="middle">1e{d}</text>"#, h - bottom + 16.0).unwrap();
    }
    for d in (y0.ceil() as i32)..=(y1.floor() as i32) {
        let gy = py(d as f64);
        writeln!(s, r##"<line x1="{left}" y1="{gy:.1}" x2="{}" y2="{gy:.1}" stroke="#ddd"/>"##, w - right).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{d}</text>"#, left - 6.0, gy + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 12.0, escape(x)).unwrap();
    for (k, (c, name)) in curves.iter().zip(ys).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" ")).unwrap();
        for p in c {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(p.0), py(p.1)).unwrap();
        }
        let ly = top + 16.0 + 16.0 * k as f64;
        writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, left + 10.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
