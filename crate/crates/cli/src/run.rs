//! The residue, predict and verify workflows for one config.

use crate::config::{ExperimentConfig, Mode, OracleKind, TBound};
use crate::output::{corrections_csv, fit_csv, loglog_svg, prediction_csv, residuals_csv, series_csv, write_atomic};
use anyhow::{anyhow, bail, Context, Result};
use num_complex::Complex64;
use psido::expand::{extrapolate_et, ladder_exponent, mellin_moment, predict_expansion_res, predict_expansion_tr, ExpansionPrediction};
use psido::funcalc::log_slope;
use psido::oracle::{
    correction_study, fit_powers, geometric_grid, lattice_trace_radial, multiplier_series, verify_expansion, MatrixOracle,
    OracleSeries, VerifyOptions,
};
use psido::symcore::EllipticOperatorSpec;
use psido::text::format_complex;
use psido::traces::{canonical_trace, canonical_trace_split, residue_density_integrated, smoothing_trace};
use std::fmt::Write;
use std::fs;
use std::path::Path;

pub const VERSION: &str = concat!("psido ", env!("CARGO_PKG_VERSION"));

fn operator(cfg: &ExperimentConfig) -> Result<EllipticOperatorSpec> {
    let p = &cfg.problem;
    EllipticOperatorSpec::new(p.l.clone(), p.l_c0, p.l_c1).map_err(|e| anyhow!("operator L rejected: {e}"))
}

fn header(kind: &str, cfg: &ExperimentConfig) -> String {
    let mut s = format!("{VERSION} {kind}\n");
    let _ = writeln!(s, "A: order {} in dimension {}", format_complex(cfg.problem.a.order()), cfg.problem.a.dim());
    s
}

fn echo(s: &mut String, cfg: &ExperimentConfig) {
    s.push_str("\n== config ==\n");
    s.push_str(&cfg.serialize());
}

/// res(A), TR(A) and tr(A), each with the reason when it is undefined.
pub fn cmd_residue(cfg: &ExperimentConfig) -> Result<String> {
    let a = &cfg.problem.a;
    let mut s = header("residue", cfg);
    let res = residue_density_integrated(a);
    let _ = writeln!(s, "res(A) = {}  (integral of a_(-n) over the torus times the unit sphere)", format_complex(res));
    match canonical_trace(a) {
        Ok(v) => writeln!(s, "TR(A) = {}  (finite part of the xi-integral)", format_complex(v)),
        Err(e) => writeln!(s, "TR(A) undefined: {e}"),
    }?;
    match smoothing_trace(a) {
        Ok(v) => writeln!(s, "tr(A) = {}  (symbol integral, order below -n)", format_complex(v)),
        Err(e) => writeln!(s, "tr(A) undefined: {e}"),
    }?;
    if cfg.problem.mode == Mode::Residue {
        let l = operator(cfg)?;
        match mellin_moment(&cfg.problem.test_function, Complex64::new(0.0, 0.0), 0) {
            Ok(m) => writeln!(
                s,
                "constant term of tr(A f(tL)) = res(A)/m0 * int f(u) du/u = {}  (m0 = {})",
                format_complex(res * m / l.m0()),
                l.m0()
            ),
            Err(e) => writeln!(s, "constant term undefined for this test function: {e}"),
        }?;
    }
    echo(&mut s, cfg);
    Ok(s)
}

pub fn cmd_predict(cfg: &ExperimentConfig) -> Result<ExpansionPrediction> {
    let l = operator(cfg)?;
    let p = &cfg.problem;
    let mut pred = match p.mode {
        Mode::Residue => predict_expansion_res(&p.a, &l, &p.test_function, cfg.run.order),
        Mode::Canonical => predict_expansion_tr(&p.a, &l, &p.test_function, cfg.run.order),
    }
    .map_err(|e| anyhow!("prediction failed: {e}"))?;
    if let Some(k) = cfg.run.perturb_prediction {
        for t in pred.terms.iter_mut().chain(pred.constant.iter_mut()) {
            t.coefficient *= k;
        }
    }
    Ok(pred)
}

pub fn predict_report(cfg: &ExperimentConfig, pred: &ExpansionPrediction) -> String {
    let mut s = header("predict", cfg);
    s.push_str(&pred.to_string());
    echo(&mut s, cfg);
    s
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub struct Outcome {
    pub pass: bool,
    pub report: String,
}

fn is_multiplier(cfg: &ExperimentConfig, l: &EllipticOperatorSpec) -> bool {
    match cfg.run.oracle {
        OracleKind::Auto => l.is_multiplier(),
        OracleKind::Lattice => true,
        OracleKind::Matrix => false,
    }
}

fn oracle_series(cfg: &ExperimentConfig, l: &EllipticOperatorSpec, notes: &mut Vec<String>) -> Result<OracleSeries> {
    let p = &cfg.problem;
    let r = &cfg.run;
    if is_multiplier(cfg, l) {
        let (Some(lo), Some(hi)) = (r.t_min.resolve(None), r.t_max.resolve(None)) else {
            bail!("floor*F t-bounds need the matrix oracle");
        };
        let ts = geometric_grid(lo, hi, r.t_count);
        notes.push(format!("oracle: lattice sums over {} t in [{lo:e}, {hi:e}]", ts.len()));
        return multiplier_series(&p.a, l, &p.test_function, &ts).map_err(|e| anyhow!("lattice oracle: {e}"));
    }
    let m = MatrixOracle::new(&p.a, l, r.truncation, r.symmetry_threshold).map_err(|e| anyhow!("matrix oracle: {e}"))?;
    let floor = m.t_floor(&p.test_function, r.margin);
    let lo = r.t_min.resolve(Some(floor)).unwrap();
    let hi = r.t_max.resolve(Some(floor)).unwrap();
    if lo >= hi {
        bail!("t-grid [{lo:e}, {hi:e}] is empty");
    }
    let ts = geometric_grid(lo, hi, r.t_count);
    notes.push(format!(
        "oracle: truncated matrices, K = {}, {} modes in {} blocks, symmetry defect {:.3e}, smallest t with margin {} is {floor:e}",
        r.truncation,
        m.dimension(),
        m.block_count(),
        m.symmetry_defect(),
        r.margin
    ));
    if matches!(r.t_min, TBound::Value(_)) && lo < floor {
        notes.push(format!("t_min = {lo:e} lies below the margin floor; expect a margin error"));
    }
    m.series(&p.test_function, &ts, r.margin).map_err(|e| anyhow!("matrix oracle: {e}"))
}

/// Runs the oracle against the prediction, writes CSVs, plots and the report
/// into `dir`, and returns the verdict.
pub fn cmd_verify(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let p = &cfg.problem;
    let r = &cfg.run;
    let l = operator(cfg)?;
    let pred = cmd_predict(cfg)?;
    let mut notes = Vec::new();
    let series = oracle_series(cfg, &l, &mut notes)?;
    let n = p.a.dim() as f64;
    let m = p.a.order();
    let mut checks = Vec::new();
    let mut files: Vec<(&str, String)> = vec![("prediction.csv", prediction_csv(&pred)), ("series.csv", series_csv(&series))];

    let residuals = if r.fit {
        let opts = VerifyOptions {
            fit_exponents: r.fit_exponents.clone(),
            with_constant: r.with_constant,
            rel_tol: r.tol,
            magnitude_floor: r.magnitude_floor,
            next_exponent: r.next_exponent,
            slope_slack: r.slope_slack,
            noise_factor: r.noise_factor,
            weighting: r.weighting,
            compare_constant: p.mode == Mode::Residue,
        };
        let rep = verify_expansion(&pred, &series, &opts);
        checks.push(Check { name: "expansion coefficients", pass: rep.pass, detail: rep.summary() });
        files.push(("fit.csv", fit_csv(&rep.fit)));
        rep.residuals
    } else {
        series.samples.iter().map(|s| (s.t, (s.value - pred.eval(s.t)).norm())).collect()
    };
    files.push(("residuals.csv", residuals_csv(&residuals)));

    if p.mode == Mode::Canonical {
        let tr = canonical_trace(&p.a).map_err(|e| anyhow!("{e}"))?;
        let scale = tr.norm().max(1.0);
        let split = canonical_trace_split(&p.a, r.split_radius).map_err(|e| anyhow!("{e}"))?;
        let d = (split - tr).norm();
        checks.push(Check {
            name: "split-radius independence",
            pass: d <= 1e-10 * scale,
            detail: format!("TR = {}, with split radius {}: difference {d:.3e}", format_complex(tr), r.split_radius),
        });
        if m.re < -n {
            let sm = smoothing_trace(&p.a).map_err(|e| anyhow!("{e}"))?;
            let d = (sm - tr).norm();
            checks.push(Check {
                name: "canonical = smoothing",
                pass: d <= 1e-10 * scale,
                detail: format!("tr(A) = {}, difference {d:.3e}", format_complex(sm)),
            });
            if is_multiplier(cfg, &l) {
                match lattice_trace_radial(&p.a) {
                    Some(lat) => {
                        let pts: Vec<(f64, f64)> = series.samples.iter().map(|s| (s.t, (s.value - lat).norm())).filter(|q| q.1 > 0.0).collect();
                        let rate = log_slope(&pts);
                        let need = r.rate_factor * (-m.re - n);
                        checks.push(Check {
                            name: "trace-class convergence",
                            pass: rate >= need,
                            detail: format!(
                                "lattice tr(A) = {}, measured rate {rate:.4} (need {need:.4}); lattice minus symbol integral {}",
                                format_complex(lat),
                                format_complex(lat - sm)
                            ),
                        });
                    }
                    None => notes.push("no closed-form lattice tr(A) for this symbol; convergence rate not measured".into()),
                }
            }
        }
        if !r.et_ts.is_empty() {
            let ex = extrapolate_et(&p.a, &l, &p.test_function, &r.et_ts).map_err(|e| anyhow!("E_t: {e}"))?;
            let d = (ex.value - tr).norm();
            checks.push(Check {
                name: "E_t extrapolation",
                pass: d <= r.et_tol,
                detail: format!(
                    "limit {} vs TR: difference {d:.3e} (tol {:e}), measured rate {}",
                    format_complex(ex.value),
                    r.et_tol,
                    ex.measured_rate.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
                ),
            });
        }
        if r.windows.len() >= 2 {
            let exps: Vec<f64> = r
                .fit_exponents
                .clone()
                .unwrap_or_else(|| pred.terms.iter().map(|t| t.exponent.re).collect())
                .into_iter()
                .filter(|e| e.abs() > 1e-9)
                .collect();
            let mut offsets = Vec::new();
            let mut usable = true;
            let mut detail = String::new();
            for &(lo, hi) in &r.windows {
                let sub = series.window(lo, hi);
                let fit = fit_powers(&sub, &exps, true, r.weighting);
                usable &= fit.usable && sub.samples.len() > exps.len() + 1;
                let off = fit.coefficient_at(0.0).unwrap_or_default() - tr;
                let _ = write!(detail, "[{lo:e}, {hi:e}] {} samples: offset {}; ", sub.samples.len(), format_complex(off));
                offsets.push(off);
            }
            let spread = offsets.iter().flat_map(|a| offsets.iter().map(move |b| (a - b).norm())).fold(0.0, f64::max);
            let _ = write!(detail, "spread {spread:.3e} (tol {:e})", r.window_tol);
            checks.push(Check { name: "window-independent offset", pass: usable && spread <= r.window_tol, detail });
        }
    }

    if r.corrections {
        let n_ = p.a.dim();
        let lead = ladder_exponent(m, n_, l.m0(), 0).re;
        let corr = ladder_exponent(m, n_, l.m0(), 1).re;
        let st = correction_study(&pred, &series, lead, corr, r.slope_rel, r.min_reduction);
        checks.push(Check {
            name: "correction terms",
            pass: st.slope_pass && st.reduction_pass,
            detail: format!(
                "residual slope {:.4} vs t^{corr} (within {}%: {}), j<=1 correction coefficient {}, residual reduction {:.3} (need {}: {})",
                st.leading_slope,
                r.slope_rel * 100.0,
                st.slope_pass,
                format_complex(st.correction_coefficient),
                st.reduction,
                r.min_reduction,
                st.reduction_pass
            ),
        });
        files.push(("corrections.csv", corrections_csv(&st)));
    }

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, text) in &files {
        write_atomic(&dir.join(name), text).with_context(|| format!("writing {name}"))?;
    }
    if cfg.output.plots {
        let plots = [
            ("residuals.csv", "residuals.svg", "|trace - prediction|", vec!["residual"]),
            ("corrections.csv", "corrections.svg", "leading-only vs corrected residual", vec!["leading_residual", "corrected_residual"]),
        ];
        for (csv, svg, title, ys) in plots {
            if !files.iter().any(|f| f.0 == csv) {
                continue;
            }
            let made = fs::read_to_string(dir.join(csv))
                .map_err(|e| e.to_string())
                .and_then(|text| loglog_svg(&text, title, "t", &ys))
                .and_then(|svg_text| write_atomic(&dir.join(svg), &svg_text).map_err(|e| e.to_string()));
            if let Err(e) = made {
                notes.push(format!("plot {svg} skipped: {e}"));
            }
        }
    }

    let pass = checks.iter().all(|c| c.pass) && !checks.is_empty();
    let mut s = header("verify", cfg);
    let _ = writeln!(s, "verdict: {}", if pass { "PASS" } else { "FAIL" });
    s.push_str("\n== checks ==\n");
    for c in &checks {
        let _ = writeln!(s, "{} {}", if c.pass { "PASS" } else { "FAIL" }, c.name);
        for line in c.detail.lines() {
            let _ = writeln!(s, "    {line}");
        }
    }
    if checks.is_empty() {
        s.push_str("no checks configured\n");
    }
    s.push_str("\n== notes ==\n");
    for note in &notes {
        let _ = writeln!(s, "{note}");
    }
    s.push_str("\n== prediction ==\n");
    s.push_str(&pred.to_string());
    echo(&mut s, cfg);
    write_atomic(&dir.join("report.txt"), &s).context("writing report.txt")?;
    Ok(Outcome { pass, report: s })
}
