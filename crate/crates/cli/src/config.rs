//! Experiment configuration: a line-oriented file of `[section]` headers and
//! `key = value` lines, with the two operators written as symbol blocks.
//!
//! ```text
//! [problem]
//! mode = residue            # residue | canonical
//! test_function = bump(1, 2)
//! l_c0 = 0.99               # ellipticity constant of L
//! l_c1 = 0                  # bound on the lower-order part of L
//!
//! [symbol A]
//! phsymbol dim 2 order -2
//! component cutoff 1
//! term 0 0 : 0 0 1
//! end
//!
//! [symbol L]
//! phsymbol dim 2 order 2
//! component cutoff none
//! term 0 0 : 0 0 1
//! end
//!
//! [run]
//! t_min = 1e-5              # or floor*F: F times the matrix oracle's smallest usable t
//! t_max = 1e-3
//! t_count = 24
//!
//! [output]
//! dir = out/example
//! ```
//!
//! `#` starts a comment. Lists are comma separated; `windows` is a list of
//! `lo:hi` pairs. Every key of `[run]` other than the t-grid has a default, and
//! `serialize` writes all of them so that a report's config echo replays the run.

use psido::funcalc::TestFunction;
use psido::oracle::FitWeighting;
use psido::symcore::PolyHomogeneousSymbol;
use psido::text::{format_symbol, format_test_function, parse_symbol, parse_test_function};
use std::fmt::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { line, message: message.into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// η supported in (0, ∞): constant term res(A)/m₀ · ∫η du/u.
    Residue,
    /// χ ≡ 1 near 0: constant term TR(A).
    Canonical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    /// Lattice sums when L is a Fourier multiplier, the matrix oracle otherwise.
    Auto,
    Lattice,
    Matrix,
}

/// A t-grid end point, either absolute or relative to the matrix oracle floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TBound {
    Value(f64),
    Floor(f64),
}

impl TBound {
    pub fn resolve(self, floor: Option<f64>) -> Option<f64> {
        match self {
            TBound::Value(v) => Some(v),
            TBound::Floor(f) => floor.map(|x| x * f),
        }
    }

    fn format(self) -> String {
        match self {
            TBound::Value(v) => format!("{v:e}"),
            TBound::Floor(f) => format!("floor*{f}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.strip_prefix("floor*") {
            Some(f) => f.trim().parse().ok().filter(|f: &f64| *f > 0.0).map(TBound::Floor),
            None => s.parse().ok().filter(|v: &f64| *v > 0.0).map(TBound::Value),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub mode: Mode,
    pub test_function: TestFunction,
    pub a: PolyHomogeneousSymbol,
    pub l: PolyHomogeneousSymbol,
    pub l_c0: f64,
    pub l_c1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub t_min: TBound,
    pub t_max: TBound,
    pub t_count: usize,
    /// Number of ladder rungs j′ < order in the prediction.
    pub order: usize,
    pub oracle: OracleKind,
    /// Matrix oracle: frequencies |k_i| ≤ truncation.
    pub truncation: usize,
    /// Matrix oracle: required ratio of the retained spectrum to the support top.
    pub margin: f64,
    pub symmetry_threshold: f64,
    pub tol: f64,
    /// Fit basis; None fits on the predicted exponents.
    pub fit_exponents: Option<Vec<f64>>,
    pub with_constant: bool,
    pub next_exponent: Option<f64>,
    pub slope_slack: f64,
    pub magnitude_floor: f64,
    pub noise_factor: f64,
    pub weighting: FitWeighting,
    /// Whether the coefficient fit takes part in the verdict.
    pub fit: bool,
    /// Canonical mode: disjoint t-windows whose fitted constants must agree.
    pub windows: Vec<(f64, f64)>,
    pub window_tol: f64,
    /// Canonical mode: t values for the E_t extrapolation check.
    pub et_ts: Vec<f64>,
    pub et_tol: f64,
    /// Canonical mode: split radius κ for the cutoff-independence check.
    pub split_radius: f64,
    /// Canonical mode, Re m < −n: required decay rate is rate_factor·(−m−n).
    pub rate_factor: f64,
    /// Leading-only versus j ≤ 1 residual comparison.
    pub corrections: bool,
    pub slope_rel: f64,
    pub min_reduction: f64,
    /// Multiplies every predicted coefficient before comparison.
    pub perturb_prediction: Option<f64>,
    pub threads: Option<usize>,
}

impl Run {
    fn with_grid(t_min: TBound, t_max: TBound, t_count: usize) -> Self {
        Run {
            t_min,
            t_max,
            t_count,
            order: 4,
            oracle: OracleKind::Auto,
            truncation: 32,
            margin: 2.0,
            symmetry_threshold: 1e-2,
            tol: 0.01,
            fit_exponents: None,
            with_constant: true,
            next_exponent: None,
            slope_slack: 0.05,
            magnitude_floor: 1e-8,
            noise_factor: 1e3,
            weighting: FitWeighting::Relative,
            fit: true,
            windows: Vec::new(),
            window_tol: 1e-4,
            et_ts: Vec::new(),
            et_tol: 1e-4,
            split_radius: 2.0,
            rate_factor: 0.4,
            corrections: false,
            slope_rel: 0.1,
            min_reduction: 5.0,
            perturb_prediction: None,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub dir: PathBuf,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub run: Run,
    pub output: Output,
}

fn list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

impl ExperimentConfig {
    pub fn serialize(&self) -> String {
        let p = &self.problem;
        let r = &self.run;
        let mut s = String::new();
        s.push_str("[problem]\n");
        writeln!(s, "mode = {}", if p.mode == Mode::Residue { "residue" } else { "canonical" }).unwrap();
        writeln!(s, "test_function = {}", format_test_function(&p.test_function)).unwrap();
        writeln!(s, "l_c0 = {}", p.l_c0).unwrap();
        writeln!(s, "l_c1 = {}", p.l_c1).unwrap();
        s.push_str("\n[symbol A]\n");
        s.push_str(&format_symbol(&p.a));
        s.push_str("\n[symbol L]\n");
        s.push_str(&format_symbol(&p.l));
        s.push_str("\n[run]\n");
        writeln!(s, "t_min = {}", r.t_min.format()).unwrap();
        writeln!(s, "t_max = {}", r.t_max.format()).unwrap();
        writeln!(s, "t_count = {}", r.t_count).unwrap();
        writeln!(s, "order = {}", r.order).unwrap();
        let oracle = match r.oracle {
            OracleKind::Auto => "auto",
            OracleKind::Lattice => "lattice",
            OracleKind::Matrix => "matrix",
        };
        writeln!(s, "oracle = {oracle}").unwrap();
        writeln!(s, "truncation = {}", r.truncation).unwrap();
        writeln!(s, "margin = {}", r.margin).unwrap();
        writeln!(s, "symmetry_threshold = {}", r.symmetry_threshold).unwrap();
        writeln!(s, "tol = {}", r.tol).unwrap();
        match &r.fit_exponents {
            None => s.push_str("fit_exponents = predicted\n"),
            Some(v) => writeln!(s, "fit_exponents = {}", list(v, |x| x.to_string())).unwrap(),
        }
        writeln!(s, "with_constant = {}", r.with_constant).unwrap();
        writeln!(s, "next_exponent = {}", opt(&r.next_exponent)).unwrap();
        writeln!(s, "slope_slack = {}", r.slope_slack).unwrap();
        writeln!(s, "magnitude_floor = {}", r.magnitude_floor).unwrap();
        writeln!(s, "noise_factor = {}", r.noise_factor).unwrap();
        let w = if r.weighting == FitWeighting::Relative { "relative" } else { "uniform" };
        writeln!(s, "weighting = {w}").unwrap();
        writeln!(s, "fit = {}", r.fit).unwrap();
        writeln!(s, "windows = {}", list(&r.windows, |(a, b)| format!("{a:e}:{b:e}"))).unwrap();
        writeln!(s, "window_tol = {}", r.window_tol).unwrap();
        writeln!(s, "et_ts = {}", list(&r.et_ts, |x| format!("{x:e}"))).unwrap();
        writeln!(s, "et_tol = {}", r.et_tol).unwrap();
        writeln!(s, "split_radius = {}", r.split_radius).unwrap();
        writeln!(s, "rate_factor = {}", r.rate_factor).unwrap();
        writeln!(s, "corrections = {}", r.corrections).unwrap();
        writeln!(s, "slope_rel = {}", r.slope_rel).unwrap();
        writeln!(s, "min_reduction = {}", r.min_reduction).unwrap();
        writeln!(s, "perturb_prediction = {}", opt(&r.perturb_prediction)).unwrap();
        writeln!(s, "threads = {}", opt(&r.threads)).unwrap();
        s.push_str("\n[output]\n");
        writeln!(s, "dir = {}", self.output.dir.display()).unwrap();
        writeln!(s, "plots = {}", self.output.plots).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
                if sections.iter().any(|s| s.name == name) {
                    return err(ln, format!("duplicate section [{name}]"));
                }
                sections.push(Section { name, line: ln, body: Vec::new() });
                continue;
            }
            let Some(sec) = sections.last_mut() else { return err(ln, "content before the first [section]") };
            sec.body.push((ln, line.to_string()));
        }
        for s in &sections {
            if !matches!(s.name.as_str(), "problem" | "symbol A" | "symbol L" | "run" | "output") {
                return err(s.line, format!("unknown section [{}]", s.name));
            }
        }
        let find = |name: &str| sections.iter().find(|s| s.name == name);
        let missing = |name: &str| ConfigError { line: 0, message: format!("missing section [{name}]") };

        let a = find("symbol A").ok_or_else(|| missing("symbol A"))?.symbol()?;
        let l = find("symbol L").ok_or_else(|| missing("symbol L"))?.symbol()?;
        if a.dim() != l.dim() {
            return err(find("symbol L").unwrap().line, format!("A has dimension {} but L has {}", a.dim(), l.dim()));
        }

        let mut kv = find("problem").ok_or_else(|| missing("problem"))?.pairs()?;
        let mode = match kv.take("mode")?.as_deref() {
            None | Some("residue") => Mode::Residue,
            Some("canonical") => Mode::Canonical,
            Some(o) => return err(kv.last, format!("mode `{o}` is neither residue nor canonical")),
        };
        let tf = kv.require("test_function")?;
        let test_function = parse_test_function(&tf).map_err(|m| ConfigError { line: kv.last, message: m })?;
        let l_c0 = kv.positive("l_c0")?.ok_or_else(|| kv.missing("l_c0"))?;
        let l_c1 = kv.number("l_c1")?.unwrap_or(0.0);
        if l_c1 < 0.0 {
            return err(kv.last, "l_c1 must be non-negative");
        }
        if let Some(d) = kv.number("dim")? {
            if d != a.dim() as f64 {
                return err(kv.last, format!("dim = {d} disagrees with the symbols (dimension {})", a.dim()));
            }
        }
        kv.finish()?;
        let problem = Problem { mode, test_function, a, l, l_c0, l_c1 };

        let mut kv = find("run").ok_or_else(|| missing("run"))?.pairs()?;
        let bound = |kv: &mut Pairs, key: &str| -> Result<TBound, ConfigError> {
            let v = kv.require(key)?;
            TBound::parse(&v).ok_or(ConfigError { line: kv.last, message: format!("{key}: expected a positive number or floor*F") })
        };
        let t_min = bound(&mut kv, "t_min")?;
        let t_max = bound(&mut kv, "t_max")?;
        let t_count = kv.count("t_count")?.ok_or_else(|| kv.missing("t_count"))?;
        let mut run = Run::with_grid(t_min, t_max, t_count);
        if let (TBound::Value(lo), TBound::Value(hi)) = (t_min, t_max) {
            if lo >= hi {
                return err(kv.last, "t_min must be below t_max");
            }
        }
        if t_count < 3 {
            return err(kv.last, "t_count must be at least 3");
        }
        if let Some(v) = kv.count("order")? {
            run.order = v;
        }
        match kv.take("oracle")?.as_deref() {
            None | Some("auto") => {}
            Some("lattice") => run.oracle = OracleKind::Lattice,
            Some("matrix") => run.oracle = OracleKind::Matrix,
            Some(o) => return err(kv.last, format!("unknown oracle `{o}`")),
        }
        if let Some(v) = kv.count("truncation")? {
            run.truncation = v;
        }
        for (key, slot) in [
            ("margin", &mut run.margin),
            ("symmetry_threshold", &mut run.symmetry_threshold),
            ("tol", &mut run.tol),
            ("slope_slack", &mut run.slope_slack),
            ("magnitude_floor", &mut run.magnitude_floor),
            ("noise_factor", &mut run.noise_factor),
            ("window_tol", &mut run.window_tol),
            ("et_tol", &mut run.et_tol),
            ("rate_factor", &mut run.rate_factor),
            ("slope_rel", &mut run.slope_rel),
            ("min_reduction", &mut run.min_reduction),
        ] {
            if let Some(v) = kv.positive(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.positive("split_radius")? {
            if v < 1.0 {
                return err(kv.last, "split_radius must be at least 1");
            }
            run.split_radius = v;
        }
        match kv.take("fit_exponents")?.as_deref() {
            None | Some("predicted") => {}
            Some(v) => run.fit_exponents = Some(kv.numbers(v)?),
        }
        for (key, slot) in [("with_constant", &mut run.with_constant), ("fit", &mut run.fit), ("corrections", &mut run.corrections)] {
            if let Some(v) = kv.boolean(key)? {
                *slot = v;
            }
        }
        run.next_exponent = kv.optional_number("next_exponent")?;
        match kv.take("weighting")?.as_deref() {
            None | Some("relative") => {}
            Some("uniform") => run.weighting = FitWeighting::Uniform,
            Some(o) => return err(kv.last, format!("unknown weighting `{o}`")),
        }
        if let Some(v) = kv.take("windows")? {
            for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let pair = item.split_once(':').and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)));
                match pair {
                    Some((a, b)) if 0.0 < a && a < b => run.windows.push((a, b)),
                    _ => return err(kv.last, format!("window `{item}` is not lo:hi with 0 < lo < hi")),
                }
            }
        }
        if let Some(v) = kv.take("et_ts")? {
            run.et_ts = kv.numbers(&v)?;
            if run.et_ts.iter().any(|t| *t <= 0.0) {
                return err(kv.last, "et_ts must be positive");
            }
        }
        run.perturb_prediction = kv.optional_number("perturb_prediction")?;
        match kv.take("threads")?.as_deref() {
            None | Some("none") => {}
            Some(v) => match v.parse::<usize>() {
                Ok(k) if k > 0 => run.threads = Some(k),
                _ => return err(kv.last, "threads must be a positive integer"),
            },
        }
        kv.finish()?;

        let mut output = Output { dir: PathBuf::from("out"), plots: true };
        if let Some(sec) = find("output") {
            let mut kv = sec.pairs()?;
            if let Some(d) = kv.take("dir")? {
                output.dir = PathBuf::from(d);
            }
            if let Some(p) = kv.boolean("plots")? {
                output.plots = p;
            }
            kv.finish()?;
        }
        Ok(ExperimentConfig { problem, run, output })
    }
}

struct Section {
    name: String,
    line: usize,
    body: Vec<(usize, String)>,
}

impl Section {
    fn symbol(&self) -> Result<PolyHomogeneousSymbol, ConfigError> {
        let first = self.body.first().map(|b| b.0).unwrap_or(self.line + 1);
        // Re-expand to one line per source line so parse errors keep their numbers.
        let mut text = String::new();
        let mut at = first;
        for (ln, l) in &self.body {
            while at < *ln {
                text.push('\n');
                at += 1;
            }
            text.push_str(l);
        }
        text.push('\n');
        parse_symbol(&text, first).map_err(|e| ConfigError { line: e.line, message: e.message })
    }

    fn pairs(&self) -> Result<Pairs, ConfigError> {
        let mut items = Vec::new();
        for (ln, l) in &self.body {
            let Some((k, v)) = l.split_once('=') else { return err(*ln, format!("expected `key = value`, got `{l}`")) };
            let k = k.trim().to_string();
            if items.iter().any(|(_, key, _): &(usize, String, String)| *key == k) {
                return err(*ln, format!("duplicate key `{k}`"));
            }
            items.push((*ln, k, v.trim().to_string()));
        }
        Ok(Pairs { section: self.name.clone(), items, last: self.line })
    }
}

struct Pairs {
    section: String,
    items: Vec<(usize, String, String)>,
    last: usize,
}

impl Pairs {
    fn take(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        Ok(self.items.iter().position(|i| i.1 == key).map(|p| {
            let (ln, _, v) = self.items.remove(p);
            self.last = ln;
            v
        }))
    }

    fn missing(&self, key: &str) -> ConfigError {
        ConfigError { line: 0, message: format!("[{}] needs `{key}`", self.section) }
    }

    fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key)?.ok_or_else(|| self.missing(key))
    }

    fn number(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key)? {
            None => Ok(None),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Some(x)),
                _ => err(self.last, format!("{key}: `{v}` is not a finite number")),
            },
        }
    }

    fn positive(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.number(key)? {
            Some(x) if x <= 0.0 => err(self.last, format!("{key} must be positive")),
            v => Ok(v),
        }
    }

    fn optional_number(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key)? {
            None => Ok(None),
            Some(v) if v == "none" => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError { line: self.last, message: format!("{key}: `{v}` is not a number") }),
        }
    }

    fn count(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.take(key)? {
            None => Ok(None),
            Some(v) => match v.parse::<usize>() {
                Ok(k) if k > 0 => Ok(Some(k)),
                _ => err(self.last, format!("{key} must be a positive integer")),
            },
        }
    }

    fn boolean(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.take(key)?.as_deref() {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => err(self.last, format!("{key}: `{v}` is neither true nor false")),
        }
    }

    fn numbers(&self, v: &str) -> Result<Vec<f64>, ConfigError> {
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| ConfigError { line: self.last, message: format!("`{s}` is not a number") }))
            .collect()
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.items.first() {
            Some((ln, k, _)) => err(*ln, format!("unknown key `{k}` in [{}]", self.section)),
            None => Ok(()),
        }
    }
}
