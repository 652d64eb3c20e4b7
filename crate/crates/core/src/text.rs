//! Line-oriented text forms of symbols and test functions.
//!
//! Symbols:
//! ```text
//! phsymbol dim 2 order -1
//! component cutoff 1
//! term 0 0 : 0 0 1 ; 1 0 0.5
//! component cutoff none
//! end
//! ```
//! Component j has degree order − j. A `term` line lists α, then `;`-separated
//! Fourier entries `γ₁ … γ_n coefficient` for g(x) ξ^α |ξ|^{deg−|α|}. Coefficients
//! are complex numbers in the `re+imi` form.
//!
//! Test functions are expressions: `poly(c0, c1, …)`, `exp(a)`, `bump0`, `step0`,
//! `affine(f, scale, shift)`, `add(f, g)`, `mul(f, g)`, plus the shorthands
//! `const(c)`, `bump(a, b)`, `step(a, b)`, `cutoff(c, d)`, `plateau`, `scale(c, f)`.

use crate::funcalc::TestFunction;
use crate::symcore::{Component, CutoffSpec, HomogeneousSymbol, MultiIndex, PolyHomogeneousSymbol, TorusFourierSeries};
use num_complex::Complex64;
use std::fmt::Write;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, message: message.into() })
}

pub fn format_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else if z.re == 0.0 {
        format!("{}i", z.im)
    } else {
        format!("{}{}{}i", z.re, if z.im < 0.0 || z.im.is_sign_negative() { "" } else { "+" }, z.im)
    }
}

pub fn parse_complex(s: &str) -> Option<Complex64> {
    let s = s.trim();
    if let Ok(v) = f64::from_str(s) {
        return Some(Complex64::new(v, 0.0));
    }
    Complex64::from_str(s).ok()
}

pub fn format_symbol(a: &PolyHomogeneousSymbol) -> String {
    let n = a.dim();
    let mut s = format!("phsymbol dim {} order {}\n", n, format_complex(a.order()));
    for c in a.components() {
        match c.cutoff {
            Some(cut) => writeln!(s, "component cutoff {}", cut.t()).unwrap(),
            None => s.push_str("component cutoff none\n"),
        }
        for (alpha, g) in c.symbol.terms() {
            let idx: Vec<String> = alpha[..n].iter().map(|v| v.to_string()).collect();
            let entries: Vec<String> = g
                .coeffs()
                .iter()
                .map(|(gamma, v)| {
                    let f: Vec<String> = gamma[..n].iter().map(|v| v.to_string()).collect();
                    format!("{} {}", f.join(" "), format_complex(*v))
                })
                .collect();
            writeln!(s, "term {} : {}", idx.join(" "), entries.join(" ; ")).unwrap();
        }
    }
    s.push_str("end\n");
    s
}

/// Parses one symbol block; `first_line` numbers the lines in messages.
pub fn parse_symbol(text: &str, first_line: usize) -> Result<PolyHomogeneousSymbol, ParseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + first_line, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let Some((ln, head)) = lines.next() else { return err(first_line, "empty symbol") };
    let words: Vec<&str> = head.split_whitespace().collect();
    if words.len() != 5 || words[0] != "phsymbol" || words[1] != "dim" || words[3] != "order" {
        return err(ln, "expected `phsymbol dim N order M`");
    }
    let n: usize = words[2].parse().map_err(|_| ParseError { line: ln, message: "bad dimension".into() })?;
    if !(n == 2 || n == 3) {
        return err(ln, format!("dimension {n} unsupported (2 or 3)"));
    }
    let order = parse_complex(words[4]).ok_or(ParseError { line: ln, message: "bad order".into() })?;
    let mut comps: Vec<(Option<CutoffSpec>, Vec<(MultiIndex, TorusFourierSeries)>)> = Vec::new();
    let mut ended = false;
    for (ln, line) in lines.by_ref() {
        if line == "end" {
            ended = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("component") {
            let w: Vec<&str> = rest.split_whitespace().collect();
            if w.len() != 2 || w[0] != "cutoff" {
                return err(ln, "expected `component cutoff T|none`");
            }
            let cut = if w[1] == "none" {
                None
            } else {
                let t: f64 = w[1].parse().map_err(|_| ParseError { line: ln, message: "bad cutoff".into() })?;
                Some(CutoffSpec::new(t).map_err(|e| ParseError { line: ln, message: e.to_string() })?)
            };
            comps.push((cut, Vec::new()));
        } else if let Some(rest) = line.strip_prefix("term") {
            let Some(comp) = comps.last_mut() else { return err(ln, "term before any component") };
            let Some((idx, entries)) = rest.split_once(':') else { return err(ln, "term needs `α : entries`") };
            let alpha_v: Vec<u8> = idx
                .split_whitespace()
                .map(|v| v.parse::<u8>())
                .collect::<Result<_, _>>()
                .map_err(|_| ParseError { line: ln, message: "bad multi-index".into() })?;
            if alpha_v.len() != n {
                return err(ln, format!("multi-index needs {n} entries"));
            }
            let mut alpha = [0u8; 3];
            alpha[..n].copy_from_slice(&alpha_v);
            let mut g = TorusFourierSeries::zero(n);
            for e in entries.split(';') {
                let w: Vec<&str> = e.split_whitespace().collect();
                if w.len() != n + 1 {
                    return err(ln, format!("Fourier entry `{}` needs {n} frequencies and a coefficient", e.trim()));
                }
                let mut gamma = [0i32; 3];
                for i in 0..n {
                    gamma[i] = w[i].parse().map_err(|_| ParseError { line: ln, message: "bad frequency".into() })?;
                }
                let v = parse_complex(w[n]).ok_or(ParseError { line: ln, message: "bad coefficient".into() })?;
                g.add_at(gamma, v);
            }
            comp.1.push((alpha, g));
        } else {
            return err(ln, format!("unexpected `{line}`"));
        }
    }
    if !ended {
        return err(first_line, "symbol block without `end`");
    }
    if comps.is_empty() {
        return err(first_line, "symbol needs at least one component");
    }
    let components = comps
        .into_iter()
        .enumerate()
        .map(|(j, (cutoff, terms))| Component {
            symbol: HomogeneousSymbol::from_terms(n, order - j as f64, terms),
            cutoff,
        })
        .collect();
    PolyHomogeneousSymbol::new(n, order, components).map_err(|e| ParseError { line: first_line, message: e.to_string() })
}

pub fn format_test_function(f: &TestFunction) -> String {
    match f {
        TestFunction::Poly(c) => format!("poly({})", c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")),
        TestFunction::Exp(a) => format!("exp({a})"),
        TestFunction::Bump => "bump0".into(),
        TestFunction::Step => "step0".into(),
        TestFunction::Affine { inner, scale, shift } => {
            format!("affine({}, {scale}, {shift})", format_test_function(inner))
        }
        TestFunction::Sum(a, b) => format!("add({}, {})", format_test_function(a), format_test_function(b)),
        TestFunction::Product(a, b) => format!("mul({}, {})", format_test_function(a), format_test_function(b)),
    }
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.s[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.s[self.pos..].chars().next().unwrap().len_utf8();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.s[self.pos..].starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(format!("expected `{c}` at position {}", self.pos))
        }
    }

    fn ident(&mut self) -> String {
        self.skip_ws();
        let rest = &self.s[self.pos..];
        let len = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        self.pos += len;
        rest[..len].to_string()
    }

    fn number(&mut self) -> Result<f64, String> {
        self.skip_ws();
        let rest = &self.s[self.pos..];
        let len = rest.find([',', ')']).unwrap_or(rest.len());
        let tok = rest[..len].trim();
        let v = f64::from_str(tok).map_err(|_| format!("bad number `{tok}`"))?;
        self.pos += len;
        Ok(v)
    }

    fn function(&mut self) -> Result<TestFunction, String> {
        let name = self.ident();
        let f = match name.as_str() {
            "bump0" => TestFunction::Bump,
            "step0" => TestFunction::Step,
            "plateau" => TestFunction::plateau(),
            "poly" => {
                self.expect('(')?;
                let mut c = vec![self.number()?];
                while self.eat(',') {
                    c.push(self.number()?);
                }
                self.expect(')')?;
                TestFunction::Poly(c)
            }
            "exp" | "const" => {
                self.expect('(')?;
                let a = self.number()?;
                self.expect(')')?;
                if name == "exp" {
                    TestFunction::Exp(a)
                } else {
                    TestFunction::constant(a)
                }
            }
            "bump" | "step" | "cutoff" => {
                self.expect('(')?;
                let a = self.number()?;
                self.expect(',')?;
                let b = self.number()?;
                self.expect(')')?;
                if !(a < b) {
                    return Err(format!("{name}({a}, {b}) needs a < b"));
                }
                match name.as_str() {
                    "bump" => TestFunction::bump_on(a, b),
                    "step" => TestFunction::step_between(a, b),
                    _ => TestFunction::cutoff(a, b),
                }
            }
            "affine" => {
                self.expect('(')?;
                let f = self.function()?;
                self.expect(',')?;
                let scale = self.number()?;
                self.expect(',')?;
                let shift = self.number()?;
                self.expect(')')?;
                f.affine(scale, shift)
            }
            "add" | "mul" => {
                self.expect('(')?;
                let f = self.function()?;
                self.expect(',')?;
                let g = self.function()?;
                self.expect(')')?;
                if name == "add" {
                    f.add(g)
                } else {
                    f.mul(g)
                }
            }
            "scale" => {
                self.expect('(')?;
                let c = self.number()?;
                self.expect(',')?;
                let f = self.function()?;
                self.expect(')')?;
                f.scaled(c)
            }
            "" => return Err(format!("expected a function at position {}", self.pos)),
            other => return Err(format!("unknown function `{other}`")),
        };
        Ok(f)
    }
}

pub fn parse_test_function(s: &str) -> Result<TestFunction, String> {
    let mut c = Cursor { s, pos: 0 };
    let f = c.function()?;
    c.skip_ws();
    if c.pos != s.len() {
        return Err(format!("trailing input `{}`", &s[c.pos..]));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symbol_example() {
        let text = "phsymbol dim 2 order -1\ncomponent cutoff 1\nterm 0 0 : 0 0 1 ; 1 0 0.5 ; -1 0 0.5\ncomponent cutoff 0.5\nterm 1 0 : 0 0 2-1i\nend\n";
        let a = parse_symbol(text, 1).unwrap();
        assert_eq!(a.components().len(), 2);
        let x = [0.3, 0.1];
        let xi = [3.0, 4.0];
        let want = (1.0 + (2.0 * std::f64::consts::PI * 0.3).cos()) / 5.0;
        assert!((a.homogeneous(0).eval(&x, &xi).re - want).abs() < 1e-15);
        assert_eq!(parse_symbol(&format_symbol(&a), 1).unwrap(), a);
        assert!(parse_symbol("phsymbol dim 4 order 0\nend", 1).is_err());
        let e = parse_symbol("phsymbol dim 2 order 0\ncomponent cutoff none\nterm 0 0 : 1 1\nend", 7).unwrap_err();
        assert_eq!(e.line, 9);
        // A non-polynomial component needs a cutoff.
        assert!(parse_symbol("phsymbol dim 2 order -1\ncomponent cutoff none\nterm 0 0 : 0 0 1\nend", 1).is_err());
    }

    #[test]
    fn test_function_examples() {
        let f = parse_test_function("mul(bump(1, 2), exp(-0.5))").unwrap();
        assert_eq!(f, TestFunction::bump_on(1.0, 2.0).mul(TestFunction::Exp(-0.5)));
        assert_eq!(parse_test_function("cutoff(1,2)").unwrap(), TestFunction::cutoff(1.0, 2.0));
        assert_eq!(parse_test_function("plateau").unwrap(), TestFunction::plateau());
        assert!(parse_test_function("bump(2, 1)").is_err());
        assert!(parse_test_function("bump(1, 2) x").is_err());
        assert!(parse_test_function("wiggle(1)").is_err());
    }

    fn leaf() -> impl Strategy<Value = TestFunction> {
        prop_oneof![
            proptest::collection::vec(-10.0f64..10.0, 1..4).prop_map(TestFunction::Poly),
            (-3.0f64..3.0).prop_map(TestFunction::Exp),
            Just(TestFunction::Bump),
            Just(TestFunction::Step),
        ]
    }

    fn tree() -> impl Strategy<Value = TestFunction> {
        leaf().prop_recursive(3, 12, 2, |inner| {
            prop_oneof![
                (inner.clone(), 0.1f64..5.0, -3.0f64..3.0).prop_map(|(f, a, b)| f.affine(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(f, g)| f.add(g)),
                (inner.clone(), inner).prop_map(|(f, g)| f.mul(g)),
            ]
        })
    }

    fn series(n: usize) -> impl Strategy<Value = TorusFourierSeries> {
        proptest::collection::vec(((-3i32..=3), (-3i32..=3), (-3i32..=3), -5.0f64..5.0, -5.0f64..5.0), 1..4).prop_map(
            move |v| {
                let mut g = TorusFourierSeries::zero(n);
                for (a, b, c, re, im) in v {
                    let gamma = if n == 2 { [a, b, 0] } else { [a, b, c] };
                    g.add_at(gamma, Complex64::new(re, im));
                }
                g
            },
        )
    }

    fn symbol() -> impl Strategy<Value = PolyHomogeneousSymbol> {
        (2usize..=3, -3.0f64..2.0, -1.0f64..1.0, 0.2f64..3.0).prop_flat_map(|(n, re, im, t)| {
            let order = Complex64::new(re, im);
            proptest::collection::vec(proptest::collection::vec(((0u8..3), (0u8..3), (0u8..2), series(n)), 1..3), 1..3)
                .prop_map(move |comps| {
                    let parts = comps
                        .into_iter()
                        .enumerate()
                        .map(|(j, terms)| {
                            HomogeneousSymbol::from_terms(
                                n,
                                order - j as f64,
                                terms.into_iter().map(|(a, b, c, g)| (if n == 2 { [a, b, 0] } else { [a, b, c] }, g)),
                            )
                        })
                        .collect();
                    PolyHomogeneousSymbol::with_cutoff(n, order, parts, CutoffSpec::new(t).unwrap()).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn test_function_round_trip(f in tree()) {
            let s = format_test_function(&f);
            prop_assert_eq!(parse_test_function(&s).unwrap(), f);
        }

        #[test]
        fn symbol_round_trip(a in symbol()) {
            let s = format_symbol(&a);
            prop_assert_eq!(parse_symbol(&s, 1).unwrap(), a);
        }
    }
}
