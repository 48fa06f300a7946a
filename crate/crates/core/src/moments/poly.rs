//! Exact multivariate polynomials with rational coefficients over the fixed
//! variable set of the moment expansion.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};

pub type Rational = Ratio<i128>;

/// Highest drift coefficient index and nested time depth supported.
pub const MAX_DRIFT_INDEX: usize = 5;
pub const MAX_TIME_DEPTH: usize = 5;
pub const NUM_VARS: usize = 3 + (MAX_DRIFT_INDEX + 1) + MAX_TIME_DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// `theta - theta_bar` at the start time.
    Offset,
    /// Horizon `t - t0`.
    Elapsed,
    /// Drift coefficient `mu_bar_i`.
    Drift(usize),
    /// Diffusion variance `sigma^2`.
    NoiseVar,
    /// Inner integration time `r_j`, `1 <= j <= MAX_TIME_DEPTH`.
    Time(usize),
}

impl Var {
    pub fn index(self) -> usize {
        match self {
            Var::Offset => 0,
            Var::Elapsed => 1,
            Var::Drift(i) => {
                assert!(i <= MAX_DRIFT_INDEX, "drift index {i}");
                2 + i
            }
            Var::NoiseVar => 3 + MAX_DRIFT_INDEX,
            Var::Time(j) => {
                assert!((1..=MAX_TIME_DEPTH).contains(&j), "time depth {j}");
                3 + MAX_DRIFT_INDEX + j
            }
        }
    }

    pub fn from_index(idx: usize) -> Var {
        match idx {
            0 => Var::Offset,
            1 => Var::Elapsed,
            i if i < 3 + MAX_DRIFT_INDEX => Var::Drift(i - 2),
            i if i == 3 + MAX_DRIFT_INDEX => Var::NoiseVar,
            i => Var::Time(i - 3 - MAX_DRIFT_INDEX),
        }
    }

    pub fn name(self) -> String {
        match self {
            Var::Offset => "x".into(),
            Var::Elapsed => "dt".into(),
            Var::Drift(i) => format!("mu{i}"),
            Var::NoiseVar => "s2".into(),
            Var::Time(j) => format!("r{j}"),
        }
    }

    fn parse(name: &str) -> Option<Var> {
        match name {
            "x" => Some(Var::Offset),
            "dt" => Some(Var::Elapsed),
            "s2" => Some(Var::NoiseVar),
            _ => {
                let (head, tail) = name.split_at(name.find(|c: char| c.is_ascii_digit())?);
                let i: usize = tail.parse().ok()?;
                match head {
                    "mu" if i <= MAX_DRIFT_INDEX => Some(Var::Drift(i)),
                    "r" if (1..=MAX_TIME_DEPTH).contains(&i) => Some(Var::Time(i)),
                    _ => None,
                }
            }
        }
    }
}

pub type Monomial = [u8; NUM_VARS];

/// Sparse polynomial; zero coefficients are never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymPoly {
    terms: BTreeMap<Monomial, Rational>,
}

impl SymPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Rational) -> Self {
        Self::term(c, &[])
    }

    pub fn var(v: Var) -> Self {
        Self::term(Rational::from_integer(1), &[(v, 1)])
    }

    /// `c * prod v^e`.
    pub fn term(c: Rational, powers: &[(Var, u8)]) -> Self {
        let mut p = Self::zero();
        let mut mono = [0u8; NUM_VARS];
        for &(v, e) in powers {
            mono[v.index()] += e;
        }
        p.add_term(mono, c);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Rational)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, mono: &Monomial) -> Rational {
        self.terms.get(mono).copied().unwrap_or_default()
    }

    /// Largest exponent of `v` over all terms.
    pub fn degree_in(&self, v: Var) -> u8 {
        let i = v.index();
        self.terms.keys().map(|m| m[i]).max().unwrap_or(0)
    }

    fn add_term(&mut self, mono: Monomial, c: Rational) {
        if c == Rational::default() {
            return;
        }
        let entry = self.terms.entry(mono).or_default();
        *entry += c;
        if *entry == Rational::default() {
            self.terms.remove(&mono);
        }
    }

    pub fn scale(&self, c: Rational) -> Self {
        if c == Rational::default() {
            return Self::zero();
        }
        Self {
            terms: self.terms.iter().map(|(m, v)| (*m, v * c)).collect(),
        }
    }

    /// Multiplies by `v^e`.
    pub fn shift(&self, v: Var, e: u8) -> Self {
        let i = v.index();
        Self {
            terms: self
                .terms
                .iter()
                .map(|(m, c)| {
                    let mut m = *m;
                    m[i] += e;
                    (m, *c)
                })
                .collect(),
        }
    }

    pub fn derivative(&self, v: Var) -> Self {
        let i = v.index();
        let mut out = Self::zero();
        for (m, c) in &self.terms {
            if m[i] > 0 {
                let mut d = *m;
                d[i] -= 1;
                out.add_term(d, c * Rational::from_integer(m[i] as i128));
            }
        }
        out
    }

    /// Replaces `v` by `by` (or by zero when `by` is `None`).
    pub fn substitute(&self, v: Var, by: Option<Var>) -> Self {
        let i = v.index();
        let mut out = Self::zero();
        for (m, c) in &self.terms {
            let e = m[i];
            let mut s = *m;
            s[i] = 0;
            match by {
                Some(w) => {
                    s[w.index()] += e;
                    out.add_term(s, *c);
                }
                None if e == 0 => out.add_term(s, *c),
                None => {}
            }
        }
        out
    }

    /// `int_{lower}^{upper} p dv` with variable (or zero) bounds.
    pub fn integrate(&self, v: Var, lower: Option<Var>, upper: Option<Var>) -> Self {
        let i = v.index();
        let mut anti = Self::zero();
        for (m, c) in &self.terms {
            let mut a = *m;
            a[i] += 1;
            anti.add_term(a, c / Rational::from_integer(a[i] as i128));
        }
        anti.substitute(v, upper) - anti.substitute(v, lower)
    }

    /// Numeric value; `values` is indexed by [`Var::index`].
    pub fn eval(&self, values: &[f64; NUM_VARS]) -> f64 {
        self.terms
            .iter()
            .map(|(m, c)| {
                let mut v = *c.numer() as f64 / *c.denom() as f64;
                for (k, &e) in m.iter().enumerate() {
                    if e > 0 {
                        v *= values[k].powi(e as i32);
                    }
                }
                v
            })
            .sum()
    }

    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly {
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (*c.numer() as f64 / *c.denom() as f64, *m))
                .collect(),
        }
    }
}

/// Floating-point copy of a [`SymPoly`] for repeated evaluation.
#[derive(Clone, Debug, Default)]
pub struct CompiledPoly {
    terms: Vec<(f64, Monomial)>,
}

impl CompiledPoly {
    pub fn eval(&self, values: &[f64; NUM_VARS]) -> f64 {
        let mut acc = 0.0;
        for (c, m) in &self.terms {
            let mut v = *c;
            for (k, &e) in m.iter().enumerate() {
                if e > 0 {
                    v *= values[k].powi(e as i32);
                }
            }
            acc += v;
        }
        acc
    }
}

impl Add for SymPoly {
    type Output = SymPoly;
    fn add(mut self, rhs: SymPoly) -> SymPoly {
        self += &rhs;
        self
    }
}

impl AddAssign<&SymPoly> for SymPoly {
    fn add_assign(&mut self, rhs: &SymPoly) {
        for (m, c) in &rhs.terms {
            self.add_term(*m, *c);
        }
    }
}

impl Neg for SymPoly {
    type Output = SymPoly;
    fn neg(self) -> SymPoly {
        self.scale(Rational::from_integer(-1))
    }
}

impl Sub for SymPoly {
    type Output = SymPoly;
    fn sub(self, rhs: SymPoly) -> SymPoly {
        self + (-rhs)
    }
}

impl Mul for &SymPoly {
    type Output = SymPoly;
    fn mul(self, rhs: &SymPoly) -> SymPoly {
        let mut out = SymPoly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                let mut m = *ma;
                for (a, b) in m.iter_mut().zip(mb.iter()) {
                    *a += b;
                }
                out.add_term(m, ca * cb);
            }
        }
        out
    }
}

fn fmt_monomial(m: &Monomial) -> String {
    // Order factors as they usually appear in print: drifts, noise, offset, times.
    let order = (2..3 + MAX_DRIFT_INDEX)
        .chain([3 + MAX_DRIFT_INDEX, 0])
        .chain((4 + MAX_DRIFT_INDEX)..NUM_VARS)
        .chain([1]);
    let mut parts = Vec::new();
    for i in order {
        match m[i] {
            0 => {}
            1 => parts.push(Var::from_index(i).name()),
            e => parts.push(format!("{}^{e}", Var::from_index(i).name())),
        }
    }
    parts.join("*")
}

impl fmt::Display for SymPoly {
    /// Terms like `1/2*mu1*mu0*dt^2`, highest total degree first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut items: Vec<_> = self.terms.iter().collect();
        items.sort_by_key(|(m, _)| {
            let deg: u32 = m.iter().map(|&e| e as u32).sum();
            (std::cmp::Reverse(m[0]), deg, std::cmp::Reverse(**m))
        });
        for (k, (m, c)) in items.into_iter().enumerate() {
            let neg = *c < Rational::default();
            let a = if neg { -*c } else { *c };
            let sign = match (k, neg) {
                (0, true) => "-",
                (0, false) => "",
                (_, true) => " - ",
                (_, false) => " + ",
            };
            let mono = fmt_monomial(m);
            let one = Rational::from_integer(1);
            let body = match (a == one, mono.is_empty()) {
                (true, true) => "1".to_string(),
                (true, false) => mono,
                (false, true) => a.to_string(),
                (false, false) => format!("{a}*{mono}"),
            };
            write!(f, "{sign}{body}")?;
        }
        Ok(())
    }
}

impl FromStr for SymPoly {
    type Err = Error;

    /// Parses sums of products such as `2*mu1*x^2*dt - 1/3*mu0^2*dt`.
    /// Repeated factors multiply.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidInput(format!("cannot parse polynomial term `{what}`"));
        let mut out = SymPoly::zero();
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(bad(s));
        }
        let mut terms = Vec::new();
        let mut start = 0;
        for (i, ch) in compact.char_indices() {
            if (ch == '+' || ch == '-') && i > 0 && !compact[..i].ends_with('^') {
                terms.push(&compact[start..i]);
                start = i;
            }
        }
        terms.push(&compact[start..]);
        for raw in terms {
            let (neg, body) = match raw.as_bytes().first() {
                Some(b'-') => (true, &raw[1..]),
                Some(b'+') => (false, &raw[1..]),
                _ => (false, raw),
            };
            if body.is_empty() {
                return Err(bad(raw));
            }
            let mut coeff = Rational::from_integer(if neg { -1 } else { 1 });
            let mut mono = [0u8; NUM_VARS];
            for factor in body.split('*') {
                if factor.is_empty() {
                    return Err(bad(raw));
                }
                if factor.starts_with(|c: char| c.is_ascii_digit()) {
                    let r = match factor.split_once('/') {
                        Some((n, d)) => {
                            let n: i128 = n.parse().map_err(|_| bad(raw))?;
                            let d: i128 = d.parse().map_err(|_| bad(raw))?;
                            if d == 0 {
                                return Err(bad(raw));
                            }
                            Rational::new(n, d)
                        }
                        None => Rational::from_integer(factor.parse().map_err(|_| bad(raw))?),
                    };
                    coeff *= r;
                } else {
                    let (name, exp) = match factor.split_once('^') {
                        Some((n, e)) => (n, e.parse::<u8>().map_err(|_| bad(raw))?),
                        None => (factor, 1),
                    };
                    let v = Var::parse(name).ok_or_else(|| bad(raw))?;
                    mono[v.index()] += exp;
                }
            }
            out.add_term(mono, coeff);
        }
        Ok(out)
    }
}
