//! Width-ratio algebra.
//!
//! Ratios, grid points and slice endpoints are exact rationals. A ratio `r`
//! applied to an axis of length `C` must give an integral `r * C`; nothing
//! here rounds.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rational = Ratio<u64>;

/// Parses `"a/b"`, `"a"` or a terminating decimal such as `"0.4375"` into an
/// exact rational.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let t = s.trim();
    let bad = || Error::validation("ratio", format!("cannot parse {s:?} as an exact rational"));
    if let Some((n, d)) = t.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    if let Some((int, frac)) = t.split_once('.') {
        if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let num: u64 = frac.parse().map_err(|_| bad())?;
        return Ok(Ratio::from_integer(int) + Ratio::new(num, den));
    }
    t.parse::<u64>().map(Ratio::from_integer).map_err(|_| bad())
}

pub fn format_rational(r: &Rational) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Fraction of the full embedding width, `0 < r <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WidthRatio(Rational);

impl WidthRatio {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 {
            return Err(Error::validation("ratio", "zero denominator"));
        }
        Self::from_rational(Ratio::new(numer, denom))
    }

    pub fn from_rational(r: Rational) -> Result<Self> {
        if r.is_zero() || r > Rational::one() {
            return Err(Error::validation(
                "ratio",
                format!("{} is outside (0, 1]", format_rational(&r)),
            ));
        }
        Ok(WidthRatio(r))
    }

    pub fn one() -> Self {
        WidthRatio(Rational::one())
    }

    pub fn value(self) -> Rational {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_full(self) -> bool {
        self.0.is_one()
    }

    /// `r * len` when it is an integer.
    pub fn of(self, len: usize) -> Option<usize> {
        let v = self.0 * Rational::from_integer(len as u64);
        v.is_integer().then(|| v.to_integer() as usize)
    }
}

impl fmt::Display for WidthRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_rational(&self.0))
    }
}

impl FromStr for WidthRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_rational(parse_rational(s)?)
    }
}

impl TryFrom<String> for WidthRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WidthRatio> for String {
    fn from(r: WidthRatio) -> String {
        r.to_string()
    }
}

/// Deliverable ratios `{s, s + eps, ..., l}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct RatioGrid {
    s: WidthRatio,
    l: WidthRatio,
    eps: Rational,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    s: String,
    l: String,
    eps: String,
}

impl TryFrom<GridRepr> for RatioGrid {
    type Error = Error;

    fn try_from(g: GridRepr) -> Result<Self> {
        let field = |name: &str, v: &str| {
            parse_rational(v).map_err(|e| Error::validation(format!("grid.{name}"), e.to_string()))
        };
        let s = WidthRatio::from_rational(field("s", &g.s)?)
            .map_err(|e| Error::validation("grid.s", e.to_string()))?;
        let l = WidthRatio::from_rational(field("l", &g.l)?)
            .map_err(|e| Error::validation("grid.l", e.to_string()))?;
        RatioGrid::new(s, l, field("eps", &g.eps)?)
    }
}

impl From<RatioGrid> for GridRepr {
    fn from(g: RatioGrid) -> Self {
        GridRepr {
            s: g.s.to_string(),
            l: g.l.to_string(),
            eps: format_rational(&g.eps),
        }
    }
}

impl RatioGrid {
    pub fn new(s: WidthRatio, l: WidthRatio, eps: Rational) -> Result<Self> {
        if s >= l {
            return Err(Error::validation("grid", format!("need s < l, got s={s}, l={l}")));
        }
        if eps.is_zero() {
            return Err(Error::validation("grid.eps", "granularity must be positive"));
        }
        let steps = (l.value() - s.value()) / eps;
        if !steps.is_integer() {
            return Err(Error::validation(
                "grid.eps",
                format!(
                    "(l - s) / eps = {} is not an integer (s={s}, l={l}, eps={})",
                    format_rational(&steps),
                    format_rational(&eps)
                ),
            ));
        }
        Ok(RatioGrid { s, l, eps })
    }

    /// Convenience constructor from strings like `"1/4"`.
    pub fn parse(s: &str, l: &str, eps: &str) -> Result<Self> {
        RatioGrid::try_from(GridRepr {
            s: s.into(),
            l: l.into(),
            eps: eps.into(),
        })
    }

    pub fn smallest(&self) -> WidthRatio {
        self.s
    }

    pub fn largest(&self) -> WidthRatio {
        self.l
    }

    pub fn eps(&self) -> Rational {
        self.eps
    }

    /// `X = (l - s) / eps + 1`
    pub fn num_networks(&self) -> usize {
        ((self.l.value() - self.s.value()) / self.eps).to_integer() as usize + 1
    }

    /// Grid points in ascending order.
    pub fn points(&self) -> Vec<WidthRatio> {
        (0..self.num_networks())
            .map(|i| WidthRatio(self.s.value() + self.eps * Rational::from_integer(i as u64)))
            .collect()
    }

    pub fn contains(&self, r: WidthRatio) -> bool {
        let off = (r.value() - self.s.value().min(r.value())) / self.eps;
        r >= self.s && r <= self.l && off.is_integer()
    }

    /// `(s + l) / 2`
    pub fn midpoint(&self) -> Rational {
        (self.s.value() + self.l.value()) / Rational::from_integer(2)
    }

    /// Same bounds, new granularity.
    pub fn with_eps(&self, eps: Rational) -> Result<Self> {
        RatioGrid::new(self.s, self.l, eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceMode {
    /// `[0, rC)`
    Leading,
    /// `[C - rC, C)`
    Trailing,
    /// `[0, C)`
    Full,
}

impl FromStr for SliceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "leading" => Ok(SliceMode::Leading),
            "trailing" => Ok(SliceMode::Trailing),
            "full" => Ok(SliceMode::Full),
            _ => Err(Error::validation("mode", format!("{s:?} is not leading|trailing|full"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisRole {
    Sliceable,
    Fixed,
}

/// Per-axis index ranges for one parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub ranges: Vec<Range<usize>>,
}

impl SliceSpec {
    pub fn full(shape: &[usize]) -> Self {
        SliceSpec {
            ranges: shape.iter().map(|&n| 0..n).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn numel(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).product()
    }
}

pub fn slice_indices(len: usize, r: WidthRatio, mode: SliceMode) -> Result<Range<usize>> {
    if mode == SliceMode::Full {
        return Ok(0..len);
    }
    let n = r.of(len).ok_or_else(|| {
        Error::validation("ratio", format!("{r} x {len} is not an integer"))
    })?;
    Ok(match mode {
        SliceMode::Leading => 0..n,
        SliceMode::Trailing => len - n..len,
        SliceMode::Full => unreachable!(),
    })
}

/// Trailing for the smallest ratio under isolated activation, leading
/// otherwise.
pub fn mode_for(r: WidthRatio, grid: &RatioGrid, isolated_activation: bool) -> Result<SliceMode> {
    if !grid.contains(r) {
        return Err(Error::validation(
            "ratio",
            format!("{r} is not on the grid s={}, l={}, eps={}", grid.s, grid.l, format_rational(&grid.eps)),
        ));
    }
    Ok(if isolated_activation && r == grid.s {
        SliceMode::Trailing
    } else {
        SliceMode::Leading
    })
}

pub fn resolve_slice(shape: &[usize], roles: &[AxisRole], r: WidthRatio, mode: SliceMode) -> Result<SliceSpec> {
    if shape.len() != roles.len() {
        return Err(Error::shape(
            "resolve_slice",
            format!("{} axis roles for shape {shape:?}", roles.len()),
        ));
    }
    let ranges = shape
        .iter()
        .zip(roles)
        .map(|(&n, role)| match role {
            AxisRole::Fixed => Ok(0..n),
            AxisRole::Sliceable => slice_indices(n, r, mode),
        })
        .collect::<Result<_>>()?;
    Ok(SliceSpec { ranges })
}

/// Training-budget summary of a grid under the sandwich rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStats {
    pub networks: usize,
    pub eta: u64,
    /// Expected epochs per intermediate sub-network.
    pub xi: Rational,
    /// Set when `X <= 2`: no intermediates are sampled and every delivered
    /// network trains for the full `eta`.
    pub constant_activation: bool,
}

/// `xi = 2 / (X - 2) * eta` for `X > 2`.
pub fn expected_epochs(networks: usize, eta: u64) -> ScheduleStats {
    if networks <= 2 {
        return ScheduleStats {
            networks,
            eta,
            xi: Rational::from_integer(eta),
            constant_activation: true,
        };
    }
    ScheduleStats {
        networks,
        eta,
        xi: Ratio::new(2 * eta, networks as u64 - 2),
        constant_activation: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> WidthRatio {
        s.parse().unwrap()
    }

    #[test]
    fn parses_fractions_decimals_and_integers() {
        assert_eq!(r("1/4"), r("0.25"));
        assert_eq!(r("1"), WidthRatio::one());
        assert_eq!(r("0.4375").to_string(), "7/16");
        assert!("0".parse::<WidthRatio>().is_err());
        assert!("5/4".parse::<WidthRatio>().is_err());
        assert!("abc".parse::<WidthRatio>().is_err());
        assert!("1/0".parse::<WidthRatio>().is_err());
    }

    #[test]
    fn network_counts() {
        assert_eq!(RatioGrid::parse("0.25", "1.0", "0.0625").unwrap().num_networks(), 13);
        assert_eq!(RatioGrid::parse("1/4", "1", "1/4").unwrap().num_networks(), 4);
        assert_eq!(RatioGrid::parse("1/2", "1", "1/4").unwrap().num_networks(), 3);
    }

    #[test]
    fn grid_rejects_non_integral_steps() {
        let err = RatioGrid::parse("1/4", "1", "1/3").unwrap_err();
        assert!(err.to_string().contains("grid.eps"), "{err}");
        assert!(RatioGrid::parse("1/2", "1/4", "1/4").is_err());
        assert!(RatioGrid::parse("1/4", "1", "0").is_err());
    }

    #[test]
    fn expected_epochs_formula() {
        let st = expected_epochs(13, 300);
        assert_eq!(st.xi, Ratio::new(600, 11));
        assert!(!st.constant_activation);
        assert_eq!(expected_epochs(7, 300).xi, Rational::from_integer(120));
        assert_eq!(expected_epochs(13, 100).xi, Ratio::new(200, 11));
        assert_eq!(expected_epochs(4, 300).xi, Rational::from_integer(300));
        let flat = expected_epochs(2, 300);
        assert!(flat.constant_activation);
        assert_eq!(flat.xi, Rational::from_integer(300));
    }

    #[test]
    fn slice_index_examples() {
        assert_eq!(slice_indices(8, r("1/2"), SliceMode::Leading).unwrap(), 0..4);
        assert_eq!(slice_indices(8, r("1/4"), SliceMode::Trailing).unwrap(), 6..8);
        assert_eq!(slice_indices(8, r("1"), SliceMode::Leading).unwrap(), 0..8);
        assert_eq!(slice_indices(8, r("1/4"), SliceMode::Full).unwrap(), 0..8);
        assert!(slice_indices(6, r("1/4"), SliceMode::Leading).is_err());
    }

    #[test]
    fn mode_selection() {
        let g = RatioGrid::parse("1/4", "1", "1/16").unwrap();
        assert_eq!(mode_for(r("1/4"), &g, true).unwrap(), SliceMode::Trailing);
        assert_eq!(mode_for(r("1/4"), &g, false).unwrap(), SliceMode::Leading);
        assert_eq!(mode_for(r("1/2"), &g, true).unwrap(), SliceMode::Leading);
        assert!(mode_for(r("15/32"), &g, true).is_err());
        assert!(mode_for(r("1/8"), &g, true).is_err());
    }

    #[test]
    fn resolve_slice_examples() {
        use AxisRole::*;
        let half = r("1/2");
        let lin = resolve_slice(&[8, 8], &[Sliceable, Sliceable], half, SliceMode::Leading).unwrap();
        assert_eq!(lin.ranges, vec![0..4, 0..4]);
        let head = resolve_slice(&[10, 8], &[Fixed, Sliceable], half, SliceMode::Leading).unwrap();
        assert_eq!(head.ranges, vec![0..10, 0..4]);
        let pe = resolve_slice(&[8, 48], &[Sliceable, Fixed], r("1/4"), SliceMode::Trailing).unwrap();
        assert_eq!(pe.ranges, vec![6..8, 0..48]);
        assert!(resolve_slice(&[8, 8], &[Sliceable], half, SliceMode::Leading).is_err());
    }

    #[test]
    fn grid_serde_uses_rational_strings() {
        let g = RatioGrid::parse("0.25", "1", "0.0625").unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"s":"1/4","l":"1","eps":"1/16"}"#);
        let back: RatioGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        let bad: std::result::Result<RatioGrid, _> = serde_json::from_str(r#"{"s":"1/4","l":"1","eps":"1/3"}"#);
        assert!(bad.is_err());
    }
}
