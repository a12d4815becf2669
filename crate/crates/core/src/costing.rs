//! Monetary and energy accounting for model calls.
//!
//! Amounts are exact decimals. Token prices are dollars per million tokens,
//! so a token cost is an exact product and sums carry no rounding drift.

use std::fmt;
use std::io::Write;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};
use std::sync::{Arc, Mutex};

use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("undefined ratio: cost per note is zero")]
    UndefinedRatio,
    #[error("invalid ratio input: {0}")]
    InvalidInput(String),
    #[error("invalid price profile: {0}")]
    InvalidProfile(String),
}

/// Exact dollar amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dollars(Decimal);

/// Fractional digits kept for amounts derived from floating-point inputs
/// (wall-clock seconds, watts).
const ENERGY_SCALE: u32 = 12;

impl Dollars {
    pub const ZERO: Dollars = Dollars(Decimal::ZERO);

    pub fn new(value: Decimal) -> Self {
        Self(value.normalize())
    }

    /// Parses a decimal literal such as `"5.00"`.
    pub fn parse(s: &str) -> Result<Self, rust_decimal::Error> {
        s.parse::<Decimal>().map(Self::new)
    }

    pub fn from_micros(micros: i64) -> Self {
        Self::new(Decimal::new(micros, 6))
    }

    pub fn decimal(self) -> Decimal {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_zero(self) -> bool {
        self.0.is_zero()
    }

    /// Value divided by a count, rounded to 12 fractional digits.
    pub fn per(self, count: usize) -> Option<Dollars> {
        if count == 0 {
            return None;
        }
        Some(Self::new(
            (self.0 / Decimal::from(count)).round_dp(ENERGY_SCALE),
        ))
    }
}

impl fmt::Display for Dollars {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.normalize())
    }
}

impl Add for Dollars {
    type Output = Dollars;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.0 + rhs.0)
    }
}

impl AddAssign for Dollars {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for Dollars {
    type Output = Dollars;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.0 - rhs.0)
    }
}

impl Sum for Dollars {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Dollars::ZERO, Add::add)
    }
}

/// Token prices in dollars per million tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceProfile {
    pub name: String,
    pub input_price: Dollars,
    pub output_price: Dollars,
}

impl PriceProfile {
    pub fn new(name: impl Into<String>, input: Dollars, output: Dollars) -> Result<Self, CostError> {
        if input.0.is_sign_negative() || output.0.is_sign_negative() {
            return Err(CostError::InvalidProfile("prices must be >= 0".into()));
        }
        Ok(Self {
            name: name.into(),
            input_price: input,
            output_price: output,
        })
    }

    /// Hosted-teacher rates: $5.00 input, $15.00 output per million tokens.
    pub fn remote_default() -> Self {
        Self {
            name: "remote-default".into(),
            input_price: Dollars::new(Decimal::new(500, 2)),
            output_price: Dollars::new(Decimal::new(1500, 2)),
        }
    }
}

impl Default for PriceProfile {
    fn default() -> Self {
        Self::remote_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub device_watts: f64,
    /// Dollars per kWh.
    pub rate: Dollars,
}

impl EnergyProfile {
    /// 16.88 cents per kWh.
    pub const DEFAULT_RATE: Decimal = Decimal::from_parts(1688, 0, 0, false, 4);

    pub fn new(device_watts: f64, rate: Dollars) -> Result<Self, CostError> {
        if !(device_watts.is_finite() && device_watts > 0.0) {
            return Err(CostError::InvalidProfile("device_watts must be > 0".into()));
        }
        if rate.0.is_sign_negative() {
            return Err(CostError::InvalidProfile("rate must be >= 0".into()));
        }
        Ok(Self { device_watts, rate })
    }

    pub fn with_watts(device_watts: f64) -> Result<Self, CostError> {
        Self::new(device_watts, Dollars::new(Self::DEFAULT_RATE))
    }
}

pub fn token_cost(input_tokens: u64, output_tokens: u64, profile: &PriceProfile) -> Dollars {
    let million = Decimal::from(1_000_000u64);
    let input = Decimal::from(input_tokens) * profile.input_price.0 / million;
    let output = Decimal::from(output_tokens) * profile.output_price.0 / million;
    Dollars::new(input + output)
}

pub fn energy_cost(elapsed_seconds: f64, profile: &EnergyProfile) -> Dollars {
    if !(elapsed_seconds.is_finite() && elapsed_seconds > 0.0) {
        return Dollars::ZERO;
    }
    let joules = Decimal::from_f64(profile.device_watts * elapsed_seconds).unwrap_or_default();
    let kwh = joules / Decimal::from(3_600_000u64);
    Dollars::new((kwh * profile.rate.0).round_dp(ENERGY_SCALE))
}

/// Performance-cost ratio: score divided by dollars per note.
pub fn pcr(score: f64, cost_per_note: Dollars) -> Result<f64, CostError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(CostError::InvalidInput(format!("score {score} outside [0, 1]")));
    }
    if cost_per_note.0.is_sign_negative() && !cost_per_note.is_zero() {
        return Err(CostError::InvalidInput("negative cost".into()));
    }
    if cost_per_note.is_zero() {
        return Err(CostError::UndefinedRatio);
    }
    Ok(score / cost_per_note.to_f64())
}

/// `ceil(chars / 4)`, the fallback when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UsageSource {
    Reported,
    Estimated,
}

/// How a backend's calls are charged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "basis")]
pub enum CostBasis {
    Tokens(PriceProfile),
    Energy(EnergyProfile),
    #[default]
    Free,
}

impl CostBasis {
    pub fn charge(&self, input_tokens: u64, output_tokens: u64, elapsed_seconds: f64) -> Dollars {
        match self {
            CostBasis::Tokens(p) => token_cost(input_tokens, output_tokens, p),
            CostBasis::Energy(e) => energy_cost(elapsed_seconds, e),
            CostBasis::Free => Dollars::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub call_id: u64,
    pub role: Role,
    pub backend: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub elapsed_seconds: f64,
    pub dollars: Dollars,
    pub source: UsageSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub dollars: Dollars,
    pub student_dollars: Dollars,
    pub teacher_dollars: Dollars,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Default)]
struct LedgerInner {
    entries: Vec<LedgerEntry>,
    totals: LedgerTotals,
}

/// Append-only ledger. Clones share the same underlying entries.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    inner: Arc<Mutex<LedgerInner>>,
}

/// Ledger entry before it is assigned a call id.
#[derive(Debug, Clone, PartialEq)]
pub struct Charge {
    pub role: Role,
    pub backend: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub elapsed_seconds: f64,
    pub dollars: Dollars,
    pub source: UsageSource,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        let ledger = Self::new();
        {
            let mut inner = ledger.inner.lock().expect("ledger lock");
            for entry in entries {
                apply_totals(&mut inner.totals, &entry);
                inner.entries.push(entry);
            }
        }
        ledger
    }

    pub fn append(&self, charge: Charge) -> u64 {
        let mut inner = self.inner.lock().expect("ledger lock");
        let call_id = inner.entries.len() as u64 + 1;
        let entry = LedgerEntry {
            call_id,
            role: charge.role,
            backend: charge.backend,
            input_tokens: charge.input_tokens,
            output_tokens: charge.output_tokens,
            elapsed_seconds: charge.elapsed_seconds,
            dollars: charge.dollars,
            source: charge.source,
        };
        apply_totals(&mut inner.totals, &entry);
        inner.entries.push(entry);
        call_id
    }

    pub fn totals(&self) -> LedgerTotals {
        self.inner.lock().expect("ledger lock").totals
    }

    pub fn total(&self) -> Dollars {
        self.totals().dollars
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("ledger lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.inner.lock().expect("ledger lock").entries.clone()
    }

    /// Sum of dollars for entries after the first `from` entries.
    pub fn dollars_since(&self, from: usize) -> Dollars {
        let inner = self.inner.lock().expect("ledger lock");
        inner.entries.iter().skip(from).map(|e| e.dollars).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "call_id",
            "role",
            "input_tokens",
            "output_tokens",
            "elapsed_seconds",
            "dollars",
            "source",
        ])?;
        for e in self.entries() {
            out.write_record([
                e.call_id.to_string(),
                e.role.to_string(),
                e.input_tokens.to_string(),
                e.output_tokens.to_string(),
                e.elapsed_seconds.to_string(),
                e.dollars.to_string(),
                match e.source {
                    UsageSource::Reported => "reported".to_string(),
                    UsageSource::Estimated => "estimated".to_string(),
                },
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn apply_totals(totals: &mut LedgerTotals, entry: &LedgerEntry) {
    totals.calls += 1;
    totals.dollars += entry.dollars;
    match entry.role {
        Role::Student => totals.student_dollars += entry.dollars,
        Role::Teacher => totals.teacher_dollars += entry.dollars,
    }
    totals.input_tokens += entry.input_tokens;
    totals.output_tokens += entry.output_tokens;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Dollars {
        Dollars::parse(s).unwrap()
    }

    #[test]
    fn token_cost_examples() {
        let p = PriceProfile::remote_default();
        assert_eq!(token_cost(1_000_000, 0, &p), d("5.00"));
        assert_eq!(token_cost(0, 1_000_000, &p), d("15"));
        assert_eq!(token_cost(0, 0, &p), Dollars::ZERO);
        assert_eq!(token_cost(200_000, 100_000, &p), d("2.50"));
    }

    #[test]
    fn energy_cost_examples() {
        let e = EnergyProfile::with_watts(250.0).unwrap();
        assert_eq!(energy_cost(4.0 * 3600.0, &e), d("0.1688"));
        assert_eq!(energy_cost(2.0 * 3600.0, &e), d("0.0844"));
        assert_eq!(energy_cost(0.0, &e), Dollars::ZERO);
    }

    #[test]
    fn pcr_examples() {
        assert_eq!(pcr(0.5, d("0.001")).unwrap(), 500.0);
        assert_eq!(pcr(0.0, d("0.3")).unwrap(), 0.0);
        assert_eq!(pcr(0.5, Dollars::ZERO), Err(CostError::UndefinedRatio));
        assert!(pcr(1.5, d("1")).is_err());
    }

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
    }

    #[test]
    fn profile_validation() {
        assert!(PriceProfile::new("x", d("-1"), d("1")).is_err());
        assert!(EnergyProfile::new(0.0, d("0.1")).is_err());
        assert!(EnergyProfile::new(10.0, d("-0.1")).is_err());
    }

    #[test]
    fn ledger_csv_has_fixed_columns() {
        let ledger = CostLedger::new();
        ledger.append(Charge {
            role: Role::Teacher,
            backend: "t".into(),
            input_tokens: 812,
            output_tokens: 93,
            elapsed_seconds: 0.5,
            dollars: token_cost(812, 93, &PriceProfile::remote_default()),
            source: UsageSource::Reported,
        });
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "call_id,role,input_tokens,output_tokens,elapsed_seconds,dollars,source"
        );
        assert_eq!(lines.next().unwrap(), "1,teacher,812,93,0.5,0.005455,reported");
    }
}
