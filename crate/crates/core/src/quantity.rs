//! Fixed-point quantities used for all accounting.
//!
//! Energy is counted in watt-hours, money in euro-cents and unit prices in
//! cents per kWh. Everything is an unsigned integer so conservation checks are
//! exact and runs are reproducible bit for bit.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuantityError {
    #[error("{what} underflow: {lhs} - {rhs}")]
    Underflow {
        what: &'static str,
        lhs: u64,
        rhs: u64,
    },
    #[error("invalid decimal `{0}`")]
    InvalidDecimal(String),
}

/// Energy in watt-hours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnergyQuantity(pub u64);

/// Money in euro-cents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MoneyAmount(pub u64);

/// Unit price in euro-cents per kWh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitPrice(pub u64);

impl EnergyQuantity {
    pub const ZERO: Self = Self(0);

    pub fn wh(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_sub(self, rhs: Self) -> Result<Self, QuantityError> {
        self.0.checked_sub(rhs.0).map(Self).ok_or(QuantityError::Underflow {
            what: "energy",
            lhs: self.0,
            rhs: rhs.0,
        })
    }

    pub fn saturating_sub(self, rhs: Self) -> Self {
        Self(self.0.saturating_sub(rhs.0))
    }

    pub fn min(self, rhs: Self) -> Self {
        Self(self.0.min(rhs.0))
    }

    /// Whole kWh, rounded half-up.
    pub fn kwh_rounded(self) -> u64 {
        (self.0 + 500) / 1000
    }
}

impl MoneyAmount {
    pub const ZERO: Self = Self(0);

    pub fn cents(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_sub(self, rhs: Self) -> Result<Self, QuantityError> {
        self.0.checked_sub(rhs.0).map(Self).ok_or(QuantityError::Underflow {
            what: "money",
            lhs: self.0,
            rhs: rhs.0,
        })
    }
}

impl UnitPrice {
    pub fn cents_per_kwh(self) -> u64 {
        self.0
    }

    /// Cost of `energy` at this price, rounded half-up to whole cents.
    pub fn cost(self, energy: EnergyQuantity) -> MoneyAmount {
        let exact_milli = energy.0 as u128 * self.0 as u128;
        MoneyAmount(div_round_half_up(exact_milli, 1000) as u64)
    }

    /// Largest energy whose exact (unrounded) cost fits in `budget`:
    /// `floor(budget / price)`. `None` when the price is zero.
    pub fn affordable(self, budget: MoneyAmount) -> Option<EnergyQuantity> {
        if self.0 == 0 {
            return None;
        }
        let wh = budget.0 as u128 * 1000 / self.0 as u128;
        Some(EnergyQuantity(wh.min(u64::MAX as u128) as u64))
    }
}

macro_rules! impl_arith {
    ($ty:ident) => {
        impl Add for $ty {
            type Output = $ty;
            fn add(self, rhs: $ty) -> $ty {
                $ty(self.0.checked_add(rhs.0).expect(concat!(stringify!($ty), " overflow")))
            }
        }

        impl std::ops::AddAssign for $ty {
            fn add_assign(&mut self, rhs: $ty) {
                *self = *self + rhs;
            }
        }

        impl Sum for $ty {
            fn sum<I: Iterator<Item = $ty>>(iter: I) -> $ty {
                iter.fold($ty(0), |a, b| a + b)
            }
        }

        impl<'a> Sum<&'a $ty> for $ty {
            fn sum<I: Iterator<Item = &'a $ty>>(iter: I) -> $ty {
                iter.fold($ty(0), |a, b| a + *b)
            }
        }
    };
}

impl_arith!(EnergyQuantity);
impl_arith!(MoneyAmount);

impl fmt::Display for EnergyQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} Wh", self.0)
    }
}

impl fmt::Display for MoneyAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ct", self.0)
    }
}

impl fmt::Display for UnitPrice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ct/kWh", self.0)
    }
}

/// Signed energy balance of a peer for one hour: production minus consumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetPosition(pub i64);

impl NetPosition {
    pub fn surplus(self) -> Option<EnergyQuantity> {
        (self.0 > 0).then_some(EnergyQuantity(self.0 as u64))
    }

    pub fn need(self) -> Option<EnergyQuantity> {
        (self.0 < 0).then(|| EnergyQuantity(self.0.unsigned_abs()))
    }
}

pub fn net_position(production: EnergyQuantity, consumption: EnergyQuantity) -> NetPosition {
    NetPosition(production.0 as i64 - consumption.0 as i64)
}

/// `round(num / den)` with ties going up. `den` must be non-zero.
pub fn div_round_half_up(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// An exact non-negative fraction, parsed from decimal notation.
///
/// Config files carry these as JSON numbers (`0.005`) or strings (`"0.005"`).
/// The value is reconstructed from the shortest decimal form, never from the
/// binary float, so `0.005` is exactly 5/1000.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn parse_decimal(text: &str) -> Result<Self, QuantityError> {
        let bad = || QuantityError::InvalidDecimal(text.to_string());
        let t = text.trim();
        let (mantissa, exp) = match t.find(['e', 'E']) {
            Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| bad())?),
            None => (t, 0),
        };
        let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let digits = format!("{int_part}{frac_part}");
        let mut num: u128 = digits.parse().map_err(|_| bad())?;
        let scale = frac_part.len() as i32 - exp;
        let mut den: u128 = 1;
        if scale >= 0 {
            den = 10u128.checked_pow(scale as u32).ok_or_else(bad)?;
        } else {
            num = num.checked_mul(10u128.checked_pow((-scale) as u32).ok_or_else(bad)?).ok_or_else(bad)?;
        }
        let g = gcd128(num, den);
        let (num, den) = (num / g, den / g);
        if num > u64::MAX as u128 || den > u64::MAX as u128 {
            return Err(bad());
        }
        Ok(Self::new(num as u64, den as u64))
    }

    /// Plain decimal rendering of `self * 100`, e.g. 0.0005 -> "0.05".
    pub fn percent_label(&self) -> String {
        let scaled = Fraction::new(self.num.saturating_mul(100), self.den);
        scaled.decimal_string()
    }

    pub fn decimal_string(&self) -> String {
        let int = self.num / self.den;
        let mut rem = self.num % self.den;
        if rem == 0 {
            return int.to_string();
        }
        let mut out = format!("{int}.");
        // terminates for denominators of the form 2^a 5^b; cap otherwise
        for _ in 0..18 {
            if rem == 0 {
                break;
            }
            rem *= 10;
            out.push(char::from(b'0' + (rem / self.den) as u8));
            rem %= self.den;
        }
        out
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.decimal_string())
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.decimal_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(serde_json::Number),
            Text(String),
        }
        let text = match Raw::deserialize(deserializer)? {
            Raw::Num(n) => n.to_string(),
            Raw::Text(s) => s,
        };
        Fraction::parse_decimal(&text).map_err(serde::de::Error::custom)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

fn gcd128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}
