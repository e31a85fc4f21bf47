//! Exact rational helpers. Every cost, share and potential in the engine is a
//! `Rational`; floating point only appears when rendering for humans.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serializer};

pub type Rational = BigRational;

pub fn int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn frac(p: i64, q: i64) -> Rational {
    Rational::new(BigInt::from(p), BigInt::from(q))
}

/// `2^j` for any integer `j`.
pub fn pow2(j: i64) -> Rational {
    let mag = BigInt::one() << (j.unsigned_abs() as usize);
    if j >= 0 {
        Rational::from_integer(mag)
    } else {
        Rational::new(BigInt::one(), mag)
    }
}

/// The unique `j` with `2^j <= x < 2^(j+1)`. Panics on non-positive input.
pub fn floor_log2(x: &Rational) -> i64 {
    assert!(x.is_positive(), "floor_log2 of non-positive value");
    let est = x.numer().bits() as i64 - x.denom().bits() as i64;
    let mut j = est;
    while pow2(j) > *x {
        j -= 1;
    }
    while pow2(j + 1) <= *x {
        j += 1;
    }
    j
}

/// Smallest `j` with `x <= 2^j`.
pub fn ceil_log2(x: &Rational) -> i64 {
    let j = floor_log2(x);
    if pow2(j) == *x {
        j
    } else {
        j + 1
    }
}

/// `H_n = 1 + 1/2 + ... + 1/n`.
pub fn harmonic(n: u64) -> Rational {
    let mut acc = Rational::zero();
    for i in 1..=n {
        acc += Rational::new(BigInt::one(), BigInt::from(i));
    }
    acc
}

/// Always `p/q`, even for integers, so files are uniform.
pub fn to_pq(x: &Rational) -> String {
    format!("{}/{}", x.numer(), x.denom())
}

#[derive(Debug, thiserror::Error)]
#[error("malformed rational {0:?}")]
pub struct ParseRationalError(pub String);

/// Accepts `p/q`, `p` or a finite decimal such as `0.25`.
pub fn parse_rational(s: &str) -> Result<Rational, ParseRationalError> {
    let t = s.trim();
    let err = || ParseRationalError(s.to_string());
    if let Some((p, q)) = t.split_once('/') {
        let p: BigInt = p.trim().parse().map_err(|_| err())?;
        let q: BigInt = q.trim().parse().map_err(|_| err())?;
        if q.is_zero() {
            return Err(err());
        }
        return Ok(Rational::new(p, q));
    }
    if let Some((whole, dec)) = t.split_once('.') {
        if dec.is_empty() || !dec.chars().all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let neg = whole.starts_with('-');
        let w: BigInt = if whole.is_empty() || whole == "-" {
            BigInt::zero()
        } else {
            whole.parse().map_err(|_| err())?
        };
        let d: BigInt = dec.parse().map_err(|_| err())?;
        let scale = num_traits::pow(BigInt::from(10), dec.len());
        let mag = w.abs() * &scale + d;
        let v = Rational::new(mag, scale);
        return Ok(if neg { -v } else { v });
    }
    let p: BigInt = t.parse().map_err(|_| err())?;
    Ok(Rational::from_integer(p))
}

/// Decimal rendering rounded half-up to `digits` places.
pub fn to_decimal(x: &Rational, digits: usize) -> String {
    let scale = num_traits::pow(BigInt::from(10), digits);
    let neg = x.is_negative();
    let scaled = x.abs() * Rational::from_integer(scale.clone());
    let rounded = (scaled + frac(1, 2)).floor().to_integer();
    let (whole, rem) = rounded.div_rem(&scale);
    let sign = if neg && !rounded.is_zero() { "-" } else { "" };
    if digits == 0 {
        return format!("{sign}{whole}");
    }
    format!("{sign}{whole}.{:0>width$}", rem.to_string(), width = digits)
}

pub fn to_f64(x: &Rational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// serde adapter: rationals travel as `"p/q"` strings.
pub mod pq {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_pq(x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }
}

pub mod pq_opt {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => s.serialize_some(&to_pq(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| parse_rational(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
