//! Numeric helpers: compensated summation and the fixed-precision decimal
//! string format used for every number written to JSON.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pairwise (tree) summation. The reduction order depends only on the slice
/// length, which keeps Monte Carlo summaries bit-reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Formats with 17 significant digits, e.g. `1.5205479452054795e1`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{:.16e}", x)
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// A float serialized as a 17-significant-digit decimal string. Deserializes
/// from either a JSON number or such a string.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dec(pub f64);

impl Serialize for Dec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&fmt17(self.0))
    }
}

struct DecVisitor;

impl Visitor<'_> for DecVisitor {
    type Value = Dec;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or a decimal string")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Dec, E> {
        Ok(Dec(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Dec, E> {
        Ok(Dec(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Dec, E> {
        Ok(Dec(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Dec, E> {
        v.trim()
            .parse::<f64>()
            .map(Dec)
            .map_err(|_| E::custom(format!("invalid decimal string {v:?}")))
    }
}

impl<'de> Deserialize<'de> for Dec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Dec, D::Error> {
        d.deserialize_any(DecVisitor)
    }
}

/// `#[serde(with = "num::dec")]` for a plain `f64` field.
pub mod dec {
    use super::Dec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        Dec(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Dec::deserialize(d).map(|v| v.0)
    }
}

/// `#[serde(with = "num::dec_opt")]` for an `Option<f64>` field.
pub mod dec_opt {
    use super::Dec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        x.map(Dec).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Dec>::deserialize(d).map(|v| v.map(|x| x.0))
    }
}

/// `#[serde(with = "num::dec_vec")]` for a `Vec<f64>` field.
pub mod dec_vec {
    use super::Dec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
        x.iter().map(|v| Dec(*v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Dec>::deserialize(d).map(|v| v.into_iter().map(|x| x.0).collect())
    }
}

/// `#[serde(with = "num::dec_mat")]` for a `Vec<Vec<f64>>` field.
pub mod dec_mat {
    use super::Dec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        x.iter()
            .map(|row| row.iter().map(|v| Dec(*v)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<Dec>>::deserialize(d)
            .map(|m| m.into_iter().map(|r| r.into_iter().map(|x| x.0).collect()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_round_trips_bits() {
        for x in [0.1, 1.0 / 3.0, 15.205479452054795, -2.5e-300, 1e300] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt17(15.2), "1.5199999999999999e1");
    }

    #[test]
    fn dec_accepts_numbers_and_strings() {
        let v: Vec<Dec> = serde_json::from_str(r#"[1, 2.5, "3.0e0", " -4 "]"#).unwrap();
        assert_eq!(v, vec![Dec(1.0), Dec(2.5), Dec(3.0), Dec(-4.0)]);
        assert!(serde_json::from_str::<Dec>(r#""abc""#).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn pairwise_sum_matches_small_case() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }
}
