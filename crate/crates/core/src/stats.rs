//! One-sample, one-tailed Student t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "extended_f64")]
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub reject: bool,
}

/// `P(T > t)` for a Student-t variable with `df` degrees of freedom.
pub fn student_t_upper_tail(t: f64, df: usize) -> f64 {
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    dist.sf(t)
}

/// Tests `H0: mean ≤ mu0` against `mean > mu0`.
///
/// Zero-variance samples give `t = 0` when the mean equals `mu0` and `±∞`
/// otherwise; `p` follows from the limit.
pub fn t_test_head(samples: &[f64], mu0: f64, alpha: f64) -> Result<TTest> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let diff = mean - mu0;
    let t = if var > 0.0 {
        diff / (var.sqrt() / (n as f64).sqrt())
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let df = n - 1;
    let p = student_t_upper_tail(t, df);
    Ok(TTest {
        t,
        df,
        p,
        reject: p < alpha,
    })
}

/// JSON has no infinities; non-finite values travel as `"inf"`, `"-inf"` or
/// `"nan"`.
pub mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}
