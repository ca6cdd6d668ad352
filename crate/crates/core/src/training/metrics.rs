use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TrainError;

/// Regression metrics. `r2` is negative infinity when the labels are
/// constant and the residuals are not; JSON carries it as `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    #[serde(serialize_with = "ser_r2", deserialize_with = "de_r2")]
    pub r2: f64,
}

fn ser_r2<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if *v == f64::NEG_INFINITY {
        s.serialize_str("-inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_r2<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum R2 {
        Num(f64),
        Text(String),
    }
    match R2::deserialize(d)? {
        R2::Num(v) => Ok(v),
        R2::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        R2::Text(t) => Err(serde::de::Error::custom(format!("invalid r2 `{t}`"))),
    }
}

pub fn metrics(predicted: &[f64], actual: &[f64]) -> Result<Metrics, TrainError> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(TrainError::Config(format!(
            "metrics need equal non-empty inputs, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    let mut ss_tot = 0.0;
    for (&p, &y) in predicted.iter().zip(actual) {
        ss_res += (p - y) * (p - y);
        abs += (p - y).abs();
        ss_tot += (y - mean) * (y - mean);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(Metrics {
        rmse: (ss_res / n).sqrt(),
        mae: abs / n,
        r2,
    })
}
