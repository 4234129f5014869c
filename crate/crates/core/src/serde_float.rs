//! JSON encoding for floats that may be non-finite.
//!
//! Finite values stay numbers; `inf`, `-inf` and `NaN` become strings so
//! sentinels survive a round trip.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Wire {
    Num(f64),
    Text(String),
}

fn to_wire(v: f64) -> Wire {
    if v.is_finite() {
        Wire::Num(v)
    } else {
        Wire::Text(v.to_string())
    }
}

fn from_wire<E: serde::de::Error>(w: Wire) -> Result<f64, E> {
    match w {
        Wire::Num(v) => Ok(v),
        Wire::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "NaN" => Ok(f64::NAN),
            other => Err(E::custom(format!("not a float: `{other}`"))),
        },
    }
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    to_wire(*v).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    from_wire(Wire::deserialize(d)?)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_wire(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Wire>::deserialize(d)?.into_iter().map(from_wire).collect()
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Serialize, Deserialize)]
    struct T {
        #[serde(with = "super")]
        a: f64,
        #[serde(with = "super::vec")]
        b: Vec<f64>,
    }

    #[test]
    fn round_trips_sentinels() {
        let t = T {
            a: f64::NEG_INFINITY,
            b: vec![1.5, f64::INFINITY, f64::NAN],
        };
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"a":"-inf","b":[1.5,"inf","NaN"]}"#);
        let back: T = serde_json::from_str(&json).unwrap();
        assert_eq!(back.a, f64::NEG_INFINITY);
        assert_eq!(back.b[1], f64::INFINITY);
        assert!(back.b[2].is_nan());
    }
}
