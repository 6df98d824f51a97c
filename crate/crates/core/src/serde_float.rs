//! Serde adapters writing non-finite floats as `null` and reading `null` back
//! as NaN, so diverged traces survive a JSON round trip.

use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn wire(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        wire(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub mod seq {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(|x| wire(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NAN))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct T {
        #[serde(with = "scalar")]
        a: f64,
        #[serde(with = "seq")]
        b: Vec<f64>,
    }

    #[test]
    fn non_finite_round_trips_as_nan() {
        let t = T {
            a: f64::INFINITY,
            b: alloc::vec![1.5, f64::NAN],
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"a":null,"b":[1.5,null]}"#);
        let back: T = serde_json::from_str(&s).unwrap();
        assert!(back.a.is_nan() && back.b[0] == 1.5 && back.b[1].is_nan());
    }
}
