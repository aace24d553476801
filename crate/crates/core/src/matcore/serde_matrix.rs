//! Serde adapters: matrices travel as JSON arrays of row arrays.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serializer};

use super::{from_rows, to_rows};

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&to_rows(m), ser)
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(de)?;
    from_rows(&rows).map_err(serde::de::Error::custom)
}

/// Same wire format for `Option<DMatrix<f64>>` fields.
pub mod opt {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, ser: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&m.as_ref().map(to_rows), ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(de)?;
        rows.map(|r| from_rows(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}
