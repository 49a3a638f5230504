//! Dense-vector helpers and serde adapters for nalgebra types.

use nalgebra::{DMatrix, DVector};

pub(crate) fn is_identity(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && m.iter().enumerate().all(|(idx, &v)| {
            let (r, c) = (idx % m.nrows(), idx / m.nrows());
            if r == c {
                v == 1.0
            } else {
                v == 0.0
            }
        })
}

pub(crate) fn all_nonneg(xs: impl IntoIterator<Item = f64>) -> bool {
    xs.into_iter().all(|v| v >= 0.0 && v.is_finite())
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from row vectors; `ncols_hint` is used when there are no rows.
pub(crate) fn from_rows(rows: &[Vec<f64>], ncols_hint: usize) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(ncols_hint, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Some(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub(crate) mod serde_vector {
    use super::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub(crate) mod serde_matrix {
    use super::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::rows_of(m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, 0).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_detection() {
        assert!(is_identity(&DMatrix::identity(3, 3)));
        assert!(!is_identity(&DMatrix::identity(2, 3)));
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = 1e-300;
        assert!(!is_identity(&m));
    }

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_rows(&rows_of(&m), 3).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]], 0).is_none());
    }
}
