//! Matrix interchange formats.
//!
//! JSON: `{"rows": r, "cols": c, "data": [row-major doubles]}`. CSV: headerless,
//! one matrix row per line.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::densela::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixJson> for Matrix {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Matrix> {
        if j.rows == 0 || j.cols == 0 {
            return Err(Error::Dimension(
                "matrix must have positive dimensions".into(),
            ));
        }
        if j.data.len() != j.rows * j.cols {
            return Err(Error::Dimension(format!(
                "data has {} entries, expected {}x{} = {}",
                j.data.len(),
                j.rows,
                j.cols,
                j.rows * j.cols
            )));
        }
        if j.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("matrix entries must be finite".into()));
        }
        Ok(Matrix::from_row_slice(j.rows, j.cols, &j.data))
    }
}

/// Serde adapter for `Matrix` fields using the JSON schema above.
pub mod matrix_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        Matrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

pub fn matrix_to_json(m: &Matrix) -> String {
    serde_json::to_string(&MatrixJson::from(m)).expect("matrix serialization cannot fail")
}

pub fn matrix_from_json(s: &str) -> Result<Matrix> {
    Matrix::try_from(serde_json::from_str::<MatrixJson>(s)?)
}

/// Reads a headerless CSV matrix.
pub fn matrix_from_csv<R: Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if cols.is_some_and(|c| c != rec.len()) {
            return Err(Error::Dimension(format!(
                "row {} has {} entries, expected {}",
                line + 1,
                rec.len(),
                cols.unwrap()
            )));
        }
        cols = Some(rec.len());
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Input(format!("row {}: cannot parse {field:?}", line + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::try_from(MatrixJson {
        rows,
        cols: cols.unwrap_or(0),
        data,
    })
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_layout_is_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(
            matrix_to_json(&m),
            r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            matrix_from_json(r#"{"rows":2,"cols":2,"data":[1,2,3]}"#),
            Err(Error::Dimension(_))
        ));
        assert!(matrix_from_csv("1,2\n3\n".as_bytes()).is_err());
    }

    #[test]
    fn reads_csv() {
        let m = matrix_from_csv("-1, 0.5\n0,-2\n".as_bytes()).unwrap();
        assert_eq!(m, Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]));
    }

    proptest! {
        #[test]
        fn json_and_csv_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, 0);
            let m = crate::densela::gaussian_matrix(&mut rng, rows, cols);
            prop_assert_eq!(matrix_from_json(&matrix_to_json(&m)).unwrap(), m.clone());
            prop_assert_eq!(matrix_from_csv(matrix_to_csv(&m).as_bytes()).unwrap(), m);
        }
    }
}
