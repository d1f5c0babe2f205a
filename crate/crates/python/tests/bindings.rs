use pyo3::exceptions::PyValueError;
use pyo3::Python;
use spatial_motion::Error;
use spatial_motion_py::{matrix_from_rows, parse_genre, rows_of, to_py};

#[test]
fn rows_roundtrip_through_tensor() {
    let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let t = matrix_from_rows(&rows).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(rows_of(&t), rows);
}

#[test]
fn ragged_rows_rejected() {
    assert!(matrix_from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn genre_names_parse() {
    assert_eq!(parse_genre("neutral").unwrap().as_str(), "neutral");
    assert!(parse_genre("polka").is_err());
}

#[test]
fn errors_map_to_python_exceptions() {
    Python::attach(|py| {
        let e = to_py(Error::Index { index: 5, max: 2 });
        assert!(e.is_instance_of::<PyValueError>(py));
    });
}
