use pyo3::prelude::*;

#[pymodule]
fn stproto(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
