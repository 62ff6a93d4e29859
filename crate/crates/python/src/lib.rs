use pyo3::prelude::*;

#[pymodule]
fn anchor_da_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
