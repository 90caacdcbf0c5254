//! Python bindings for the planning-side surface of emo-core.

use pyo3::prelude::*;

#[pymodule]
fn emo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let _ = m;
    Ok(())
}
