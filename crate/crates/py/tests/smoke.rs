use pyo3::prelude::*;
use pyo3::types::PyDict;
use hvae::hvae;

/// Runs python/smoke_test.py against this build of the module, registered
/// as a builtin so an installed wheel cannot shadow it.
#[test]
fn python_smoke_script_passes() {
    pyo3::append_to_inittab!(hvae);
    pyo3::prepare_freethreaded_python();
    let script = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../python/smoke_test.py")).unwrap();
    Python::with_gil(|py| {
        let has_numpy = py.import_bound("numpy").is_ok();
        if !has_numpy {
            eprintln!("numpy unavailable; running the numpy-free checks only");
        }
        let globals = PyDict::new_bound(py);
        globals.set_item("__name__", "hvae_smoke").unwrap();
        py.run_bound(&script_without_numpy(&script, has_numpy), Some(&globals), None)
            .unwrap_or_else(|e| panic!("{e}\n{}", e.traceback_bound(py).map(|t| t.format().unwrap()).unwrap_or_default()));
        let module = py.import_bound("hvae").unwrap();
        let origin: String = module.getattr("__name__").unwrap().extract().unwrap();
        assert_eq!(origin, "hvae");
        let call = if has_numpy { "main()" } else { "check_math()" };
        py.run_bound(call, Some(&globals), None)
            .unwrap_or_else(|e| panic!("{e}\n{}", e.traceback_bound(py).map(|t| t.format().unwrap()).unwrap_or_default()));
    });
}

fn script_without_numpy(script: &str, has_numpy: bool) -> String {
    if has_numpy {
        script.to_string()
    } else {
        script.replace("import numpy as np", "np = None")
    }
}
