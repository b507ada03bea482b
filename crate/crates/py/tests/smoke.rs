use std::process::Command;

/// Runs python/smoke_test.py against the installed extension. Skipped when
/// `uvit_py` has not been built into the active interpreter.
#[test]
fn python_smoke_script() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let probe = Command::new("python3").args(["-c", "import uvit_py"]).output();
    match probe {
        Ok(o) if o.status.success() => {}
        _ => {
            eprintln!("skipping: uvit_py is not importable (pip install --no-build-isolation -e crates/py)");
            return;
        }
    }
    let out = Command::new("python3")
        .arg(format!("{dir}/python/smoke_test.py"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("smoke test ok"));
}
