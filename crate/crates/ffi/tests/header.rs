//! The generated C header must stand alone under a C compiler.

use std::path::Path;
use std::process::Command;

#[test]
fn generated_header_compiles_as_c() {
    let include_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include_dir.join("iondet.h");
    assert!(header.exists(), "header not generated: {}", header.display());

    let tu = r#"
#include "iondet.h"
int probe(void) {
    IondetRateModel *m = iondet_rate_model_new(106e3, 38e3, 25e-6, 2.564, 1.2);
    IondetOutcome out;
    unsigned int counts[4] = {3, 2, 4, 1};
    IondetStatus s = iondet_classify_mle(m, counts, 4, 0.5, &out);
    iondet_rate_model_free(m);
    return (int)s + out.bright;
}
"#;
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, tu).unwrap();
    let compiler = ["cc", "clang", "gcc"]
        .iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .expect("no C compiler available");
    let output = Command::new(compiler)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-I")
        .arg(&include_dir)
        .arg(&src)
        .output()
        .expect("compiler invocation");
    assert!(
        output.status.success(),
        "header failed to compile:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}
