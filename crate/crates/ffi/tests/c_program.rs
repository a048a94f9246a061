//! Compile and run a C program against the generated header and the static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "gcdyn.h"

int main(void) {
    GcdynConfig *cfg = NULL;
    if (gcdyn_config_new("[algorithm]\nsteps = 4\n", &cfg) != GCDYN_STATUS_OK) return 1;
    char hash[65];
    if (gcdyn_config_hash(cfg, hash, sizeof hash) != GCDYN_STATUS_OK || strlen(hash) != 64) return 2;
    if (gcdyn_config_set(cfg, "size.m") != GCDYN_STATUS_CONFIG) return 3;
    if (strlen(gcdyn_last_error()) == 0) return 4;
    double lambda[4], big[16];
    if (gcdyn_momentum_coefficients(0.2, 0.0, 4, lambda, big) != GCDYN_STATUS_OK) return 5;
    printf("%.3f %.3f\n", lambda[3], big[1 * 4 + 0]);
    gcdyn_config_free(cfg);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // The test binary sits in target/<profile>/deps, next to the archive cargo
    // builds for this run; the copy one level up is only refreshed by `cargo build`.
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libgcdyn_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit status {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1.000 0.200\n");
}
