use std::path::Path;
use std::process::Command;

mod common;

const PROGRAM: &str = r#"
#include "densecap.h"
#include <stdio.h>

int main(int argc, char **argv) {
    DcModel *model = NULL;
    DcVideo *video = NULL;
    if (argc < 3 || dc_model_load(argv[1], &model) != DC_STATUS_OK
        || dc_video_load(argv[2], &video) != DC_STATUS_OK) {
        const char *err = dc_last_error();
        fprintf(stderr, "%s\n", err ? err : "usage");
        return 1;
    }
    DcProposal props[64];
    size_t count = 0;
    DcStatus s = dc_propose(model, video, props, 64, &count);
    char caption[256];
    size_t needed = 0;
    DcStatus c = dc_caption_segment(model, video, 1.0, 6.0, caption, sizeof caption, &needed);
    printf("%d %zu %d %.3f\n", (int)s, count, (int)c, dc_tiou(0.0, 2.0, 1.0, 3.0));
    dc_video_free(video);
    dc_model_free(model);
    return 0;
}
"#;

#[test]
fn generated_header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("densecap.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, PROGRAM).unwrap();
    for (compiler, extra) in [("cc", &["-std=c11"][..]), ("c++", &["-x", "c++"][..])] {
        let out = Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&include)
            .arg(&src)
            .output()
            .unwrap_or_else(|e| panic!("{compiler} not runnable: {e}"));
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libdensecap_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    let bin = dir.path().join("probe");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .args(["-std=c11", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = Command::new(&bin)
        .arg(f.ckpt.to_str().unwrap())
        .arg(f.video.to_str().unwrap())
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], "0");
    assert!(fields[1].parse::<usize>().unwrap() > 0);
    assert_eq!(fields[2], "0");
    assert_eq!(fields[3], "0.333");

    let bad = Command::new(&bin).arg("/nonexistent").arg("x").output().unwrap();
    assert!(!bad.status.success());
    assert!(!bad.stderr.is_empty());
}
