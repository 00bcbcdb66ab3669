//! Runs every `frk` subcommand once into a directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

pub fn frk(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_frk"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn frk")
}

pub fn frk_ok(dir: &Path, args: &[&str]) {
    let out = frk(dir, args);
    assert!(
        out.status.success(),
        "frk {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SINGLE_CFG: &str = "tau = 260.0\nseed = 4\nk_folds = 3\nresolution = 50.0\ntx = [250.0, 250.0]\n\n[em]\nmax_iter = 80\n";

/// Runs the whole pipeline with fixed seeds and returns every structured
/// output by file name.
pub fn run_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("run.toml"), SINGLE_CFG).unwrap();
    let sim = |scenario: &str, out: &str| {
        frk_ok(
            dir,
            &["simulate", "--scenario", scenario, "--seed", "11", "--n", "600", "--width", "800", "--height", "700", "--tx", "250,250", "--tau-truth", "200", "--out", out],
        )
    };
    sim("frk", "frk.csv");
    sim("lognormal", "lognormal.csv");

    let c = ["--config", "run.toml", "--input", "frk.csv"];
    let with = |extra: &[&str]| -> Vec<String> { c.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |sub: &str, extra: &[&str]| {
        let mut args = vec![sub.to_string()];
        args.extend(with(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        frk_ok(dir, &refs);
    };
    run("fit", &["--model-out", "model.json", "--trace-out", "trace.json"]);
    run("fit-moments", &["--report-out", "moments.json"]);
    run("crossval", &["--report-out", "cv_frk.json"]);
    run("crossval", &["--method", "lognormal", "--report-out", "cv_lognormal.json"]);
    run("diagnose", &["--report-out", "diagnose.json"]);
    frk_ok(dir, &["predict", "--config", "run.toml", "--model", "model.json", "--out", "grid.csv", "--bbox", "0,0,800,700"]);

    frk_ok(
        dir,
        &["simulate", "--scenario", "multicell", "--seed", "5", "--grid-step", "100", "--out", "cells.csv", "--layout-out", "layout.toml"],
    );
    let mut layout = std::fs::read_to_string(dir.join("layout.toml")).unwrap();
    layout.push_str("\n[em]\nmax_iter = 40\n");
    std::fs::write(dir.join("layout.toml"), layout).unwrap();
    frk_ok(dir, &["multicell-fit", "--config", "layout.toml", "--input", "cells.csv", "--tau", "600", "--model-out", "cells.json"]);
    frk_ok(
        dir,
        &["multicell-predict", "--model", "cells.json", "--resolution", "250", "--out", "cells_grid.csv", "--eval", "cells.csv", "--report-out", "cells_report.json"],
    );

    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    files
}
