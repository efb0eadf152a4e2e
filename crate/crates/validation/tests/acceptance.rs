//! One PASS/FAIL line per criterion; exits nonzero when any is red.

use std::process::ExitCode;

use crhlab_validation::run_all;

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let verdicts = run_all(tmp.path(), |v| {
        println!("{} criterion {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.criterion, v.detail);
    });
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.criterion).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
