//! End-to-end tests of the `fedlora` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlora")).args(args).output().expect("spawn fedlora")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const HOMOG: &str = "kind = theory-homog\nd = 10\nm = 200\nn_clients = 4\nb_norm = 1\ndelta0 = 0.5\neta = 0.5\niterations = 12\nseeds = 1,2\n";

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn run_writes_traces_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/out");
    let cfg = write_config(tmp.path(), "homog.conf", HOMOG);
    let res = fedlora(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(csv_files(&out), ["altmin-gd_seed1.csv", "altmin-gd_seed2.csv", "summary.csv"]);
    let trace = fs::read_to_string(out.join("altmin-gd_seed1.csv")).unwrap();
    assert!(trace.starts_with("round,trained_factor,global_loss,angle_distance,test_accuracy,elapsed_ms,"));
    assert_eq!(trace.lines().count(), 13);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(out.join("summary.csv")).unwrap());
    assert!(stdout.lines().nth(1).unwrap().starts_with("altmin-gd,2,"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cmp.conf",
        "kind = compare-protocols\ntask = linear\nstrategy = rolora\nstrategy = flora\nd = 8\nrank = 2\nn_clients = 4\n\
         m = 50\ngamma = 0.2\nrounds = 6\neta = 0.05\nseeds = 3\n",
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(fedlora(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(fedlora(&["run", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--workers", "4"]).status.success());
    let names = csv_files(&a);
    assert_eq!(names, csv_files(&b));
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn seeds_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "homog.conf", HOMOG);
    let res = fedlora(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "7,8,9"]);
    assert!(res.status.success());
    assert_eq!(csv_files(&out), ["altmin-gd_seed7.csv", "altmin-gd_seed8.csv", "altmin-gd_seed9.csv", "summary.csv"]);
}

#[test]
fn invalid_config_exits_1_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.conf", "kind = compare-protocols\nstrategy = sgd\n");
    let res = fedlora(&["run", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("strategy"));

    let cfg = write_config(tmp.path(), "typo.conf", "kind = theory-homog\nrounds 5\n");
    let res = fedlora(&["run", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
}

#[test]
fn unusable_paths_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.conf");
    assert_eq!(fedlora(&["run", missing.to_str().unwrap()]).status.code(), Some(2));

    // a regular file where the output directory should go
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), "homog.conf", HOMOG);
    let out = blocker.join("sub");
    assert_eq!(fedlora(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "div.conf",
        "kind = compare-protocols\ntask = linear\nstrategy = fedavg-lora\nd = 8\nrank = 2\nn_clients = 3\nm = 40\n\
         rounds = 50\neta = 50\nb_init_std = 1\n",
    );
    let res = fedlora(&["run", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn verify_reports_one_line_per_check() {
    let res = fedlora(&["verify"]);
    let stdout = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    let checks = &lines[..lines.len() - 1];
    assert_eq!(checks.len(), 8);
    assert!(checks.iter().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")));
    let failed = checks.iter().filter(|l| l.starts_with("FAIL ")).count();
    assert_eq!(lines.last().unwrap(), &format!("{} passed, {failed} failed", 8 - failed));
    assert_eq!(res.status.success(), failed == 0);
}
