//! The `pt` binary as users run it: multi-call names, the environment,
//! pipelines between commands and exit statuses.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use ptools::cli::{EXTRA_COMMANDS, TABLE_COMMANDS};

const PT: &str = env!("CARGO_BIN_EXE_pt");

fn pt(root: &Path) -> Command {
    let mut c = Command::new(PT);
    c.env_clear().env("PT_SIM_ROOT", root);
    c
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_stdin(mut c: Command, input: &str) -> Output {
    let mut child = c
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn installed_links_act_as_commands() {
    let d = tempfile::tempdir().unwrap();
    let bin = d.path().join("bin");
    let out = pt(d.path())
        .args(["install-links"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success());
    for c in TABLE_COMMANDS.iter().chain(EXTRA_COMMANDS) {
        assert!(bin.join(c).exists(), "{c}");
    }
    let out = Command::new(bin.join("ptexec"))
        .env_clear()
        .env("PT_SIM_ROOT", d.path().join("nodes"))
        .args(["-M", "node%d@1-3", "hostname"])
        .output()
        .unwrap();
    assert_eq!(text(&out), "node1\nnode2\nnode3\n");
}

#[test]
fn every_table_command_runs_from_the_binary() {
    let d = tempfile::tempdir().unwrap();
    let nodes = d.path().join("nodes");
    let run = |args: &[&str]| pt(&nodes).args(args).output().unwrap();
    let m = ["-M", "n%d@1-2"];
    let with = |rest: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec![];
        v.extend(rest[..1].iter().map(|s| s.to_string()));
        v.extend(m.iter().map(|s| s.to_string()));
        v.extend(rest[1..].iter().map(|s| s.to_string()));
        v
    };
    let src = d.path().join("src.txt");
    fs::write(&src, "hi\n").unwrap();
    let src = src.display().to_string();
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["ptmkdir", "d"], 0),
        (vec!["ptcp", &src, "/d"], 0),
        (vec!["ptchmod", "600", "d/src.txt"], 0),
        (vec!["ptchgrp", "0", "d/src.txt"], 0),
        (vec!["ptchown", "0", "d/src.txt"], 0),
        (vec!["ptln", "-s", "d/src.txt", "link"], 0),
        (vec!["ptls", "d"], 0),
        (vec!["ptcat", "d/src.txt"], 0),
        (vec!["ptfind", "d"], 0),
        (vec!["pttest", "-L", "link"], 0),
        (vec!["pttesta", "-f", "d/src.txt"], 0),
        (vec!["pttesto", "-d", "nowhere"], 1),
        (vec!["ptpred", "-d d"], 0),
        (vec!["ptexec", "echo", "x"], 0),
        (vec!["ptfps", "-user", "nobody"], 0),
        (vec!["ptkillall", "nothing-runs-here"], 1),
        (vec!["ptdistrib", "cat", &src], 0),
        (vec!["ptmv", &src, "/d/moved.txt"], 0),
        (vec!["ptrm", "link", "d/src.txt", "d/moved.txt"], 0),
        (vec!["ptrmdir", "d"], 0),
    ];
    let covered: Vec<&str> = cases.iter().map(|(a, _)| a[0]).collect();
    for c in TABLE_COMMANDS {
        assert!(covered.contains(c), "{c} not exercised");
    }
    for (args, want) in &cases {
        let argv = with(args);
        let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
        let out = run(&refs);
        assert_eq!(
            out.status.code(),
            Some(*want),
            "{argv:?}\nstdout: {}\nstderr: {}",
            text(&out),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(!Path::new(&src).exists(), "ptmv left its source");
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["ptls"][..],
        &["ptexec", "-M", "a@1"],
        &["ptexec", "-M", "n%d@3-1", "true"],
        &["ptcp", "-M", "n1", "only-one-arg"],
        &["ptdisp", "-x"],
        &["no-such-command"],
        &["pttesta", "-M", "n1", "(", "-f", "a"],
    ] {
        let out = pt(d.path()).args(args).output().unwrap();
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn help_is_printed_for_each_command() {
    let d = tempfile::tempdir().unwrap();
    let out = pt(d.path()).args(["ptexec", "--help"]).output().unwrap();
    assert!(out.status.success());
    assert!(text(&out).contains("-h"));
    let out = pt(d.path()).args(["help"]).output().unwrap();
    for c in TABLE_COMMANDS {
        assert!(text(&out).contains(c), "{c}");
    }
}

#[test]
fn machine_file_environment_wins() {
    let d = tempfile::tempdir().unwrap();
    let mf = d.path().join("machines");
    fs::write(&mf, "h1\n# comment\n\nh2\n").unwrap();
    let out = pt(d.path())
        .env("PT_MACHINE_FILE", &mf)
        .args(["enumnodes", "-M", "x%d@1-9"])
        .output()
        .unwrap();
    // the -M argument is neither used nor consumed, so it is left over
    assert_eq!(out.status.code(), Some(2));
    let out = pt(d.path())
        .env("PT_MACHINE_FILE", &mf)
        .args(["ptexec", "hostname"])
        .output()
        .unwrap();
    assert_eq!(text(&out), "h1\nh2\n");
}

#[test]
fn all_hosts_come_from_the_configuration_file() {
    let d = tempfile::tempdir().unwrap();
    let all = d.path().join("all");
    fs::write(&all, "a\nb\nc\n").unwrap();
    let out = pt(d.path())
        .env("PT_ALL_HOSTS_FILE", &all)
        .args(["enumnodes", "-all"])
        .output()
        .unwrap();
    assert_eq!(text(&out), "a\nb\nc\n");
    let out = pt(d.path())
        .env("HOME", d.path())
        .args(["enumnodes", "-all"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn headers_pipe_into_spread() {
    let d = tempfile::tempdir().unwrap();
    let nodes = d.path().join("nodes");
    assert!(pt(&nodes)
        .args(["ptexec", "-M", "n%d@1-3", "mkdir", "x"])
        .status()
        .unwrap()
        .success());
    assert!(pt(&nodes)
        .args(["ptexec", "-M", "n2", "mkdir", "x/y"])
        .status()
        .unwrap()
        .success());
    let ls = pt(&nodes)
        .args(["ptls", "-M", "n%d@1-3", "-h", "x"])
        .output()
        .unwrap();
    assert_eq!(text(&ls), "[n1]\n[n2]\ny\n[n3]\n");
    let mut sp = pt(&nodes);
    sp.arg("ptspread");
    let out = with_stdin(sp, &text(&ls));
    assert_eq!(text(&out), "n2:  y\n");
}

#[test]
fn streaming_exec_prefixes_lines() {
    let d = tempfile::tempdir().unwrap();
    let out = pt(d.path())
        .args(["ptexec", "-M", "a b", "-h", "-s", "echo", "one"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let mut lines: Vec<String> = text(&out).lines().map(String::from).collect();
    lines.sort();
    assert_eq!(lines, ["a:  one", "b:  one"]);
}

#[test]
fn ptdisp_without_a_terminal_prints_final_cells() {
    let d = tempfile::tempdir().unwrap();
    let nodes = d.path().join("nodes");
    let hosts = ["-M", "node%d@1-3"];
    assert!(pt(&nodes)
        .args(["ptexec", "-M", "node2", "mkdir", "m"])
        .status()
        .unwrap()
        .success());
    let pred = pt(&nodes)
        .arg("ptpred")
        .args(hosts)
        .args(["-d m", "color black green", "color black red"])
        .output()
        .unwrap();
    let mut disp = pt(&nodes);
    disp.args(["ptdisp", "-c", "-t", "Where m exists"]);
    let input = format!("$LEGEND$: yes black green no black red\n{}", text(&pred));
    let out = with_stdin(disp, &input);
    assert!(out.status.success());
    assert_eq!(
        text(&out),
        "$LEGEND$: yes black green no black red\n\
         node1: color black red\n\
         node2: color black green\n\
         node3: color black red\n"
    );
}

#[test]
fn injected_faults_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = pt(d.path())
        .env("PT_SIM_FAULTS", "n2=dead")
        .args(["ptping", "-M", "n%d@1-3"])
        .output()
        .unwrap();
    assert_eq!(text(&out), "n1: 1\nn2: 0\nn3: 1\n");
    assert_eq!(out.status.code(), Some(1));
    let out = pt(d.path())
        .env("PT_SIM_FAULTS", "n2=dead")
        .args(["ptexec", "-M", "n%d@1-3", "true"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
