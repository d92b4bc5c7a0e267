//! The process backends: agents are real `pt agent` subprocesses joined
//! over TCP, either spawned directly or through a remote-shell template.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use ptools::cluster::Cluster;
use ptools::distrib::{ptdistrib, DistribConfig};
use ptools::exec::{run_on_all, CommandSpec};
use ptools::hostspec::expand_pattern;
use ptools::node::Fault;
use ptools::predicates::{pttest, TestMode};
use ptools::ptcopy::{ptcp, CopyArgs};
use ptools::transport::{Backend, LaunchOptions};

const PT: &str = env!("CARGO_BIN_EXE_pt");

fn local_cluster(base: &Path) -> Cluster {
    let mut o = LaunchOptions::sim(base).with_backend(Backend::LocalProc);
    o.agent_program = Some(PathBuf::from(PT));
    Cluster::new(o)
}

/// An `ssh` stand-in: logs the host, then runs the command line locally.
fn fake_ssh(dir: &Path) -> PathBuf {
    let p = dir.join("fakessh");
    let log = dir.join("ssh.log");
    fs::write(
        &p,
        format!(
            "#!/bin/sh\nhost=\"$1\"; shift\necho \"$host\" >> '{}'\nexec sh -c \"$*\"\n",
            log.display()
        ),
    )
    .unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}

#[test]
fn local_processes_run_commands_in_their_sandboxes() {
    let d = tempfile::tempdir().unwrap();
    let cluster = local_cluster(d.path());
    let hosts = expand_pattern("p%d@1-3").unwrap();
    let out = run_on_all(
        &cluster,
        &hosts,
        &CommandSpec::new(vec!["hostname".into()], true).unwrap(),
    )
    .unwrap();
    assert_eq!(out.report.aggregate, 0, "{:?}", out.report);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "[p1]\np1\n[p2]\np2\n[p3]\np3\n"
    );

    let boxes = cluster.prepare(&hosts).unwrap();
    fs::write(boxes[1].fs_root().join("flag"), "").unwrap();
    let args = vec!["-f".to_string(), "flag".to_string()];
    assert_eq!(
        pttest(&cluster, &hosts, TestMode::Or, &args)
            .unwrap()
            .exit_code(),
        0
    );
    assert_eq!(
        pttest(&cluster, &hosts, TestMode::And, &args)
            .unwrap()
            .exit_code(),
        1
    );
}

#[test]
fn local_processes_copy_a_multi_chunk_file() {
    let d = tempfile::tempdir().unwrap();
    let cluster = local_cluster(&d.path().join("nodes"));
    let hosts = expand_pattern("p%d@1-5").unwrap();
    let src = d.path().join("data.bin");
    let data: Vec<u8> = (0..300_000u32).map(|i| (i * 7 % 251) as u8).collect();
    fs::write(&src, &data).unwrap();
    let args = CopyArgs {
        chunk_size: 32 * 1024,
        sources: vec![src.display().to_string()],
        dest: "/copy.bin".into(),
        ..Default::default()
    };
    let r = ptcp(&cluster, &hosts, &args).unwrap();
    assert_eq!(r.report.aggregate, 0, "{:?}", r.report);
    for h in hosts.iter() {
        assert_eq!(
            fs::read(cluster.sandbox(h).fs_root().join("copy.bin")).unwrap(),
            data,
            "{h}"
        );
    }
}

#[test]
fn local_processes_honour_write_faults() {
    let d = tempfile::tempdir().unwrap();
    let mut cluster = local_cluster(&d.path().join("nodes"));
    cluster.opts = cluster.opts.clone().with_fault("p2", Fault::FailWrites);
    let hosts = expand_pattern("p%d@1-3").unwrap();
    let src = d.path().join("f");
    fs::write(&src, b"abc").unwrap();
    let args = CopyArgs {
        sources: vec![src.display().to_string()],
        dest: "/f".into(),
        ..Default::default()
    };
    let r = ptcp(&cluster, &hosts, &args).unwrap();
    assert_eq!(r.report.aggregate, 1);
    let failed: Vec<&str> = r.report.failures().map(|h| h.host.as_str()).collect();
    assert_eq!(failed, ["p2"]);
    assert!(cluster.sandbox("p3").fs_root().join("f").exists());
}

#[test]
fn local_processes_distribute_jobs() {
    let d = tempfile::tempdir().unwrap();
    let cluster = local_cluster(&d.path().join("nodes"));
    let hosts = expand_pattern("p%d@1-2").unwrap();
    let files: Vec<PathBuf> = (0..5)
        .map(|i| {
            let p = d.path().join(format!("in{i}.txt"));
            fs::write(&p, format!("job {i}\n")).unwrap();
            p
        })
        .collect();
    let r = ptdistrib(
        &cluster,
        &hosts,
        "cat {}",
        &files,
        &DistribConfig::default(),
    )
    .unwrap();
    assert_eq!(r.report.aggregate, 0, "{:?}", r.report);
    for (i, j) in r.jobs.iter().enumerate() {
        assert_eq!(j.stdout, format!("job {i}\n").into_bytes());
    }
}

#[test]
fn remote_shell_template_starts_agents() {
    let d = tempfile::tempdir().unwrap();
    let ssh = fake_ssh(d.path());
    let out = Command::new(PT)
        .args(["ptexec", "-M", "r%d@1-3", "-h", "echo", "hello"])
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_default())
        .env(
            "PT_REMOTE_SHELL",
            format!("{} {{host}} {{cmd}}", ssh.display()),
        )
        .env("PT_ADVERTISE_HOST", "127.0.0.1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // every agent runs on this machine, so each reports the same real hostname
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "{text}");
    assert!(lines.iter().skip(1).step_by(2).all(|l| *l == "hello"));
    let mut logged: Vec<String> = fs::read_to_string(d.path().join("ssh.log"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    logged.sort();
    assert_eq!(logged, ["r1", "r2", "r3"]);
}

#[test]
fn remote_shell_copies_to_native_paths() {
    let d = tempfile::tempdir().unwrap();
    let ssh = fake_ssh(d.path());
    let src = d.path().join("src.txt");
    fs::write(&src, "config\n").unwrap();
    let dest = d.path().join("out.txt");
    let out = Command::new(PT)
        .args(["ptcp", "-M", "r1"])
        .arg(&src)
        .arg(&dest)
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_default())
        .env("PT_BACKEND", "remote")
        .env(
            "PT_REMOTE_SHELL",
            format!("{} {{host}} {{cmd}}", ssh.display()),
        )
        .env("PT_ADVERTISE_HOST", "127.0.0.1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(fs::read_to_string(dest).unwrap(), "config\n");
}

#[test]
fn unreachable_remote_host_fails_the_launch() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(PT)
        .args(["ptexec", "-M", "r1", "true"])
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_default())
        .env("PT_REMOTE_SHELL", "false {host} {cmd}")
        .env("PT_ADVERTISE_HOST", "127.0.0.1")
        .env("PT_TIMEOUT", "5")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
