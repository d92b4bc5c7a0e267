//! `ptexec` and the commands that wrap a single Unix command (`ptrm`,
//! `ptls`, ...): run on every node, collect output at the orchestrator.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::builtins::NodeShell;
use crate::cluster::{Cluster, Role};
use crate::collectives::{gather, reduce, ReduceOp};
use crate::error::{decode, encode, PtError};
use crate::hostspec::HostSet;
use crate::node::NodeContext;
use crate::textdisp::format_headers;
use crate::transport::{NodeGroup, Rank};

/// Tag of streamed output pieces.
const STREAM_TAG: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub argv: Vec<String>,
    pub headers: bool,
}

impl CommandSpec {
    pub fn new(argv: Vec<String>, headers: bool) -> Result<Self, PtError> {
        if argv.is_empty() {
            return Err(PtError::usage("no command given"));
        }
        Ok(CommandSpec { argv, headers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStatus {
    pub host: String,
    pub code: i32,
    pub note: Option<String>,
}

/// Per-host exit codes plus the aggregate status (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExitReport {
    pub per_host: Vec<HostStatus>,
    pub aggregate: i32,
}

impl ExitReport {
    /// Builds a report from the Min-reduction of per-node success flags.
    pub fn from_min(per_host: Vec<HostStatus>, min_success: i64) -> Self {
        ExitReport {
            per_host,
            aggregate: if min_success == 1 { 0 } else { 1 },
        }
    }

    /// The aggregate computed by scanning the per-host codes.
    pub fn scanned_aggregate(&self) -> i32 {
        if self.per_host.iter().all(|h| h.code == 0) {
            0
        } else {
            1
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &HostStatus> {
        self.per_host.iter().filter(|h| h.code != 0)
    }

    /// One line per failed host, for stderr.
    pub fn failure_lines(&self, cmd: &str) -> String {
        self.failures()
            .map(|h| match &h.note {
                Some(n) => format!("{cmd}: {}: exit {}: {n}\n", h.host, h.code),
                None => format!("{cmd}: {}: exit {}\n", h.host, h.code),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecJob {
    pub argv: Vec<String>,
    pub streaming: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct NodeResult {
    pub hostname: String,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub code: i32,
}

#[derive(Serialize, Deserialize)]
enum StreamMsg {
    Out(Vec<u8>),
    End,
}

pub(crate) fn node_main(
    group: &NodeGroup,
    ctx: &NodeContext,
    job: &ExecJob,
) -> Result<i32, PtError> {
    let shell = NodeShell::new(ctx);
    let out = if job.streaming {
        let mut send_err = None;
        let mut o = shell.run_streaming(&job.argv, &mut |b| {
            if send_err.is_none() && !b.is_empty() {
                if let Err(e) = group.send(0, STREAM_TAG, encode(&StreamMsg::Out(b.to_vec()))) {
                    send_err = Some(e);
                }
            }
        });
        if let Some(e) = send_err {
            return Err(e.into());
        }
        group.send(0, STREAM_TAG, encode(&StreamMsg::End))?;
        o.stdout.clear();
        o
    } else {
        shell.run(&job.argv)
    };
    let res = NodeResult {
        hostname: ctx.hostname.clone(),
        stdout: out.stdout,
        stderr: out.stderr,
        code: out.code,
    };
    gather(group, 0, encode(&res))?;
    reduce(group, 0, ReduceOp::Min, (res.code == 0) as i64)?;
    Ok(res.code)
}

/// Collected output of a parallel command.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecOutcome {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub report: ExitReport,
}

fn with_newline(mut b: Vec<u8>) -> Vec<u8> {
    if !b.is_empty() && !b.ends_with(b"\n") {
        b.push(b'\n');
    }
    b
}

/// Orchestrator side: gathers every node's output and emits it grouped by
/// host in rank order, each block under a `[host]` line in headers mode.
pub fn collect(group: &NodeGroup, headers: bool) -> Result<ExecOutcome, PtError> {
    let parts = gather(group, 0, Vec::new())?.expect("rank 0 is the root");
    let min = reduce(group, 0, ReduceOp::Min, 1)?.expect("rank 0 is the root");
    let mut out = ExecOutcome::default();
    let mut per_host = Vec::new();
    for p in &parts[1..] {
        let r: NodeResult = decode(p)?;
        if headers {
            let text = String::from_utf8_lossy(&r.stdout);
            let lines: Vec<&str> = text.lines().collect();
            for l in format_headers(&r.hostname, &lines) {
                out.stdout.extend_from_slice(l.as_bytes());
                out.stdout.push(b'\n');
            }
        } else {
            out.stdout.extend(with_newline(r.stdout));
        }
        out.stderr.extend(with_newline(r.stderr.clone()));
        per_host.push(HostStatus {
            host: r.hostname,
            code: r.code,
            note: (!r.stderr.is_empty())
                .then(|| String::from_utf8_lossy(&r.stderr).trim_end().to_string()),
        });
    }
    out.report = ExitReport::from_min(per_host, min);
    Ok(out)
}

/// Orchestrator side of streaming mode: output is written to `sink` as it
/// arrives from any node. With `prefix`, each line is tagged `host:  `.
pub fn collect_streaming(
    group: &NodeGroup,
    prefix: bool,
    sink: &mut dyn Write,
) -> Result<ExecOutcome, PtError> {
    let mut pending: Vec<Rank> = (1..group.size()).collect();
    let mut partial: Vec<Vec<u8>> = vec![Vec::new(); group.size()];
    while !pending.is_empty() {
        let (src, bytes) = group.recv_any(&pending, STREAM_TAG)?;
        match decode::<StreamMsg>(&bytes)? {
            StreamMsg::Out(b) if prefix => {
                let buf = &mut partial[src];
                buf.extend_from_slice(&b);
                while let Some(i) = buf.iter().position(|&c| c == b'\n') {
                    let line: Vec<u8> = buf.drain(..=i).collect();
                    write!(sink, "{}:  ", group.host_of_rank(src))?;
                    sink.write_all(&line)?;
                }
            }
            StreamMsg::Out(b) => sink.write_all(&b)?,
            StreamMsg::End => {
                if prefix && !partial[src].is_empty() {
                    write!(sink, "{}:  ", group.host_of_rank(src))?;
                    sink.write_all(&partial[src])?;
                    sink.write_all(b"\n")?;
                }
                pending.retain(|&r| r != src);
            }
        }
        sink.flush()?;
    }
    collect(group, false).map(|mut o| {
        o.stdout.clear();
        o
    })
}

/// Runs `spec` on every host and collects the output in rank order.
pub fn run_on_all(
    cluster: &Cluster,
    hosts: &HostSet,
    spec: &CommandSpec,
) -> Result<ExecOutcome, PtError> {
    let role = Role::Exec(ExecJob {
        argv: spec.argv.clone(),
        streaming: false,
    });
    cluster.run(hosts, &role, |g, _| collect(g, spec.headers))
}

/// Like [`run_on_all`], writing output to `sink` as nodes produce it.
pub fn run_streaming(
    cluster: &Cluster,
    hosts: &HostSet,
    spec: &CommandSpec,
    sink: &mut dyn Write,
) -> Result<ExecOutcome, PtError> {
    let role = Role::Exec(ExecJob {
        argv: spec.argv.clone(),
        streaming: true,
    });
    cluster.run(hosts, &role, |g, _| {
        collect_streaming(g, spec.headers, sink)
    })
}

/// Commands that run their Unix counterpart on every node.
pub const WRAPPED: &[&str] = &[
    "ptrm",
    "ptmkdir",
    "ptrmdir",
    "ptchmod",
    "ptchown",
    "ptchgrp",
    "ptln",
    "ptkillall",
    "ptls",
    "ptcat",
    "ptfind",
];

/// Commands whose first argument may be `-h`.
pub const FORMATTED: &[&str] = &["ptls", "ptcat", "ptfind"];

/// The command spec a wrapped command stands for (`ptrm -rf x` is
/// `rm -rf x`).
pub fn wrapped_spec(name: &str, args: &[String]) -> Result<CommandSpec, PtError> {
    if !WRAPPED.contains(&name) {
        return Err(PtError::usage(format!("unknown command `{name}`")));
    }
    let base = &name[2..];
    let (headers, rest) = match args.first() {
        Some(h) if h == "-h" && FORMATTED.contains(&name) => (true, &args[1..]),
        _ => (false, args),
    };
    let mut argv = vec![base.to_string()];
    argv.extend_from_slice(rest);
    CommandSpec::new(argv, headers)
}

pub fn run_wrapped(
    cluster: &Cluster,
    name: &str,
    hosts: &HostSet,
    args: &[String],
) -> Result<ExecOutcome, PtError> {
    let spec = wrapped_spec(name, args)?;
    run_on_all(cluster, hosts, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hostspec::expand_pattern;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn cluster() -> (Cluster, tempfile::TempDir) {
        let d = tempfile::tempdir().unwrap();
        (Cluster::sim(d.path()), d)
    }

    #[test]
    fn hostname_on_three_nodes() {
        let (c, _d) = cluster();
        let hosts = expand_pattern("n%d@1-3").unwrap();
        let o = run_on_all(
            &c,
            &hosts,
            &CommandSpec::new(s(&["hostname"]), false).unwrap(),
        )
        .unwrap();
        assert_eq!(String::from_utf8(o.stdout).unwrap(), "n1\nn2\nn3\n");
        assert_eq!(o.report.aggregate, 0);
    }

    #[test]
    fn headers_include_silent_nodes() {
        let (c, d) = cluster();
        let hosts = expand_pattern("node%d@1-3").unwrap();
        c.prepare(&hosts).unwrap();
        std::fs::write(d.path().join("node1/fs/myfile1"), "").unwrap();
        std::fs::write(d.path().join("node3/fs/myfile1"), "").unwrap();
        std::fs::write(d.path().join("node3/fs/myfile2"), "").unwrap();
        let o = run_wrapped(&c, "ptls", &hosts, &s(&["-h"])).unwrap();
        assert_eq!(
            String::from_utf8(o.stdout).unwrap(),
            "[node1]\nmyfile1\n[node2]\n[node3]\nmyfile1\nmyfile2\n"
        );
    }

    #[test]
    fn aggregate_follows_exit_codes() {
        let (c, d) = cluster();
        let hosts = expand_pattern("h%d@1-3").unwrap();
        let spec = CommandSpec::new(s(&["test", "-f", "x"]), false).unwrap();
        c.prepare(&hosts).unwrap();
        for h in ["h1", "h2", "h3"] {
            std::fs::write(d.path().join(h).join("fs/x"), "").unwrap();
        }
        let o = run_on_all(&c, &hosts, &spec).unwrap();
        assert_eq!(o.report.aggregate, 0);
        std::fs::remove_file(d.path().join("h2/fs/x")).unwrap();
        let o = run_on_all(&c, &hosts, &spec).unwrap();
        assert_eq!(o.report.aggregate, 1);
        assert_eq!(o.report.scanned_aggregate(), 1);
        let codes: Vec<i32> = o.report.per_host.iter().map(|h| h.code).collect();
        assert_eq!(codes, [0, 1, 0]);
    }

    #[test]
    fn mkdir_twice_fails_second_time() {
        let (c, _d) = cluster();
        let hosts = expand_pattern("h%d@1-2").unwrap();
        assert_eq!(
            run_wrapped(&c, "ptmkdir", &hosts, &s(&["d"]))
                .unwrap()
                .report
                .aggregate,
            0
        );
        let o = run_wrapped(&c, "ptmkdir", &hosts, &s(&["d"])).unwrap();
        assert_eq!(o.report.aggregate, 1);
        assert!(String::from_utf8_lossy(&o.stderr).contains("File exists"));
    }

    #[test]
    fn rm_rf_on_five_nodes() {
        let (c, d) = cluster();
        let hosts = expand_pattern("node%d@1-5").unwrap();
        c.prepare(&hosts).unwrap();
        for i in 1..=5 {
            std::fs::create_dir_all(d.path().join(format!("node{i}/fs/old_files/sub"))).unwrap();
        }
        let o = run_wrapped(&c, "ptrm", &hosts, &s(&["-rf", "old_files/"])).unwrap();
        assert_eq!(o.report.aggregate, 0);
        for i in 1..=5 {
            assert!(!d.path().join(format!("node{i}/fs/old_files")).exists());
        }
    }

    #[test]
    fn wrapped_spec_mapping() {
        assert_eq!(
            wrapped_spec("ptrm", &s(&["-rf", "x"])).unwrap().argv,
            s(&["rm", "-rf", "x"])
        );
        let f = wrapped_spec("ptfind", &s(&["-h", "/", "-name", "x"])).unwrap();
        assert!(f.headers);
        assert_eq!(f.argv, s(&["find", "/", "-name", "x"]));
        // -h means something else to the base command of non-formatted ones
        assert!(!wrapped_spec("ptrm", &s(&["-h"])).unwrap().headers);
        assert_eq!(wrapped_spec("ptbogus", &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn streaming_delivers_everything() {
        let (c, _d) = cluster();
        let hosts = expand_pattern("h%d@1-4").unwrap();
        let mut sink = Vec::new();
        let spec = CommandSpec::new(s(&["hostname"]), true).unwrap();
        let o = run_streaming(&c, &hosts, &spec, &mut sink).unwrap();
        let mut lines: Vec<String> = String::from_utf8(sink)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        lines.sort();
        assert_eq!(lines, ["h1:  h1", "h2:  h2", "h3:  h3", "h4:  h4"]);
        assert_eq!(o.report.aggregate, 0);
    }

    #[test]
    fn output_is_deterministic() {
        let (c, _d) = cluster();
        let hosts = expand_pattern("h%d@1-6").unwrap();
        let spec = CommandSpec::new(s(&["echo", "x"]), true).unwrap();
        let a = run_on_all(&c, &hosts, &spec).unwrap();
        let b = run_on_all(&c, &hosts, &spec).unwrap();
        assert_eq!(a.stdout, b.stdout);
    }
}
