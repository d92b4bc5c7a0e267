//! Command-line front end. One binary serves every command: it is either
//! invoked under a command name (through a symlink) or as `pt <command>`.
//!
//! Exit status: 0 on success, 1 when any node or job failed, 2 for usage
//! errors.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::cluster::Cluster;
use crate::distrib::{parse_distrib_args, ptdistrib, DistribConfig};
use crate::error::PtError;
use crate::exec::{run_on_all, run_streaming, run_wrapped, CommandSpec, ExitReport, WRAPPED};
use crate::hostspec::{expand_pattern, resolve_hosts, AllHostsConfig, HostOrigin, HostSet};
use crate::node::Fault;
use crate::predicates::{pred_lines, pttest, TestMode};
use crate::procfind::{parse_filters, ptfps};
use crate::ptcopy::{parse_copy_args, ptcp, ptmv};
use crate::textdisp::{default_hook, run_display, spread_stream};
use crate::transport::{agent_main, AgentArgs, Backend, LaunchOptions};

/// The parallel Unix commands.
pub const TABLE_COMMANDS: &[&str] = &[
    "ptchgrp",
    "ptchmod",
    "ptchown",
    "ptcp",
    "ptkillall",
    "ptln",
    "ptmv",
    "ptmkdir",
    "ptrm",
    "ptrmdir",
    "pttest",
    "pttesta",
    "pttesto",
    "ptcat",
    "ptfind",
    "ptls",
    "ptfps",
    "ptdistrib",
    "ptexec",
    "ptpred",
];

/// Helpers that complete the pipelines built from the commands above.
pub const EXTRA_COMMANDS: &[&str] = &["ptspread", "ptdisp", "ptping", "enumnodes"];

pub const BACKEND_ENV: &str = "PT_BACKEND";
pub const SIM_ROOT_ENV: &str = "PT_SIM_ROOT";
pub const SIM_FAULTS_ENV: &str = "PT_SIM_FAULTS";
pub const SIM_DOMAIN_ENV: &str = "PT_SIM_DOMAIN";
pub const REMOTE_SHELL_ENV: &str = "PT_REMOTE_SHELL";
pub const AGENT_PROGRAM_ENV: &str = "PT_AGENT_PROGRAM";
pub const DISP_SHELL_ENV: &str = "PT_DISP_SHELL_CMD";
/// Address remote agents use to reach this machine.
pub const ADVERTISE_ENV: &str = "PT_ADVERTISE_HOST";
pub const TIMEOUT_ENV: &str = "PT_TIMEOUT";

/// Settings taken from the environment.
#[derive(Debug, Clone)]
pub struct GlobalConfig {
    pub backend: Backend,
    pub all_hosts: AllHostsConfig,
    pub remote_shell_template: String,
    pub sim_root: PathBuf,
    pub faults: BTreeMap<String, Fault>,
    pub domain: Option<String>,
    pub agent_program: Option<PathBuf>,
    pub advertise_host: Option<String>,
    pub timeout: Option<Duration>,
}

fn parse_faults(spec: &str) -> Result<BTreeMap<String, Fault>, PtError> {
    let mut out = BTreeMap::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || PtError::usage(format!("{SIM_FAULTS_ENV}: bad entry `{item}`"));
        let (host, kind) = item.split_once('=').ok_or_else(bad)?;
        let fault = match kind {
            "failwrites" => Fault::FailWrites,
            "dead" => Fault::Dead,
            k => match k.strip_prefix("unusable") {
                Some("") => Fault::Unusable { after_jobs: 0 },
                Some(n) => Fault::Unusable {
                    after_jobs: n
                        .strip_prefix(':')
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(bad)?,
                },
                None => return Err(bad()),
            },
        };
        out.insert(host.to_string(), fault);
    }
    Ok(out)
}

impl GlobalConfig {
    /// Defaults to the simulated backend unless `PT_BACKEND` says otherwise
    /// or a remote shell is configured.
    pub fn from_env(env: &HashMap<String, String>) -> Result<Self, PtError> {
        let get = |k: &str| env.get(k).filter(|v| !v.is_empty());
        let backend = match get(BACKEND_ENV) {
            Some(b) => b.parse().map_err(PtError::usage)?,
            None if get(REMOTE_SHELL_ENV).is_some() => Backend::RemoteShell,
            None => Backend::Sim,
        };
        let sim_root = match get(SIM_ROOT_ENV) {
            Some(p) => PathBuf::from(p),
            None => match get("HOME") {
                Some(h) => Path::new(h).join(".ptools").join("sim"),
                None => std::env::temp_dir().join("ptools-sim"),
            },
        };
        let timeout = match get(TIMEOUT_ENV) {
            Some(t) => Some(Duration::from_secs(t.parse().map_err(|_| {
                PtError::usage(format!("{TIMEOUT_ENV}: expected seconds"))
            })?)),
            None => None,
        };
        Ok(GlobalConfig {
            backend,
            all_hosts: AllHostsConfig::from_env(env),
            remote_shell_template: get(REMOTE_SHELL_ENV)
                .cloned()
                .unwrap_or_else(|| "ssh {host} {cmd}".to_string()),
            sim_root,
            faults: parse_faults(get(SIM_FAULTS_ENV).map(String::as_str).unwrap_or(""))?,
            domain: get(SIM_DOMAIN_ENV).cloned(),
            agent_program: get(AGENT_PROGRAM_ENV).map(PathBuf::from),
            advertise_host: get(ADVERTISE_ENV).cloned(),
            timeout,
        })
    }

    pub fn cluster(&self) -> Cluster {
        let mut o = LaunchOptions::sim(&self.sim_root).with_backend(self.backend);
        o.faults = self.faults.clone();
        o.domain = self.domain.clone();
        o.agent_program = self.agent_program.clone();
        o.remote_shell = self.remote_shell_template.clone();
        o.advertise_host = self.advertise_host.clone();
        if let Some(t) = self.timeout {
            o.recv_timeout = t;
            o.launch_timeout = t;
        }
        Cluster::new(o)
    }
}

/// Standard streams of one invocation.
pub struct Stdio<'a> {
    pub stdin: Box<dyn BufRead + Send>,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
    /// Whether stdout is a terminal (`ptdisp` draws only then).
    pub interactive: bool,
}

/// Flag summary printed for `--help` and usage errors.
pub fn usage(cmd: &str) -> String {
    let hostargs = "hostargs: -all | -m <machine-file> | -M '<pattern>'";
    let body = match cmd {
        "ptcp" | "ptmv" => format!("{cmd} [hostargs] [-o compress|nocompress|chunk=N] [-r] <src>... <dest>"),
        "ptexec" => "ptexec [hostargs] [-h] [-s] <command> [args...]\n  -h  prefix each host's output with a [host] line\n  -s  stream output as it arrives".into(),
        "ptls" | "ptcat" | "ptfind" => format!("{cmd} [hostargs] [-h] [{} args...]", &cmd[2..]),
        "pttest" | "pttesta" | "pttesto" => format!("{cmd} [hostargs] <test expression>"),
        "ptpred" => "ptpred [hostargs] '<test expression>' ['<true output>' ['<false output>']]".into(),
        "ptfps" => "ptfps [hostargs] [-user U] [-time SECONDS] [-cmd REGEX] [-kill SIGNAL]".into(),
        "ptdistrib" => "ptdistrib [hostargs] [-f] '<command with {}>' <file>...\n  -f  fetch new and modified files back".into(),
        "ptspread" => return "ptspread < headered-output".into(),
        "ptdisp" => return "ptdisp [-c] [-t <title>] < protocol-lines".into(),
        "ptping" => "ptping [hostargs]".into(),
        "enumnodes" => "enumnodes [hostargs]".into(),
        c if WRAPPED.contains(&c) => format!("{c} [hostargs] [{} args...]", &c[2..]),
        _ => return format!(
            "usage: pt <command> [args...]\ncommands: {}\n          {}\n          agent, install-links <dir>",
            TABLE_COMMANDS.join(" "),
            EXTRA_COMMANDS.join(" ")
        ),
    };
    format!("usage: {body}\n{hostargs}")
}

fn hosts_and_rest<'a>(
    args: &'a [String],
    env: &HashMap<String, String>,
    cfg: &GlobalConfig,
) -> Result<(HostSet, &'a [String]), PtError> {
    let (hosts, used) = resolve_hosts(args, env, &cfg.all_hosts)?;
    Ok((hosts, &args[used..]))
}

fn report_failures(cmd: &str, report: &ExitReport, err: &mut dyn Write) -> io::Result<()> {
    for h in report.failures().filter(|h| h.note.is_none()) {
        writeln!(err, "{cmd}: {}: exit {}", h.host, h.code)?;
    }
    Ok(())
}

/// Runs one command; returns its exit status.
pub fn run_command(
    cmd: &str,
    args: &[String],
    env: &HashMap<String, String>,
    io: &mut Stdio<'_>,
) -> Result<i32, PtError> {
    if args.first().map(String::as_str) == Some("--help") {
        writeln!(io.stdout, "{}", usage(cmd))?;
        return Ok(0);
    }
    let cfg = GlobalConfig::from_env(env)?;
    let cluster = cfg.cluster();
    match cmd {
        "ptspread" => {
            spread_stream(&mut io.stdin, &mut *io.stdout).map_err(|e| match e.kind() {
                io::ErrorKind::InvalidData => PtError::Protocol(e.to_string()),
                _ => PtError::Io(e),
            })?;
            Ok(0)
        }
        "ptdisp" => {
            let mut color = false;
            let mut title = "ptdisp".to_string();
            let mut it = args.iter();
            while let Some(a) = it.next() {
                match a.as_str() {
                    "-c" => color = true,
                    "-t" => {
                        title = it
                            .next()
                            .cloned()
                            .ok_or_else(|| PtError::usage("ptdisp: -t requires a title"))?
                    }
                    o => return Err(PtError::usage(format!("ptdisp: unknown argument `{o}`"))),
                }
            }
            let input = std::mem::replace(&mut io.stdin, Box::new(io::empty()));
            if io.interactive {
                run_display(
                    input,
                    &title,
                    color,
                    default_hook(env.get(DISP_SHELL_ENV).cloned()),
                )?;
            } else {
                crate::textdisp::run_headless(input, &mut *io.stdout, &mut *io.stderr)?;
            }
            Ok(0)
        }
        "enumnodes" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            if !rest.is_empty() {
                return Err(PtError::usage(usage(cmd)));
            }
            for h in hosts.iter() {
                writeln!(io.stdout, "{h}")?;
            }
            Ok(0)
        }
        "ptping" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            if !rest.is_empty() {
                return Err(PtError::usage(usage(cmd)));
            }
            let mut all = true;
            for h in hosts.iter() {
                let one = HostSet::new(vec![h.to_string()], HostOrigin::ExplicitList)?;
                let up = cluster.ping(&one).is_ok();
                all &= up;
                writeln!(io.stdout, "{}: {}", cluster.opts.node_name(h), up as u8)?;
            }
            Ok(if all { 0 } else { 1 })
        }
        "ptexec" => {
            let (hosts, mut rest) = hosts_and_rest(args, env, &cfg)?;
            let (mut headers, mut stream) = (false, false);
            while let Some(f) = rest.first() {
                match f.as_str() {
                    "-h" => headers = true,
                    "-s" => stream = true,
                    "--" => {
                        rest = &rest[1..];
                        break;
                    }
                    _ => break,
                }
                rest = &rest[1..];
            }
            let spec = CommandSpec::new(rest.to_vec(), headers)?;
            let out = if stream {
                run_streaming(&cluster, &hosts, &spec, &mut *io.stdout)?
            } else {
                run_on_all(&cluster, &hosts, &spec)?
            };
            io.stdout.write_all(&out.stdout)?;
            io.stderr.write_all(&out.stderr)?;
            report_failures(cmd, &out.report, &mut *io.stderr)?;
            Ok(out.report.aggregate)
        }
        c if WRAPPED.contains(&c) => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            let out = run_wrapped(&cluster, c, &hosts, rest)?;
            io.stdout.write_all(&out.stdout)?;
            io.stderr.write_all(&out.stderr)?;
            report_failures(cmd, &out.report, &mut *io.stderr)?;
            Ok(out.report.aggregate)
        }
        "pttest" | "pttesta" | "pttesto" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            if rest.is_empty() {
                return Err(PtError::usage(usage(cmd)));
            }
            let mode = TestMode::for_command(cmd).expect("test command");
            Ok(pttest(&cluster, &hosts, mode, rest)?.exit_code())
        }
        "ptpred" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            let (expr, outs) = match rest {
                [e, outs @ ..] if outs.len() <= 2 => (e, outs),
                _ => return Err(PtError::usage(usage(cmd))),
            };
            let t = outs.first().map(String::as_str).unwrap_or("1");
            let f = outs.get(1).map(String::as_str).unwrap_or("0");
            let r = pttest(&cluster, &hosts, TestMode::Or, std::slice::from_ref(expr))?;
            io.stdout.write_all(pred_lines(&r, t, f).as_bytes())?;
            Ok(0)
        }
        "ptfps" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            let (pred, action) = parse_filters(rest)?;
            let out = ptfps(&cluster, &hosts, pred, action.clone())?;
            io.stdout.write_all(out.render(&action).as_bytes())?;
            for n in &out.nodes {
                for e in &n.errors {
                    writeln!(io.stderr, "ptfps: {}: {e}", n.hostname)?;
                }
            }
            Ok(out.report.aggregate)
        }
        "ptcp" | "ptmv" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            let a = parse_copy_args(cmd, rest)?;
            let (copy, mut status) = if cmd == "ptmv" {
                let m = ptmv(&cluster, &hosts, &a)?;
                for e in &m.deletion_errors {
                    writeln!(io.stderr, "ptmv: {e}")?;
                }
                let st = m
                    .copy
                    .report
                    .aggregate
                    .max(!m.deletion_errors.is_empty() as i32);
                (m.copy, st)
            } else {
                let c = ptcp(&cluster, &hosts, &a)?;
                let st = c.report.aggregate;
                (c, st)
            };
            for h in copy.report.failures() {
                let note = h.note.as_deref().unwrap_or("failed");
                writeln!(io.stderr, "{cmd}: {}: {note}", h.host)?;
            }
            status = status.min(1);
            Ok(status)
        }
        "ptdistrib" => {
            let (hosts, rest) = hosts_and_rest(args, env, &cfg)?;
            let (fetch, template, files) = parse_distrib_args(rest)?;
            let dcfg = DistribConfig {
                fetch,
                ..Default::default()
            };
            let r = ptdistrib(&cluster, &hosts, &template, &files, &dcfg)?;
            for j in &r.jobs {
                io.stdout.write_all(&j.stdout)?;
                io.stderr.write_all(&j.stderr)?;
            }
            for w in &r.warnings {
                writeln!(io.stderr, "{w}")?;
            }
            for h in r.report.failures() {
                writeln!(
                    io.stderr,
                    "ptdistrib: {} on {}: exit {}",
                    h.note.as_deref().unwrap_or("?"),
                    h.host,
                    h.code
                )?;
            }
            for f in &r.unprocessed {
                writeln!(io.stderr, "ptdistrib: not processed: {}", f.display())?;
            }
            Ok(r.report.aggregate)
        }
        other => Err(PtError::usage(format!(
            "unknown command `{other}`\n{}",
            usage("")
        ))),
    }
}

fn install_links(dir: &Path, out: &mut dyn Write) -> Result<i32, PtError> {
    let exe = std::env::current_exe()?;
    std::fs::create_dir_all(dir)?;
    for name in TABLE_COMMANDS.iter().chain(EXTRA_COMMANDS) {
        let link = dir.join(name);
        if std::fs::symlink_metadata(&link).is_ok() {
            std::fs::remove_file(&link)?;
        }
        std::os::unix::fs::symlink(&exe, &link)?;
        writeln!(out, "{}", link.display())?;
    }
    Ok(0)
}

/// Entry point: picks the command from `argv[0]` or `argv[1]`.
pub fn dispatch(argv: &[String], env: &HashMap<String, String>, io: &mut Stdio<'_>) -> i32 {
    let prog = argv
        .first()
        .and_then(|a| Path::new(a).file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let known = |c: &str| TABLE_COMMANDS.contains(&c) || EXTRA_COMMANDS.contains(&c);
    let (cmd, args) = if known(&prog) {
        (prog.clone(), argv.get(1..).unwrap_or(&[]))
    } else {
        match argv.get(1) {
            Some(c) => (c.clone(), &argv[2..]),
            None => {
                let _ = writeln!(io.stderr, "{}", usage(""));
                return 2;
            }
        }
    };
    let result = match cmd.as_str() {
        "agent" => match AgentArgs::parse(args) {
            Ok(a) => agent_main(&a, crate::cluster::node_entry).map_err(PtError::from),
            Err(e) => Err(PtError::usage(e)),
        },
        "install-links" => match args {
            [dir] => install_links(Path::new(dir), &mut *io.stdout),
            _ => Err(PtError::usage("usage: pt install-links <dir>")),
        },
        "help" | "--help" | "-help" => {
            let _ = writeln!(
                io.stdout,
                "{}",
                usage(args.first().map(String::as_str).unwrap_or(""))
            );
            Ok(0)
        }
        c => run_command(c, args, env, io),
    };
    let _ = io.stdout.flush();
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.stderr, "{cmd}: {e}");
            if let PtError::Hosts(_) = e {
                let _ = writeln!(io.stderr, "{}", usage(&cmd));
            }
            e.exit_code()
        }
    }
}

/// Runs the process: real argv, environment and standard streams.
pub fn main_entry() -> i32 {
    use crossterm::tty::IsTty;
    let argv: Vec<String> = std::env::args().collect();
    let env: HashMap<String, String> = std::env::vars().collect();
    let stdout = io::stdout();
    let interactive = stdout.is_tty();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    let mut io = Stdio {
        stdin: Box::new(io::BufReader::new(io::stdin())),
        stdout: &mut out,
        stderr: &mut err,
        interactive,
    };
    dispatch(&argv, &env, &mut io)
}

/// Expands a pattern the way `-M` does; handy for scripts and tests.
pub fn hosts_of(pattern: &str) -> Result<HostSet, PtError> {
    Ok(expand_pattern(pattern)?)
}
