//! `ptfps`: find-style search over the process tables of every node.
//!
//! Simulated nodes read their table from a fixture file (`pid user elapsed
//! command...` per line) and record delivered signals in a log instead of
//! signalling real processes. Native nodes read `/proc`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cluster::{Cluster, Role};
use crate::collectives::{gather, reduce, ReduceOp};
use crate::error::{decode, encode, PtError};
use crate::exec::{ExitReport, HostStatus};
use crate::hostspec::{resolve_hosts, AllHostsConfig, HostSet};
use crate::node::{NodeContext, NodeEnv, Sandbox};
use crate::transport::NodeGroup;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub pid: u32,
    pub user: String,
    pub elapsed_seconds: u64,
    pub command: String,
}

impl ProcessRecord {
    pub fn parse_line(line: &str) -> Result<Self, String> {
        let mut it = line.split_whitespace();
        let bad = || format!("malformed process line `{line}`");
        let pid = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let user = it.next().ok_or_else(bad)?.to_string();
        let elapsed_seconds = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let command = it.collect::<Vec<_>>().join(" ");
        if command.is_empty() || pid == 0 {
            return Err(bad());
        }
        Ok(ProcessRecord {
            pid,
            user,
            elapsed_seconds,
            command,
        })
    }

    /// Name of the executable: basename of the first command word.
    pub fn name(&self) -> &str {
        let first = self.command.split_whitespace().next().unwrap_or("");
        first.rsplit('/').next().unwrap_or(first)
    }
}

impl fmt::Display for ProcessRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.pid, self.user, self.elapsed_seconds, self.command
        )
    }
}

/// Parses a process-table fixture; blank lines and `#` comments are skipped.
pub fn parse_table(text: &str) -> Result<Vec<ProcessRecord>, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(ProcessRecord::parse_line)
        .collect()
}

pub fn format_table(records: &[ProcessRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

pub fn read_fixture(path: &Path) -> io::Result<Vec<ProcessRecord>> {
    match fs::read_to_string(path) {
        Ok(text) => parse_table(&text).map_err(io::Error::other),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

pub fn write_fixture(path: &Path, records: &[ProcessRecord]) -> io::Result<()> {
    fs::write(path, format_table(records))
}

/// A command regex, compiled once when the predicate is built.
#[derive(Debug, Clone)]
pub struct CmdPattern(Regex);

impl CmdPattern {
    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        Regex::new(pattern).map(CmdPattern)
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.0.is_match(s)
    }
}

impl PartialEq for CmdPattern {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

impl Serialize for CmdPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CmdPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CmdPattern::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProcPredicate {
    User(String),
    /// Strictly more than this many seconds.
    MinElapsed(u64),
    CmdMatch(CmdPattern),
    And(Vec<ProcPredicate>),
    True,
}

impl ProcPredicate {
    pub fn matches(&self, rec: &ProcessRecord) -> bool {
        match self {
            ProcPredicate::User(u) => rec.user == *u,
            ProcPredicate::MinElapsed(s) => rec.elapsed_seconds > *s,
            ProcPredicate::CmdMatch(p) => p.is_match(&rec.command),
            ProcPredicate::And(ps) => ps.iter().all(|p| p.matches(rec)),
            ProcPredicate::True => true,
        }
    }
}

/// A signal by symbolic name and number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub name: String,
    pub number: i32,
}

const SIGNALS: &[(&str, i32)] = &[
    ("HUP", libc::SIGHUP),
    ("INT", libc::SIGINT),
    ("QUIT", libc::SIGQUIT),
    ("ILL", libc::SIGILL),
    ("TRAP", libc::SIGTRAP),
    ("ABRT", libc::SIGABRT),
    ("BUS", libc::SIGBUS),
    ("FPE", libc::SIGFPE),
    ("KILL", libc::SIGKILL),
    ("USR1", libc::SIGUSR1),
    ("SEGV", libc::SIGSEGV),
    ("USR2", libc::SIGUSR2),
    ("PIPE", libc::SIGPIPE),
    ("ALRM", libc::SIGALRM),
    ("TERM", libc::SIGTERM),
    ("CHLD", libc::SIGCHLD),
    ("CONT", libc::SIGCONT),
    ("STOP", libc::SIGSTOP),
    ("TSTP", libc::SIGTSTP),
    ("TTIN", libc::SIGTTIN),
    ("TTOU", libc::SIGTTOU),
    ("URG", libc::SIGURG),
    ("XCPU", libc::SIGXCPU),
    ("XFSZ", libc::SIGXFSZ),
    ("VTALRM", libc::SIGVTALRM),
    ("PROF", libc::SIGPROF),
    ("WINCH", libc::SIGWINCH),
    ("IO", libc::SIGIO),
    ("SYS", libc::SIGSYS),
];

/// Signals whose default action does not end the process.
const NON_TERMINATING: &[&str] = &[
    "CHLD", "CONT", "STOP", "TSTP", "TTIN", "TTOU", "URG", "WINCH",
];

impl Signal {
    /// Accepts `SIGTERM`, `TERM`, `term` or `15`.
    pub fn parse(s: &str) -> Option<Signal> {
        let make = |(n, k): &(&str, i32)| Signal {
            name: format!("SIG{n}"),
            number: *k,
        };
        if let Ok(n) = s.parse::<i32>() {
            return SIGNALS.iter().find(|(_, k)| *k == n).map(make);
        }
        let up = s.to_ascii_uppercase();
        let bare = up.strip_prefix("SIG").unwrap_or(&up);
        SIGNALS.iter().find(|(n, _)| *n == bare).map(make)
    }

    pub fn terminates(&self) -> bool {
        !NON_TERMINATING.contains(&&self.name[3..])
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProcAction {
    PrintDefault,
    Kill(Signal),
}

/// "Delivers" a signal on a simulated node: the attempt is logged and a
/// terminating signal removes the process from the table. Returns false
/// when no such pid exists.
pub fn deliver_sim_signal(sb: &Sandbox, pid: u32, sig: &Signal) -> io::Result<bool> {
    let mut table = read_fixture(&sb.proc_table())?;
    let Some(pos) = table.iter().position(|r| r.pid == pid) else {
        return Ok(false);
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(sb.signal_log())?;
    writeln!(log, "{pid} {sig}")?;
    if sig.terminates() {
        table.remove(pos);
        write_fixture(&sb.proc_table(), &table)?;
    }
    Ok(true)
}

/// Entries of a simulated node's signal log, in delivery order.
pub fn read_signal_log(sb: &Sandbox) -> io::Result<Vec<(u32, String)>> {
    let text = match fs::read_to_string(sb.signal_log()) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(text
        .lines()
        .filter_map(|l| {
            let (pid, sig) = l.split_once(' ')?;
            Some((pid.parse().ok()?, sig.to_string()))
        })
        .collect())
}

pub(crate) fn user_name(uid: u32) -> String {
    let mut buf = vec![0 as libc::c_char; 1024];
    let mut pwd: libc::passwd = unsafe { std::mem::zeroed() };
    let mut out = std::ptr::null_mut();
    // SAFETY: all pointers refer to live, correctly sized buffers.
    let rc = unsafe { libc::getpwuid_r(uid, &mut pwd, buf.as_mut_ptr(), buf.len(), &mut out) };
    if rc == 0 && !out.is_null() {
        // SAFETY: pw_name points into buf and is NUL-terminated.
        unsafe { std::ffi::CStr::from_ptr(pwd.pw_name) }
            .to_string_lossy()
            .into_owned()
    } else {
        uid.to_string()
    }
}

/// Processes of the local machine, read from `/proc`.
pub fn system_processes() -> io::Result<Vec<ProcessRecord>> {
    let uptime: f64 = fs::read_to_string("/proc/uptime")?
        .split_whitespace()
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    // SAFETY: sysconf has no memory-safety preconditions.
    let hz = unsafe { libc::sysconf(libc::_SC_CLK_TCK) }.max(1) as f64;
    let mut out = Vec::new();
    for entry in fs::read_dir("/proc")? {
        let entry = entry?;
        let Some(pid) = entry
            .file_name()
            .to_str()
            .and_then(|s| s.parse::<u32>().ok())
        else {
            continue;
        };
        let dir = entry.path();
        let (Ok(stat), Ok(status)) = (
            fs::read_to_string(dir.join("stat")),
            fs::read_to_string(dir.join("status")),
        ) else {
            continue;
        };
        // comm may contain spaces; fields resume after the last ')'
        let Some((head, rest)) = stat.rsplit_once(')') else {
            continue;
        };
        let comm = head.split_once('(').map(|(_, c)| c).unwrap_or("");
        let start_ticks: f64 = rest
            .split_whitespace()
            .nth(19)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0.0);
        let uid = status
            .lines()
            .find_map(|l| l.strip_prefix("Uid:"))
            .and_then(|l| l.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let cmdline = fs::read(dir.join("cmdline")).unwrap_or_default();
        let command = cmdline
            .split(|&b| b == 0)
            .filter(|s| !s.is_empty())
            .map(|s| String::from_utf8_lossy(s).into_owned())
            .collect::<Vec<_>>()
            .join(" ");
        let command = if command.is_empty() {
            format!("[{comm}]")
        } else {
            command
        };
        out.push(ProcessRecord {
            pid,
            user: user_name(uid),
            elapsed_seconds: (uptime - start_ticks / hz).max(0.0) as u64,
            command,
        });
    }
    out.sort_by_key(|r| r.pid);
    Ok(out)
}

/// The process table of a node.
pub fn node_processes(ctx: &NodeContext) -> io::Result<Vec<ProcessRecord>> {
    let mut recs = match &ctx.env {
        NodeEnv::Sandboxed(sb) => read_fixture(&sb.proc_table())?,
        NodeEnv::Native => system_processes()?,
    };
    recs.sort_by_key(|r| r.pid);
    Ok(recs)
}

/// Sends `sig` to `pid` on the node.
pub fn signal_process(ctx: &NodeContext, pid: u32, sig: &Signal) -> io::Result<()> {
    match &ctx.env {
        NodeEnv::Sandboxed(sb) => {
            if deliver_sim_signal(sb, pid, sig)? {
                Ok(())
            } else {
                Err(io::Error::from_raw_os_error(libc::ESRCH))
            }
        }
        NodeEnv::Native => {
            // SAFETY: kill has no memory-safety preconditions.
            if unsafe { libc::kill(pid as libc::pid_t, sig.number) } == 0 {
                Ok(())
            } else {
                Err(io::Error::last_os_error())
            }
        }
    }
}

/// What `ptfps` asks every node to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsJob {
    pub pred: ProcPredicate,
    pub action: ProcAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FpsNodeReport {
    pub hostname: String,
    pub matched: Vec<ProcessRecord>,
    pub killed: Vec<u32>,
    pub errors: Vec<String>,
}

/// Selects and acts on the matching processes of one node.
pub fn scan_node(ctx: &NodeContext, job: &FpsJob) -> FpsNodeReport {
    let mut rep = FpsNodeReport {
        hostname: ctx.hostname.clone(),
        ..Default::default()
    };
    let recs = match node_processes(ctx) {
        Ok(r) => r,
        Err(e) => {
            rep.errors.push(format!("cannot read process table: {e}"));
            return rep;
        }
    };
    rep.matched = recs.into_iter().filter(|r| job.pred.matches(r)).collect();
    if let ProcAction::Kill(sig) = &job.action {
        for r in &rep.matched {
            match signal_process(ctx, r.pid, sig) {
                Ok(()) => rep.killed.push(r.pid),
                Err(e) => rep.errors.push(format!("kill {} {}: {e}", sig, r.pid)),
            }
        }
    }
    rep
}

pub(crate) fn node_main(
    group: &NodeGroup,
    ctx: &NodeContext,
    job: &FpsJob,
) -> Result<i32, PtError> {
    let rep = scan_node(ctx, job);
    let ok = rep.errors.is_empty();
    gather(group, 0, encode(&rep))?;
    reduce(group, 0, ReduceOp::Min, ok as i64)?;
    Ok(if ok { 0 } else { 1 })
}

/// Result of a `ptfps` run as seen by the orchestrator.
#[derive(Debug, Clone)]
pub struct FpsOutcome {
    /// One report per target host, in rank order.
    pub nodes: Vec<FpsNodeReport>,
    pub report: ExitReport,
}

impl FpsOutcome {
    /// The lines `ptfps` prints.
    pub fn render(&self, action: &ProcAction) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            match action {
                ProcAction::PrintDefault => {
                    for r in &n.matched {
                        out.push_str(&format!("{}: {r}\n", n.hostname));
                    }
                }
                ProcAction::Kill(_) => {
                    out.push_str(&format!("{}: killed {}\n", n.hostname, n.killed.len()));
                }
            }
        }
        out
    }

    /// `(host, pid)` of every selected process.
    pub fn selected(&self) -> Vec<(String, u32)> {
        self.nodes
            .iter()
            .flat_map(|n| n.matched.iter().map(|r| (n.hostname.clone(), r.pid)))
            .collect()
    }
}

/// Orchestrator side of `ptfps` on a launched group.
pub fn collect(group: &NodeGroup) -> Result<FpsOutcome, PtError> {
    let parts = gather(group, 0, Vec::new())?.expect("rank 0 is the root");
    let all_ok = reduce(group, 0, ReduceOp::Min, 1)?.expect("rank 0 is the root");
    let mut nodes = Vec::new();
    for p in &parts[1..] {
        nodes.push(decode::<FpsNodeReport>(p)?);
    }
    let per_host = nodes
        .iter()
        .map(|n| HostStatus {
            host: n.hostname.clone(),
            code: if n.errors.is_empty() { 0 } else { 1 },
            note: (!n.errors.is_empty()).then(|| n.errors.join("; ")),
        })
        .collect();
    Ok(FpsOutcome {
        nodes,
        report: ExitReport::from_min(per_host, all_ok),
    })
}

pub fn ptfps(
    cluster: &Cluster,
    hosts: &HostSet,
    pred: ProcPredicate,
    action: ProcAction,
) -> Result<FpsOutcome, PtError> {
    let role = Role::Fps(FpsJob { pred, action });
    cluster.run(hosts, &role, |g, _| collect(g))
}

/// Parses `ptfps` arguments (host arguments first).
pub fn parse_ptfps(
    argv: &[String],
    env: &HashMap<String, String>,
    config: &AllHostsConfig,
) -> Result<(HostSet, ProcPredicate, ProcAction), PtError> {
    let (hosts, used) = resolve_hosts(argv, env, config)?;
    let (pred, action) = parse_filters(&argv[used..])?;
    Ok((hosts, pred, action))
}

/// Parses the predicate and action flags that follow the host arguments.
pub fn parse_filters(args: &[String]) -> Result<(ProcPredicate, ProcAction), PtError> {
    let mut preds = Vec::new();
    let mut action = ProcAction::PrintDefault;
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| PtError::usage(format!("ptfps: {flag} requires a value")))
        };
        match flag.as_str() {
            "-user" => preds.push(ProcPredicate::User(value()?)),
            "-time" => {
                let v = value()?;
                let s = v.parse().map_err(|_| {
                    PtError::usage(format!("ptfps: -time expects seconds, got `{v}`"))
                })?;
                preds.push(ProcPredicate::MinElapsed(s));
            }
            "-cmd" => {
                let v = value()?;
                let p = CmdPattern::new(&v)
                    .map_err(|e| PtError::usage(format!("ptfps: bad -cmd pattern: {e}")))?;
                preds.push(ProcPredicate::CmdMatch(p));
            }
            "-kill" => {
                let v = value()?;
                let sig = Signal::parse(&v)
                    .ok_or_else(|| PtError::usage(format!("ptfps: unknown signal `{v}`")))?;
                action = ProcAction::Kill(sig);
            }
            other => return Err(PtError::usage(format!("ptfps: unknown flag `{other}`"))),
        }
    }
    let pred = match preds.len() {
        0 => ProcPredicate::True,
        1 => preds.pop().expect("one element"),
        _ => ProcPredicate::And(preds),
    };
    Ok((pred, action))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(pid: u32, user: &str, t: u64, cmd: &str) -> ProcessRecord {
        ProcessRecord {
            pid,
            user: user.into(),
            elapsed_seconds: t,
            command: cmd.into(),
        }
    }

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    fn all_config() -> (HashMap<String, String>, AllHostsConfig, tempfile::TempDir) {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("hosts");
        fs::write(&p, "n1\nn2\n").unwrap();
        (HashMap::new(), AllHostsConfig { path: p }, d)
    }

    #[test]
    fn parses_demonstrated_queries() {
        let (env, cfg, _d) = all_config();
        let (h, p, a) = parse_ptfps(&args(&["-all", "-user", "lusk"]), &env, &cfg).unwrap();
        assert_eq!(h.hosts(), ["n1", "n2"]);
        assert_eq!(p, ProcPredicate::User("lusk".into()));
        assert_eq!(a, ProcAction::PrintDefault);

        let (_, p, _) = parse_ptfps(
            &args(&["-all", "-user", "gropp", "-time", "3600", "-cmd", "^mpd"]),
            &env,
            &cfg,
        )
        .unwrap();
        assert_eq!(
            p,
            ProcPredicate::And(vec![
                ProcPredicate::User("gropp".into()),
                ProcPredicate::MinElapsed(3600),
                ProcPredicate::CmdMatch(CmdPattern::new("^mpd").unwrap()),
            ])
        );

        let (_, p, _) = parse_ptfps(&args(&["-all"]), &env, &cfg).unwrap();
        assert_eq!(p, ProcPredicate::True);

        let (_, _, a) = parse_ptfps(
            &args(&["-all", "-user", "ong", "-kill", "SIGTERM"]),
            &env,
            &cfg,
        )
        .unwrap();
        assert_eq!(a, ProcAction::Kill(Signal::parse("TERM").unwrap()));
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        let (env, cfg, _d) = all_config();
        for bad in [
            &["-all", "-bogus"][..],
            &["-all", "-user"],
            &["-all", "-time", "soon"],
            &["-all", "-cmd", "("],
            &["-all", "-kill", "SIGNOPE"],
        ] {
            let e = parse_ptfps(&args(bad), &env, &cfg).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad:?}");
        }
    }

    #[test]
    fn match_semantics() {
        let p = ProcPredicate::MinElapsed(3600);
        assert!(p.matches(&rec(1, "a", 3601, "x")));
        assert!(!p.matches(&rec(1, "a", 3600, "x")));
        let c = ProcPredicate::CmdMatch(CmdPattern::new("^mpd").unwrap());
        assert!(c.matches(&rec(1, "a", 0, "mpdboot --n 4")));
        assert!(!c.matches(&rec(1, "a", 0, "ampd")));
        let un = ProcPredicate::CmdMatch(CmdPattern::new("mpd").unwrap());
        assert!(un.matches(&rec(1, "a", 0, "ampd")));
    }

    #[test]
    fn table_round_trip_and_errors() {
        let t = "# pid user elapsed cmd\n10 lusk 5 /usr/bin/mpd --daemon\n\n11 ong 99 a.out\n";
        let recs = parse_table(t).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].command, "/usr/bin/mpd --daemon");
        assert_eq!(recs[0].name(), "mpd");
        assert_eq!(parse_table(&format_table(&recs)).unwrap(), recs);
        assert!(parse_table("10 lusk").is_err());
        assert!(parse_table("x lusk 1 cmd").is_err());
    }

    #[test]
    fn signal_names() {
        let t = Signal::parse("SIGTERM").unwrap();
        assert_eq!(t, Signal::parse("term").unwrap());
        assert_eq!(t, Signal::parse(&libc::SIGTERM.to_string()).unwrap());
        assert!(t.terminates());
        assert!(!Signal::parse("CONT").unwrap().terminates());
        assert!(Signal::parse("SIGFOO").is_none());
    }

    #[test]
    fn sim_signal_delivery_updates_table_and_log() {
        let d = tempfile::tempdir().unwrap();
        let sb = Sandbox {
            node_dir: d.path().to_path_buf(),
        };
        sb.ensure().unwrap();
        write_fixture(
            &sb.proc_table(),
            &[rec(5, "a", 1, "x"), rec(6, "b", 2, "y")],
        )
        .unwrap();
        let term = Signal::parse("TERM").unwrap();
        let cont = Signal::parse("CONT").unwrap();
        assert!(deliver_sim_signal(&sb, 6, &cont).unwrap());
        assert!(deliver_sim_signal(&sb, 5, &term).unwrap());
        assert!(!deliver_sim_signal(&sb, 5, &term).unwrap());
        assert_eq!(
            read_signal_log(&sb).unwrap(),
            vec![(6, "SIGCONT".to_string()), (5, "SIGTERM".to_string())]
        );
        assert_eq!(
            read_fixture(&sb.proc_table()).unwrap(),
            vec![rec(6, "b", 2, "y")]
        );
    }

    #[test]
    fn system_table_contains_self() {
        let me = std::process::id();
        let recs = system_processes().unwrap();
        assert!(recs.iter().any(|r| r.pid == me));
    }

    fn arb_record() -> impl Strategy<Value = ProcessRecord> {
        (1u32..5000, 0usize..3, 0u64..20_000, 0usize..4).prop_map(|(pid, u, t, c)| {
            rec(
                pid,
                ["lusk", "gropp", "ong"][u],
                t,
                ["mpd --n 4", "mpdboot", "a.out -x", "bash"][c],
            )
        })
    }

    fn arb_leaf() -> impl Strategy<Value = ProcPredicate> {
        prop_oneof![
            (0usize..3).prop_map(|u| ProcPredicate::User(["lusk", "gropp", "ong"][u].into())),
            (0u64..20_000).prop_map(ProcPredicate::MinElapsed),
            (0usize..3).prop_map(|p| ProcPredicate::CmdMatch(
                CmdPattern::new(["^mpd", "out", "sh$"][p]).unwrap()
            )),
            Just(ProcPredicate::True),
        ]
    }

    proptest! {
        #[test]
        fn conjunction_is_intersection(
            recs in prop::collection::vec(arb_record(), 0..60),
            p in arb_leaf(),
            q in arb_leaf(),
        ) {
            let both = ProcPredicate::And(vec![p.clone(), q.clone()]);
            for r in &recs {
                prop_assert_eq!(both.matches(r), p.matches(r) && q.matches(r));
            }
            let id = ProcPredicate::And(vec![p.clone(), ProcPredicate::True]);
            for r in &recs {
                prop_assert_eq!(id.matches(r), p.matches(r));
            }
        }
    }
}
