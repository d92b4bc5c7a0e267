//! `ptdistrib`: runs a command once per input file, handing each file to
//! the first idle node.
//!
//! The orchestrator drives rounds. Each round it broadcasts a command table
//! (assignments for idle workers), ships assigned input files point to
//! point, and gathers one status per worker. Workers that report they can
//! no longer execute are dropped from the group by a split at the start of
//! the next round, and their file goes back to the front of the queue.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builtins::NodeShell;
use crate::cluster::{Cluster, Role};
use crate::collectives::{broadcast, gather, reduce, split, ReduceOp};
use crate::error::{decode, encode, PtError};
use crate::exec::{ExitReport, HostStatus};
use crate::hostspec::HostSet;
use crate::node::{Fault, NodeContext};
use crate::transport::{NodeGroup, Rank, Tag};

/// Tag of shipped input files.
const TAG_FILE: Tag = 0x20;

/// How long a worker waits for a running command before reporting busy.
const BUSY_WAIT: Duration = Duration::from_millis(50);

/// Fills a command template: every `{}` becomes `file`, or `file` is
/// appended when there is none; the result is split on blanks.
pub fn substitute(template: &str, file: &str) -> Result<Vec<String>, PtError> {
    if template.trim().is_empty() {
        return Err(PtError::usage("ptdistrib: empty command template"));
    }
    let words = template.split_whitespace();
    let argv: Vec<String> = if template.contains("{}") {
        words.map(|w| w.replace("{}", file)).collect()
    } else {
        words
            .map(str::to_string)
            .chain([file.to_string()])
            .collect()
    };
    Ok(argv)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistribJob {
    pub fetch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Cmd {
    Assign {
        job: usize,
        argv: Vec<String>,
        file_name: String,
        /// Simulated duration in rounds; `None` runs the command for real
        /// and reports it when it ends.
        ticks: Option<u32>,
    },
    Continue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RoundTable {
    /// Ranks (in the current group) that leave before this round.
    retire: Vec<Rank>,
    stop: bool,
    /// Indexed by rank in the group after the retirements.
    cmds: Vec<Cmd>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JobDone {
    job: usize,
    code: i32,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    outputs: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Status {
    Idle,
    Busy,
    Done(JobDone),
    /// The worker could not execute `job` and is out of service.
    Unusable {
        job: usize,
    },
}

fn file_digests(root: &Path) -> io::Result<BTreeMap<String, [u8; 32]>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let e = e?;
            let p = e.path();
            let ft = e.file_type()?;
            if ft.is_dir() {
                stack.push(p);
            } else if ft.is_file() {
                let rel = p.strip_prefix(root).expect("below root");
                out.insert(
                    rel.to_string_lossy().into_owned(),
                    Sha256::digest(fs::read(&p)?).into(),
                );
            }
        }
    }
    Ok(out)
}

/// A job's private directory: node path and host path.
fn job_dir(ctx: &NodeContext, job: usize) -> (String, PathBuf) {
    if ctx.is_sandboxed() {
        let node = format!("/.ptdistrib/job{job}");
        let host = ctx.resolve(&node);
        (node, host)
    } else {
        let host = std::env::temp_dir().join(format!(
            "ptdistrib-{}-{}-{job}",
            std::process::id(),
            ctx.rank
        ));
        (host.to_string_lossy().into_owned(), host)
    }
}

/// Runs one job to completion on the worker.
fn execute(
    ctx: &NodeContext,
    job: usize,
    argv: &[String],
    file_name: &str,
    input: &[u8],
    fetch: bool,
) -> JobDone {
    let fail = |msg: String| JobDone {
        job,
        code: 126,
        stdout: Vec::new(),
        stderr: format!("{}: {msg}\n", ctx.hostname).into_bytes(),
        outputs: Vec::new(),
    };
    let (node_dir, host_dir) = job_dir(ctx, job);
    let _ = fs::remove_dir_all(&host_dir);
    let prepared = fs::create_dir_all(&host_dir).and_then(|_| {
        let name = Path::new(file_name)
            .file_name()
            .ok_or_else(|| io::Error::other("bad file name"))?;
        ctx.write_file(&host_dir.join(name), input)
    });
    if let Err(e) = prepared {
        let _ = fs::remove_dir_all(&host_dir);
        return fail(format!("cannot stage {file_name}: {e}"));
    }
    let before = file_digests(&host_dir).unwrap_or_default();
    let out = NodeShell::with_cwd(ctx, node_dir).run(argv);
    let mut outputs = Vec::new();
    if fetch {
        match file_digests(&host_dir) {
            Ok(after) => {
                for (name, d) in after {
                    if before.get(&name) != Some(&d) {
                        if let Ok(bytes) = fs::read(host_dir.join(&name)) {
                            outputs.push((name, bytes));
                        }
                    }
                }
            }
            Err(e) => {
                let _ = fs::remove_dir_all(&host_dir);
                return fail(format!("cannot scan job directory: {e}"));
            }
        }
    }
    let _ = fs::remove_dir_all(&host_dir);
    JobDone {
        job,
        code: out.code,
        stdout: out.stdout,
        stderr: out.stderr,
        outputs,
    }
}

enum Running {
    Ticking { left: u32, done: JobDone },
    Thread(mpsc::Receiver<JobDone>),
}

fn current<'a>(world: &'a NodeGroup, sub: &'a Option<NodeGroup>) -> &'a NodeGroup {
    sub.as_ref().unwrap_or(world)
}

pub(crate) fn node_main(
    world: &NodeGroup,
    ctx: &NodeContext,
    job: &DistribJob,
) -> Result<i32, PtError> {
    let mut sub: Option<NodeGroup> = None;
    let mut accepted = 0u32;
    let mut running: Option<Running> = None;
    let mut ok = true;
    let mut unusable = false;
    loop {
        let table: RoundTable = decode(&broadcast(current(world, &sub), 0, Vec::new())?)?;
        if !table.retire.is_empty() {
            let me = current(world, &sub).rank();
            let leaving = table.retire.contains(&me);
            let next = split(current(world, &sub), (!leaving).then_some(0))?;
            if leaving {
                break;
            }
            sub = next;
        }
        if table.stop {
            break;
        }
        let g = current(world, &sub);
        let cmd = table
            .cmds
            .get(g.rank())
            .cloned()
            .ok_or_else(|| PtError::Protocol("round table too short".into()))?;
        let mut status = None;
        if let Cmd::Assign {
            job: id,
            argv,
            file_name,
            ticks,
        } = cmd
        {
            let input = g.recv(0, TAG_FILE)?;
            let limit = match ctx.fault {
                Some(Fault::Unusable { after_jobs }) => Some(after_jobs),
                _ => None,
            };
            if running.is_some() || unusable || limit.is_some_and(|n| accepted >= n) {
                unusable = true;
                status = Some(Status::Unusable { job: id });
            } else {
                accepted += 1;
                running = Some(match ticks {
                    Some(t) => Running::Ticking {
                        left: t.max(1),
                        done: execute(ctx, id, &argv, &file_name, &input, job.fetch),
                    },
                    None => {
                        let (tx, rx) = mpsc::channel();
                        let c = ctx.clone();
                        let fetch = job.fetch;
                        std::thread::spawn(move || {
                            let _ = tx.send(execute(&c, id, &argv, &file_name, &input, fetch));
                        });
                        Running::Thread(rx)
                    }
                });
            }
        }
        let status = status.unwrap_or_else(|| match running.take() {
            None => Status::Idle,
            Some(Running::Ticking { left, done }) if left <= 1 => Status::Done(done),
            Some(Running::Ticking { left, done }) => {
                running = Some(Running::Ticking {
                    left: left - 1,
                    done,
                });
                Status::Busy
            }
            Some(Running::Thread(rx)) => match rx.recv_timeout(BUSY_WAIT) {
                Ok(done) => Status::Done(done),
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    running = Some(Running::Thread(rx));
                    Status::Busy
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => Status::Done(JobDone {
                    job: usize::MAX,
                    code: 1,
                    stdout: Vec::new(),
                    stderr: b"job thread died\n".to_vec(),
                    outputs: Vec::new(),
                }),
            },
        });
        if let Status::Done(d) = &status {
            ok &= d.code == 0;
        }
        gather(g, 0, encode(&status))?;
    }
    reduce(world, 0, ReduceOp::Min, ok as i64)?;
    Ok(if ok { 0 } else { 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Running,
    Done(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub file: PathBuf,
    /// Host that executed the job.
    pub worker: Option<String>,
    pub status: JobStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

/// Scheduling events; workers are world ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Assign {
        round: u32,
        job: usize,
        worker: Rank,
    },
    Done {
        round: u32,
        job: usize,
        worker: Rank,
        code: i32,
    },
    Rejected {
        round: u32,
        job: usize,
        worker: Rank,
    },
}

#[derive(Debug, Clone, Default)]
pub struct DistribConfig {
    pub fetch: bool,
    /// Where fetched files go; the current directory when `None`.
    pub out_dir: Option<PathBuf>,
    /// Simulated job durations in rounds, by file index.
    pub durations: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct DistribReport {
    pub jobs: Vec<JobRecord>,
    pub trace: Vec<TraceEvent>,
    /// Status-gathering rounds until the last job finished.
    pub rounds: u32,
    pub unprocessed: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Local paths written by fetch, in the order they were written.
    pub fetched: Vec<PathBuf>,
    pub report: ExitReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Worker {
    Idle,
    Busy(usize),
    Leaving,
}

/// The orchestrator's scheduling loop over a launched group.
pub fn schedule(
    world: &NodeGroup,
    template: &str,
    files: &[PathBuf],
    cfg: &DistribConfig,
) -> Result<DistribReport, PtError> {
    let mut jobs: Vec<JobRecord> = files
        .iter()
        .map(|f| JobRecord {
            file: f.clone(),
            worker: None,
            status: JobStatus::Pending,
            stdout: Vec::new(),
            stderr: Vec::new(),
        })
        .collect();
    let mut pending: VecDeque<usize> = (0..files.len()).collect();
    // world rank of each member of the current group, rank 0 first
    let mut members: Vec<Rank> = (0..world.size()).collect();
    let mut state: HashMap<Rank, Worker> =
        members[1..].iter().map(|&w| (w, Worker::Idle)).collect();
    let mut sub: Option<NodeGroup> = None;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut fetched = Vec::new();
    let mut written_by: HashMap<String, usize> = HashMap::new();
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut round = 0u32;
    let mut rounds = 0u32;
    loop {
        let retire: Vec<Rank> = members
            .iter()
            .enumerate()
            .filter(|(_, w)| state.get(w) == Some(&Worker::Leaving))
            .map(|(i, _)| i)
            .collect();
        members.retain(|w| state.get(w) != Some(&Worker::Leaving));
        state.retain(|_, s| *s != Worker::Leaving);
        let busy = state.values().any(|s| matches!(s, Worker::Busy(_)));
        let stop = (pending.is_empty() && !busy) || state.is_empty();
        round += 1;
        let mut cmds = vec![Cmd::Continue; members.len()];
        let mut shipments = Vec::new();
        if !stop {
            for (rank, w) in members.iter().enumerate().skip(1) {
                if state[w] != Worker::Idle {
                    continue;
                }
                let Some(j) = pending.pop_front() else { break };
                let name = files[j]
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let argv = substitute(template, &name)?;
                let ticks = cfg
                    .durations
                    .as_ref()
                    .map(|d| d.get(j).copied().unwrap_or(1));
                cmds[rank] = Cmd::Assign {
                    job: j,
                    argv,
                    file_name: name,
                    ticks,
                };
                state.insert(*w, Worker::Busy(j));
                jobs[j].status = JobStatus::Running;
                trace.push(TraceEvent::Assign {
                    round,
                    job: j,
                    worker: *w,
                });
                shipments.push((rank, j));
            }
        }
        let table = RoundTable {
            retire: retire.clone(),
            stop,
            cmds,
        };
        broadcast(current(world, &sub), 0, encode(&table))?;
        if !retire.is_empty() {
            sub = split(current(world, &sub), Some(0))?;
        }
        if stop {
            break;
        }
        let g = current(world, &sub);
        for (rank, j) in shipments {
            let data = fs::read(&files[j])?;
            g.send(rank, TAG_FILE, data)?;
        }
        let statuses = gather(g, 0, Vec::new())?.expect("rank 0 is the root");
        rounds = round;
        for (rank, raw) in statuses.iter().enumerate().skip(1) {
            let w = members[rank];
            match decode::<Status>(raw)? {
                Status::Idle | Status::Busy => {}
                Status::Unusable { job } => {
                    if state.get(&w) != Some(&Worker::Busy(job)) {
                        return Err(PtError::Protocol(format!(
                            "worker {w} rejected job {job} it did not hold"
                        )));
                    }
                    trace.push(TraceEvent::Rejected {
                        round,
                        job,
                        worker: w,
                    });
                    jobs[job].status = JobStatus::Pending;
                    pending.push_front(job);
                    state.insert(w, Worker::Leaving);
                    warnings.push(format!(
                        "ptdistrib: {} cannot execute jobs, dropped",
                        world.host_of_rank(w)
                    ));
                }
                Status::Done(d) => {
                    if state.get(&w) != Some(&Worker::Busy(d.job)) {
                        return Err(PtError::Protocol(format!(
                            "worker {w} finished job {} it did not hold",
                            d.job
                        )));
                    }
                    trace.push(TraceEvent::Done {
                        round,
                        job: d.job,
                        worker: w,
                        code: d.code,
                    });
                    state.insert(w, Worker::Idle);
                    let rec = &mut jobs[d.job];
                    rec.status = JobStatus::Done(d.code);
                    rec.worker = Some(world.host_of_rank(w).to_string());
                    rec.stdout = d.stdout;
                    rec.stderr = d.stderr;
                    for (name, bytes) in d.outputs {
                        let dest = out_dir.join(&name);
                        if let Some(prev) = written_by.insert(name.clone(), d.job) {
                            warnings.push(format!(
                                "ptdistrib: {name} produced by both {} and {}; keeping the later one",
                                files[prev].display(),
                                files[d.job].display()
                            ));
                        }
                        if let Some(parent) = dest.parent() {
                            fs::create_dir_all(parent)?;
                        }
                        fs::write(&dest, bytes)?;
                        fetched.push(dest);
                    }
                }
            }
        }
    }
    let unprocessed: Vec<PathBuf> = pending.iter().map(|&j| files[j].clone()).collect();
    let min = reduce(world, 0, ReduceOp::Min, unprocessed.is_empty() as i64)?.expect("root");
    let per_host = jobs
        .iter()
        .map(|j| HostStatus {
            host: j.worker.clone().unwrap_or_else(|| "-".into()),
            code: match j.status {
                JobStatus::Done(c) => c,
                _ => 1,
            },
            note: Some(j.file.display().to_string()),
        })
        .collect();
    Ok(DistribReport {
        jobs,
        trace,
        rounds,
        unprocessed,
        warnings,
        fetched,
        report: ExitReport::from_min(per_host, min),
    })
}

/// Runs `template` once per file across `hosts`.
pub fn ptdistrib(
    cluster: &Cluster,
    hosts: &HostSet,
    template: &str,
    files: &[PathBuf],
    cfg: &DistribConfig,
) -> Result<DistribReport, PtError> {
    substitute(template, "x")?;
    if files.is_empty() {
        return Err(PtError::usage("ptdistrib: no input files"));
    }
    for f in files {
        if !f.is_file() {
            return Err(PtError::usage(format!(
                "ptdistrib: `{}` is not a readable file",
                f.display()
            )));
        }
    }
    let role = Role::Distrib(DistribJob { fetch: cfg.fetch });
    cluster.run(hosts, &role, |g, _| schedule(g, template, files, cfg))
}

/// Parses `[-f] '<template>' <file>...` (host arguments already removed).
pub fn parse_distrib_args(args: &[String]) -> Result<(bool, String, Vec<PathBuf>), PtError> {
    let (fetch, rest) = match args.first().map(String::as_str) {
        Some("-f") => (true, &args[1..]),
        _ => (false, args),
    };
    let Some((template, files)) = rest.split_first() else {
        return Err(PtError::usage(
            "usage: ptdistrib [hostargs] [-f] '<command>' <file>...",
        ));
    };
    if files.is_empty() {
        return Err(PtError::usage("ptdistrib: no input files"));
    }
    substitute(template, "x")?;
    Ok((
        fetch,
        template.clone(),
        files.iter().map(PathBuf::from).collect(),
    ))
}

/// Checks a trace: every job done exactly once, no worker holding two jobs
/// at a time. Returns a description of the first violation.
pub fn check_trace(trace: &[TraceEvent], n_jobs: usize) -> Result<(), String> {
    let mut done = vec![0u32; n_jobs];
    let mut holding: HashMap<Rank, usize> = HashMap::new();
    for ev in trace {
        match *ev {
            TraceEvent::Assign { job, worker, round } => {
                if let Some(j) = holding.insert(worker, job) {
                    return Err(format!(
                        "round {round}: worker {worker} got job {job} while holding {j}"
                    ));
                }
            }
            TraceEvent::Done {
                job, worker, round, ..
            }
            | TraceEvent::Rejected { job, worker, round } => {
                if holding.remove(&worker) != Some(job) {
                    return Err(format!(
                        "round {round}: worker {worker} released job {job} it did not hold"
                    ));
                }
                if matches!(ev, TraceEvent::Done { .. }) {
                    done[job] += 1;
                }
            }
        }
    }
    match done.iter().position(|&c| c != 1) {
        Some(j) => Err(format!("job {j} done {} times", done[j])),
        None => Ok(()),
    }
}
