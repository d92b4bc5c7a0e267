//! Node groups and ordered point-to-point delivery.
//!
//! A [`NodeGroup`] is the set of communicating ranks for one command
//! invocation. Rank 0 is always the invoking process (the orchestrator);
//! ranks `1..=N` stand for the N target hosts. Three backends exist:
//!
//! * `Sim`: every rank is a thread of this process; delivery goes through
//!   in-memory mailboxes and is accounted in [`SimStats`].
//! * `LocalProc`: every rank is a subprocess of this machine, linked by a
//!   full mesh of loopback TCP connections.
//! * `RemoteShell`: like `LocalProc`, but agents are started through a
//!   user-configured remote-shell command template.
//!
//! Messages are delivered FIFO per (source, destination, tag) within a
//! group context.

mod mailbox;
mod sim;
mod tcp;
pub mod wire;

pub(crate) use tcp::exit_code;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hostspec::HostSet;
use crate::node::{Fault, NodeContext, SandboxLayout};

pub use sim::SimStats;
pub use tcp::{agent_main, AgentArgs};

pub type Rank = usize;
pub type Tag = u8;

/// Tags at or above this value are reserved for the collectives layer.
pub const RESERVED_TAGS: Tag = 0xE0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    Sim,
    LocalProc,
    RemoteShell,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Sim => "sim",
            Backend::LocalProc => "local",
            Backend::RemoteShell => "remote",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Backend::Sim),
            "local" | "localproc" => Ok(Backend::LocalProc),
            "remote" | "ssh" | "remoteshell" => Ok(Backend::RemoteShell),
            other => Err(format!("unknown backend `{other}` (sim, local, remote)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("empty host set")]
    NoHosts,
    #[error("failed to launch on host {host}: {reason}")]
    Launch { host: String, reason: String },
    #[error("rank {rank} terminated")]
    PeerGone { rank: Rank },
    #[error("timed out waiting for rank {peer}")]
    Timeout { peer: Rank },
    #[error("invalid rank {rank} for group of size {size}")]
    BadRank { rank: Rank, size: usize },
    #[error("rank {0} cannot send to itself")]
    SelfSend(Rank),
    #[error("{0} backend has no sandbox")]
    NoSandbox(Backend),
    #[error("rank {0} is the orchestrator and runs natively")]
    OrchestratorRank(Rank),
    #[error("wire protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Delivery engine behind a group; addresses are world ranks.
pub(crate) trait Link: Send {
    fn send(
        &mut self,
        ctx: u64,
        dst: Rank,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<(), TransportError>;
    fn recv(&mut self, ctx: u64, src: Rank, tag: Tag) -> Result<Vec<u8>, TransportError>;
    fn recv_any(
        &mut self,
        ctx: u64,
        srcs: &[Rank],
        tag: Tag,
    ) -> Result<(Rank, Vec<u8>), TransportError>;
    fn stats(&self) -> Option<SimStats>;
}

/// One rank's handle on a group of communicating ranks.
///
/// A handle may be moved between threads but is not meant to be shared.
pub struct NodeGroup {
    rank: Rank,
    members: Arc<Vec<Rank>>,
    hosts: Arc<Vec<String>>,
    sandboxes: Arc<Vec<Option<PathBuf>>>,
    ctx: u64,
    backend: Backend,
    link: Arc<Mutex<Box<dyn Link>>>,
    split_seq: Cell<u64>,
}

impl fmt::Debug for NodeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeGroup")
            .field("rank", &self.rank)
            .field("size", &self.size())
            .field("ctx", &self.ctx)
            .field("backend", &self.backend)
            .finish()
    }
}

impl NodeGroup {
    pub(crate) fn new_world(
        rank: Rank,
        hosts: Arc<Vec<String>>,
        sandboxes: Arc<Vec<Option<PathBuf>>>,
        backend: Backend,
        link: Box<dyn Link>,
    ) -> Self {
        let members = Arc::new((0..hosts.len()).collect());
        NodeGroup {
            rank,
            members,
            hosts,
            sandboxes,
            ctx: 1,
            backend,
            link: Arc::new(Mutex::new(link)),
            split_seq: Cell::new(0),
        }
    }

    /// A subgroup sharing this handle's link. `parent_ranks` lists the
    /// members in their new rank order.
    pub(crate) fn subgroup(&self, parent_ranks: &[Rank], ctx: u64) -> Option<NodeGroup> {
        let rank = parent_ranks.iter().position(|&r| r == self.rank)?;
        Some(NodeGroup {
            rank,
            members: Arc::new(parent_ranks.iter().map(|&r| self.members[r]).collect()),
            hosts: Arc::new(
                parent_ranks
                    .iter()
                    .map(|&r| self.hosts[r].clone())
                    .collect(),
            ),
            sandboxes: Arc::new(
                parent_ranks
                    .iter()
                    .map(|&r| self.sandboxes[r].clone())
                    .collect(),
            ),
            ctx,
            backend: self.backend,
            link: Arc::clone(&self.link),
            split_seq: Cell::new(0),
        })
    }

    pub(crate) fn next_split_seq(&self) -> u64 {
        let s = self.split_seq.get();
        self.split_seq.set(s + 1);
        s
    }

    pub(crate) fn context(&self) -> u64 {
        self.ctx
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn host_of_rank(&self, rank: Rank) -> &str {
        &self.hosts[rank]
    }

    /// Hostnames indexed by rank.
    pub fn hosts(&self) -> &[String] {
        &self.hosts
    }

    /// Rank in the launch-time group.
    pub fn world_rank(&self, rank: Rank) -> Rank {
        self.members[rank]
    }

    fn check_peer(&self, peer: Rank) -> Result<(), TransportError> {
        if peer >= self.size() {
            return Err(TransportError::BadRank {
                rank: peer,
                size: self.size(),
            });
        }
        if peer == self.rank {
            return Err(TransportError::SelfSend(peer));
        }
        Ok(())
    }

    fn link(&self) -> std::sync::MutexGuard<'_, Box<dyn Link>> {
        self.link.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn send(&self, dst: Rank, tag: Tag, payload: Vec<u8>) -> Result<(), TransportError> {
        self.check_peer(dst)?;
        let world = self.members[dst];
        self.link().send(self.ctx, world, tag, payload)
    }

    pub fn recv(&self, src: Rank, tag: Tag) -> Result<Vec<u8>, TransportError> {
        self.check_peer(src)?;
        let world = self.members[src];
        self.link().recv(self.ctx, world, tag)
    }

    /// Receives from whichever of `srcs` delivers first.
    pub fn recv_any(&self, srcs: &[Rank], tag: Tag) -> Result<(Rank, Vec<u8>), TransportError> {
        let mut world = Vec::with_capacity(srcs.len());
        for &s in srcs {
            self.check_peer(s)?;
            world.push(self.members[s]);
        }
        let (w, payload) = self.link().recv_any(self.ctx, &world, tag)?;
        let src = srcs[world
            .iter()
            .position(|&x| x == w)
            .expect("source came from list")];
        Ok((src, payload))
    }

    /// Directory under which all file operations of `rank` are rooted.
    pub fn sandbox_root(&self, rank: Rank) -> Result<PathBuf, TransportError> {
        if self.backend == Backend::RemoteShell {
            return Err(TransportError::NoSandbox(self.backend));
        }
        if rank >= self.size() {
            return Err(TransportError::BadRank {
                rank,
                size: self.size(),
            });
        }
        self.sandboxes[rank]
            .clone()
            .ok_or(TransportError::OrchestratorRank(rank))
    }

    /// Delivery statistics; only the simulated backend keeps them.
    pub fn stats(&self) -> Option<SimStats> {
        self.link().stats()
    }
}

/// Code run by every non-orchestrator rank: the group handle, the node
/// context and the role payload handed to [`launch`].
pub type AgentEntry = Arc<dyn Fn(NodeGroup, NodeContext, Vec<u8>) -> i32 + Send + Sync>;

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub backend: Backend,
    /// Where sandboxed nodes keep their files.
    pub sandbox: SandboxLayout,
    /// Injected faults by hostname (simulated and local backends).
    pub faults: BTreeMap<String, Fault>,
    /// Agent executable for process backends; defaults to the current one.
    pub agent_program: Option<PathBuf>,
    /// Remote-shell template with `{host}` and `{cmd}` placeholders.
    pub remote_shell: String,
    /// Address agents use to reach the orchestrator (remote backend).
    pub advertise_host: Option<String>,
    pub recv_timeout: Duration,
    pub launch_timeout: Duration,
    /// Per-queue bound of the simulated mailboxes.
    pub queue_capacity: usize,
    /// Domain appended to the names sandboxed nodes report for themselves.
    pub domain: Option<String>,
}

impl LaunchOptions {
    pub fn sim(sandbox_base: impl Into<PathBuf>) -> Self {
        LaunchOptions {
            backend: Backend::Sim,
            sandbox: SandboxLayout::new(sandbox_base),
            faults: BTreeMap::new(),
            agent_program: None,
            remote_shell: "ssh {host} {cmd}".to_string(),
            advertise_host: None,
            recv_timeout: Duration::from_secs(120),
            launch_timeout: Duration::from_secs(30),
            queue_capacity: 32,
            domain: None,
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    /// Name a node standing for `host` reports as its own.
    pub fn node_name(&self, host: &str) -> String {
        match &self.domain {
            Some(d) if !d.is_empty() && !host.contains('.') => format!("{host}.{d}"),
            _ => host.to_string(),
        }
    }

    pub fn with_fault(mut self, host: impl Into<String>, fault: Fault) -> Self {
        self.faults.insert(host.into(), fault);
        self
    }
}

enum Workers {
    Threads(sim::SimWorkers),
    Procs(tcp::ProcWorkers),
}

/// A launched group as seen by the orchestrator.
pub struct Launch {
    pub group: NodeGroup,
    pub ctx: NodeContext,
    workers: Option<Workers>,
}

impl Launch {
    pub fn stats(&self) -> Option<SimStats> {
        self.group.stats()
    }

    /// Waits for every node to finish and returns their exit codes by
    /// rank (index 0 is rank 1).
    pub fn finish(self) -> Result<Vec<i32>, TransportError> {
        self.finish_with_stats().map(|(codes, _)| codes)
    }

    /// Like [`Launch::finish`], also returning the statistics of the whole
    /// run (taken after every node has stopped).
    pub fn finish_with_stats(mut self) -> Result<(Vec<i32>, Option<SimStats>), TransportError> {
        let codes = match self.workers.take() {
            Some(Workers::Threads(w)) => w.join(),
            Some(Workers::Procs(w)) => w.wait()?,
            None => Vec::new(),
        };
        Ok((codes, self.group.stats()))
    }
}

impl Drop for Launch {
    fn drop(&mut self) {
        match self.workers.take() {
            Some(Workers::Threads(w)) => {
                w.join();
            }
            Some(Workers::Procs(w)) => w.kill(),
            None => {}
        }
    }
}

/// Starts one node per host and returns the orchestrator's view.
///
/// The group has `hosts.len() + 1` ranks. For the simulated backend `entry`
/// runs on a thread per node; process backends start the agent program,
/// which runs its own entry point.
pub fn launch(
    hosts: &HostSet,
    opts: &LaunchOptions,
    role_payload: &[u8],
    entry: AgentEntry,
) -> Result<Launch, TransportError> {
    if hosts.is_empty() {
        return Err(TransportError::NoHosts);
    }
    let mut names = vec![crate::node::local_hostname()];
    names.extend(hosts.iter().map(str::to_string));
    let names = Arc::new(names);
    match opts.backend {
        Backend::Sim => {
            let (group, ctx, workers) = sim::launch(names, opts, role_payload, entry)?;
            Ok(Launch {
                group,
                ctx,
                workers: Some(Workers::Threads(workers)),
            })
        }
        Backend::LocalProc | Backend::RemoteShell => {
            let (group, ctx, workers) = tcp::launch(names, opts, role_payload)?;
            Ok(Launch {
                group,
                ctx,
                workers: Some(Workers::Procs(workers)),
            })
        }
    }
}

/// Result of [`simulate`]: one value per rank plus delivery statistics.
#[derive(Debug)]
pub struct SimRun<T> {
    pub results: Vec<T>,
    pub stats: SimStats,
}

/// Body run by every rank of a simulated group.
pub type RankFn<T> = Arc<dyn Fn(&NodeGroup, &NodeContext) -> T + Send + Sync>;

/// Runs `f` on every rank of a simulated group (rank 0 on the calling
/// thread) and collects the return values by rank.
pub fn simulate<T: Send + 'static>(
    hosts: &HostSet,
    opts: &LaunchOptions,
    f: RankFn<T>,
) -> Result<SimRun<T>, TransportError> {
    let opts = LaunchOptions {
        backend: Backend::Sim,
        ..opts.clone()
    };
    let slots: Arc<Mutex<Vec<Option<T>>>> =
        Arc::new(Mutex::new((0..=hosts.len()).map(|_| None).collect()));
    let (f_node, slots_node) = (Arc::clone(&f), Arc::clone(&slots));
    let entry: AgentEntry = Arc::new(move |g: NodeGroup, ctx: NodeContext, _| {
        let r = f_node(&g, &ctx);
        slots_node.lock().unwrap_or_else(|e| e.into_inner())[ctx.rank] = Some(r);
        0
    });
    let l = launch(hosts, &opts, b"", entry)?;
    let mine = f(&l.group, &l.ctx);
    let (_, stats) = l.finish_with_stats()?;
    let stats = stats.unwrap_or_default();
    let mut slots = slots.lock().unwrap_or_else(|e| e.into_inner());
    slots[0] = Some(mine);
    let results = slots
        .drain(..)
        .enumerate()
        .map(|(rank, r)| r.ok_or(TransportError::PeerGone { rank }))
        .collect::<Result<Vec<T>, _>>()?;
    Ok(SimRun { results, stats })
}

/// Sandbox directories for rank 0..=N, `None` for the orchestrator.
pub(crate) fn sandbox_roots(
    names: &[String],
    opts: &LaunchOptions,
) -> (Vec<Option<crate::node::Sandbox>>, Vec<Option<PathBuf>>) {
    let boxes: Vec<Option<crate::node::Sandbox>> = if opts.backend == Backend::RemoteShell {
        vec![None; names.len()]
    } else {
        std::iter::once(None)
            .chain(opts.sandbox.sandboxes(&names[1..]).into_iter().map(Some))
            .collect()
    };
    let roots = boxes
        .iter()
        .map(|b| b.as_ref().map(|s| s.fs_root()))
        .collect();
    (boxes, roots)
}
