//! What every node runs: the role handed over at launch, and a small
//! wrapper that launches a role, runs the orchestrator's half and waits for
//! the nodes.

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collectives::gather;
use crate::distrib::DistribJob;
use crate::error::{decode, encode, PtError};
use crate::exec::ExecJob;
use crate::hostspec::HostSet;
use crate::node::{NodeContext, Sandbox};
use crate::predicates::TestJob;
use crate::procfind::FpsJob;
use crate::ptcopy::CopyJob;
use crate::transport::{launch, AgentEntry, Backend, LaunchOptions, NodeGroup, SimStats};

/// The task a launched group performs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Role {
    Exec(ExecJob),
    Test(TestJob),
    Copy(CopyJob),
    Fps(FpsJob),
    Distrib(DistribJob),
    /// Report the node's hostname and exit.
    Ping,
}

/// Entry point of every non-orchestrator rank.
pub fn node_entry(group: NodeGroup, ctx: NodeContext, payload: Vec<u8>) -> i32 {
    let role: Role = match decode(&payload) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: bad role payload: {e}", ctx.hostname);
            return 2;
        }
    };
    let r = match &role {
        Role::Exec(j) => crate::exec::node_main(&group, &ctx, j),
        Role::Test(j) => crate::predicates::node_main(&group, &ctx, j),
        Role::Copy(j) => crate::ptcopy::node_main(&group, &ctx, j),
        Role::Fps(j) => crate::procfind::node_main(&group, &ctx, j),
        Role::Distrib(j) => crate::distrib::node_main(&group, &ctx, j),
        Role::Ping => gather(&group, 0, encode(&ctx.hostname))
            .map(|_| 0)
            .map_err(PtError::from),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}: {e}", ctx.hostname);
            1
        }
    }
}

pub fn agent_entry() -> AgentEntry {
    Arc::new(node_entry)
}

/// Launch configuration plus helpers to run a role on a host set.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub opts: LaunchOptions,
}

impl Cluster {
    pub fn new(opts: LaunchOptions) -> Self {
        Cluster { opts }
    }

    /// A simulated cluster keeping node files under `base`.
    pub fn sim(base: impl Into<PathBuf>) -> Self {
        Cluster::new(LaunchOptions::sim(base))
    }

    pub fn backend(&self) -> Backend {
        self.opts.backend
    }

    /// Sandboxes of `hosts`, created if missing, in host order.
    pub fn prepare(&self, hosts: &HostSet) -> io::Result<Vec<Sandbox>> {
        let boxes = self.opts.sandbox.sandboxes(hosts.hosts());
        for b in &boxes {
            b.ensure()?;
        }
        Ok(boxes)
    }

    /// Sandbox of the first occurrence of `host`.
    pub fn sandbox(&self, host: &str) -> Sandbox {
        self.opts.sandbox.sandbox(host, 0)
    }

    /// Launches `role` on `hosts`, runs `f` as rank 0 and waits for every
    /// node to stop.
    pub fn run<T>(
        &self,
        hosts: &HostSet,
        role: &Role,
        f: impl FnOnce(&NodeGroup, &NodeContext) -> Result<T, PtError>,
    ) -> Result<T, PtError> {
        self.run_with_stats(hosts, role, f).map(|(t, _)| t)
    }

    pub fn run_with_stats<T>(
        &self,
        hosts: &HostSet,
        role: &Role,
        f: impl FnOnce(&NodeGroup, &NodeContext) -> Result<T, PtError>,
    ) -> Result<(T, Option<SimStats>), PtError> {
        let l = launch(hosts, &self.opts, &encode(role), agent_entry())?;
        let r = f(&l.group, &l.ctx);
        let finished = l.finish_with_stats();
        let t = r?;
        let (_, stats) = finished?;
        Ok((t, stats))
    }

    /// Hostnames reported by every node, in rank order.
    pub fn ping(&self, hosts: &HostSet) -> Result<Vec<String>, PtError> {
        self.run(hosts, &Role::Ping, |g, _| {
            let parts = gather(g, 0, Vec::new())?.expect("rank 0 is the root");
            parts[1..].iter().map(|p| decode::<String>(p)).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hostspec::expand_pattern;
    use crate::node::Fault;

    #[test]
    fn ping_reports_every_node() {
        let d = tempfile::tempdir().unwrap();
        let c = Cluster::sim(d.path());
        let names = c.ping(&expand_pattern("p%d@1-4").unwrap()).unwrap();
        assert_eq!(names, ["p1", "p2", "p3", "p4"]);
    }

    #[test]
    fn domain_suffix_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let mut c = Cluster::sim(d.path());
        c.opts.domain = Some("domain.tld".into());
        let names = c.ping(&expand_pattern("node%d@1-2").unwrap()).unwrap();
        assert_eq!(names, ["node1.domain.tld", "node2.domain.tld"]);
    }

    #[test]
    fn dead_node_fails_the_run() {
        let d = tempfile::tempdir().unwrap();
        let mut c = Cluster::sim(d.path());
        c.opts = c.opts.with_fault("p2", Fault::Dead);
        assert!(c.ping(&expand_pattern("p%d@1-3").unwrap()).is_err());
    }

    #[test]
    fn garbage_payload_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let sb = Sandbox {
            node_dir: d.path().to_path_buf(),
        };
        let hosts = expand_pattern("x1").unwrap();
        let opts = LaunchOptions::sim(d.path());
        let l = launch(&hosts, &opts, b"\xff\xff\xff", agent_entry()).unwrap();
        assert_eq!(l.finish().unwrap(), vec![2]);
        drop(sb);
    }
}
