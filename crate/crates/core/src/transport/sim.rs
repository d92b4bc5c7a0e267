//! In-process simulated cluster: one thread per node, in-memory mailboxes.
//!
//! Each rank keeps a logical round clock. A send happens in round
//! `clock + 1` and advances the sender's clock to it; a receive advances
//! the receiver's clock to the round of the message. A rank therefore sends
//! at most once per round, and a message can only be forwarded in a round
//! after the one it arrived in. `max_rounds` is the latest round in which
//! any message was sent, i.e. the length of the critical path in sends.
//! These values depend only on the causal structure of the protocol, so
//! repeated runs produce identical statistics.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::mailbox::{Mailbox, Msg};
use super::{AgentEntry, LaunchOptions, Link, NodeGroup, Rank, Tag, TransportError};
use crate::node::{Fault, NodeContext, NodeEnv};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagStats {
    pub messages: u64,
    pub max_round: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimStats {
    pub messages_sent: u64,
    pub max_rounds: u64,
    pub by_tag: BTreeMap<Tag, TagStats>,
}

impl SimStats {
    pub fn tag(&self, tag: Tag) -> TagStats {
        self.by_tag.get(&tag).copied().unwrap_or_default()
    }
}

struct Fabric {
    boxes: Vec<Mailbox>,
    alive: Vec<AtomicBool>,
    stats: Mutex<SimStats>,
    timeout: Duration,
}

impl Fabric {
    fn mark_dead(&self, rank: Rank) {
        self.alive[rank].store(false, Ordering::SeqCst);
        for b in &self.boxes {
            b.mark_dead(rank);
        }
    }
}

struct SimLink {
    me: Rank,
    clock: u64,
    fabric: Arc<Fabric>,
}

impl Link for SimLink {
    fn send(
        &mut self,
        ctx: u64,
        dst: Rank,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<(), TransportError> {
        let fabric = &self.fabric;
        if !fabric.alive[dst].load(Ordering::SeqCst) {
            return Err(TransportError::PeerGone { rank: dst });
        }
        self.clock += 1;
        let round = self.clock;
        {
            let mut st = fabric.stats.lock().unwrap_or_else(|e| e.into_inner());
            st.messages_sent += 1;
            st.max_rounds = st.max_rounds.max(round);
            let t = st.by_tag.entry(tag).or_default();
            t.messages += 1;
            t.max_round = t.max_round.max(round);
        }
        fabric.boxes[dst].push(
            (ctx, self.me, tag),
            dst,
            Msg { round, payload },
            fabric.timeout,
            || fabric.alive[dst].load(Ordering::SeqCst),
        )
    }

    fn recv(&mut self, ctx: u64, src: Rank, tag: Tag) -> Result<Vec<u8>, TransportError> {
        let m = self.fabric.boxes[self.me].pop((ctx, src, tag), self.fabric.timeout)?;
        self.clock = self.clock.max(m.round);
        Ok(m.payload)
    }

    fn recv_any(
        &mut self,
        ctx: u64,
        srcs: &[Rank],
        tag: Tag,
    ) -> Result<(Rank, Vec<u8>), TransportError> {
        let (src, m) = self.fabric.boxes[self.me].pop_any(ctx, srcs, tag, self.fabric.timeout)?;
        self.clock = self.clock.max(m.round);
        Ok((src, m.payload))
    }

    fn stats(&self) -> Option<SimStats> {
        Some(
            self.fabric
                .stats
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .clone(),
        )
    }
}

/// Marks its rank dead when the node's thread ends, however it ends.
struct RankGuard {
    fabric: Arc<Fabric>,
    rank: Rank,
}

impl Drop for RankGuard {
    fn drop(&mut self) {
        self.fabric.mark_dead(self.rank);
    }
}

pub(crate) struct SimWorkers {
    handles: Vec<JoinHandle<i32>>,
    fabric: Arc<Fabric>,
}

impl SimWorkers {
    pub fn join(self) -> Vec<i32> {
        self.fabric.mark_dead(0);
        self.handles
            .into_iter()
            .map(|h| h.join().unwrap_or(101))
            .collect()
    }
}

pub(crate) fn launch(
    names: Arc<Vec<String>>,
    opts: &LaunchOptions,
    role_payload: &[u8],
    entry: AgentEntry,
) -> Result<(NodeGroup, NodeContext, SimWorkers), TransportError> {
    let size = names.len();
    let fabric = Arc::new(Fabric {
        boxes: (0..size)
            .map(|_| Mailbox::new(Some(opts.queue_capacity.max(1))))
            .collect(),
        alive: (0..size).map(|_| AtomicBool::new(true)).collect(),
        stats: Mutex::new(SimStats::default()),
        timeout: opts.recv_timeout,
    });
    let (boxes, roots) = super::sandbox_roots(&names, opts);
    let roots = Arc::new(roots);

    let mut contexts = Vec::with_capacity(size);
    for rank in 1..size {
        let sb = boxes[rank].clone().expect("sim nodes are sandboxed");
        sb.ensure()?;
        contexts.push(NodeContext {
            rank,
            hostname: opts.node_name(&names[rank]),
            env: NodeEnv::Sandboxed(sb),
            fault: opts.faults.get(&names[rank]).copied(),
        });
    }

    let mut handles = Vec::with_capacity(size - 1);
    for ctx in contexts {
        let rank = ctx.rank;
        let fabric_t = Arc::clone(&fabric);
        let group = NodeGroup::new_world(
            rank,
            Arc::clone(&names),
            Arc::clone(&roots),
            super::Backend::Sim,
            Box::new(SimLink {
                me: rank,
                clock: 0,
                fabric: Arc::clone(&fabric),
            }),
        );
        let payload = role_payload.to_vec();
        let entry = Arc::clone(&entry);
        let handle = thread::Builder::new()
            .name(format!("sim-{}", names[rank]))
            .spawn(move || {
                let _guard = RankGuard {
                    fabric: fabric_t,
                    rank,
                };
                if ctx.fault == Some(Fault::Dead) {
                    return 255;
                }
                entry(group, ctx, payload)
            })
            .map_err(|e| TransportError::Launch {
                host: names[rank].clone(),
                reason: e.to_string(),
            })?;
        handles.push(handle);
    }

    let group = NodeGroup::new_world(
        0,
        Arc::clone(&names),
        roots,
        super::Backend::Sim,
        Box::new(SimLink {
            me: 0,
            clock: 0,
            fabric: Arc::clone(&fabric),
        }),
    );
    let ctx = NodeContext::native(0, names[0].clone());
    Ok((group, ctx, SimWorkers { handles, fabric }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hostspec::expand_pattern;
    use crate::transport::launch as launch_group;
    use proptest::prelude::*;

    fn opts(dir: &std::path::Path) -> LaunchOptions {
        let mut o = LaunchOptions::sim(dir);
        o.recv_timeout = Duration::from_secs(10);
        o
    }

    #[test]
    fn send_recv_fifo_and_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("a b").unwrap();
        let entry: AgentEntry = Arc::new(|g: NodeGroup, _, _| {
            if g.rank() == 1 {
                g.send(2, 7, b"first".to_vec()).unwrap();
                g.send(2, 7, b"second".to_vec()).unwrap();
                0
            } else {
                let a = g.recv(1, 7).unwrap();
                let b = g.recv(1, 7).unwrap();
                g.send(0, 7, [a, b].concat()).unwrap();
                0
            }
        });
        let l = launch_group(&hosts, &opts(dir.path()), b"", entry).unwrap();
        assert_eq!(l.group.recv(2, 7).unwrap(), b"firstsecond");
        let stats = l.stats().unwrap();
        assert_eq!(stats.messages_sent, 3);
        // 1 sends in rounds 1 and 2; 2 forwards after the second arrival.
        assert_eq!(stats.max_rounds, 3);
        assert_eq!(l.finish().unwrap(), vec![0, 0]);
    }

    #[test]
    fn recv_from_dead_peer_fails() {
        let dir = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("a b").unwrap();
        let o = opts(dir.path()).with_fault("b", Fault::Dead);
        let entry: AgentEntry = Arc::new(|_, _, _| 0);
        let l = launch_group(&hosts, &o, b"", entry).unwrap();
        assert!(matches!(
            l.group.recv(2, 1),
            Err(TransportError::PeerGone { rank: 2 })
        ));
        let codes = l.finish().unwrap();
        assert_eq!(codes, vec![0, 255]);
    }

    #[test]
    fn self_send_and_bad_rank_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("a").unwrap();
        let l = launch_group(&hosts, &opts(dir.path()), b"", Arc::new(|_, _, _| 0)).unwrap();
        assert!(matches!(
            l.group.send(0, 1, vec![]),
            Err(TransportError::SelfSend(0))
        ));
        assert!(matches!(
            l.group.send(5, 1, vec![]),
            Err(TransportError::BadRank { .. })
        ));
    }

    #[test]
    fn role_payload_reaches_nodes() {
        let dir = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("n%d@1-3").unwrap();
        let entry: AgentEntry = Arc::new(|g: NodeGroup, ctx: NodeContext, p: Vec<u8>| {
            assert_eq!(ctx.hostname, g.host_of_rank(g.rank()));
            g.send(0, 1, p).unwrap();
            0
        });
        let l = launch_group(&hosts, &opts(dir.path()), b"role", entry).unwrap();
        for r in 1..=3 {
            assert_eq!(l.group.recv(r, 1).unwrap(), b"role");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sandboxes_are_isolated(writes in prop::collection::vec((1usize..5, "[a-z]{1,6}", any::<u8>()), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let hosts = expand_pattern("n%d@1-4").unwrap();
            let l = launch_group(&hosts, &opts(dir.path()), b"", Arc::new(|_, _, _| 0)).unwrap();
            let mut expected: BTreeMap<(usize, String), u8> = BTreeMap::new();
            for (rank, name, byte) in &writes {
                std::fs::write(l.group.sandbox_root(*rank).unwrap().join(name), [*byte]).unwrap();
                expected.insert((*rank, name.clone()), *byte);
            }
            for rank in 1..=4 {
                let root = l.group.sandbox_root(rank).unwrap();
                let mut seen: Vec<String> = std::fs::read_dir(&root).unwrap()
                    .map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
                seen.sort();
                let mine: Vec<String> = expected.keys().filter(|(r, _)| *r == rank).map(|(_, n)| n.clone()).collect();
                prop_assert_eq!(seen, mine);
            }
        }
    }
}
