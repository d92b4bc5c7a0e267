//! Collective operations over a [`NodeGroup`].
//!
//! Every member must make the same sequence of collective calls with the
//! same root. Messages carry a small header naming the operation and root
//! so a mismatched call is reported instead of silently mixing data.

use thiserror::Error;

use crate::transport::{NodeGroup, Rank, Tag, TransportError};

// One tag for every collective: calls are sequential per group, so a
// mismatched call shows up as a header mismatch rather than a hang.
const TAG_COLL: Tag = 0xE0;

const KIND_BCAST: u8 = 1;
const KIND_REDUCE: u8 = 2;
const KIND_GATHER: u8 = 3;

/// Split color of a member that joins no subgroup.
pub const UNDEFINED: Option<u32> = None;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("collective mismatch: {0}")]
    Mismatch(String),
    #[error("value {0} outside {{0,1}} for a logical reduction")]
    Domain(i64),
    #[error("root {root} outside group of size {size}")]
    BadRoot { root: Rank, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReduceOp {
    Min,
    LogicalAnd,
    LogicalOr,
}

impl ReduceOp {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ReduceOp::Min => a.min(b),
            ReduceOp::LogicalAnd => ((a != 0) && (b != 0)) as i64,
            ReduceOp::LogicalOr => ((a != 0) || (b != 0)) as i64,
        }
    }

    fn code(self) -> u8 {
        match self {
            ReduceOp::Min => 0,
            ReduceOp::LogicalAnd => 1,
            ReduceOp::LogicalOr => 2,
        }
    }

    fn check(self, v: i64) -> Result<(), CollectiveError> {
        match self {
            ReduceOp::Min => Ok(()),
            _ if v == 0 || v == 1 => Ok(()),
            _ => Err(CollectiveError::Domain(v)),
        }
    }
}

/// Shape of the binomial tree rooted at `root`.
///
/// Ranks are relabelled relative to the root. A member's parent clears its
/// lowest set bit; its children add each smaller power of two. Children are
/// listed largest subtree first, which is the order sends must go out in
/// for the broadcast to finish in `ceil(log2 size)` rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinomialTree {
    pub parent: Option<Rank>,
    pub children: Vec<Rank>,
}

impl BinomialTree {
    pub fn new(rank: Rank, root: Rank, size: usize) -> Self {
        let rel = (rank + size - root) % size;
        let abs = |r: usize| (r + root) % size;
        let limit = if rel == 0 {
            size.next_power_of_two()
        } else {
            rel & rel.wrapping_neg()
        };
        let parent = (rel != 0).then(|| abs(rel - limit));
        let mut children = Vec::new();
        let mut mask = limit >> 1;
        while mask > 0 {
            if rel + mask < size {
                children.push(abs(rel + mask));
            }
            mask >>= 1;
        }
        BinomialTree { parent, children }
    }
}

/// Number of rounds a binomial broadcast over `size` members needs.
pub fn tree_depth(size: usize) -> u32 {
    if size <= 1 {
        0
    } else {
        (size - 1).ilog2() + 1
    }
}

fn check_root(group: &NodeGroup, root: Rank) -> Result<(), CollectiveError> {
    if root >= group.size() {
        return Err(CollectiveError::BadRoot {
            root,
            size: group.size(),
        });
    }
    Ok(())
}

fn header(kind: u8, root: Rank) -> Vec<u8> {
    let mut h = Vec::with_capacity(5);
    h.push(kind);
    h.extend_from_slice(&(root as u32).to_le_bytes());
    h
}

fn strip_header(kind: u8, root: Rank, mut msg: Vec<u8>) -> Result<Vec<u8>, CollectiveError> {
    if msg.len() < 5 {
        return Err(CollectiveError::Mismatch("short collective message".into()));
    }
    let got_root = u32::from_le_bytes(msg[1..5].try_into().expect("4 bytes")) as usize;
    if msg[0] != kind {
        return Err(CollectiveError::Mismatch(format!(
            "expected operation {kind}, peer is in operation {}",
            msg[0]
        )));
    }
    if got_root != root {
        return Err(CollectiveError::Mismatch(format!(
            "expected root {root}, peer used root {got_root}"
        )));
    }
    msg.drain(..5);
    Ok(msg)
}

/// Binomial-tree broadcast. Non-root ranks pass anything (typically an empty
/// vector) as `data`; every rank returns the root's payload.
pub fn broadcast(group: &NodeGroup, root: Rank, data: Vec<u8>) -> Result<Vec<u8>, CollectiveError> {
    check_root(group, root)?;
    let tree = BinomialTree::new(group.rank(), root, group.size());
    let framed = match tree.parent {
        None => {
            let mut m = header(KIND_BCAST, root);
            m.extend_from_slice(&data);
            m
        }
        Some(p) => {
            let m = group.recv(p, TAG_COLL)?;
            strip_header(KIND_BCAST, root, m.clone())?;
            m
        }
    };
    for &c in &tree.children {
        group.send(c, TAG_COLL, framed.clone())?;
    }
    if tree.parent.is_none() {
        Ok(data)
    } else {
        Ok(framed[5..].to_vec())
    }
}

/// Tree reduction towards `root`. Returns `Some(result)` at the root and
/// `None` elsewhere.
pub fn reduce(
    group: &NodeGroup,
    root: Rank,
    op: ReduceOp,
    value: i64,
) -> Result<Option<i64>, CollectiveError> {
    check_root(group, root)?;
    op.check(value)?;
    let tree = BinomialTree::new(group.rank(), root, group.size());
    let mut acc = value;
    // mirror of the broadcast: smallest subtrees report first
    for &c in tree.children.iter().rev() {
        let m = strip_header(KIND_REDUCE, root, group.recv(c, TAG_COLL)?)?;
        if m.len() != 9 || m[0] != op.code() {
            return Err(CollectiveError::Mismatch(format!(
                "rank {c} reduced with a different operation"
            )));
        }
        let v = i64::from_le_bytes(m[1..9].try_into().expect("8 bytes"));
        acc = op.apply(acc, v);
    }
    match tree.parent {
        None => Ok(Some(acc)),
        Some(p) => {
            let mut m = header(KIND_REDUCE, root);
            m.push(op.code());
            m.extend_from_slice(&acc.to_le_bytes());
            group.send(p, TAG_COLL, m)?;
            Ok(None)
        }
    }
}

/// Collects one contribution per rank at `root`, indexed by rank.
pub fn gather(
    group: &NodeGroup,
    root: Rank,
    value: Vec<u8>,
) -> Result<Option<Vec<Vec<u8>>>, CollectiveError> {
    check_root(group, root)?;
    if group.rank() != root {
        let mut m = header(KIND_GATHER, root);
        m.extend_from_slice(&value);
        group.send(root, TAG_COLL, m)?;
        return Ok(None);
    }
    let mut out = Vec::with_capacity(group.size());
    for r in 0..group.size() {
        if r == root {
            out.push(value.clone());
        } else {
            out.push(strip_header(KIND_GATHER, root, group.recv(r, TAG_COLL)?)?);
        }
    }
    Ok(Some(out))
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Partitions the group by `color`. Members with the same color form a
/// subgroup whose ranks follow parent rank order; a `None` color joins no
/// subgroup and gets `None` back.
pub fn split(group: &NodeGroup, color: Option<u32>) -> Result<Option<NodeGroup>, CollectiveError> {
    let seq = group.next_split_seq();
    let code: i64 = color.map_or(-1, i64::from);
    let colors = gather(group, 0, code.to_le_bytes().to_vec())?;
    let table = match colors {
        Some(cs) => cs.concat(),
        None => Vec::new(),
    };
    let table = broadcast(group, 0, table)?;
    if table.len() != 8 * group.size() {
        return Err(CollectiveError::Mismatch("malformed split table".into()));
    }
    let colors: Vec<i64> = table
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if colors[group.rank()] != code {
        return Err(CollectiveError::Mismatch(
            "split table disagrees with own color".into(),
        ));
    }
    let Some(c) = color else { return Ok(None) };
    let members: Vec<Rank> = (0..group.size())
        .filter(|&r| colors[r] == i64::from(c))
        .collect();
    let ctx = mix(group.context() ^ mix(seq) ^ mix(u64::from(c) << 1 | 1));
    Ok(group.subgroup(&members, ctx))
}
