use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::TransportError;

fn deadline_after(timeout: Duration) -> Instant {
    let now = Instant::now();
    now.checked_add(timeout)
        .unwrap_or_else(|| now + Duration::from_secs(60 * 60 * 24 * 365))
}

pub(crate) type Key = (u64, usize, u8);

pub(crate) struct Msg {
    pub round: u64,
    pub payload: Vec<u8>,
}

#[derive(Default)]
struct State {
    queues: HashMap<Key, VecDeque<Msg>>,
    dead: HashSet<usize>,
    closed: bool,
}

/// Incoming message queues of one rank, keyed by (context, source, tag).
pub(crate) struct Mailbox {
    state: Mutex<State>,
    cv: Condvar,
    capacity: Option<usize>,
}

impl Mailbox {
    pub fn new(capacity: Option<usize>) -> Self {
        Mailbox {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
            capacity,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(
        &self,
        guard: MutexGuard<'a, State>,
        deadline: Instant,
    ) -> Result<MutexGuard<'a, State>, ()> {
        let now = Instant::now();
        if now >= deadline {
            return Err(());
        }
        let (g, _) = self
            .cv
            .wait_timeout(guard, deadline - now)
            .unwrap_or_else(|e| e.into_inner());
        Ok(g)
    }

    /// Enqueues a message, blocking while the queue is at capacity.
    /// `receiver_alive` is polled so a sender never waits on a dead rank.
    pub fn push(
        &self,
        key: Key,
        dst: usize,
        msg: Msg,
        timeout: Duration,
        receiver_alive: impl Fn() -> bool,
    ) -> Result<(), TransportError> {
        let deadline = deadline_after(timeout);
        let mut st = self.lock();
        if let Some(cap) = self.capacity {
            while st.queues.get(&key).map_or(0, VecDeque::len) >= cap {
                if !receiver_alive() || st.closed {
                    return Err(TransportError::PeerGone { rank: dst });
                }
                st = self
                    .wait(st, deadline)
                    .map_err(|_| TransportError::Timeout { peer: dst })?;
            }
        }
        st.queues.entry(key).or_default().push_back(msg);
        drop(st);
        self.cv.notify_all();
        Ok(())
    }

    pub fn pop(&self, key: Key, timeout: Duration) -> Result<Msg, TransportError> {
        let deadline = deadline_after(timeout);
        let mut st = self.lock();
        loop {
            if let Some(m) = st.queues.get_mut(&key).and_then(VecDeque::pop_front) {
                drop(st);
                self.cv.notify_all();
                return Ok(m);
            }
            if st.dead.contains(&key.1) {
                return Err(TransportError::PeerGone { rank: key.1 });
            }
            st = self
                .wait(st, deadline)
                .map_err(|_| TransportError::Timeout { peer: key.1 })?;
        }
    }

    /// Pops the first available message from any of `srcs`.
    pub fn pop_any(
        &self,
        ctx: u64,
        srcs: &[usize],
        tag: u8,
        timeout: Duration,
    ) -> Result<(usize, Msg), TransportError> {
        let deadline = deadline_after(timeout);
        let mut st = self.lock();
        loop {
            for &src in srcs {
                if let Some(m) = st
                    .queues
                    .get_mut(&(ctx, src, tag))
                    .and_then(VecDeque::pop_front)
                {
                    drop(st);
                    self.cv.notify_all();
                    return Ok((src, m));
                }
            }
            if let Some(&gone) = srcs.iter().find(|s| st.dead.contains(s)) {
                return Err(TransportError::PeerGone { rank: gone });
            }
            st = self
                .wait(st, deadline)
                .map_err(|_| TransportError::Timeout {
                    peer: srcs.first().copied().unwrap_or(0),
                })?;
        }
    }

    pub fn mark_dead(&self, rank: usize) {
        self.lock().dead.insert(rank);
        self.cv.notify_all();
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.cv.notify_all();
    }
}
