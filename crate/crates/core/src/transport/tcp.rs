//! Process backends: one agent process per node, full TCP mesh.
//!
//! Setup: the orchestrator listens, starts every agent, and waits for a
//! `Hello` carrying the agent's rank, the launch token and the agent's own
//! listening port. It then sends each agent a `Setup` with the peer address
//! table. Agent `i` dials every agent `j < i` and accepts from every
//! `j > i`; once its mesh is complete it answers `Ready`. The control
//! connection then carries ordinary rank-0 traffic.

use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::io::{self, BufReader};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::mailbox::{Mailbox, Msg};
use super::wire::{read_frame, write_frame, CONTROL_CTX, CONTROL_TAG};
use super::{Backend, LaunchOptions, Link, NodeGroup, Rank, Tag, TransportError};
use crate::node::{Fault, NodeContext, NodeEnv};

#[derive(Debug, Serialize, Deserialize)]
enum Control {
    Hello { rank: Rank, token: u64, port: u16 },
    Setup(Box<Setup>),
    Peer { rank: Rank, token: u64 },
    Ready,
}

#[derive(Debug, Serialize, Deserialize)]
struct Setup {
    backend: Backend,
    hosts: Vec<String>,
    peers: Vec<String>,
    sandboxes: Vec<Option<PathBuf>>,
    ctx: NodeContext,
    payload: Vec<u8>,
    recv_timeout_ms: u64,
}

fn send_control(s: &mut TcpStream, c: &Control) -> Result<(), TransportError> {
    let bytes = bincode::serialize(c).map_err(|e| TransportError::Protocol(e.to_string()))?;
    write_frame(s, CONTROL_CTX, CONTROL_TAG, &bytes)?;
    Ok(())
}

fn recv_control(s: &mut TcpStream) -> Result<Control, TransportError> {
    match read_frame(s)? {
        Some((CONTROL_CTX, CONTROL_TAG, body)) => {
            bincode::deserialize(&body).map_err(|e| TransportError::Protocol(e.to_string()))
        }
        Some((ctx, tag, _)) => Err(TransportError::Protocol(format!(
            "expected control frame, got ctx {ctx} tag {tag}"
        ))),
        None => Err(TransportError::Protocol(
            "connection closed during setup".into(),
        )),
    }
}

struct TcpLink {
    peers: Vec<Option<TcpStream>>,
    mailbox: Arc<Mailbox>,
    timeout: Duration,
}

impl TcpLink {
    fn start(me: Rank, peers: Vec<Option<TcpStream>>, timeout: Duration) -> io::Result<Self> {
        let mailbox = Arc::new(Mailbox::new(None));
        for (rank, s) in peers.iter().enumerate() {
            let Some(s) = s else { continue };
            s.set_read_timeout(None)?;
            let mut reader = BufReader::with_capacity(1 << 16, s.try_clone()?);
            let mb = Arc::clone(&mailbox);
            thread::Builder::new()
                .name(format!("rx-{me}-{rank}"))
                .spawn(move || {
                    while let Ok(Some((ctx, tag, payload))) = read_frame(&mut reader) {
                        let msg = Msg { round: 0, payload };
                        if mb
                            .push((ctx, rank, tag), me, msg, Duration::MAX, || true)
                            .is_err()
                        {
                            break;
                        }
                    }
                    mb.mark_dead(rank);
                })?;
        }
        Ok(TcpLink {
            peers,
            mailbox,
            timeout,
        })
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        for s in self.peers.iter().flatten() {
            let _ = s.shutdown(Shutdown::Write);
        }
        self.mailbox.close();
    }
}

impl Link for TcpLink {
    fn send(
        &mut self,
        ctx: u64,
        dst: Rank,
        tag: Tag,
        payload: Vec<u8>,
    ) -> Result<(), TransportError> {
        let s = self
            .peers
            .get_mut(dst)
            .and_then(Option::as_mut)
            .ok_or(TransportError::PeerGone { rank: dst })?;
        write_frame(s, ctx, tag, &payload).map_err(|_| TransportError::PeerGone { rank: dst })
    }

    fn recv(&mut self, ctx: u64, src: Rank, tag: Tag) -> Result<Vec<u8>, TransportError> {
        Ok(self.mailbox.pop((ctx, src, tag), self.timeout)?.payload)
    }

    fn recv_any(
        &mut self,
        ctx: u64,
        srcs: &[Rank],
        tag: Tag,
    ) -> Result<(Rank, Vec<u8>), TransportError> {
        let (src, m) = self.mailbox.pop_any(ctx, srcs, tag, self.timeout)?;
        Ok((src, m.payload))
    }

    fn stats(&self) -> Option<super::SimStats> {
        None
    }
}

pub(crate) struct ProcWorkers {
    children: Vec<(String, Child)>,
}

impl ProcWorkers {
    pub fn wait(mut self) -> Result<Vec<i32>, TransportError> {
        let mut codes = Vec::new();
        for (_, child) in self.children.iter_mut() {
            let status = child.wait()?;
            codes.push(exit_code(status));
        }
        self.children.clear();
        Ok(codes)
    }

    pub fn kill(mut self) {
        for (_, child) in self.children.iter_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
        self.children.clear();
    }
}

pub(crate) fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(1)
}

fn random_token() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u32(std::process::id());
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0),
    );
    h.finish()
}

fn launch_err(host: &str, reason: impl ToString) -> TransportError {
    TransportError::Launch {
        host: host.to_string(),
        reason: reason.to_string(),
    }
}

pub(crate) fn launch(
    names: Arc<Vec<String>>,
    opts: &LaunchOptions,
    role_payload: &[u8],
) -> Result<(NodeGroup, NodeContext, ProcWorkers), TransportError> {
    let size = names.len();
    let remote = opts.backend == Backend::RemoteShell;
    let (bind_ip, advertise) = if remote {
        (
            "0.0.0.0",
            opts.advertise_host
                .clone()
                .unwrap_or_else(crate::node::local_hostname),
        )
    } else {
        ("127.0.0.1", "127.0.0.1".to_string())
    };
    let listener = TcpListener::bind((bind_ip, 0))?;
    let port = listener.local_addr()?.port();
    let token = random_token();
    let program = match &opts.agent_program {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let (boxes, roots) = super::sandbox_roots(&names, opts);

    let mut workers = ProcWorkers {
        children: Vec::new(),
    };
    for rank in 1..size {
        let host = &names[rank];
        let fault = opts.faults.get(host).copied();
        if fault == Some(Fault::Dead) {
            return Err(launch_err(host, "host unreachable (injected fault)"));
        }
        let args: Vec<String> = vec![
            "agent".into(),
            "--connect".into(),
            format!("{advertise}:{port}"),
            "--rank".into(),
            rank.to_string(),
            "--token".into(),
            token.to_string(),
            "--bind".into(),
            bind_ip.into(),
        ];
        let mut cmd = if remote {
            let mut words = vec![program.to_string_lossy().into_owned()];
            words.extend(args);
            let line = shlex::try_join(words.iter().map(String::as_str))
                .map_err(|e| launch_err(host, e))?;
            let full = opts
                .remote_shell
                .replace("{host}", host)
                .replace("{cmd}", &line);
            let mut c = Command::new("sh");
            c.arg("-c").arg(full);
            c
        } else {
            let mut c = Command::new(&program);
            c.args(&args);
            c
        };
        cmd.stdin(Stdio::null()).stdout(Stdio::null());
        let child = cmd.spawn().map_err(|e| launch_err(host, e))?;
        workers.children.push((host.clone(), child));
    }

    // Collect hellos.
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + opts.launch_timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
    let mut peer_addrs = vec![String::new(); size];
    let mut pending = size - 1;
    while pending > 0 {
        match listener.accept() {
            Ok((mut s, addr)) => {
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(opts.launch_timeout))?;
                match recv_control(&mut s) {
                    Ok(Control::Hello {
                        rank,
                        token: t,
                        port: p,
                    }) if t == token && (1..size).contains(&rank) && streams[rank].is_none() => {
                        peer_addrs[rank] = format!("{}:{}", addr.ip(), p);
                        streams[rank] = Some(s);
                        pending -= 1;
                    }
                    _ => continue,
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                for (i, (host, child)) in workers.children.iter_mut().enumerate() {
                    if streams[i + 1].is_none() {
                        if let Ok(Some(status)) = child.try_wait() {
                            return Err(launch_err(
                                host,
                                format!("agent exited with status {}", exit_code(status)),
                            ));
                        }
                    }
                }
                if Instant::now() > deadline {
                    let missing = (1..size).find(|&r| streams[r].is_none()).unwrap_or(1);
                    return Err(launch_err(&names[missing], "timed out waiting for agent"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }

    for rank in 1..size {
        let ctx = NodeContext {
            rank,
            hostname: opts.node_name(&names[rank]),
            env: match &boxes[rank] {
                Some(sb) => NodeEnv::Sandboxed(sb.clone()),
                None => NodeEnv::Native,
            },
            fault: opts.faults.get(&names[rank]).copied(),
        };
        let setup = Setup {
            backend: opts.backend,
            hosts: names.to_vec(),
            peers: peer_addrs.clone(),
            sandboxes: roots.clone(),
            ctx,
            payload: role_payload.to_vec(),
            recv_timeout_ms: opts.recv_timeout.as_millis() as u64,
        };
        let s = streams[rank].as_mut().expect("hello received");
        send_control(s, &Control::Setup(Box::new(setup)))
            .map_err(|e| launch_err(&names[rank], e))?;
    }
    for rank in 1..size {
        let s = streams[rank].as_mut().expect("hello received");
        match recv_control(s) {
            Ok(Control::Ready) => {}
            Ok(other) => return Err(launch_err(&names[rank], format!("unexpected {other:?}"))),
            Err(e) => return Err(launch_err(&names[rank], e)),
        }
    }

    let link = TcpLink::start(0, streams, opts.recv_timeout)?;
    let group = NodeGroup::new_world(
        0,
        names.clone(),
        Arc::new(roots),
        opts.backend,
        Box::new(link),
    );
    Ok((group, NodeContext::native(0, names[0].clone()), workers))
}

/// Command-line arguments of an agent process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentArgs {
    pub connect: String,
    pub rank: Rank,
    pub token: u64,
    pub bind: String,
}

impl AgentArgs {
    pub fn parse(args: &[String]) -> Result<Self, String> {
        let mut connect = None;
        let mut rank = None;
        let mut token = None;
        let mut bind = "127.0.0.1".to_string();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let mut val = || {
                it.next()
                    .cloned()
                    .ok_or_else(|| format!("{a} needs a value"))
            };
            match a.as_str() {
                "--connect" => connect = Some(val()?),
                "--rank" => rank = Some(val()?.parse().map_err(|e| format!("--rank: {e}"))?),
                "--token" => token = Some(val()?.parse().map_err(|e| format!("--token: {e}"))?),
                "--bind" => bind = val()?,
                other => return Err(format!("unknown agent argument {other}")),
            }
        }
        Ok(AgentArgs {
            connect: connect.ok_or("--connect is required")?,
            rank: rank.ok_or("--rank is required")?,
            token: token.ok_or("--token is required")?,
            bind,
        })
    }
}

/// Runs an agent: joins the group described by `args` and calls `entry`.
pub fn agent_main(
    args: &AgentArgs,
    entry: impl FnOnce(NodeGroup, NodeContext, Vec<u8>) -> i32,
) -> Result<i32, TransportError> {
    let mut control = TcpStream::connect(&args.connect)?;
    control.set_nodelay(true)?;
    let listener = TcpListener::bind((args.bind.as_str(), 0))?;
    let port = listener.local_addr()?.port();
    send_control(
        &mut control,
        &Control::Hello {
            rank: args.rank,
            token: args.token,
            port,
        },
    )?;
    let setup = match recv_control(&mut control)? {
        Control::Setup(s) => *s,
        other => {
            return Err(TransportError::Protocol(format!(
                "expected setup, got {other:?}"
            )))
        }
    };
    let size = setup.hosts.len();
    let me = args.rank;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
    for (j, peer) in setup.peers.iter().enumerate().take(me).skip(1) {
        let mut s = TcpStream::connect(peer)?;
        s.set_nodelay(true)?;
        send_control(
            &mut s,
            &Control::Peer {
                rank: me,
                token: args.token,
            },
        )?;
        streams[j] = Some(s);
    }
    let mut expected = size - 1 - me;
    while expected > 0 {
        let (mut s, _) = listener.accept()?;
        s.set_nodelay(true)?;
        match recv_control(&mut s)? {
            Control::Peer { rank, token } if token == args.token && rank > me && rank < size => {
                streams[rank] = Some(s);
                expected -= 1;
            }
            _ => continue,
        }
    }
    send_control(&mut control, &Control::Ready)?;
    streams[0] = Some(control);

    if let NodeEnv::Sandboxed(sb) = &setup.ctx.env {
        sb.ensure()?;
    }
    let link = TcpLink::start(me, streams, Duration::from_millis(setup.recv_timeout_ms))?;
    let group = NodeGroup::new_world(
        me,
        Arc::new(setup.hosts),
        Arc::new(setup.sandboxes),
        setup.backend,
        Box::new(link),
    );
    Ok(entry(group, setup.ctx, setup.payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_args() {
        let a: Vec<String> = ["--connect", "127.0.0.1:9", "--rank", "3", "--token", "42"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = AgentArgs::parse(&a).unwrap();
        assert_eq!(p.rank, 3);
        assert_eq!(p.token, 42);
        assert_eq!(p.bind, "127.0.0.1");
        assert!(AgentArgs::parse(&a[..2]).is_err());
        assert!(AgentArgs::parse(&["--bogus".to_string()]).is_err());
    }
}
