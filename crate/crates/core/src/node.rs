//! Per-rank execution context: which host a rank stands for, and whether its
//! file operations are rooted in a private sandbox (simulated and local
//! backends) or act on the real filesystem (remote backend, orchestrator).

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Faults the simulated cluster can inject into a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Every file write on the node fails.
    FailWrites,
    /// The node accepts `after_jobs` distributed jobs and then reports itself
    /// unable to execute.
    Unusable { after_jobs: u32 },
    /// The node never starts.
    Dead,
}

/// Maps hostnames to per-node directories under a common base.
///
/// Repeated hosts get a `~k` suffix so that every rank still owns a
/// distinct directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxLayout {
    pub base: PathBuf,
}

impl SandboxLayout {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        SandboxLayout { base: base.into() }
    }

    /// Sandbox for the `occurrence`-th (0-based) appearance of `host`.
    pub fn sandbox(&self, host: &str, occurrence: usize) -> Sandbox {
        let name = if occurrence == 0 {
            sanitize(host)
        } else {
            format!("{}~{}", sanitize(host), occurrence)
        };
        Sandbox {
            node_dir: self.base.join(name),
        }
    }

    /// Sandboxes for an ordered host list (one per entry).
    pub fn sandboxes(&self, hosts: &[String]) -> Vec<Sandbox> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        hosts
            .iter()
            .map(|h| {
                let n = seen.entry(h.as_str()).or_insert(0);
                let sb = self.sandbox(h, *n);
                *n += 1;
                sb
            })
            .collect()
    }
}

fn sanitize(host: &str) -> String {
    host.chars()
        .map(|c| if c == '/' || c == '\0' { '_' } else { c })
        .collect()
}

/// A node's private directory. `fs/` is the node's filesystem root; the
/// process table fixture and the signal log live beside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sandbox {
    pub node_dir: PathBuf,
}

impl Sandbox {
    pub fn fs_root(&self) -> PathBuf {
        self.node_dir.join("fs")
    }

    pub fn proc_table(&self) -> PathBuf {
        self.node_dir.join("proc.tab")
    }

    pub fn signal_log(&self) -> PathBuf {
        self.node_dir.join("signals.log")
    }

    pub fn ensure(&self) -> io::Result<()> {
        fs::create_dir_all(self.fs_root())
    }

    /// Maps a node-visible path onto the host filesystem. The node's cwd is
    /// its root, `..` never climbs above the root.
    pub fn resolve(&self, path: &str) -> PathBuf {
        let mut out = self.fs_root();
        let depth0 = out.components().count();
        for comp in Path::new(path).components() {
            match comp {
                Component::Normal(c) => out.push(c),
                Component::ParentDir => {
                    if out.components().count() > depth0 {
                        out.pop();
                    }
                }
                Component::RootDir | Component::CurDir | Component::Prefix(_) => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeEnv {
    Sandboxed(Sandbox),
    Native,
}

/// What a rank needs to know about the machine it runs on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeContext {
    pub rank: usize,
    pub hostname: String,
    pub env: NodeEnv,
    pub fault: Option<Fault>,
}

impl NodeContext {
    pub fn native(rank: usize, hostname: impl Into<String>) -> Self {
        NodeContext {
            rank,
            hostname: hostname.into(),
            env: NodeEnv::Native,
            fault: None,
        }
    }

    pub fn sandbox(&self) -> Option<&Sandbox> {
        match &self.env {
            NodeEnv::Sandboxed(s) => Some(s),
            NodeEnv::Native => None,
        }
    }

    pub fn is_sandboxed(&self) -> bool {
        self.sandbox().is_some()
    }

    /// Host path for a node-visible path.
    pub fn resolve(&self, path: &str) -> PathBuf {
        match &self.env {
            NodeEnv::Sandboxed(s) => s.resolve(path),
            NodeEnv::Native => PathBuf::from(path),
        }
    }

    /// Working directory for commands run on this node.
    pub fn cwd(&self) -> PathBuf {
        match &self.env {
            NodeEnv::Sandboxed(s) => s.fs_root(),
            NodeEnv::Native => std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
        }
    }

    /// Fails when the node has an injected write fault.
    pub fn check_write(&self) -> io::Result<()> {
        if self.fault == Some(Fault::FailWrites) {
            return Err(io::Error::other(format!(
                "injected write failure on {}",
                self.hostname
            )));
        }
        Ok(())
    }

    /// Creates (truncating) a file for writing, honoring injected faults.
    pub fn create_file(&self, host_path: &Path) -> io::Result<fs::File> {
        self.check_write()?;
        OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(host_path)
    }

    pub fn write_file(&self, host_path: &Path, data: &[u8]) -> io::Result<()> {
        let mut f = self.create_file(host_path)?;
        f.write_all(data)
    }
}

/// Best-effort name of the local machine.
pub fn local_hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buf is valid for buf.len() bytes.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc == 0 {
        let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
        if let Ok(s) = std::str::from_utf8(&buf[..end]) {
            if !s.is_empty() {
                return s.to_string();
            }
        }
    }
    "localhost".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_stays_inside_root() {
        let sb = Sandbox {
            node_dir: "/base/n1".into(),
        };
        assert_eq!(sb.resolve("/tmp/x"), PathBuf::from("/base/n1/fs/tmp/x"));
        assert_eq!(sb.resolve("a/b"), PathBuf::from("/base/n1/fs/a/b"));
        assert_eq!(
            sb.resolve("../../etc/passwd"),
            PathBuf::from("/base/n1/fs/etc/passwd")
        );
        assert_eq!(sb.resolve("a/../b/./c"), PathBuf::from("/base/n1/fs/b/c"));
        assert_eq!(sb.resolve("/"), PathBuf::from("/base/n1/fs"));
    }

    #[test]
    fn duplicate_hosts_get_distinct_sandboxes() {
        let layout = SandboxLayout::new("/s");
        let hosts: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let sbs = layout.sandboxes(&hosts);
        assert_eq!(sbs[0].node_dir, PathBuf::from("/s/a"));
        assert_eq!(sbs[1].node_dir, PathBuf::from("/s/b"));
        assert_eq!(sbs[2].node_dir, PathBuf::from("/s/a~1"));
    }

    #[test]
    fn write_fault() {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = NodeContext::native(1, "h");
        ctx.write_file(&dir.path().join("ok"), b"x").unwrap();
        ctx.fault = Some(Fault::FailWrites);
        assert!(ctx.write_file(&dir.path().join("bad"), b"x").is_err());
        assert!(!dir.path().join("bad").exists());
    }
}
