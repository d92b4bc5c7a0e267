//! Running commands on a node.
//!
//! Sandboxed nodes interpret a small set of file and process commands
//! directly against their private root, so everything they touch stays
//! inside the sandbox. Other commands, and everything on native nodes, run
//! as real subprocesses in the node's working directory.

use std::ffi::CString;
use std::fs::{self, File};
use std::io::{self, Read};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, SystemTime};

use crate::node::{NodeContext, NodeEnv};
use crate::procfind::{self, Signal};
use crate::testexpr;

/// Result of running one command.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CmdOutput {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub code: i32,
}

impl CmdOutput {
    fn ok() -> Self {
        CmdOutput::default()
    }

    fn out(&mut self, s: impl AsRef<[u8]>) {
        self.stdout.extend_from_slice(s.as_ref());
    }

    fn err(&mut self, code: i32, msg: impl AsRef<str>) {
        self.stderr.extend_from_slice(msg.as_ref().as_bytes());
        self.stderr.push(b'\n');
        self.code = self.code.max(code);
    }
}

/// Names the sandboxed command set understands.
pub const BUILTINS: &[&str] = &[
    "[", "cat", "chgrp", "chmod", "chown", "cp", "diff", "echo", "false", "find", "grep",
    "hostname", "killall", "ln", "ls", "mkdir", "mv", "pwd", "rm", "rmdir", "sleep", "test",
    "touch", "true", "uptime", "wc",
];

const SHELL_META: &[char] = &[
    '|', '&', ';', '<', '>', '(', ')', '$', '`', '\\', '"', '\'', '*', '?', '[', ']', '#', '~',
    '{', '}', '\n', '=',
];

/// Message text of an I/O error without the `(os error N)` suffix.
pub fn io_msg(e: &io::Error) -> String {
    let s = e.to_string();
    match s.find(" (os error") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// A node plus a working directory (node-visible path).
#[derive(Debug, Clone)]
pub struct NodeShell<'a> {
    ctx: &'a NodeContext,
    cwd: String,
}

impl<'a> NodeShell<'a> {
    pub fn new(ctx: &'a NodeContext) -> Self {
        let cwd = match ctx.env {
            NodeEnv::Sandboxed(_) => "/".to_string(),
            NodeEnv::Native => ctx.cwd().to_string_lossy().into_owned(),
        };
        NodeShell { ctx, cwd }
    }

    pub fn with_cwd(ctx: &'a NodeContext, cwd: impl Into<String>) -> Self {
        NodeShell {
            ctx,
            cwd: cwd.into(),
        }
    }

    pub fn ctx(&self) -> &NodeContext {
        self.ctx
    }

    pub fn cwd(&self) -> &str {
        &self.cwd
    }

    /// Host path of a node path, relative paths taken from the cwd.
    pub fn host_path(&self, p: &str) -> PathBuf {
        if p.starts_with('/') {
            self.ctx.resolve(p)
        } else {
            self.ctx.resolve(&format!("{}/{}", self.cwd, p))
        }
    }

    /// Runs `argv` and returns its collected output.
    pub fn run(&self, argv: &[String]) -> CmdOutput {
        let mut stdout = Vec::new();
        let mut r = self.run_streaming(argv, &mut |b| stdout.extend_from_slice(b));
        r.stdout = stdout;
        r
    }

    /// Runs `argv`, handing stdout to `sink` as it is produced. The
    /// returned output carries stderr and the exit code only.
    pub fn run_streaming(&self, argv: &[String], sink: &mut dyn FnMut(&[u8])) -> CmdOutput {
        let Some(first) = argv.first() else {
            let mut o = CmdOutput::ok();
            o.err(2, "empty command");
            return o;
        };
        if argv.len() == 1 && first.contains(char::is_whitespace) {
            if first.contains(SHELL_META) {
                return self.shell(first, sink);
            }
            let words: Vec<String> = first.split_whitespace().map(str::to_string).collect();
            return self.run_streaming(&words, sink);
        }
        if self.ctx.is_sandboxed() {
            if let Some(mut o) = self.builtin(argv) {
                sink(&o.stdout);
                o.stdout.clear();
                return o;
            }
        }
        self.external(argv, sink)
    }

    fn shell(&self, script: &str, sink: &mut dyn FnMut(&[u8])) -> CmdOutput {
        let full = if self.ctx.is_sandboxed() {
            // a node's identity must win over the host's inside the script
            let q = |s: &str| {
                shlex::try_quote(s)
                    .map(|c| c.into_owned())
                    .unwrap_or_default()
            };
            format!(
                "hostname() {{ printf '%s\\n' {}; }}; uptime() {{ printf '%s\\n' {}; }}; {script}",
                q(&self.ctx.hostname),
                q(&uptime_line(self.ctx)),
            )
        } else {
            script.to_string()
        };
        self.external(&["sh".to_string(), "-c".to_string(), full], sink)
    }

    fn external(&self, argv: &[String], sink: &mut dyn FnMut(&[u8])) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(self.host_path(&self.cwd))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if self.ctx.is_sandboxed() {
            cmd.env("HOSTNAME", &self.ctx.hostname);
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                o.err(127, format!("{}: command not found", argv[0]));
                return o;
            }
            Err(e) => {
                o.err(126, format!("{}: {}", argv[0], io_msg(&e)));
                return o;
            }
        };
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut v = Vec::new();
            let _ = err_pipe.read_to_end(&mut v);
            v
        });
        let mut out_pipe = child.stdout.take().expect("piped stdout");
        let mut buf = [0u8; 8192];
        loop {
            match out_pipe.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => sink(&buf[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => break,
            }
        }
        o.stderr = err_reader.join().unwrap_or_default();
        o.code = match child.wait() {
            Ok(s) => crate::transport::exit_code(s),
            Err(e) => {
                o.err(1, io_msg(&e));
                1
            }
        };
        o
    }

    /// Runs a builtin; `None` if `argv[0]` is not one.
    pub fn builtin(&self, argv: &[String]) -> Option<CmdOutput> {
        let args = &argv[1..];
        let o = match argv[0].as_str() {
            "hostname" => {
                let mut o = CmdOutput::ok();
                o.out(format!("{}\n", self.ctx.hostname));
                o
            }
            "echo" => echo(args),
            "true" => CmdOutput::ok(),
            "false" => CmdOutput {
                code: 1,
                ..Default::default()
            },
            "pwd" => {
                let mut o = CmdOutput::ok();
                o.out(format!("{}\n", self.cwd));
                o
            }
            "uptime" => {
                let mut o = CmdOutput::ok();
                o.out(format!("{}\n", uptime_line(self.ctx)));
                o
            }
            "sleep" => sleep(args),
            "test" => self.test(args, false),
            "[" => self.test(args, true),
            "ls" => self.ls(args),
            "cat" => self.cat(args),
            "rm" => self.rm(args),
            "mkdir" => self.mkdir(args),
            "rmdir" => self.rmdir(args),
            "touch" => self.touch(args),
            "cp" => self.cp(args),
            "mv" => self.mv(args),
            "ln" => self.ln(args),
            "chmod" => self.chmod(args),
            "chown" => self.chown(args, false),
            "chgrp" => self.chown(args, true),
            "diff" => self.diff(args),
            "find" => self.find(args),
            "grep" => self.grep(args),
            "wc" => self.wc(args),
            "killall" => self.killall(args),
            _ => return None,
        };
        Some(o)
    }

    fn test(&self, args: &[String], bracket: bool) -> CmdOutput {
        let (code, msg) = testexpr::run_test(args, bracket, &|p: &str| self.host_path(p));
        CmdOutput {
            stdout: Vec::new(),
            stderr: msg.into_bytes(),
            code,
        }
    }

    fn ls(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, mut paths) = split_flags(args);
        let (all, long, by_time, reverse, dir_only) = (
            flags.contains(&'a') || flags.contains(&'A'),
            flags.contains(&'l'),
            flags.contains(&'t'),
            flags.contains(&'r'),
            flags.contains(&'d'),
        );
        if paths.is_empty() {
            paths.push(".".to_string());
        }
        let multi = paths.len() > 1;
        let mut files = Vec::new();
        let mut dirs = Vec::new();
        for p in &paths {
            let hp = self.host_path(p);
            match fs::metadata(&hp).or_else(|_| fs::symlink_metadata(&hp)) {
                Ok(m) if m.is_dir() && !dir_only => dirs.push((p.clone(), hp)),
                Ok(_) => files.push((p.clone(), hp)),
                Err(e) => o.err(2, format!("ls: cannot access '{p}': {}", io_msg(&e))),
            }
        }
        let sort = |v: &mut Vec<(String, PathBuf)>| {
            v.sort_by(|a, b| a.0.cmp(&b.0));
            if by_time {
                v.sort_by_key(|e| std::cmp::Reverse(mtime(&e.1)));
            }
            if reverse {
                v.reverse();
            }
        };
        sort(&mut files);
        for (name, hp) in &files {
            o.out(ls_line(name, hp, long));
        }
        sort(&mut dirs);
        for (i, (name, hp)) in dirs.iter().enumerate() {
            if multi {
                if i > 0 || !files.is_empty() {
                    o.out("\n");
                }
                o.out(format!("{name}:\n"));
            }
            let mut entries = Vec::new();
            match fs::read_dir(hp) {
                Ok(rd) => {
                    for e in rd.flatten() {
                        let n = e.file_name().to_string_lossy().into_owned();
                        if all || !n.starts_with('.') {
                            entries.push((n, e.path()));
                        }
                    }
                }
                Err(e) => {
                    o.err(
                        2,
                        format!("ls: cannot open directory '{name}': {}", io_msg(&e)),
                    );
                    continue;
                }
            }
            sort(&mut entries);
            for (n, p) in &entries {
                o.out(ls_line(n, p, long));
            }
        }
        o
    }

    fn cat(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        for p in args.iter().filter(|a| a.as_str() != "-") {
            let hp = self.host_path(p);
            if hp.is_dir() {
                o.err(1, format!("cat: {p}: Is a directory"));
                continue;
            }
            match fs::read(&hp) {
                Ok(b) => o.out(b),
                Err(e) => o.err(1, format!("cat: {p}: {}", io_msg(&e))),
            }
        }
        o
    }

    fn is_root(&self, hp: &Path) -> bool {
        match &self.ctx.env {
            NodeEnv::Sandboxed(sb) => hp == sb.fs_root(),
            NodeEnv::Native => hp == Path::new("/"),
        }
    }

    fn rm(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, paths) = split_flags(args);
        let recursive = flags.contains(&'r') || flags.contains(&'R');
        let force = flags.contains(&'f');
        if paths.is_empty() && !force {
            o.err(1, "rm: missing operand");
        }
        for p in &paths {
            let hp = self.host_path(p);
            let meta = match fs::symlink_metadata(&hp) {
                Ok(m) => m,
                Err(e) => {
                    if !force {
                        o.err(1, format!("rm: cannot remove '{p}': {}", io_msg(&e)));
                    }
                    continue;
                }
            };
            if let Err(e) = self.ctx.check_write() {
                o.err(1, format!("rm: cannot remove '{p}': {}", io_msg(&e)));
                continue;
            }
            let r = if meta.is_dir() {
                if !recursive {
                    o.err(1, format!("rm: cannot remove '{p}': Is a directory"));
                    continue;
                }
                if self.is_root(&hp) {
                    o.err(
                        1,
                        format!("rm: it is dangerous to operate recursively on '{p}'"),
                    );
                    continue;
                }
                fs::remove_dir_all(&hp)
            } else {
                fs::remove_file(&hp)
            };
            if let Err(e) = r {
                o.err(1, format!("rm: cannot remove '{p}': {}", io_msg(&e)));
            }
        }
        o
    }

    fn mkdir(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, paths) = split_flags(args);
        let parents = flags.contains(&'p');
        if paths.is_empty() {
            o.err(1, "mkdir: missing operand");
        }
        for p in &paths {
            let hp = self.host_path(p);
            let r = self.ctx.check_write().and_then(|_| {
                if parents {
                    fs::create_dir_all(&hp)
                } else {
                    fs::create_dir(&hp)
                }
            });
            if let Err(e) = r {
                o.err(
                    1,
                    format!("mkdir: cannot create directory '{p}': {}", io_msg(&e)),
                );
            }
        }
        o
    }

    fn rmdir(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (_, paths) = split_flags(args);
        if paths.is_empty() {
            o.err(1, "rmdir: missing operand");
        }
        for p in &paths {
            let hp = self.host_path(p);
            let r = self.ctx.check_write().and_then(|_| fs::remove_dir(&hp));
            if let Err(e) = r {
                o.err(1, format!("rmdir: failed to remove '{p}': {}", io_msg(&e)));
            }
        }
        o
    }

    fn touch(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (_, paths) = split_flags(args);
        if paths.is_empty() {
            o.err(1, "touch: missing file operand");
        }
        for p in &paths {
            let hp = self.host_path(p);
            let r = self.ctx.check_write().and_then(|_| {
                let f = File::options().append(true).create(true).open(&hp)?;
                f.set_modified(SystemTime::now())
            });
            if let Err(e) = r {
                o.err(1, format!("touch: cannot touch '{p}': {}", io_msg(&e)));
            }
        }
        o
    }

    /// Destination for `src` given the last operand of cp/mv/ln.
    fn target_for(&self, src: &str, dest: &str, many: bool) -> Result<PathBuf, String> {
        let hd = self.host_path(dest);
        if hd.is_dir() {
            let base = Path::new(src.trim_end_matches('/'))
                .file_name()
                .map(|b| b.to_os_string())
                .unwrap_or_default();
            Ok(hd.join(base))
        } else if many {
            Err(format!("target '{dest}' is not a directory"))
        } else {
            Ok(hd)
        }
    }

    fn cp(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, paths) = split_flags(args);
        let recursive = flags.iter().any(|f| matches!(f, 'r' | 'R' | 'a'));
        let Some((dest, srcs)) = paths.split_last().filter(|(_, s)| !s.is_empty()) else {
            o.err(1, "cp: missing file operand");
            return o;
        };
        for s in srcs {
            let hs = self.host_path(s);
            let to = match self.target_for(s, dest, srcs.len() > 1) {
                Ok(t) => t,
                Err(m) => {
                    o.err(1, format!("cp: {m}"));
                    return o;
                }
            };
            let r = match fs::metadata(&hs) {
                Err(e) => Err(e),
                Ok(m) if m.is_dir() => {
                    if !recursive {
                        o.err(1, format!("cp: -r not specified; omitting directory '{s}'"));
                        continue;
                    }
                    self.ctx.check_write().and_then(|_| copy_tree(&hs, &to))
                }
                Ok(_) => self
                    .ctx
                    .check_write()
                    .and_then(|_| fs::copy(&hs, &to).map(|_| ())),
            };
            if let Err(e) = r {
                o.err(1, format!("cp: cannot copy '{s}': {}", io_msg(&e)));
            }
        }
        o
    }

    fn mv(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (_, paths) = split_flags(args);
        let Some((dest, srcs)) = paths.split_last().filter(|(_, s)| !s.is_empty()) else {
            o.err(1, "mv: missing file operand");
            return o;
        };
        for s in srcs {
            let to = match self.target_for(s, dest, srcs.len() > 1) {
                Ok(t) => t,
                Err(m) => {
                    o.err(1, format!("mv: {m}"));
                    return o;
                }
            };
            let r = self
                .ctx
                .check_write()
                .and_then(|_| fs::rename(self.host_path(s), &to));
            if let Err(e) = r {
                o.err(1, format!("mv: cannot move '{s}': {}", io_msg(&e)));
            }
        }
        o
    }

    fn ln(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, paths) = split_flags(args);
        let symbolic = flags.contains(&'s');
        let force = flags.contains(&'f');
        let (target, link) = match paths.as_slice() {
            [t] => (t.clone(), ".".to_string()),
            [t, l] => (t.clone(), l.clone()),
            [] => {
                o.err(1, "ln: missing file operand");
                return o;
            }
            _ => {
                o.err(1, "ln: only one target and one link name are supported");
                return o;
            }
        };
        let to = match self.target_for(&target, &link, false) {
            Ok(t) => t,
            Err(m) => {
                o.err(1, format!("ln: {m}"));
                return o;
            }
        };
        let r = self.ctx.check_write().and_then(|_| {
            if force && fs::symlink_metadata(&to).is_ok() {
                fs::remove_file(&to)?;
            }
            if symbolic {
                // absolute targets must stay inside the node's root
                let content = if target.starts_with('/') && self.ctx.is_sandboxed() {
                    self.ctx.resolve(&target)
                } else {
                    PathBuf::from(&target)
                };
                std::os::unix::fs::symlink(content, &to)
            } else {
                fs::hard_link(self.host_path(&target), &to)
            }
        });
        if let Err(e) = r {
            let kind = if symbolic {
                "symbolic link"
            } else {
                "hard link"
            };
            o.err(
                1,
                format!("ln: failed to create {kind} '{link}': {}", io_msg(&e)),
            );
        }
        o
    }

    fn chmod(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (recursive, rest) = take_recursive(args);
        let Some((mode, paths)) = rest.split_first().filter(|(_, p)| !p.is_empty()) else {
            o.err(1, "chmod: missing operand");
            return o;
        };
        for p in paths {
            let hp = self.host_path(p);
            let r = self.ctx.check_write().and_then(|_| {
                walk(&hp, recursive, &mut |path, meta| {
                    let cur = meta.permissions().mode() & 0o7777;
                    let new = apply_mode(mode, cur, meta.is_dir())
                        .ok_or_else(|| io::Error::other(format!("invalid mode: '{mode}'")))?;
                    fs::set_permissions(path, fs::Permissions::from_mode(new))
                })
            });
            if let Err(e) = r {
                o.err(1, format!("chmod: cannot change '{p}': {}", io_msg(&e)));
            }
        }
        o
    }

    fn chown(&self, args: &[String], group_only: bool) -> CmdOutput {
        let name = if group_only { "chgrp" } else { "chown" };
        let mut o = CmdOutput::ok();
        let (recursive, rest) = take_recursive(args);
        let Some((spec, paths)) = rest.split_first().filter(|(_, p)| !p.is_empty()) else {
            o.err(1, format!("{name}: missing operand"));
            return o;
        };
        let ids = if group_only {
            group_id(spec).map(|g| (None, Some(g)))
        } else {
            match spec.split_once(':') {
                Some((u, g)) => {
                    let uid = if u.is_empty() {
                        Some(None)
                    } else {
                        user_id(u).map(Some)
                    };
                    let gid = if g.is_empty() {
                        Some(None)
                    } else {
                        group_id(g).map(Some)
                    };
                    uid.zip(gid)
                }
                None => user_id(spec).map(|u| (Some(u), None)),
            }
        };
        let Some((uid, gid)) = ids else {
            o.err(1, format!("{name}: invalid owner: '{spec}'"));
            return o;
        };
        for p in paths {
            let hp = self.host_path(p);
            let r = self.ctx.check_write().and_then(|_| {
                walk(&hp, recursive, &mut |path, _| {
                    std::os::unix::fs::lchown(path, uid, gid)
                })
            });
            if let Err(e) = r {
                o.err(
                    1,
                    format!("{name}: changing ownership of '{p}': {}", io_msg(&e)),
                );
            }
        }
        o
    }

    fn diff(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, paths) = split_flags(args);
        let brief = flags.contains(&'q');
        let [a, b] = paths.as_slice() else {
            o.err(2, "diff: expected two file operands");
            return o;
        };
        let read = |p: &str| -> Result<String, String> {
            let hp = self.host_path(p);
            if hp.is_dir() {
                return Err(format!("diff: {p}: Is a directory"));
            }
            fs::read(&hp)
                .map(|b| String::from_utf8_lossy(&b).into_owned())
                .map_err(|e| format!("diff: {p}: {}", io_msg(&e)))
        };
        let (ta, tb) = match (read(a), read(b)) {
            (Ok(x), Ok(y)) => (x, y),
            (Err(m), _) | (_, Err(m)) => {
                o.err(2, m);
                return o;
            }
        };
        if ta == tb {
            return o;
        }
        o.code = 1;
        if brief {
            o.out(format!("Files {a} and {b} differ\n"));
        } else {
            o.out(normal_diff(&ta, &tb));
        }
        o
    }

    fn find(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let split = args
            .iter()
            .position(|a| a.starts_with('-') || a == "!" || a == "(")
            .unwrap_or(args.len());
        let mut roots: Vec<String> = args[..split].to_vec();
        if roots.is_empty() {
            roots.push(".".into());
        }
        let mut filter = FindFilter::default();
        let mut it = args[split..].iter();
        while let Some(t) = it.next() {
            let mut val = |o: &mut CmdOutput| {
                let v = it.next().cloned();
                if v.is_none() {
                    o.err(1, format!("find: missing argument to `{t}'"));
                }
                v
            };
            match t.as_str() {
                "-name" | "-iname" => {
                    let Some(v) = val(&mut o) else { return o };
                    let pat = if t == "-iname" { v.to_lowercase() } else { v };
                    match glob::Pattern::new(&pat) {
                        Ok(p) => filter.names.push((p, t == "-iname")),
                        Err(e) => {
                            o.err(1, format!("find: bad pattern '{pat}': {e}"));
                            return o;
                        }
                    }
                }
                "-type" => {
                    let Some(v) = val(&mut o) else { return o };
                    match v.as_str() {
                        "f" | "d" | "l" => filter.kind = v.chars().next(),
                        _ => {
                            o.err(1, format!("find: Unknown argument to -type: {v}"));
                            return o;
                        }
                    }
                }
                "-maxdepth" | "-mindepth" => {
                    let Some(v) = val(&mut o) else { return o };
                    let Ok(n) = v.parse::<usize>() else {
                        o.err(1, format!("find: invalid depth '{v}'"));
                        return o;
                    };
                    if t == "-maxdepth" {
                        filter.max_depth = Some(n);
                    } else {
                        filter.min_depth = n;
                    }
                }
                "-print" => {}
                other => {
                    o.err(1, format!("find: unknown predicate `{other}'"));
                    return o;
                }
            }
        }
        for r in &roots {
            let hp = self.host_path(r);
            if fs::symlink_metadata(&hp).is_err() {
                o.err(1, format!("find: '{r}': No such file or directory"));
                continue;
            }
            find_walk(&hp, r, 0, &filter, &mut o);
        }
        o
    }

    fn grep(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, rest) = split_flags(args);
        let Some((pat, files)) = rest.split_first() else {
            o.err(2, "grep: missing pattern");
            return o;
        };
        let pat = if flags.contains(&'i') {
            format!("(?i){pat}")
        } else {
            pat.clone()
        };
        let re = match regex::Regex::new(&pat) {
            Ok(r) => r,
            Err(e) => {
                o.err(2, format!("grep: {e}"));
                return o;
            }
        };
        let (invert, count) = (flags.contains(&'v'), flags.contains(&'c'));
        let mut found = false;
        for f in files {
            let text = match fs::read(self.host_path(f)) {
                Ok(b) => String::from_utf8_lossy(&b).into_owned(),
                Err(e) => {
                    o.err(2, format!("grep: {f}: {}", io_msg(&e)));
                    continue;
                }
            };
            let prefix = if files.len() > 1 {
                format!("{f}:")
            } else {
                String::new()
            };
            let hits: Vec<&str> = text.lines().filter(|l| re.is_match(l) != invert).collect();
            found |= !hits.is_empty();
            if count {
                o.out(format!("{prefix}{}\n", hits.len()));
            } else {
                for h in hits {
                    o.out(format!("{prefix}{h}\n"));
                }
            }
        }
        if !found && o.code == 0 {
            o.code = 1;
        }
        o
    }

    fn wc(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let (flags, files) = split_flags(args);
        let (mut l, mut w, mut c) = (
            flags.contains(&'l'),
            flags.contains(&'w'),
            flags.contains(&'c'),
        );
        if !(l || w || c) {
            (l, w, c) = (true, true, true);
        }
        let mut total = [0usize; 3];
        for f in &files {
            let b = match fs::read(self.host_path(f)) {
                Ok(b) => b,
                Err(e) => {
                    o.err(1, format!("wc: {f}: {}", io_msg(&e)));
                    continue;
                }
            };
            let counts = [
                b.iter().filter(|&&x| x == b'\n').count(),
                String::from_utf8_lossy(&b).split_whitespace().count(),
                b.len(),
            ];
            for i in 0..3 {
                total[i] += counts[i];
            }
            o.out(wc_line(&counts, [l, w, c], f));
        }
        if files.len() > 1 {
            o.out(wc_line(&total, [l, w, c], "total"));
        }
        o
    }

    fn killall(&self, args: &[String]) -> CmdOutput {
        let mut o = CmdOutput::ok();
        let NodeEnv::Sandboxed(sb) = &self.ctx.env else {
            o.err(1, "killall: builtin needs a sandboxed node");
            return o;
        };
        let mut sig = Signal::parse("TERM").expect("TERM exists");
        let mut quiet = false;
        let mut names = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            match a.as_str() {
                "-s" | "--signal" => match it.next().and_then(|v| Signal::parse(v)) {
                    Some(s) => sig = s,
                    None => {
                        o.err(1, "killall: unknown signal");
                        return o;
                    }
                },
                "-q" | "--quiet" => quiet = true,
                s if s.starts_with('-') && s.len() > 1 => match Signal::parse(&s[1..]) {
                    Some(x) => sig = x,
                    None => {
                        o.err(
                            1,
                            format!("killall: unknown signal; killall -l lists signals ({s})"),
                        );
                        return o;
                    }
                },
                _ => names.push(a.clone()),
            }
        }
        if names.is_empty() {
            o.err(1, "Usage: killall [-s SIGNAL | -SIGNAL] NAME...");
            return o;
        }
        let table = match procfind::read_fixture(&sb.proc_table()) {
            Ok(t) => t,
            Err(e) => {
                o.err(1, format!("killall: {}", io_msg(&e)));
                return o;
            }
        };
        for n in &names {
            let victims: Vec<u32> = table
                .iter()
                .filter(|r| r.name() == n || r.command.split_whitespace().next() == Some(n))
                .map(|r| r.pid)
                .collect();
            if victims.is_empty() {
                if !quiet {
                    o.err(1, format!("{n}: no process found"));
                } else {
                    o.code = 1;
                }
                continue;
            }
            for pid in victims {
                if let Err(e) = procfind::deliver_sim_signal(sb, pid, &sig) {
                    o.err(1, format!("killall: {n}({pid}): {}", io_msg(&e)));
                }
            }
        }
        o
    }
}

/// The `uptime` line of a node; simulated nodes take their load averages
/// from a `loadavg` file beside the filesystem root.
pub fn uptime_line(ctx: &NodeContext) -> String {
    let load = match &ctx.env {
        NodeEnv::Sandboxed(sb) => fs::read_to_string(sb.node_dir.join("loadavg")).ok(),
        NodeEnv::Native => fs::read_to_string("/proc/loadavg").ok(),
    };
    let nums: Vec<String> = load
        .as_deref()
        .unwrap_or("0.00 0.00 0.00")
        .split_whitespace()
        .take(3)
        .map(str::to_string)
        .collect();
    let get = |i: usize| nums.get(i).cloned().unwrap_or_else(|| "0.00".into());
    format!(
        " 12:00:00 up 1 day,  0:00,  1 user,  load average: {}, {}, {}",
        get(0),
        get(1),
        get(2)
    )
}

fn echo(args: &[String]) -> CmdOutput {
    let mut o = CmdOutput::ok();
    let (newline, words) = match args.first().map(String::as_str) {
        Some("-n") => (false, &args[1..]),
        _ => (true, args),
    };
    o.out(words.join(" "));
    if newline {
        o.out("\n");
    }
    o
}

fn sleep(args: &[String]) -> CmdOutput {
    let mut o = CmdOutput::ok();
    let mut total = 0.0f64;
    for a in args {
        let (num, mult) = match a.chars().last() {
            Some('s') => (&a[..a.len() - 1], 1.0),
            Some('m') => (&a[..a.len() - 1], 60.0),
            Some('h') => (&a[..a.len() - 1], 3600.0),
            _ => (a.as_str(), 1.0),
        };
        match num.parse::<f64>() {
            Ok(n) if n >= 0.0 => total += n * mult,
            _ => {
                o.err(1, format!("sleep: invalid time interval '{a}'"));
                return o;
            }
        }
    }
    std::thread::sleep(Duration::from_secs_f64(total));
    o
}

/// Splits leading single-dash flag clusters from operands (`--` ends flags).
fn split_flags(args: &[String]) -> (Vec<char>, Vec<String>) {
    let mut flags = Vec::new();
    let mut ops = Vec::new();
    let mut done = false;
    for a in args {
        if !done && a == "--" {
            done = true;
        } else if !done && a.len() > 1 && a.starts_with('-') && !a.starts_with("--") {
            flags.extend(a[1..].chars());
        } else {
            ops.push(a.clone());
        }
    }
    (flags, ops)
}

fn take_recursive(args: &[String]) -> (bool, Vec<String>) {
    let recursive = args.iter().any(|a| a == "-R" || a == "-r");
    let rest = args
        .iter()
        .filter(|a| !(a.as_str() == "-R" || a.as_str() == "-r" || a.as_str() == "-f"))
        .cloned()
        .collect();
    (recursive, rest)
}

fn mtime(p: &Path) -> SystemTime {
    fs::symlink_metadata(p)
        .and_then(|m| m.modified())
        .unwrap_or(SystemTime::UNIX_EPOCH)
}

fn mode_string(m: &fs::Metadata) -> String {
    let ft = m.file_type();
    let kind = if ft.is_symlink() {
        'l'
    } else if ft.is_dir() {
        'd'
    } else {
        '-'
    };
    let mode = m.permissions().mode();
    let mut s = String::from(kind);
    for shift in [6, 3, 0] {
        let bits = (mode >> shift) & 7;
        s.push(if bits & 4 != 0 { 'r' } else { '-' });
        s.push(if bits & 2 != 0 { 'w' } else { '-' });
        s.push(if bits & 1 != 0 { 'x' } else { '-' });
    }
    s
}

fn ls_line(name: &str, p: &Path, long: bool) -> String {
    if !long {
        return format!("{name}\n");
    }
    let Ok(m) = fs::symlink_metadata(p) else {
        return format!("{name}\n");
    };
    let mut line = format!(
        "{} {} {} {} {} {}",
        mode_string(&m),
        m.nlink(),
        procfind::user_name(m.uid()),
        group_name(m.gid()),
        m.len(),
        name
    );
    if m.file_type().is_symlink() {
        if let Ok(t) = fs::read_link(p) {
            line.push_str(&format!(" -> {}", t.display()));
        }
    }
    line.push('\n');
    line
}

fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let e = e?;
        let target = to.join(e.file_name());
        let ft = e.file_type()?;
        if ft.is_dir() {
            copy_tree(&e.path(), &target)?;
        } else if ft.is_symlink() {
            std::os::unix::fs::symlink(fs::read_link(e.path())?, target)?;
        } else {
            fs::copy(e.path(), target)?;
        }
    }
    Ok(())
}

fn walk(
    p: &Path,
    recursive: bool,
    f: &mut dyn FnMut(&Path, &fs::Metadata) -> io::Result<()>,
) -> io::Result<()> {
    let m = fs::metadata(p)?;
    f(p, &m)?;
    if recursive && m.is_dir() {
        for e in fs::read_dir(p)? {
            walk(&e?.path(), true, f)?;
        }
    }
    Ok(())
}

/// Applies an octal or symbolic (`u+x,go-w`, `a=r`) chmod mode.
pub fn apply_mode(spec: &str, current: u32, is_dir: bool) -> Option<u32> {
    if !spec.is_empty() && spec.chars().all(|c| c.is_ascii_digit()) {
        return u32::from_str_radix(spec, 8).ok().filter(|m| *m <= 0o7777);
    }
    let mut mode = current;
    for clause in spec.split(',') {
        let who_end = clause
            .find(|c: char| !matches!(c, 'u' | 'g' | 'o' | 'a'))
            .unwrap_or(clause.len());
        let who = &clause[..who_end];
        let mut mask = 0u32;
        for c in who.chars() {
            mask |= match c {
                'u' => 0o4700,
                'g' => 0o2070,
                'o' => 0o1007,
                _ => 0o7777,
            };
        }
        if who.is_empty() {
            mask = 0o7777;
        }
        let mut rest = &clause[who_end..];
        if rest.is_empty() {
            return None;
        }
        while !rest.is_empty() {
            let op = rest.chars().next()?;
            if !matches!(op, '+' | '-' | '=') {
                return None;
            }
            rest = &rest[1..];
            let end = rest.find(['+', '-', '=']).unwrap_or(rest.len());
            let mut bits = 0u32;
            for c in rest[..end].chars() {
                bits |= match c {
                    'r' => 0o444,
                    'w' => 0o222,
                    'x' => 0o111,
                    'X' if is_dir || mode & 0o111 != 0 => 0o111,
                    'X' => 0,
                    's' => 0o6000,
                    't' => 0o1000,
                    _ => return None,
                };
            }
            rest = &rest[end..];
            let bits = bits & mask;
            mode = match op {
                '+' => mode | bits,
                '-' => mode & !bits,
                _ => (mode & !(mask & 0o777)) | bits,
            };
        }
    }
    Some(mode)
}

fn user_id(name: &str) -> Option<u32> {
    if let Ok(n) = name.parse() {
        return Some(n);
    }
    let c = CString::new(name).ok()?;
    let mut buf = vec![0 as libc::c_char; 4096];
    let mut pwd: libc::passwd = unsafe { std::mem::zeroed() };
    let mut out = std::ptr::null_mut();
    // SAFETY: all pointers refer to live buffers of the stated size.
    let rc =
        unsafe { libc::getpwnam_r(c.as_ptr(), &mut pwd, buf.as_mut_ptr(), buf.len(), &mut out) };
    (rc == 0 && !out.is_null()).then_some(pwd.pw_uid)
}

fn group_id(name: &str) -> Option<u32> {
    if let Ok(n) = name.parse() {
        return Some(n);
    }
    let c = CString::new(name).ok()?;
    let mut buf = vec![0 as libc::c_char; 4096];
    let mut grp: libc::group = unsafe { std::mem::zeroed() };
    let mut out = std::ptr::null_mut();
    // SAFETY: all pointers refer to live buffers of the stated size.
    let rc =
        unsafe { libc::getgrnam_r(c.as_ptr(), &mut grp, buf.as_mut_ptr(), buf.len(), &mut out) };
    (rc == 0 && !out.is_null()).then_some(grp.gr_gid)
}

fn group_name(gid: u32) -> String {
    let mut buf = vec![0 as libc::c_char; 4096];
    let mut grp: libc::group = unsafe { std::mem::zeroed() };
    let mut out = std::ptr::null_mut();
    // SAFETY: all pointers refer to live buffers of the stated size.
    let rc = unsafe { libc::getgrgid_r(gid, &mut grp, buf.as_mut_ptr(), buf.len(), &mut out) };
    if rc == 0 && !out.is_null() {
        // SAFETY: gr_name points into buf and is NUL-terminated.
        unsafe { std::ffi::CStr::from_ptr(grp.gr_name) }
            .to_string_lossy()
            .into_owned()
    } else {
        gid.to_string()
    }
}

fn range(start: usize, len: usize) -> String {
    // 1-based, inclusive; an empty range names the line before it
    match len {
        0 => start.to_string(),
        1 => (start + 1).to_string(),
        _ => format!("{},{}", start + 1, start + len),
    }
}

fn push_lines(out: &mut String, mark: &str, lines: &[&str]) {
    for l in lines {
        out.push_str(mark);
        out.push_str(l);
        if !l.ends_with('\n') {
            out.push_str("\n\\ No newline at end of file\n");
        }
    }
}

/// `diff` output in the classic normal format.
pub fn normal_diff(a: &str, b: &str) -> String {
    use similar::{DiffOp, TextDiff};
    let d = TextDiff::from_lines(a, b);
    let (la, lb): (Vec<&str>, Vec<&str>) = (d.old_slices().to_vec(), d.new_slices().to_vec());
    let mut out = String::new();
    for op in d.ops() {
        match *op {
            DiffOp::Equal { .. } => {}
            DiffOp::Delete {
                old_index,
                old_len,
                new_index,
            } => {
                out.push_str(&format!("{}d{}\n", range(old_index, old_len), new_index));
                push_lines(&mut out, "< ", &la[old_index..old_index + old_len]);
            }
            DiffOp::Insert {
                old_index,
                new_index,
                new_len,
            } => {
                out.push_str(&format!("{}a{}\n", old_index, range(new_index, new_len)));
                push_lines(&mut out, "> ", &lb[new_index..new_index + new_len]);
            }
            DiffOp::Replace {
                old_index,
                old_len,
                new_index,
                new_len,
            } => {
                out.push_str(&format!(
                    "{}c{}\n",
                    range(old_index, old_len),
                    range(new_index, new_len)
                ));
                push_lines(&mut out, "< ", &la[old_index..old_index + old_len]);
                out.push_str("---\n");
                push_lines(&mut out, "> ", &lb[new_index..new_index + new_len]);
            }
        }
    }
    out
}

#[derive(Default)]
struct FindFilter {
    names: Vec<(glob::Pattern, bool)>,
    kind: Option<char>,
    max_depth: Option<usize>,
    min_depth: usize,
}

fn find_walk(hp: &Path, shown: &str, depth: usize, f: &FindFilter, o: &mut CmdOutput) {
    let Ok(meta) = fs::symlink_metadata(hp) else {
        return;
    };
    let base = Path::new(shown)
        .file_name()
        .map(|b| b.to_string_lossy().into_owned())
        .unwrap_or_else(|| shown.to_string());
    let kind_ok = match f.kind {
        Some('f') => meta.is_file(),
        Some('d') => meta.is_dir(),
        Some('l') => meta.file_type().is_symlink(),
        _ => true,
    };
    let names_ok = f.names.iter().all(|(p, ci)| {
        if *ci {
            p.matches(&base.to_lowercase())
        } else {
            p.matches(&base)
        }
    });
    if depth >= f.min_depth && kind_ok && names_ok {
        o.out(format!("{shown}\n"));
    }
    if meta.is_dir() && f.max_depth.is_none_or(|m| depth < m) {
        let mut kids: Vec<_> = match fs::read_dir(hp) {
            Ok(rd) => rd.flatten().map(|e| e.file_name()).collect(),
            Err(e) => {
                o.err(1, format!("find: '{shown}': {}", io_msg(&e)));
                return;
            }
        };
        kids.sort();
        for k in kids {
            let name = k.to_string_lossy();
            let child = if shown.ends_with('/') {
                format!("{shown}{name}")
            } else {
                format!("{shown}/{name}")
            };
            find_walk(&hp.join(&k), &child, depth + 1, f, o);
        }
    }
}

fn wc_line(counts: &[usize; 3], which: [bool; 3], name: &str) -> String {
    let mut parts: Vec<String> = (0..3)
        .filter(|&i| which[i])
        .map(|i| counts[i].to_string())
        .collect();
    parts.push(name.to_string());
    format!("{}\n", parts.join(" "))
}
