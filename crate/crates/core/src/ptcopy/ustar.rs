//! POSIX ustar streams. [`ArchiveReader`] produces an archive lazily from a
//! list of entries; [`Untar`] consumes one in arbitrary pieces.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Component, Path, PathBuf};

use crate::node::NodeContext;

const BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryKind {
    Dir { mode: u32 },
    File { path: PathBuf, size: u64, mode: u32 },
    Symlink { target: String },
}

/// One archive member; `name` uses `/` separators and no trailing slash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub name: String,
    pub kind: EntryKind,
}

fn name_of(p: &Path) -> io::Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("non UTF-8 name {p:?}")))
}

/// Entries for `src` stored under the archive name `top`. Directory
/// children are visited in name order.
pub fn collect_entries(src: &Path, top: &str, out: &mut Vec<ArchiveEntry>) -> io::Result<()> {
    let meta = fs::metadata(src)?;
    push_entry(src, top, &meta, out)
}

fn push_entry(
    src: &Path,
    name: &str,
    meta: &fs::Metadata,
    out: &mut Vec<ArchiveEntry>,
) -> io::Result<()> {
    let mode = meta.permissions().mode() & 0o7777;
    if meta.file_type().is_symlink() {
        let target = name_of(&fs::read_link(src)?)?;
        out.push(ArchiveEntry {
            name: name.to_string(),
            kind: EntryKind::Symlink { target },
        });
    } else if meta.is_dir() {
        out.push(ArchiveEntry {
            name: name.to_string(),
            kind: EntryKind::Dir { mode },
        });
        let mut kids: Vec<_> = fs::read_dir(src)?.collect::<io::Result<_>>()?;
        kids.sort_by_key(|e| e.file_name());
        for k in kids {
            let child = name_of(Path::new(&k.file_name()))?;
            let m = fs::symlink_metadata(k.path())?;
            push_entry(&k.path(), &format!("{name}/{child}"), &m, out)?;
        }
    } else if meta.is_file() {
        out.push(ArchiveEntry {
            name: name.to_string(),
            kind: EntryKind::File {
                path: src.to_path_buf(),
                size: meta.len(),
                mode,
            },
        });
    } else {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{}: unsupported file type", src.display()),
        ));
    }
    Ok(())
}

fn put_str(h: &mut [u8], off: usize, len: usize, s: &[u8]) {
    h[off..off + s.len().min(len)].copy_from_slice(&s[..s.len().min(len)]);
}

fn put_octal(h: &mut [u8], off: usize, len: usize, v: u64) -> io::Result<()> {
    let s = format!("{:0w$o}", v, w = len - 1);
    if s.len() > len - 1 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "value too large for ustar",
        ));
    }
    put_str(h, off, len, s.as_bytes());
    h[off + len - 1] = 0;
    Ok(())
}

/// Splits a member name over the `prefix` and `name` fields.
fn split_name(name: &str) -> io::Result<(&str, &str)> {
    if name.len() <= 100 {
        return Ok(("", name));
    }
    for (i, c) in name.char_indices() {
        if c == '/' && i <= 155 && name.len() - i - 1 <= 100 && i > 0 {
            return Ok((&name[..i], &name[i + 1..]));
        }
    }
    Err(io::Error::new(
        io::ErrorKind::InvalidInput,
        format!("{name}: name too long for ustar"),
    ))
}

/// The 512-byte header of `e`.
pub fn header(e: &ArchiveEntry) -> io::Result<[u8; BLOCK]> {
    let mut h = [0u8; BLOCK];
    let stored = match e.kind {
        EntryKind::Dir { .. } => format!("{}/", e.name),
        _ => e.name.clone(),
    };
    let (prefix, name) = split_name(&stored)?;
    put_str(&mut h, 0, 100, name.as_bytes());
    let (mode, size, flag) = match &e.kind {
        EntryKind::Dir { mode } => (*mode, 0, b'5'),
        EntryKind::File { size, mode, .. } => (*mode, *size, b'0'),
        EntryKind::Symlink { target } => {
            if target.len() > 100 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    "link target too long",
                ));
            }
            put_str(&mut h, 157, 100, target.as_bytes());
            (0o777, 0, b'2')
        }
    };
    put_octal(&mut h, 100, 8, mode as u64)?;
    put_octal(&mut h, 108, 8, 0)?;
    put_octal(&mut h, 116, 8, 0)?;
    put_octal(&mut h, 124, 12, size)?;
    put_octal(&mut h, 136, 12, 0)?;
    h[156] = flag;
    put_str(&mut h, 257, 6, b"ustar\0");
    put_str(&mut h, 263, 2, b"00");
    put_str(&mut h, 345, 155, prefix.as_bytes());
    h[148..156].fill(b' ');
    let sum: u32 = h.iter().map(|&b| b as u32).sum();
    let s = format!("{sum:06o}\0 ");
    h[148..156].copy_from_slice(s.as_bytes());
    Ok(h)
}

/// Reads an archive of `entries` without building it in memory.
pub struct ArchiveReader {
    entries: std::vec::IntoIter<ArchiveEntry>,
    buf: Vec<u8>,
    pos: usize,
    /// Open file body, bytes still to read and the padding that follows.
    body: Option<(io::Take<File>, u64, usize)>,
    trailer_done: bool,
}

impl ArchiveReader {
    pub fn new(entries: Vec<ArchiveEntry>) -> Self {
        ArchiveReader {
            entries: entries.into_iter(),
            buf: Vec::new(),
            pos: 0,
            body: None,
            trailer_done: false,
        }
    }

    fn set_buf(&mut self, b: Vec<u8>) {
        self.buf = b;
        self.pos = 0;
    }
}

fn padding(size: u64) -> usize {
    (BLOCK - (size % BLOCK as u64) as usize) % BLOCK
}

impl Read for ArchiveReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        loop {
            if self.pos < self.buf.len() {
                let n = out.len().min(self.buf.len() - self.pos);
                out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
                self.pos += n;
                return Ok(n);
            }
            if let Some((f, remaining, pad)) = &mut self.body {
                if *remaining > 0 {
                    let want = out
                        .len()
                        .min(usize::try_from(*remaining).unwrap_or(usize::MAX));
                    let n = f.read(&mut out[..want])?;
                    if n == 0 {
                        return Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "file shrank while being archived",
                        ));
                    }
                    *remaining -= n as u64;
                    return Ok(n);
                }
                let pad = *pad;
                self.body = None;
                self.set_buf(vec![0; pad]);
                continue;
            }
            match self.entries.next() {
                Some(e) => {
                    self.set_buf(header(&e)?.to_vec());
                    if let EntryKind::File { path, size, .. } = &e.kind {
                        if *size > 0 {
                            let f = File::open(path)?;
                            self.body = Some((f.take(*size), *size, padding(*size)));
                        }
                    }
                }
                None if !self.trailer_done => {
                    self.trailer_done = true;
                    self.set_buf(vec![0; BLOCK * 2]);
                }
                None => return Ok(0),
            }
        }
    }
}

fn field_str(b: &[u8]) -> &[u8] {
    let end = b.iter().position(|&c| c == 0).unwrap_or(b.len());
    &b[..end]
}

fn field_octal(b: &[u8]) -> io::Result<u64> {
    let s = std::str::from_utf8(field_str(b)).map_err(|_| bad("bad numeric field"))?;
    let s = s.trim_matches(|c: char| c == ' ' || c == '\0');
    if s.is_empty() {
        return Ok(0);
    }
    u64::from_str_radix(s, 8).map_err(|_| bad("bad numeric field"))
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Member path relative to the extraction root; absolute names and `..`
/// are refused.
fn safe_relative(name: &str) -> io::Result<PathBuf> {
    let mut out = PathBuf::new();
    for c in Path::new(name).components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return Err(bad(&format!("{name}: unsafe member name"))),
        }
    }
    Ok(out)
}

enum State {
    Header,
    Body { remaining: u64, pad: usize },
    Skip(usize),
    Done,
}

/// Push-based extractor writing into `root` on behalf of a node.
pub struct Untar<'a> {
    ctx: &'a NodeContext,
    root: PathBuf,
    block: Vec<u8>,
    state: State,
    zero_blocks: u32,
    file: Option<(File, PathBuf, u32)>,
    created: Vec<PathBuf>,
    dir_modes: Vec<(PathBuf, u32)>,
    bytes: u64,
}

impl<'a> Untar<'a> {
    pub fn new(ctx: &'a NodeContext, root: PathBuf) -> Self {
        Untar {
            ctx,
            root,
            block: Vec::with_capacity(BLOCK),
            state: State::Header,
            zero_blocks: 0,
            file: None,
            created: Vec::new(),
            dir_modes: Vec::new(),
            bytes: 0,
        }
    }

    /// File content bytes extracted so far.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    fn make_dir(&mut self, p: &Path) -> io::Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(p);
        while let Some(d) = cur {
            if d.exists() {
                break;
            }
            if d == self.root {
                return Err(io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("{}: no such directory", d.display()),
                ));
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        for d in missing.into_iter().rev() {
            self.ctx.check_write()?;
            fs::create_dir(&d)?;
            self.created.push(d);
        }
        Ok(())
    }

    fn start_member(&mut self) -> io::Result<()> {
        let h = std::mem::take(&mut self.block);
        if h.iter().all(|&b| b == 0) {
            self.zero_blocks += 1;
            if self.zero_blocks == 2 {
                self.state = State::Done;
            }
            return Ok(());
        }
        self.zero_blocks = 0;
        let want = field_octal(&h[148..156])?;
        let mut sum_h = h.clone();
        sum_h[148..156].fill(b' ');
        if sum_h.iter().map(|&b| b as u64).sum::<u64>() != want {
            return Err(bad("header checksum mismatch"));
        }
        let name = String::from_utf8_lossy(field_str(&h[0..100])).into_owned();
        let prefix = String::from_utf8_lossy(field_str(&h[345..500])).into_owned();
        let full = if prefix.is_empty() {
            name
        } else {
            format!("{prefix}/{name}")
        };
        let rel = safe_relative(&full)?;
        let path = self.root.join(&rel);
        let mode = field_octal(&h[100..108])? as u32 & 0o7777;
        let size = field_octal(&h[124..136])?;
        match h[156] {
            b'5' => {
                self.make_dir(&path)?;
                self.dir_modes.push((path, mode));
                self.state = State::Header;
            }
            b'0' | 0 => {
                if let Some(parent) = path.parent() {
                    self.make_dir(parent)?;
                }
                let existed = path.exists();
                let f = self.ctx.create_file(&path)?;
                if !existed {
                    self.created.push(path.clone());
                }
                self.file = Some((f, path, mode));
                if size == 0 {
                    self.close_file()?;
                    self.state = State::Header;
                } else {
                    self.state = State::Body {
                        remaining: size,
                        pad: padding(size),
                    };
                }
            }
            b'2' => {
                self.ctx.check_write()?;
                let target = String::from_utf8_lossy(field_str(&h[157..257])).into_owned();
                if let Some(parent) = path.parent() {
                    self.make_dir(parent)?;
                }
                if fs::symlink_metadata(&path).is_ok() {
                    fs::remove_file(&path)?;
                }
                symlink(target, &path)?;
                self.created.push(path);
                self.state = State::Header;
            }
            _ => {
                let n = size as usize + padding(size);
                self.state = if n == 0 {
                    State::Header
                } else {
                    State::Skip(n)
                };
            }
        }
        Ok(())
    }

    fn close_file(&mut self) -> io::Result<()> {
        if let Some((f, path, mode)) = self.file.take() {
            drop(f);
            fs::set_permissions(&path, fs::Permissions::from_mode(mode))?;
        }
        Ok(())
    }

    /// Consumes the next piece of the archive.
    pub fn push(&mut self, mut data: &[u8]) -> io::Result<()> {
        while !data.is_empty() {
            match &mut self.state {
                State::Done => return Ok(()),
                State::Header => {
                    let n = data.len().min(BLOCK - self.block.len());
                    self.block.extend_from_slice(&data[..n]);
                    data = &data[n..];
                    if self.block.len() == BLOCK {
                        self.start_member()?;
                    }
                }
                State::Body { remaining, pad } => {
                    let n = data
                        .len()
                        .min(usize::try_from(*remaining).unwrap_or(usize::MAX));
                    let (f, _, _) = self.file.as_mut().expect("open member file");
                    f.write_all(&data[..n])?;
                    data = &data[n..];
                    *remaining -= n as u64;
                    self.bytes += n as u64;
                    if *remaining == 0 {
                        let pad = *pad;
                        self.close_file()?;
                        self.state = if pad == 0 {
                            State::Header
                        } else {
                            State::Skip(pad)
                        };
                    }
                }
                State::Skip(k) => {
                    let n = data.len().min(*k);
                    data = &data[n..];
                    *k -= n;
                    if *k == 0 {
                        self.state = State::Header;
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks the archive ended cleanly and applies directory modes.
    pub fn finish(&mut self) -> io::Result<u64> {
        if !matches!(self.state, State::Done) {
            return Err(bad("archive ended early"));
        }
        for (d, mode) in self.dir_modes.iter().rev() {
            fs::set_permissions(d, fs::Permissions::from_mode(*mode))?;
        }
        Ok(self.bytes)
    }

    /// Removes everything this extraction created.
    pub fn abort(&mut self) {
        self.file = None;
        for p in self.created.drain(..).rev() {
            let _ = match fs::symlink_metadata(&p) {
                Ok(m) if m.is_dir() => fs::remove_dir_all(&p),
                Ok(_) => fs::remove_file(&p),
                Err(_) => Ok(()),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn archive(src: &Path, top: &str) -> Vec<u8> {
        let mut es = Vec::new();
        collect_entries(src, top, &mut es).unwrap();
        let mut out = Vec::new();
        ArchiveReader::new(es).read_to_end(&mut out).unwrap();
        out
    }

    fn extract(bytes: &[u8], dest: &Path, piece: usize) -> io::Result<u64> {
        let ctx = NodeContext::native(1, "t");
        let mut u = Untar::new(&ctx, dest.to_path_buf());
        for p in bytes.chunks(piece.max(1)) {
            u.push(p)?;
        }
        u.finish()
    }

    fn digest(p: &Path) -> String {
        hex::encode(Sha256::digest(fs::read(p).unwrap()))
    }

    #[test]
    fn empty_dir_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("e");
        fs::create_dir(&src).unwrap();
        fs::set_permissions(&src, fs::Permissions::from_mode(0o750)).unwrap();
        let a = archive(&src, "e");
        assert_eq!(a.len(), 3 * BLOCK);
        let out = d.path().join("out");
        fs::create_dir(&out).unwrap();
        extract(&a, &out, 100).unwrap();
        let m = fs::metadata(out.join("e")).unwrap();
        assert!(m.is_dir());
        assert_eq!(m.permissions().mode() & 0o777, 0o750);
        assert_eq!(fs::read_dir(out.join("e")).unwrap().count(), 0);
    }

    #[test]
    fn nested_tree_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("t");
        fs::create_dir_all(src.join("a/b")).unwrap();
        fs::write(src.join("top.txt"), b"top").unwrap();
        fs::write(src.join("a/mid.bin"), vec![9u8; 1000]).unwrap();
        fs::write(src.join("a/b/deep"), vec![1u8; 512]).unwrap();
        fs::set_permissions(src.join("a/mid.bin"), fs::Permissions::from_mode(0o741)).unwrap();
        std::os::unix::fs::symlink("top.txt", src.join("link")).unwrap();
        let a = archive(&src, "t");
        let out = d.path().join("out");
        fs::create_dir(&out).unwrap();
        assert_eq!(extract(&a, &out, 333).unwrap(), 3 + 1000 + 512);
        for f in ["top.txt", "a/mid.bin", "a/b/deep"] {
            assert_eq!(digest(&src.join(f)), digest(&out.join("t").join(f)), "{f}");
        }
        let m = fs::metadata(out.join("t/a/mid.bin")).unwrap();
        assert_eq!(m.permissions().mode() & 0o777, 0o741);
        assert_eq!(
            fs::read_link(out.join("t/link")).unwrap(),
            Path::new("top.txt")
        );
    }

    #[test]
    fn readable_by_system_tar() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("s");
        let long = "x".repeat(90);
        fs::create_dir_all(src.join(&long)).unwrap();
        fs::write(src.join(&long).join(format!("{long}.dat")), b"payload").unwrap();
        let a = archive(&src, "s");
        let tarfile = d.path().join("a.tar");
        fs::write(&tarfile, &a).unwrap();
        let st = std::process::Command::new("tar")
            .arg("-tf")
            .arg(&tarfile)
            .output();
        if let Ok(o) = st {
            if o.status.success() {
                let listing = String::from_utf8_lossy(&o.stdout);
                assert!(
                    listing.contains(&format!("s/{long}/{long}.dat")),
                    "{listing}"
                );
            }
        }
    }

    #[test]
    fn hostile_names_are_refused() {
        let e = ArchiveEntry {
            name: "../escape".into(),
            kind: EntryKind::Dir { mode: 0o755 },
        };
        let mut a = header(&e).unwrap().to_vec();
        a.extend(vec![0; 1024]);
        let d = tempfile::tempdir().unwrap();
        assert!(extract(&a, d.path(), 512).is_err());
        assert!(!d.path().parent().unwrap().join("escape").exists());
    }

    #[test]
    fn truncated_archive_is_an_error_and_abort_cleans_up() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("s");
        fs::create_dir(&src).unwrap();
        fs::write(src.join("f"), vec![5u8; 2000]).unwrap();
        let a = archive(&src, "s");
        let out = d.path().join("out");
        fs::create_dir(&out).unwrap();
        let ctx = NodeContext::native(1, "t");
        let mut u = Untar::new(&ctx, out.clone());
        u.push(&a[..1500]).unwrap();
        assert!(u.finish().is_err());
        u.abort();
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }

    #[test]
    fn long_names_use_prefix() {
        let name = format!("{}/{}", "p".repeat(120), "n".repeat(80));
        let (pre, n) = split_name(&name).unwrap();
        assert_eq!((pre.len(), n.len()), (120, 80));
        assert!(split_name(&"z".repeat(101)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn file_contents_round_trip(files in prop::collection::btree_map("[a-z]{1,8}", prop::collection::vec(any::<u8>(), 0..3000), 1..5), piece in 1usize..2000) {
            let d = tempfile::tempdir().unwrap();
            let src = d.path().join("src");
            fs::create_dir(&src).unwrap();
            for (n, c) in &files {
                fs::write(src.join(n), c).unwrap();
            }
            let a = archive(&src, "src");
            prop_assert_eq!(a.len() % BLOCK, 0);
            let out = d.path().join("out");
            fs::create_dir(&out).unwrap();
            extract(&a, &out, piece).unwrap();
            for (n, c) in &files {
                prop_assert_eq!(&fs::read(out.join("src").join(n)).unwrap(), c);
            }
        }
    }
}
