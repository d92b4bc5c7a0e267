//! `ptcp` and `ptmv`: files and directory trees are cut into chunks and
//! pushed down a binomial tree, each node forwarding a chunk to its
//! children before writing it locally.
//!
//! Nodes first report what the destination is on their filesystem. Nodes
//! that agree form a subgroup, and every subgroup gets its own transfer.

pub mod chunk;
pub mod ustar;

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, Role};
use crate::collectives::{broadcast, gather, reduce, split, BinomialTree, ReduceOp};
use crate::error::{decode, encode, PtError};
use crate::exec::{ExitReport, HostStatus};
use crate::hostspec::HostSet;
use crate::node::NodeContext;
use crate::transport::{NodeGroup, Rank, Tag};

pub use chunk::{chunk_bytes, Chunk, ChunkError, Chunker};
pub use ustar::{collect_entries, ArchiveEntry, ArchiveReader, EntryKind, Untar};

/// Tag of chunk messages.
pub const TAG_COPY: Tag = 0x10;
pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;
/// Upper bound for `-o chunk=N`.
pub const MAX_CHUNK_SIZE: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferMode {
    SingleFile,
    Archive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub mode: TransferMode,
    pub compress: bool,
    pub chunk_size: usize,
}

impl TransferPlan {
    pub fn new(mode: TransferMode, compress: bool, chunk_size: usize) -> Result<Self, PtError> {
        if chunk_size == 0 || chunk_size > MAX_CHUNK_SIZE {
            return Err(PtError::usage(format!(
                "chunk size must be between 1 and {MAX_CHUNK_SIZE}"
            )));
        }
        Ok(TransferPlan {
            mode,
            compress,
            chunk_size,
        })
    }
}

/// Where a received stream goes on one node.
pub trait ChunkSink {
    fn accept(&mut self, data: &[u8]) -> io::Result<()>;
    /// Completes the write and returns the bytes written.
    fn finish(&mut self) -> io::Result<u64>;
    /// Discards whatever was written.
    fn abort(&mut self);
}

/// Collects the stream in memory.
#[derive(Debug, Default)]
pub struct MemSink(pub Vec<u8>);

impl ChunkSink for MemSink {
    fn accept(&mut self, data: &[u8]) -> io::Result<()> {
        self.0.extend_from_slice(data);
        Ok(())
    }
    fn finish(&mut self) -> io::Result<u64> {
        Ok(self.0.len() as u64)
    }
    fn abort(&mut self) {
        self.0.clear();
    }
}

/// A sink that could not be opened; every call reports the same error.
pub struct FailedSink(pub String);

impl ChunkSink for FailedSink {
    fn accept(&mut self, _: &[u8]) -> io::Result<()> {
        Err(io::Error::other(self.0.clone()))
    }
    fn finish(&mut self) -> io::Result<u64> {
        Err(io::Error::other(self.0.clone()))
    }
    fn abort(&mut self) {}
}

/// Writes one destination file; a failed transfer removes it.
pub struct FileSink {
    path: PathBuf,
    file: Option<File>,
    mode: Option<u32>,
    written: u64,
}

impl FileSink {
    pub fn create(ctx: &NodeContext, path: PathBuf, mode: Option<u32>) -> io::Result<Self> {
        let file = ctx.create_file(&path)?;
        Ok(FileSink {
            path,
            file: Some(file),
            mode,
            written: 0,
        })
    }
}

impl ChunkSink for FileSink {
    fn accept(&mut self, data: &[u8]) -> io::Result<()> {
        let f = self
            .file
            .as_mut()
            .ok_or_else(|| io::Error::other("file closed"))?;
        f.write_all(data)?;
        self.written += data.len() as u64;
        Ok(())
    }
    fn finish(&mut self) -> io::Result<u64> {
        let f = self
            .file
            .take()
            .ok_or_else(|| io::Error::other("file closed"))?;
        drop(f);
        if let Some(m) = self.mode {
            fs::set_permissions(&self.path, fs::Permissions::from_mode(m))?;
        }
        Ok(self.written)
    }
    fn abort(&mut self) {
        self.file = None;
        let _ = fs::remove_file(&self.path);
    }
}

/// Extracts an archive stream.
pub struct UntarSink<'a>(pub Untar<'a>);

impl ChunkSink for UntarSink<'_> {
    fn accept(&mut self, data: &[u8]) -> io::Result<()> {
        self.0.push(data)
    }
    fn finish(&mut self) -> io::Result<u64> {
        self.0.finish()
    }
    fn abort(&mut self) {
        self.0.abort()
    }
}

/// A reader whose first read fails, standing in for an unreadable source.
struct FailingReader(Option<io::Error>);

impl Read for FailingReader {
    fn read(&mut self, _: &mut [u8]) -> io::Result<usize> {
        Err(self
            .0
            .take()
            .unwrap_or_else(|| io::Error::other("source unavailable")))
    }
}

/// Local result of one transfer: bytes written (bytes read at the root) or
/// the reason it failed.
pub type RankResult = Result<u64, String>;

/// Pipelined broadcast of `source` (read at `root` only) into every other
/// rank's `sink`.
///
/// A read failure at the root ends the stream with an aborted chunk and
/// every rank fails. A write failure only fails the rank that hit it; it
/// keeps forwarding so its subtree still receives the data.
pub fn pipeline_broadcast(
    group: &NodeGroup,
    root: Rank,
    source: Option<&mut dyn Read>,
    plan: &TransferPlan,
    sink: &mut dyn ChunkSink,
) -> Result<RankResult, PtError> {
    let tree = BinomialTree::new(group.rank(), root, group.size());
    match tree.parent {
        None => {
            let src = source.ok_or_else(|| PtError::Protocol("root needs a source".into()))?;
            let mut chunker = Chunker::new(src, plan.chunk_size, plan.compress);
            let mut total = 0u64;
            loop {
                let (c, res) = match chunker.next_chunk() {
                    Ok(Some(c)) => (c, None),
                    Ok(None) => break,
                    Err(e) => (Chunk::abort(chunker.next_index()), Some(e)),
                };
                total += c.raw_len as u64;
                let bytes = c.encode();
                for &k in &tree.children {
                    group.send(k, TAG_COPY, bytes.clone())?;
                }
                if let Some(e) = res {
                    return Ok(Err(format!("reading source: {e}")));
                }
                if c.last {
                    break;
                }
            }
            Ok(Ok(total))
        }
        Some(parent) => {
            let mut status: Result<(), String> = Ok(());
            let mut expect = 0u32;
            loop {
                let msg = group.recv(parent, TAG_COPY)?;
                for &k in &tree.children {
                    group.send(k, TAG_COPY, msg.clone())?;
                }
                let c = Chunk::decode(&msg).map_err(|e| PtError::Protocol(e.to_string()))?;
                if c.index != expect {
                    return Err(PtError::Protocol(format!(
                        "chunk {} arrived, expected {expect}",
                        c.index
                    )));
                }
                expect += 1;
                if c.aborted {
                    status = status.and(Err("sender aborted the transfer".to_string()));
                    break;
                }
                if status.is_ok() {
                    status = c
                        .raw()
                        .map_err(|e| e.to_string())
                        .and_then(|raw| sink.accept(&raw).map_err(|e| e.to_string()));
                }
                if c.last {
                    break;
                }
            }
            match status {
                Ok(()) => Ok(sink.finish().map_err(|e| e.to_string())),
                Err(e) => {
                    sink.abort();
                    Ok(Err(e))
                }
            }
        }
    }
}

/// What the destination is on one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetClass {
    IsFile,
    IsDirectory,
    Missing,
}

impl TargetClass {
    const ALL: [TargetClass; 3] = [
        TargetClass::IsFile,
        TargetClass::IsDirectory,
        TargetClass::Missing,
    ];

    fn color(self) -> u32 {
        self as u32
    }
}

pub fn classify_target(dest: &Path) -> Result<TargetClass, String> {
    match fs::metadata(dest) {
        Ok(m) if m.is_dir() => Ok(TargetClass::IsDirectory),
        Ok(_) => Ok(TargetClass::IsFile),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(TargetClass::Missing),
        Err(e) => Err(format!("{}: {e}", dest.display())),
    }
}

/// A local source as seen by the orchestrator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub path: PathBuf,
    pub name: String,
    pub is_dir: bool,
    pub len: u64,
    pub mode: u32,
}

impl Source {
    pub fn inspect(path: &Path, recursive: bool) -> Result<Source, PtError> {
        let m = fs::metadata(path)
            .map_err(|e| PtError::usage(format!("cannot stat `{}`: {e}", path.display())))?;
        if m.is_dir() && !recursive {
            return Err(PtError::usage(format!(
                "`{}` is a directory (use -r)",
                path.display()
            )));
        }
        let name = base_name(&path.to_string_lossy())
            .ok_or_else(|| PtError::usage(format!("cannot copy `{}`", path.display())))?;
        Ok(Source {
            path: path.to_path_buf(),
            name,
            is_dir: m.is_dir(),
            len: m.len(),
            mode: m.permissions().mode() & 0o7777,
        })
    }
}

/// Last component of a path, ignoring trailing slashes.
fn base_name(p: &str) -> Option<String> {
    Path::new(p.trim_end_matches('/'))
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| s != "..")
}

fn join_node_path(dir: &str, name: &str) -> String {
    if dir.ends_with('/') {
        format!("{dir}{name}")
    } else {
        format!("{dir}/{name}")
    }
}

fn parent_node_path(p: &str) -> String {
    match Path::new(p.trim_end_matches('/')).parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_string_lossy().into_owned(),
        _ if p.starts_with('/') => "/".into(),
        _ => ".".into(),
    }
}

/// What the nodes of one class do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// Receive one file into `target`.
    File {
        target: String,
        mode: u32,
    },
    /// Extract an archive inside the existing directory `into`; `tops`
    /// names each source inside the archive.
    Archive {
        into: String,
        tops: Vec<String>,
    },
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PlanTable {
    abort: Option<String>,
    steps: Vec<(TargetClass, Step)>,
}

/// The step for nodes of class `class`. A pure function of its inputs so
/// every subgroup's plan can be derived at the orchestrator.
pub fn plan_step(class: TargetClass, sources: &[Source], dest: &str) -> Step {
    match (class, sources) {
        (TargetClass::IsDirectory, [s]) if !s.is_dir => Step::File {
            target: join_node_path(dest, &s.name),
            mode: s.mode,
        },
        (TargetClass::IsDirectory, _) => Step::Archive {
            into: dest.to_string(),
            tops: sources.iter().map(|s| s.name.clone()).collect(),
        },
        (_, [s]) if !s.is_dir => Step::File {
            target: dest.to_string(),
            mode: s.mode,
        },
        (TargetClass::Missing, [_]) => match base_name(dest) {
            Some(top) => Step::Archive {
                into: parent_node_path(dest),
                tops: vec![top],
            },
            None => Step::Fail(format!("{dest}: bad destination")),
        },
        (TargetClass::IsFile, [_]) => Step::Fail(format!(
            "{dest}: cannot overwrite non-directory with directory"
        )),
        (_, _) => Step::Fail(format!("{dest}: not a directory")),
    }
}

fn open_source(step: &Step, sources: &[Source]) -> Box<dyn Read> {
    let opened: io::Result<Box<dyn Read>> = match step {
        Step::File { .. } => File::open(&sources[0].path).map(|f| Box::new(f) as Box<dyn Read>),
        Step::Archive { tops, .. } => (|| {
            let mut entries = Vec::new();
            for (s, top) in sources.iter().zip(tops) {
                collect_entries(&s.path, top, &mut entries)?;
            }
            Ok(Box::new(ArchiveReader::new(entries)) as Box<dyn Read>)
        })(),
        Step::Fail(_) => Err(io::Error::other("no transfer")),
    };
    opened.unwrap_or_else(|e| Box::new(FailingReader(Some(e))))
}

fn transfer_plan(step: &Step, job: &CopyJob) -> TransferPlan {
    TransferPlan {
        mode: match step {
            Step::Archive { .. } => TransferMode::Archive,
            _ => TransferMode::SingleFile,
        },
        compress: job.compress,
        chunk_size: job.chunk_size,
    }
}

fn receive_step(
    sub: &NodeGroup,
    ctx: &NodeContext,
    step: &Step,
    job: &CopyJob,
) -> Result<RankResult, PtError> {
    let plan = transfer_plan(step, job);
    match step {
        Step::File { target, mode } => {
            let mut sink: Box<dyn ChunkSink> =
                match FileSink::create(ctx, ctx.resolve(target), Some(*mode)) {
                    Ok(s) => Box::new(s),
                    Err(e) => Box::new(FailedSink(format!("{target}: {e}"))),
                };
            pipeline_broadcast(sub, 0, None, &plan, sink.as_mut())
        }
        Step::Archive { into, .. } => {
            let mut sink = UntarSink(Untar::new(ctx, ctx.resolve(into)));
            pipeline_broadcast(sub, 0, None, &plan, &mut sink)
        }
        Step::Fail(m) => Ok(Err(m.clone())),
    }
}

/// What the nodes receive at launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyJob {
    pub dest: String,
    pub compress: bool,
    pub chunk_size: usize,
}

pub(crate) fn node_main(
    group: &NodeGroup,
    ctx: &NodeContext,
    job: &CopyJob,
) -> Result<i32, PtError> {
    let class = if job.dest.is_empty() {
        Err("empty destination".to_string())
    } else {
        classify_target(&ctx.resolve(&job.dest))
    };
    gather(group, 0, encode(&class))?;
    let table: PlanTable = decode(&broadcast(group, 0, Vec::new())?)?;
    let mut result: RankResult = match (&class, &table.abort) {
        (Err(e), _) => Err(e.clone()),
        (_, Some(m)) => Err(m.clone()),
        _ => Err("no transfer planned".into()),
    };
    for (cls, step) in &table.steps {
        let mine = class.as_ref().ok() == Some(cls);
        if let Step::Fail(m) = step {
            if mine {
                result = Err(m.clone());
            }
            continue;
        }
        if let Some(sub) = split(group, mine.then(|| cls.color()))? {
            result = receive_step(&sub, ctx, step, job)?;
        }
    }
    let ok = result.is_ok();
    gather(group, 0, encode(&(ctx.hostname.clone(), result)))?;
    reduce(group, 0, ReduceOp::Min, ok as i64)?;
    Ok(if ok { 0 } else { 1 })
}

/// Per-rank outcome of a copy; index 0 is the orchestrator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyOutcome {
    pub per_rank: Vec<(String, RankResult)>,
}

impl CopyOutcome {
    pub fn bytes_written(&self, rank: Rank) -> Option<u64> {
        self.per_rank
            .get(rank)
            .and_then(|(_, r)| r.as_ref().ok().copied())
    }
}

#[derive(Debug, Clone)]
pub struct CopyReport {
    pub outcome: CopyOutcome,
    pub report: ExitReport,
    /// Which class each node fell into, by rank (`None` if it could not tell).
    pub classes: Vec<Option<TargetClass>>,
}

/// Options shared by `ptcp` and `ptmv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyArgs {
    pub recursive: bool,
    pub compress: bool,
    pub chunk_size: usize,
    pub sources: Vec<String>,
    pub dest: String,
}

impl Default for CopyArgs {
    fn default() -> Self {
        CopyArgs {
            recursive: false,
            compress: true,
            chunk_size: DEFAULT_CHUNK_SIZE,
            sources: Vec::new(),
            dest: String::new(),
        }
    }
}

/// Parses `[-o opts] [-r] src... dest` (host arguments already removed).
/// `-o` takes comma-separated `compress`, `nocompress` and `chunk=N`.
pub fn parse_copy_args(cmd: &str, args: &[String]) -> Result<CopyArgs, PtError> {
    let mut a = CopyArgs::default();
    let mut rest = Vec::new();
    let mut it = args.iter();
    let mut flags_done = false;
    while let Some(x) = it.next() {
        if flags_done || !x.starts_with('-') || x == "-" {
            rest.push(x.clone());
            continue;
        }
        match x.as_str() {
            "--" => flags_done = true,
            "-r" | "-R" => a.recursive = true,
            "-o" => {
                let v = it
                    .next()
                    .ok_or_else(|| PtError::usage(format!("{cmd}: -o requires a value")))?;
                for opt in v.split(',').filter(|o| !o.is_empty()) {
                    match opt {
                        "compress" => a.compress = true,
                        "nocompress" => a.compress = false,
                        o => match o.strip_prefix("chunk=").map(str::parse::<usize>) {
                            Some(Ok(n)) if n > 0 && n <= MAX_CHUNK_SIZE => a.chunk_size = n,
                            _ => return Err(PtError::usage(format!("{cmd}: bad -o option `{o}`"))),
                        },
                    }
                }
            }
            other => return Err(PtError::usage(format!("{cmd}: unknown flag `{other}`"))),
        }
    }
    if rest.len() < 2 {
        return Err(PtError::usage(format!(
            "usage: {cmd} [hostargs] [-o opts] [-r] <src>... <dest>"
        )));
    }
    a.dest = rest.pop().expect("two or more");
    if a.dest.is_empty() {
        return Err(PtError::usage(format!("{cmd}: empty destination")));
    }
    a.sources = rest;
    Ok(a)
}

fn plan_table(classes: &[Option<TargetClass>], sources: &[Source], dest: &str) -> PlanTable {
    let present = |c: TargetClass| classes.contains(&Some(c));
    if sources.len() > 1
        && classes
            .iter()
            .flatten()
            .any(|c| *c != TargetClass::IsDirectory)
    {
        return PlanTable {
            abort: Some(format!("target `{dest}` is not a directory on every node")),
            steps: Vec::new(),
        };
    }
    PlanTable {
        abort: None,
        steps: TargetClass::ALL
            .into_iter()
            .filter(|c| present(*c))
            .map(|c| (c, plan_step(c, sources, dest)))
            .collect(),
    }
}

/// Orchestrator half of a copy on a launched group.
fn drive(group: &NodeGroup, sources: &[Source], job: &CopyJob) -> Result<CopyReport, PtError> {
    let reported = gather(group, 0, Vec::new())?.expect("rank 0 is the root");
    let mut classes = vec![None];
    for r in &reported[1..] {
        classes.push(decode::<Result<TargetClass, String>>(r)?.ok());
    }
    let table = plan_table(&classes[1..], sources, &job.dest);
    broadcast(group, 0, encode(&table))?;
    let mut root_result: RankResult = Ok(0);
    for (cls, step) in &table.steps {
        if matches!(step, Step::Fail(_)) {
            continue;
        }
        let sub = split(group, Some(cls.color()))?.expect("the orchestrator joins every transfer");
        let mut src = open_source(step, sources);
        let r = pipeline_broadcast(
            &sub,
            0,
            Some(&mut src),
            &transfer_plan(step, job),
            &mut MemSink::default(),
        )?;
        if root_result.is_ok() {
            root_result = r;
        }
    }
    let parts = gather(group, 0, Vec::new())?.expect("rank 0 is the root");
    let min = reduce(group, 0, ReduceOp::Min, root_result.is_ok() as i64)?.expect("root");
    let mut per_rank = vec![(group.host_of_rank(0).to_string(), root_result.clone())];
    let mut per_host = Vec::new();
    for (rank, p) in parts.iter().enumerate().skip(1) {
        let (host, mut r): (String, RankResult) = decode(p)?;
        // a single file must arrive whole
        if let (Ok(n), Some(Step::File { .. }), [s]) = (&r, step_of(&table, classes[rank]), sources)
        {
            if *n != s.len {
                r = Err(format!("wrote {n} of {} bytes", s.len));
            }
        }
        per_host.push(HostStatus {
            host: host.clone(),
            code: r.is_err() as i32,
            note: r.as_ref().err().cloned(),
        });
        per_rank.push((host, r));
    }
    let mut report = ExitReport::from_min(per_host, min);
    if report.scanned_aggregate() != 0 {
        report.aggregate = 1;
    }
    if let Err(e) = &root_result {
        report.per_host.insert(
            0,
            HostStatus {
                host: group.host_of_rank(0).to_string(),
                code: 1,
                note: Some(e.clone()),
            },
        );
    }
    if let Some(m) = table.abort {
        return Err(PtError::usage(m));
    }
    Ok(CopyReport {
        outcome: CopyOutcome { per_rank },
        report,
        classes,
    })
}

fn step_of(table: &PlanTable, class: Option<TargetClass>) -> Option<&Step> {
    let c = class?;
    table.steps.iter().find(|(k, _)| *k == c).map(|(_, s)| s)
}

/// Copies local `sources` to `dest` on every host.
pub fn ptcp(cluster: &Cluster, hosts: &HostSet, args: &CopyArgs) -> Result<CopyReport, PtError> {
    let sources = args
        .sources
        .iter()
        .map(|s| Source::inspect(Path::new(s), args.recursive))
        .collect::<Result<Vec<_>, _>>()?;
    let job = CopyJob {
        dest: args.dest.clone(),
        compress: args.compress,
        chunk_size: args.chunk_size,
    };
    TransferPlan::new(TransferMode::SingleFile, job.compress, job.chunk_size)?;
    cluster.run(hosts, &Role::Copy(job.clone()), |g, _| {
        drive(g, &sources, &job)
    })
}

#[derive(Debug, Clone)]
pub struct MoveReport {
    pub copy: CopyReport,
    /// Whether the local sources were deleted.
    pub removed: bool,
    pub deletion_errors: Vec<String>,
}

/// `ptcp`, then removal of the local sources if every node succeeded.
pub fn ptmv(cluster: &Cluster, hosts: &HostSet, args: &CopyArgs) -> Result<MoveReport, PtError> {
    let copy = ptcp(cluster, hosts, args)?;
    if copy.report.aggregate != 0 {
        return Ok(MoveReport {
            copy,
            removed: false,
            deletion_errors: Vec::new(),
        });
    }
    let mut deletion_errors = Vec::new();
    for s in &args.sources {
        let p = Path::new(s);
        let r = if p.is_dir() {
            fs::remove_dir_all(p)
        } else {
            fs::remove_file(p)
        };
        if let Err(e) = r {
            deletion_errors.push(format!("cannot remove `{s}`: {e}"));
        }
    }
    Ok(MoveReport {
        copy,
        removed: deletion_errors.is_empty(),
        deletion_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hostspec::expand_pattern;
    use crate::node::Fault;
    use crate::transport::{simulate, LaunchOptions};
    use rand::{RngCore, SeedableRng};
    use sha2::{Digest, Sha256};
    use std::sync::Arc;

    fn noise(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    fn sha(b: &[u8]) -> [u8; 32] {
        Sha256::digest(b).into()
    }

    fn run_mem(nodes: usize, data: Vec<u8>, plan: TransferPlan) -> Vec<Result<Vec<u8>, String>> {
        let d = tempfile::tempdir().unwrap();
        let hosts = expand_pattern(&format!("n%d@1-{nodes}")).unwrap();
        let data = Arc::new(data);
        let run = simulate(
            &hosts,
            &LaunchOptions::sim(d.path()),
            Arc::new(move |g, _| {
                let mut sink = MemSink::default();
                let mut src: &[u8] = &data;
                let src: Option<&mut dyn Read> =
                    (g.rank() == 0).then_some(&mut src as &mut dyn Read);
                let r = pipeline_broadcast(g, 0, src, &plan, &mut sink).unwrap();
                r.map(|_| sink.0)
            }),
        )
        .unwrap();
        run.results
    }

    #[test]
    fn empty_stream_everywhere() {
        let plan = TransferPlan::new(TransferMode::SingleFile, true, 1024).unwrap();
        for r in &run_mem(5, Vec::new(), plan)[1..] {
            assert_eq!(r.as_deref(), Ok(&[][..]));
        }
    }

    #[test]
    fn compressed_and_plain_streams_match() {
        let mut data = noise(50_000, 1);
        data.extend(vec![b'a'; 50_000]);
        let want = sha(&data);
        for compress in [false, true] {
            let plan = TransferPlan::new(TransferMode::SingleFile, compress, 4096).unwrap();
            for r in &run_mem(7, data.clone(), plan)[1..] {
                assert_eq!(sha(r.as_ref().unwrap()), want);
            }
        }
    }

    #[test]
    fn root_read_failure_poisons_every_rank() {
        let d = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("n%d@1-4").unwrap();
        let plan = TransferPlan::new(TransferMode::SingleFile, false, 16).unwrap();
        let run = simulate(
            &hosts,
            &LaunchOptions::sim(d.path()),
            Arc::new(move |g, _| {
                let mut sink = MemSink::default();
                let mut src =
                    (&[1u8; 40][..]).chain(FailingReader(Some(io::Error::other("disk gone"))));
                let src: Option<&mut dyn Read> =
                    (g.rank() == 0).then_some(&mut src as &mut dyn Read);
                pipeline_broadcast(g, 0, src, &plan, &mut sink).unwrap()
            }),
        )
        .unwrap();
        assert!(run.results.iter().all(|r| r.is_err()), "{:?}", run.results);
    }

    #[test]
    fn chunk_messages_and_rounds() {
        let d = tempfile::tempdir().unwrap();
        let hosts = expand_pattern("n%d@1-7").unwrap();
        let data = Arc::new(noise(10_000, 2));
        let plan = TransferPlan::new(TransferMode::SingleFile, false, 1000).unwrap();
        let run = simulate(
            &hosts,
            &LaunchOptions::sim(d.path()),
            Arc::new(move |g, _| {
                let mut src: &[u8] = &data;
                let src: Option<&mut dyn Read> =
                    (g.rank() == 0).then_some(&mut src as &mut dyn Read);
                pipeline_broadcast(g, 0, src, &plan, &mut MemSink::default()).unwrap()
            }),
        )
        .unwrap();
        let t = run.stats.tag(TAG_COPY);
        assert_eq!(t.messages, 7 * 10);
        // root sends 3 per chunk; the last chunk still needs two hops below
        assert!(t.max_round <= 3 * 10 + 2, "{}", t.max_round);
    }

    #[test]
    fn plan_follows_cp_rules() {
        let f = Source {
            path: "a".into(),
            name: "a".into(),
            is_dir: false,
            len: 1,
            mode: 0o644,
        };
        let dir = Source {
            path: "d".into(),
            name: "d".into(),
            is_dir: true,
            len: 0,
            mode: 0o755,
        };
        assert_eq!(
            plan_step(TargetClass::IsDirectory, std::slice::from_ref(&f), "/tmp"),
            Step::File {
                target: "/tmp/a".into(),
                mode: 0o644
            }
        );
        assert_eq!(
            plan_step(TargetClass::IsFile, std::slice::from_ref(&f), "x"),
            Step::File {
                target: "x".into(),
                mode: 0o644
            }
        );
        assert_eq!(
            plan_step(TargetClass::Missing, std::slice::from_ref(&dir), "out/new"),
            Step::Archive {
                into: "out".into(),
                tops: vec!["new".into()]
            }
        );
        assert_eq!(
            plan_step(TargetClass::IsDirectory, &[dir.clone(), f.clone()], "t/"),
            Step::Archive {
                into: "t/".into(),
                tops: vec!["d".into(), "a".into()]
            }
        );
        assert!(matches!(
            plan_step(TargetClass::IsFile, &[dir], "x"),
            Step::Fail(_)
        ));
    }

    #[test]
    fn parse_options() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let a = parse_copy_args(
            "ptcp",
            &s(&["-o", "nocompress,chunk=100", "-r", "a", "b", "/d"]),
        )
        .unwrap();
        assert!(!a.compress && a.recursive && a.chunk_size == 100);
        assert_eq!(a.sources, ["a", "b"]);
        assert_eq!(a.dest, "/d");
        assert!(parse_copy_args("ptcp", &s(&["a"])).is_err());
        assert!(parse_copy_args("ptcp", &s(&["-o", "chunk=0", "a", "b"])).is_err());
        assert!(parse_copy_args("ptcp", &s(&["-o", "fast", "a", "b"])).is_err());
        assert!(parse_copy_args("ptcp", &s(&["-x", "a", "b"])).is_err());
    }

    fn setup(n: usize) -> (tempfile::TempDir, Cluster, HostSet) {
        let d = tempfile::tempdir().unwrap();
        let c = Cluster::sim(d.path().join("nodes"));
        let hosts = expand_pattern(&format!("node%d@1-{n}")).unwrap();
        c.prepare(&hosts).unwrap();
        (d, c, hosts)
    }

    fn args(sources: Vec<String>, dest: &str) -> CopyArgs {
        CopyArgs {
            sources,
            dest: dest.into(),
            ..Default::default()
        }
    }

    #[test]
    fn file_into_directory_on_five_nodes() {
        let (d, c, hosts) = setup(5);
        let src = d.path().join("data.bin");
        let bytes = noise(300_000, 3);
        fs::write(&src, &bytes).unwrap();
        for sb in c.prepare(&hosts).unwrap() {
            fs::create_dir(sb.fs_root().join("tmp")).unwrap();
        }
        let r = ptcp(&c, &hosts, &args(vec![src.display().to_string()], "/tmp")).unwrap();
        assert_eq!(r.report.aggregate, 0, "{:?}", r.report);
        for sb in c.prepare(&hosts).unwrap() {
            assert_eq!(
                sha(&fs::read(sb.fs_root().join("tmp/data.bin")).unwrap()),
                sha(&bytes)
            );
        }
        for rank in 1..=5 {
            assert_eq!(r.outcome.bytes_written(rank), Some(300_000));
        }
    }

    #[test]
    fn mixed_destination_classes() {
        let (d, c, hosts) = setup(3);
        let src = d.path().join("cfg");
        fs::write(&src, b"new contents").unwrap();
        let boxes = c.prepare(&hosts).unwrap();
        fs::write(boxes[0].fs_root().join("target"), b"old").unwrap();
        fs::write(boxes[1].fs_root().join("target"), b"old").unwrap();
        fs::create_dir(boxes[2].fs_root().join("target")).unwrap();
        let r = ptcp(&c, &hosts, &args(vec![src.display().to_string()], "target")).unwrap();
        assert_eq!(r.report.aggregate, 0);
        assert_eq!(
            r.classes[1..],
            [
                Some(TargetClass::IsFile),
                Some(TargetClass::IsFile),
                Some(TargetClass::IsDirectory)
            ]
        );
        assert_eq!(
            fs::read(boxes[0].fs_root().join("target")).unwrap(),
            b"new contents"
        );
        assert_eq!(
            fs::read(boxes[1].fs_root().join("target")).unwrap(),
            b"new contents"
        );
        assert_eq!(
            fs::read(boxes[2].fs_root().join("target/cfg")).unwrap(),
            b"new contents"
        );
    }

    #[test]
    fn directory_copy_to_missing_and_existing() {
        let (d, c, hosts) = setup(2);
        let src = d.path().join("tree");
        fs::create_dir_all(src.join("sub")).unwrap();
        fs::write(src.join("sub/x"), b"x").unwrap();
        let boxes = c.prepare(&hosts).unwrap();
        fs::create_dir(boxes[1].fs_root().join("dst")).unwrap();
        let mut a = args(vec![src.display().to_string()], "dst");
        assert_eq!(ptcp(&c, &hosts, &a).unwrap_err().exit_code(), 2);
        a.recursive = true;
        let r = ptcp(&c, &hosts, &a).unwrap();
        assert_eq!(r.report.aggregate, 0, "{:?}", r.report);
        assert_eq!(
            fs::read(boxes[0].fs_root().join("dst/sub/x")).unwrap(),
            b"x"
        );
        assert_eq!(
            fs::read(boxes[1].fs_root().join("dst/tree/sub/x")).unwrap(),
            b"x"
        );
    }

    #[test]
    fn usage_errors() {
        let (d, c, hosts) = setup(2);
        let missing = args(vec![d.path().join("nope").display().to_string()], "/");
        assert_eq!(ptcp(&c, &hosts, &missing).unwrap_err().exit_code(), 2);
        let f1 = d.path().join("f1");
        let f2 = d.path().join("f2");
        fs::write(&f1, b"1").unwrap();
        fs::write(&f2, b"2").unwrap();
        let two = args(
            vec![f1.display().to_string(), f2.display().to_string()],
            "plainfile",
        );
        assert_eq!(ptcp(&c, &hosts, &two).unwrap_err().exit_code(), 2);
        let into_root = args(
            vec![f1.display().to_string(), f2.display().to_string()],
            "/",
        );
        assert_eq!(ptcp(&c, &hosts, &into_root).unwrap().report.aggregate, 0);
        for sb in c.prepare(&hosts).unwrap() {
            assert_eq!(fs::read(sb.fs_root().join("f2")).unwrap(), b"2");
        }
    }

    #[test]
    fn ptmv_respects_failures() {
        let (d, mut c, hosts) = setup(3);
        let src = d.path().join("m");
        fs::write(&src, b"move me").unwrap();
        let a = args(vec![src.display().to_string()], "/m");
        c.opts = c.opts.clone().with_fault("node2", Fault::FailWrites);
        let r = ptmv(&c, &hosts, &a).unwrap();
        assert!(!r.removed);
        assert_eq!(r.copy.report.aggregate, 1);
        assert!(src.exists());
        let boxes = c.prepare(&hosts).unwrap();
        assert!(!boxes[1].fs_root().join("m").exists());
        assert!(boxes[0].fs_root().join("m").exists());
        c.opts.faults.clear();
        let r = ptmv(&c, &hosts, &a).unwrap();
        assert!(r.removed);
        assert!(!src.exists());
        let empty = d.path().join("zero");
        fs::write(&empty, b"").unwrap();
        let r = ptmv(&c, &hosts, &args(vec![empty.display().to_string()], "/")).unwrap();
        assert!(r.removed && !empty.exists());
        assert_eq!(
            fs::metadata(boxes[2].fs_root().join("zero")).unwrap().len(),
            0
        );
    }
}
