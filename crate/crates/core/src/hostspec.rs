//! Target host resolution.
//!
//! Hosts come from one of four places, in precedence order:
//!
//! 1. the file named by `PT_MACHINE_FILE`, when set;
//! 2. `-all`, the hosts listed in the all-hosts file;
//! 3. `-m <file>`, a machine file;
//! 4. `-M <spec>`, an explicit blank-separated list or a `prefix%dsuffix@ranges`
//!    pattern such as `ccn%d@1-32,42,65-96`.
//!
//! Machine files hold one host per line. Blank lines and `#` comments are
//! skipped.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MACHINE_FILE_ENV: &str = "PT_MACHINE_FILE";
pub const ALL_HOSTS_ENV: &str = "PT_ALL_HOSTS_FILE";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HostSpecError {
    #[error("malformed host pattern `{spec}`: {reason}")]
    Pattern { spec: String, reason: String },
    #[error("empty host list")]
    Empty,
    #[error("cannot read host file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("no -all host list configured (set {ALL_HOSTS_ENV} or create {0})")]
    NoAllConfig(String),
    #[error("missing host argument: expected -all, -m <file> or -M <hosts>")]
    MissingHostArg,
    #[error("option {0} requires an argument")]
    MissingValue(String),
}

/// Where a [`HostSet`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HostOrigin {
    EnvFile,
    All,
    MachineFile,
    ExplicitList,
}

/// Ordered, resolved list of target hosts. Never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostSet {
    hosts: Vec<String>,
    origin: HostOrigin,
}

impl HostSet {
    pub fn new(hosts: Vec<String>, origin: HostOrigin) -> Result<Self, HostSpecError> {
        if hosts.is_empty() {
            return Err(HostSpecError::Empty);
        }
        Ok(HostSet { hosts, origin })
    }

    pub fn hosts(&self) -> &[String] {
        &self.hosts
    }

    pub fn origin(&self) -> HostOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.hosts.iter().map(String::as_str)
    }
}

/// A `prefix%dsuffix@lo-hi,...` host pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostPattern {
    pub prefix: String,
    pub suffix: String,
    pub ranges: Vec<(u64, u64)>,
}

impl HostPattern {
    pub fn parse(spec: &str) -> Result<Self, HostSpecError> {
        let err = |reason: &str| HostSpecError::Pattern {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let spec_trim = spec.trim();
        if spec_trim.matches('@').count() > 1 {
            return Err(err("more than one `@` range group"));
        }
        let (template, rangelist) = spec_trim
            .split_once('@')
            .ok_or_else(|| err("missing `@` before the range list"))?;
        match template.matches("%d").count() {
            1 => {}
            0 => return Err(err("pattern needs a `%d` placeholder")),
            _ => return Err(err("pattern has more than one `%d`")),
        }
        if template.chars().any(char::is_whitespace) {
            return Err(err("pattern may not contain blanks"));
        }
        let (prefix, suffix) = template.split_once("%d").expect("counted above");
        if rangelist.trim().is_empty() {
            return Err(err("empty range list"));
        }
        let mut ranges = Vec::new();
        for term in rangelist.split(',') {
            let term = term.trim();
            let parse_num = |s: &str| -> Result<u64, HostSpecError> {
                if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(err(&format!("non-numeric range term `{term}`")));
                }
                s.parse::<u64>()
                    .map_err(|_| err(&format!("range term `{term}` out of range")))
            };
            let (lo, hi) = match term.split_once('-') {
                Some((a, b)) => (parse_num(a)?, parse_num(b)?),
                None => {
                    let n = parse_num(term)?;
                    (n, n)
                }
            };
            if lo > hi {
                return Err(err(&format!("range `{term}` has lo > hi")));
            }
            ranges.push((lo, hi));
        }
        Ok(HostPattern {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
            ranges,
        })
    }

    /// Number of hosts the pattern expands to.
    pub fn len(&self) -> u64 {
        self.ranges.iter().map(|(lo, hi)| hi - lo + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn host(&self, n: u64) -> String {
        format!("{}{}{}", self.prefix, n, self.suffix)
    }

    pub fn expand(&self) -> Vec<String> {
        self.ranges
            .iter()
            .flat_map(|&(lo, hi)| lo..=hi)
            .map(|n| self.host(n))
            .collect()
    }
}

impl fmt::Display for HostPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ranges: Vec<String> = self
            .ranges
            .iter()
            .map(|&(lo, hi)| {
                if lo == hi {
                    lo.to_string()
                } else {
                    format!("{lo}-{hi}")
                }
            })
            .collect();
        write!(f, "{}%d{}@{}", self.prefix, self.suffix, ranges.join(","))
    }
}

/// Expands an explicit blank-separated list or a `%d@` pattern.
pub fn expand_pattern(spec: &str) -> Result<HostSet, HostSpecError> {
    if spec.contains("%d") || spec.contains('@') {
        let pattern = HostPattern::parse(spec)?;
        return HostSet::new(pattern.expand(), HostOrigin::ExplicitList);
    }
    let hosts: Vec<String> = spec.split_whitespace().map(str::to_string).collect();
    HostSet::new(hosts, HostOrigin::ExplicitList)
}

pub fn read_machine_file(content: &str) -> Result<HostSet, HostSpecError> {
    parse_host_lines(content, HostOrigin::MachineFile)
}

fn parse_host_lines(content: &str, origin: HostOrigin) -> Result<HostSet, HostSpecError> {
    let hosts = content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    HostSet::new(hosts, origin)
}

fn load_host_file(path: &Path, origin: HostOrigin) -> Result<HostSet, HostSpecError> {
    let content = fs::read_to_string(path).map_err(|e| HostSpecError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_host_lines(&content, origin)
}

/// Location of the `-all` host list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllHostsConfig {
    pub path: PathBuf,
}

impl AllHostsConfig {
    /// `PT_ALL_HOSTS_FILE`, else `$XDG_CONFIG_HOME/ptools/hosts`, else
    /// `$HOME/.config/ptools/hosts`.
    pub fn from_env(env: &HashMap<String, String>) -> Self {
        if let Some(p) = env.get(ALL_HOSTS_ENV).filter(|p| !p.is_empty()) {
            return AllHostsConfig { path: p.into() };
        }
        let base = match env.get("XDG_CONFIG_HOME").filter(|p| !p.is_empty()) {
            Some(x) => PathBuf::from(x),
            None => {
                PathBuf::from(env.get("HOME").map(String::as_str).unwrap_or(".")).join(".config")
            }
        };
        AllHostsConfig {
            path: base.join("ptools").join("hosts"),
        }
    }
}

/// Resolves the hosts for a command line.
///
/// `args` is the command's argument list with the program name removed.
/// Returns the host set and the number of leading tokens consumed. When
/// `PT_MACHINE_FILE` is set it wins and nothing is consumed, so a leading
/// `-M spec` is left in place for the caller to see.
pub fn resolve_hosts(
    args: &[String],
    env: &HashMap<String, String>,
    config: &AllHostsConfig,
) -> Result<(HostSet, usize), HostSpecError> {
    if let Some(path) = env.get(MACHINE_FILE_ENV).filter(|p| !p.is_empty()) {
        return Ok((load_host_file(Path::new(path), HostOrigin::EnvFile)?, 0));
    }
    match args.first().map(String::as_str) {
        Some("-all") => {
            if !config.path.exists() {
                return Err(HostSpecError::NoAllConfig(
                    config.path.display().to_string(),
                ));
            }
            Ok((load_host_file(&config.path, HostOrigin::All)?, 1))
        }
        Some("-m") => {
            let file = args
                .get(1)
                .ok_or_else(|| HostSpecError::MissingValue("-m".into()))?;
            Ok((load_host_file(Path::new(file), HostOrigin::MachineFile)?, 2))
        }
        Some("-M") => {
            let spec = args
                .get(1)
                .ok_or_else(|| HostSpecError::MissingValue("-M".into()))?;
            Ok((expand_pattern(spec)?, 2))
        }
        _ => Err(HostSpecError::MissingHostArg),
    }
}
