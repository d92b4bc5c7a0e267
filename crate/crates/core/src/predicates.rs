//! `pttest`, `pttesta`, `pttesto` and `ptpred`.

use serde::{Deserialize, Serialize};

use crate::builtins::NodeShell;
use crate::cluster::{Cluster, Role};
use crate::collectives::{gather, reduce, ReduceOp};
use crate::error::{decode, encode, PtError};
use crate::hostspec::HostSet;
use crate::node::NodeContext;
use crate::testexpr;
use crate::transport::NodeGroup;

/// How per-node results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMode {
    And,
    Or,
}

impl TestMode {
    fn op(self) -> ReduceOp {
        match self {
            TestMode::And => ReduceOp::LogicalAnd,
            TestMode::Or => ReduceOp::LogicalOr,
        }
    }

    /// Neutral element of the combination.
    fn identity(self) -> i64 {
        match self {
            TestMode::And => 1,
            TestMode::Or => 0,
        }
    }

    /// Mode of a command name; `pttest` is `pttesto`.
    pub fn for_command(name: &str) -> Option<TestMode> {
        match name {
            "pttesta" => Some(TestMode::And),
            "pttesto" | "pttest" => Some(TestMode::Or),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestJob {
    pub args: Vec<String>,
    pub mode: TestMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestResult {
    /// `(hostname, test succeeded)` in rank order.
    pub per_host: Vec<(String, bool)>,
    pub combined: bool,
    pub mode: TestMode,
}

impl TestResult {
    pub fn exit_code(&self) -> i32 {
        if self.combined {
            0
        } else {
            1
        }
    }
}

pub(crate) fn node_main(
    group: &NodeGroup,
    ctx: &NodeContext,
    job: &TestJob,
) -> Result<i32, PtError> {
    let shell = NodeShell::new(ctx);
    let (code, msg) = testexpr::run_test(&job.args, false, &|p: &str| shell.host_path(p));
    if !msg.is_empty() {
        eprint!("{}: {msg}", ctx.hostname);
    }
    gather(group, 0, encode(&(ctx.hostname.clone(), code)))?;
    reduce(group, 0, job.mode.op(), (code == 0) as i64)?;
    Ok(code)
}

fn collect(group: &NodeGroup, mode: TestMode) -> Result<TestResult, PtError> {
    let parts = gather(group, 0, Vec::new())?.expect("rank 0 is the root");
    let combined = reduce(group, 0, mode.op(), mode.identity())?.expect("rank 0 is the root");
    let mut per_host = Vec::new();
    for p in &parts[1..] {
        let (host, code): (String, i32) = decode(p)?;
        if code == 2 {
            return Err(PtError::usage(format!("test: syntax error on {host}")));
        }
        per_host.push((host, code == 0));
    }
    Ok(TestResult {
        per_host,
        combined: combined == 1,
        mode,
    })
}

/// Checks the expression locally so syntax errors never reach the nodes.
fn validated(args: &[String]) -> Result<Vec<String>, PtError> {
    let args = testexpr::split_expression(args);
    testexpr::parse(&args).map_err(|e| PtError::usage(e.to_string()))?;
    Ok(args)
}

/// Runs `test` on every host and combines the outcomes.
pub fn pttest(
    cluster: &Cluster,
    hosts: &HostSet,
    mode: TestMode,
    test_args: &[String],
) -> Result<TestResult, PtError> {
    let args = validated(test_args)?;
    let role = Role::Test(TestJob { args, mode });
    cluster.run(hosts, &role, |g, _| collect(g, mode))
}

/// `ptpred`: one `<host>: <true_out|false_out>` line per host.
pub fn ptpred(
    cluster: &Cluster,
    hosts: &HostSet,
    test_args: &[String],
    true_out: &str,
    false_out: &str,
) -> Result<String, PtError> {
    let r = pttest(cluster, hosts, TestMode::Or, test_args)?;
    Ok(pred_lines(&r, true_out, false_out))
}

pub fn pred_lines(r: &TestResult, true_out: &str, false_out: &str) -> String {
    r.per_host
        .iter()
        .map(|(h, ok)| format!("{h}: {}\n", if *ok { true_out } else { false_out }))
        .collect()
}
