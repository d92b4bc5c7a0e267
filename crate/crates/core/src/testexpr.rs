//! `test(1)` expressions: parsing and evaluation against a node's files.
//!
//! Supports `!`, `-a`, `-o`, parentheses, the common file and string
//! primaries and integer comparisons. Parse errors are reported separately
//! from a false result so callers can map them to exit status 2.

use std::ffi::CString;
use std::fmt;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("test: {0}")]
pub struct TestSyntaxError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Str(String),
    Unary(UnaryOp, String),
    Binary(String, BinaryOp, String),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    /// `test` with no arguments.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exists,
    Regular,
    Directory,
    NonEmpty,
    Readable,
    Writable,
    Executable,
    Symlink,
    Fifo,
    Socket,
    Block,
    Char,
    ZeroLen,
    NonZeroLen,
}

impl UnaryOp {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "-e" => UnaryOp::Exists,
            "-f" => UnaryOp::Regular,
            "-d" => UnaryOp::Directory,
            "-s" => UnaryOp::NonEmpty,
            "-r" => UnaryOp::Readable,
            "-w" => UnaryOp::Writable,
            "-x" => UnaryOp::Executable,
            "-L" | "-h" => UnaryOp::Symlink,
            "-p" => UnaryOp::Fifo,
            "-S" => UnaryOp::Socket,
            "-b" => UnaryOp::Block,
            "-c" => UnaryOp::Char,
            "-z" => UnaryOp::ZeroLen,
            "-n" => UnaryOp::NonZeroLen,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    StrEq,
    StrNe,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    NewerThan,
    OlderThan,
}

impl BinaryOp {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "=" | "==" => BinaryOp::StrEq,
            "!=" => BinaryOp::StrNe,
            "-eq" => BinaryOp::Eq,
            "-ne" => BinaryOp::Ne,
            "-lt" => BinaryOp::Lt,
            "-le" => BinaryOp::Le,
            "-gt" => BinaryOp::Gt,
            "-ge" => BinaryOp::Ge,
            "-nt" => BinaryOp::NewerThan,
            "-ot" => BinaryOp::OlderThan,
            _ => return None,
        })
    }

    fn is_integer(self) -> bool {
        matches!(
            self,
            BinaryOp::Eq | BinaryOp::Ne | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge
        )
    }
}

struct Parser<'a> {
    toks: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self, k: usize) -> Option<&'a str> {
        self.toks.get(self.pos + k).map(String::as_str)
    }

    fn remaining(&self) -> usize {
        self.toks.len() - self.pos
    }

    fn or(&mut self) -> Result<Expr, TestSyntaxError> {
        let mut lhs = self.and()?;
        while self.peek(0) == Some("-o") && self.remaining() > 1 {
            self.pos += 1;
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, TestSyntaxError> {
        let mut lhs = self.not()?;
        while self.peek(0) == Some("-a") && self.remaining() > 1 {
            self.pos += 1;
            let rhs = self.not()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, TestSyntaxError> {
        // `! = x` style: a lone `!` followed by a binary operator is a string
        if self.peek(0) == Some("!")
            && self.remaining() > 1
            && !(self.peek(1).and_then(BinaryOp::parse).is_some() && self.remaining() == 3)
        {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, TestSyntaxError> {
        let Some(tok) = self.peek(0) else {
            return Err(TestSyntaxError("argument expected".into()));
        };
        if let (Some(op), Some(rhs)) = (self.peek(1).and_then(BinaryOp::parse), self.peek(2)) {
            self.pos += 3;
            if op.is_integer() {
                for s in [tok, rhs] {
                    parse_int(s)?;
                }
            }
            return Ok(Expr::Binary(tok.to_string(), op, rhs.to_string()));
        }
        if tok == "(" && self.remaining() > 1 {
            self.pos += 1;
            let e = self.or()?;
            if self.peek(0) != Some(")") {
                return Err(TestSyntaxError("missing `)'".into()));
            }
            self.pos += 1;
            return Ok(e);
        }
        if let (Some(op), Some(arg)) = (UnaryOp::parse(tok), self.peek(1)) {
            self.pos += 2;
            return Ok(Expr::Unary(op, arg.to_string()));
        }
        self.pos += 1;
        Ok(Expr::Str(tok.to_string()))
    }
}

fn parse_int(s: &str) -> Result<i64, TestSyntaxError> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| TestSyntaxError(format!("{s}: integer expression expected")))
}

/// Parses the arguments of a `test` invocation (without the command name
/// and without a trailing `]`).
pub fn parse(args: &[String]) -> Result<Expr, TestSyntaxError> {
    if args.is_empty() {
        return Ok(Expr::Empty);
    }
    let mut p = Parser { toks: args, pos: 0 };
    let e = p.or()?;
    if p.pos != args.len() {
        return Err(TestSyntaxError(format!(
            "unexpected argument `{}`",
            args[p.pos]
        )));
    }
    Ok(e)
}

/// Splits a test expression given as one string (`'-f myfile'`).
pub fn split_expression(args: &[String]) -> Vec<String> {
    if args.len() == 1 {
        shlex::split(&args[0])
            .unwrap_or_else(|| args[0].split_whitespace().map(str::to_string).collect())
    } else {
        args.to_vec()
    }
}

fn access(path: &Path, mode: libc::c_int) -> bool {
    let Ok(c) = CString::new(path.as_os_str().as_bytes()) else {
        return false;
    };
    // SAFETY: c is a valid NUL-terminated string.
    unsafe { libc::access(c.as_ptr(), mode) == 0 }
}

impl Expr {
    /// Evaluates the expression; `resolve` maps node paths to host paths.
    pub fn eval(&self, resolve: &dyn Fn(&str) -> PathBuf) -> bool {
        use std::os::unix::fs::FileTypeExt;
        match self {
            Expr::Empty => false,
            Expr::Str(s) => !s.is_empty(),
            Expr::Not(e) => !e.eval(resolve),
            Expr::And(a, b) => a.eval(resolve) && b.eval(resolve),
            Expr::Or(a, b) => a.eval(resolve) || b.eval(resolve),
            Expr::Unary(op, arg) => {
                let path = || resolve(arg);
                let meta = || std::fs::metadata(path()).ok();
                match op {
                    UnaryOp::ZeroLen => arg.is_empty(),
                    UnaryOp::NonZeroLen => !arg.is_empty(),
                    UnaryOp::Exists => meta().is_some(),
                    UnaryOp::Regular => meta().is_some_and(|m| m.is_file()),
                    UnaryOp::Directory => meta().is_some_and(|m| m.is_dir()),
                    UnaryOp::NonEmpty => meta().is_some_and(|m| m.len() > 0),
                    UnaryOp::Symlink => {
                        std::fs::symlink_metadata(path()).is_ok_and(|m| m.file_type().is_symlink())
                    }
                    UnaryOp::Fifo => meta().is_some_and(|m| m.file_type().is_fifo()),
                    UnaryOp::Socket => meta().is_some_and(|m| m.file_type().is_socket()),
                    UnaryOp::Block => meta().is_some_and(|m| m.file_type().is_block_device()),
                    UnaryOp::Char => meta().is_some_and(|m| m.file_type().is_char_device()),
                    UnaryOp::Readable => access(&path(), libc::R_OK),
                    UnaryOp::Writable => access(&path(), libc::W_OK),
                    UnaryOp::Executable => access(&path(), libc::X_OK),
                }
            }
            Expr::Binary(a, op, b) => {
                let ints = || (parse_int(a).unwrap_or(0), parse_int(b).unwrap_or(0));
                let mtime = |s: &str| {
                    std::fs::metadata(resolve(s))
                        .and_then(|m| m.modified())
                        .ok()
                };
                match op {
                    BinaryOp::StrEq => a == b,
                    BinaryOp::StrNe => a != b,
                    BinaryOp::Eq => ints().0 == ints().1,
                    BinaryOp::Ne => ints().0 != ints().1,
                    BinaryOp::Lt => ints().0 < ints().1,
                    BinaryOp::Le => ints().0 <= ints().1,
                    BinaryOp::Gt => ints().0 > ints().1,
                    BinaryOp::Ge => ints().0 >= ints().1,
                    BinaryOp::NewerThan => match (mtime(a), mtime(b)) {
                        (Some(x), Some(y)) => x > y,
                        (Some(_), None) => true,
                        _ => false,
                    },
                    BinaryOp::OlderThan => match (mtime(a), mtime(b)) {
                        (Some(x), Some(y)) => x < y,
                        (None, Some(_)) => true,
                        _ => false,
                    },
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Empty => Ok(()),
            Expr::Str(s) => write!(f, "{s}"),
            Expr::Unary(op, a) => write!(f, "{op:?} {a}"),
            Expr::Binary(a, op, b) => write!(f, "{a} {op:?} {b}"),
            Expr::Not(e) => write!(f, "! ({e})"),
            Expr::And(a, b) => write!(f, "({a}) -a ({b})"),
            Expr::Or(a, b) => write!(f, "({a}) -o ({b})"),
        }
    }
}

/// Runs `test`/`[` semantics: exit 0 true, 1 false, 2 syntax error.
pub fn run_test(
    args: &[String],
    bracket: bool,
    resolve: &dyn Fn(&str) -> PathBuf,
) -> (i32, String) {
    let args = if bracket {
        match args.split_last() {
            Some((last, rest)) if last == "]" => rest,
            _ => return (2, "[: missing `]'\n".into()),
        }
    } else {
        args
    };
    match parse(args) {
        Ok(e) => (if e.eval(resolve) { 0 } else { 1 }, String::new()),
        Err(e) => (2, format!("{e}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn eval_in(dir: &Path, s: &str) -> Result<bool, TestSyntaxError> {
        let root = dir.to_path_buf();
        parse(&toks(s)).map(|e| e.eval(&|p: &str| root.join(p)))
    }

    #[test]
    fn file_primaries() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("f"), "x").unwrap();
        std::fs::write(d.path().join("empty"), "").unwrap();
        std::fs::create_dir(d.path().join("dir")).unwrap();
        let t = |s| eval_in(d.path(), s).unwrap();
        assert!(t("-f f"));
        assert!(!t("-f dir"));
        assert!(t("-d dir"));
        assert!(t("-e dir"));
        assert!(!t("-e nope"));
        assert!(t("-s f"));
        assert!(!t("-s empty"));
        assert!(t("-r f"));
        assert!(t("! -f nope"));
        assert!(t("-f f -a -d dir"));
        assert!(!t("-f f -a -d f"));
        assert!(t("-f nope -o -d dir"));
        assert!(t("( -f nope -o -f f ) -a -d dir"));
    }

    #[test]
    fn strings_and_integers() {
        let d = tempfile::tempdir().unwrap();
        let t = |s| eval_in(d.path(), s).unwrap();
        assert!(t("abc"));
        assert!(t("-z"), "a lone operator is a non-empty string");
        assert!(t("a = a"));
        assert!(t("a != b"));
        assert!(t("3 -lt 10"));
        assert!(!t("3 -gt 10"));
        assert!(t("-n x"));
        assert!(t("! = !"), "binary operator wins over negation");
        assert!(!parse(&[]).unwrap().eval(&|p: &str| PathBuf::from(p)));
    }

    #[test]
    fn syntax_errors() {
        let d = tempfile::tempdir().unwrap();
        for bad in ["-q file", "1 -lt x", "( -f a", "-f a b", "a -a"] {
            assert!(eval_in(d.path(), bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn bracket_form_and_exit_codes() {
        let r = |p: &str| PathBuf::from(p);
        assert_eq!(run_test(&toks("a = a ]"), true, &r).0, 0);
        assert_eq!(run_test(&toks("a = a"), true, &r).0, 2);
        assert_eq!(run_test(&toks("a = b"), false, &r).0, 1);
        assert_eq!(run_test(&toks("1 -eq z"), false, &r).0, 2);
    }

    #[test]
    fn single_string_expression_is_split() {
        assert_eq!(split_expression(&["-f myfile".into()]), toks("-f myfile"));
        assert_eq!(split_expression(&toks("-f x")), toks("-f x"));
        assert_eq!(
            split_expression(&["a = 'b c'".into()]),
            vec!["a", "=", "b c"]
        );
    }
}
