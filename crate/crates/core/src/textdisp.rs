//! Output formatting tools: `[host]` header blocks, the `ptspread` filter
//! and `ptdisp`, a terminal grid driven by `<host>: <command>` lines.
//!
//! The grid logic ([`GridState`], [`Display`], [`render_frame`]) is free of
//! terminal I/O; [`run_display`] only paints frames and forwards keys.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::mpsc;
use std::time::Duration;

use crossterm::style::Color;
use thiserror::Error;

/// A host's output block under a `[host]` line; the header is emitted even
/// when there are no lines.
pub fn format_headers(host: &str, lines: &[&str]) -> Vec<String> {
    let mut out = Vec::with_capacity(lines.len() + 1);
    out.push(format!("[{host}]"));
    out.extend(lines.iter().map(|l| l.to_string()));
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: output before any [host] header")]
pub struct SpreadError {
    pub line: usize,
}

fn header_host(line: &str) -> Option<&str> {
    line.strip_prefix('[')?.strip_suffix(']')
}

/// Streams headered input to `host:  line` form.
pub fn spread_stream(input: impl BufRead, mut out: impl Write) -> io::Result<()> {
    let mut host: Option<String> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if let Some(h) = header_host(&line) {
            host = Some(h.to_string());
            continue;
        }
        match &host {
            Some(h) => writeln!(out, "{h}:  {line}")?,
            None => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    SpreadError { line: i + 1 },
                ))
            }
        }
    }
    out.flush()
}

/// [`spread_stream`] over a string.
pub fn spread(input: &str) -> Result<String, SpreadError> {
    let mut out = Vec::new();
    spread_stream(input.as_bytes(), &mut out).map_err(|e| {
        e.into_inner()
            .and_then(|b| b.downcast::<SpreadError>().ok())
            .map(|b| *b)
            .unwrap_or(SpreadError { line: 0 })
    })?;
    Ok(String::from_utf8(out).expect("input was UTF-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Color { fg: String, bg: String },
    Percentage(f64),
    Text(String),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplayMsg {
    pub host: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegendEntry {
    pub label: String,
    pub fg: String,
    pub bg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legend {
    pub entries: Vec<LegendEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisplayLine {
    Msg(DisplayMsg),
    Legend(Legend),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("cannot parse `{line}`: {reason}")]
pub struct ParseError {
    pub line: String,
    pub reason: String,
}

const LEGEND_TAG: &str = "$LEGEND$:";

fn number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|n| n.is_finite())
}

/// Parses one line of the display protocol.
pub fn parse_display_line(line: &str) -> Result<DisplayLine, ParseError> {
    let fail = |reason: &str| ParseError {
        line: line.to_string(),
        reason: reason.to_string(),
    };
    let line_t = line.trim_end_matches(['\r', '\n']);
    if let Some(rest) = line_t.trim_start().strip_prefix(LEGEND_TAG) {
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if toks.is_empty() || !toks.len().is_multiple_of(3) {
            return Err(fail("legend needs label/fg/bg triples"));
        }
        let entries = toks
            .chunks(3)
            .map(|c| LegendEntry {
                label: c[0].into(),
                fg: c[1].into(),
                bg: c[2].into(),
            })
            .collect();
        return Ok(DisplayLine::Legend(Legend { entries }));
    }
    let Some((host, rest)) = line_t.split_once(':') else {
        return Err(fail("expected `<host>: <command>`"));
    };
    let host = host.trim();
    if host.is_empty() || host.contains(char::is_whitespace) {
        return Err(fail("bad host name"));
    }
    let rest = rest.trim_start();
    let (cmd, args) = match rest.find(char::is_whitespace) {
        Some(i) => (&rest[..i], rest[i..].trim_start()),
        None => (rest, ""),
    };
    let toks: Vec<&str> = args.split_whitespace().collect();
    let payload = match cmd {
        "color" => match toks.as_slice() {
            [fg, bg] => Payload::Color {
                fg: fg.to_string(),
                bg: bg.to_string(),
            },
            _ => return Err(fail("color takes a foreground and a background")),
        },
        "percentage" => match toks.as_slice() {
            [p] => Payload::Percentage(number(p).ok_or_else(|| fail("bad percentage"))?),
            _ => return Err(fail("percentage takes one number")),
        },
        "text" => Payload::Text(args.trim_end().to_string()),
        n => match (number(n), toks.is_empty()) {
            (Some(v), true) => Payload::Value(v),
            _ => return Err(fail("unknown command")),
        },
    };
    Ok(DisplayLine::Msg(DisplayMsg {
        host: host.to_string(),
        payload,
    }))
}

impl fmt::Display for DisplayLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DisplayLine::Legend(l) => {
                f.write_str(LEGEND_TAG)?;
                for e in &l.entries {
                    write!(f, " {} {} {}", e.label, e.fg, e.bg)?;
                }
                Ok(())
            }
            DisplayLine::Msg(m) => match &m.payload {
                Payload::Color { fg, bg } => write!(f, "{}: color {fg} {bg}", m.host),
                Payload::Percentage(p) => write!(f, "{}: percentage {p}", m.host),
                Payload::Text(s) => write!(f, "{}: text {s}", m.host),
                Payload::Value(v) => write!(f, "{}: {v}", m.host),
            },
        }
    }
}

/// Terminal color for a name (`black`, `red`, ..., `white`, `grey`).
pub fn color_by_name(name: &str) -> Option<Color> {
    Some(match name.to_ascii_lowercase().as_str() {
        "black" => Color::Black,
        "red" => Color::DarkRed,
        "green" => Color::DarkGreen,
        "yellow" => Color::DarkYellow,
        "blue" => Color::DarkBlue,
        "magenta" => Color::DarkMagenta,
        "cyan" => Color::DarkCyan,
        "white" => Color::White,
        "grey" | "gray" => Color::Grey,
        _ => return None,
    })
}

/// Background for a load-style percentage.
pub fn percentage_color(p: f64) -> Color {
    let p = p.clamp(0.0, 100.0);
    if p < 50.0 {
        Color::DarkGreen
    } else if p < 80.0 {
        Color::DarkYellow
    } else {
        Color::DarkRed
    }
}

/// Number text without a spurious `.0`.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Latest message per host, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridState {
    cells: Vec<(String, Payload)>,
    index: HashMap<String, usize>,
    pub title: String,
    pub legend: Option<Legend>,
}

impl GridState {
    pub fn new(title: impl Into<String>) -> Self {
        GridState {
            title: title.into(),
            ..Default::default()
        }
    }

    pub fn apply(&mut self, line: DisplayLine) {
        match line {
            DisplayLine::Legend(l) => self.legend = Some(l),
            DisplayLine::Msg(m) => match self.index.get(&m.host) {
                Some(&i) => self.cells[i].1 = m.payload,
                None => {
                    self.index.insert(m.host.clone(), self.cells.len());
                    self.cells.push((m.host, m.payload));
                }
            },
        }
    }

    /// Parses and applies a line; parse errors leave the state unchanged.
    pub fn feed(&mut self, line: &str) -> Result<(), ParseError> {
        self.apply(parse_display_line(line)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[(String, Payload)] {
        &self.cells
    }

    pub fn get(&self, host: &str) -> Option<&Payload> {
        self.index.get(host).map(|&i| &self.cells[i].1)
    }

    /// Near-square grid shape `(columns, rows)` for the current cell count.
    pub fn shape(&self) -> (usize, usize) {
        grid_shape(self.cells.len())
    }
}

pub fn grid_shape(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (cols, n.div_ceil(cols))
}

/// How one cell looks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellView {
    pub host: String,
    pub label: String,
    pub fg: Option<Color>,
    pub bg: Option<Color>,
}

pub fn cell_view(host: &str, payload: &Payload, color_mode: bool) -> CellView {
    let short = host.split('.').next().unwrap_or(host).to_string();
    let (label, fg, bg) = match payload {
        Payload::Color { fg, bg } => (short, color_by_name(fg), color_by_name(bg)),
        Payload::Percentage(p) => (
            format!("{}%", format_number(p.clamp(0.0, 100.0).round())),
            Some(Color::Black),
            Some(percentage_color(*p)),
        ),
        Payload::Text(s) => (s.clone(), None, None),
        Payload::Value(v) => (format_number(*v), None, None),
    };
    let (fg, bg) = if color_mode { (fg, bg) } else { (None, None) };
    CellView {
        host: host.to_string(),
        label,
        fg,
        bg,
    }
}

/// A positioned cell of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedCell {
    pub view: CellView,
    pub x: u16,
    pub y: u16,
    pub width: u16,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameBody {
    Grid {
        cols: usize,
        rows: usize,
        cells: Vec<PlacedCell>,
    },
    /// Fallback for terminals too small for the grid: one row per host.
    List { lines: Vec<String>, first: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: String,
    pub legend: Option<String>,
    pub body: FrameBody,
    pub status: String,
}

const MIN_CELL_WIDTH: usize = 6;
const CELL_HEIGHT: usize = 3;

/// Lays out a frame for a `width` x `height` terminal.
pub fn render_frame(
    state: &GridState,
    width: u16,
    height: u16,
    selected: Option<usize>,
    color_mode: bool,
    status: &str,
) -> Frame {
    let legend = state.legend.as_ref().map(|l| {
        l.entries
            .iter()
            .map(|e| format!("[{}: {} on {}]", e.label, e.fg, e.bg))
            .collect::<Vec<_>>()
            .join(" ")
    });
    let chrome = 2 + legend.is_some() as usize;
    let (cols, rows) = state.shape();
    let (w, h) = (width as usize, height as usize);
    let fits = cols == 0 || (w / cols >= MIN_CELL_WIDTH && rows * CELL_HEIGHT + chrome <= h);
    let body = if fits {
        let cell_w = w.checked_div(cols).unwrap_or(0);
        let top = 1 + legend.is_some() as usize;
        let cells = state
            .cells()
            .iter()
            .enumerate()
            .map(|(i, (host, p))| PlacedCell {
                view: cell_view(host, p, color_mode),
                x: ((i % cols) * cell_w) as u16,
                y: (top + (i / cols) * CELL_HEIGHT) as u16,
                width: cell_w.saturating_sub(1) as u16,
                selected: selected == Some(i),
            })
            .collect();
        FrameBody::Grid { cols, rows, cells }
    } else {
        let lines: Vec<String> = state
            .cells()
            .iter()
            .enumerate()
            .map(|(i, (host, p))| {
                let mark = if selected == Some(i) { '>' } else { ' ' };
                format!("{mark} {host}: {}", cell_view(host, p, false).label)
            })
            .collect();
        let room = h.saturating_sub(chrome).max(1);
        let sel = selected.unwrap_or(0);
        let first = sel
            .saturating_sub(room - 1)
            .min(lines.len().saturating_sub(room));
        FrameBody::List { lines, first }
    };
    Frame {
        header: format!("{} ({} hosts)", state.title, state.len()),
        legend,
        body,
        status: status.to_string(),
    }
}

/// Called with a hostname when a cell is activated.
pub type ActionHook = Box<dyn FnMut(&str) -> Result<(), String> + Send>;

/// Default action: opens a shell on the host through `PT_DISP_SHELL_CMD`
/// (`{host}` is replaced), `xterm -e ssh {host}` when unset.
pub fn default_hook(template: Option<String>) -> ActionHook {
    let template = template.unwrap_or_else(|| "xterm -e ssh {host}".to_string());
    Box::new(move |host: &str| {
        let quoted = shlex::try_quote(host).map_err(|e| e.to_string())?;
        let cmd = template.replace("{host}", &quoted);
        std::process::Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(std::process::Stdio::null())
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
            .map(|_| ())
            .map_err(|e| format!("cannot start shell for {host}: {e}"))
    })
}

/// Grid state plus selection, status line and the action hook.
pub struct Display {
    pub state: GridState,
    pub selected: Option<usize>,
    pub status: String,
    pub color_mode: bool,
    hook: ActionHook,
}

impl Display {
    pub fn new(title: &str, color_mode: bool, hook: ActionHook) -> Self {
        Display {
            state: GridState::new(title),
            selected: None,
            status: String::new(),
            color_mode,
            hook,
        }
    }

    /// Applies an input line; malformed lines only set the status.
    pub fn feed(&mut self, line: &str) {
        if line.trim().is_empty() {
            return;
        }
        if let Err(e) = self.state.feed(line) {
            self.status = e.to_string();
        }
    }

    pub fn select(&mut self, i: usize) {
        if i < self.state.len() {
            self.selected = Some(i);
            self.status = self.state.cells()[i].0.clone();
        }
    }

    /// Moves the selection by `(dx, dy)` cells in the grid.
    pub fn move_selection(&mut self, dx: isize, dy: isize) {
        let n = self.state.len();
        if n == 0 {
            return;
        }
        let (cols, _) = self.state.shape();
        let cur = self.selected.unwrap_or(0) as isize;
        let next = (cur + dx + dy * cols as isize).clamp(0, n as isize - 1);
        self.select(next as usize);
    }

    /// Runs the hook on the selected cell.
    pub fn activate(&mut self) {
        let Some(i) = self.selected else {
            return;
        };
        let host = self.state.cells()[i].0.clone();
        if let Err(e) = (self.hook)(&host) {
            self.status = e;
        }
    }

    /// Cell at terminal position `(x, y)` of `frame`, if any.
    pub fn hit(frame: &Frame, x: u16, y: u16) -> Option<usize> {
        match &frame.body {
            FrameBody::Grid { cells, .. } => cells.iter().position(|c| {
                x >= c.x && x < c.x + c.width.max(1) && y >= c.y && y < c.y + CELL_HEIGHT as u16
            }),
            FrameBody::List { lines, first } => {
                let top = 1 + frame.legend.is_some() as u16;
                let i = first + y.checked_sub(top)? as usize;
                (i < lines.len()).then_some(i)
            }
        }
    }

    pub fn frame(&self, width: u16, height: u16) -> Frame {
        render_frame(
            &self.state,
            width,
            height,
            self.selected,
            self.color_mode,
            &self.status,
        )
    }
}

fn paint(out: &mut impl Write, f: &Frame, width: u16) -> io::Result<()> {
    use crossterm::{cursor::MoveTo, queue, style::*, terminal::*};
    let fit = |s: &str, w: usize| -> String {
        let mut t: String = s.chars().take(w).collect();
        while t.chars().count() < w {
            t.push(' ');
        }
        t
    };
    queue!(out, Clear(ClearType::All), MoveTo(0, 0))?;
    queue!(
        out,
        SetAttribute(Attribute::Bold),
        Print(fit(&f.header, width as usize))
    )?;
    queue!(out, SetAttribute(Attribute::Reset))?;
    let mut bottom = 1u16;
    if let Some(l) = &f.legend {
        queue!(out, MoveTo(0, 1), Print(fit(l, width as usize)))?;
        bottom = 2;
    }
    match &f.body {
        FrameBody::Grid { cells, .. } => {
            for c in cells {
                let w = c.width as usize;
                if let Some(bg) = c.view.bg {
                    queue!(out, SetBackgroundColor(bg))?;
                }
                if let Some(fg) = c.view.fg {
                    queue!(out, SetForegroundColor(fg))?;
                }
                if c.selected {
                    queue!(out, SetAttribute(Attribute::Reverse))?;
                }
                let label = fit(&format!(" {}", c.view.label), w);
                let blank = fit("", w);
                for (dy, text) in [&blank, &label, &blank].iter().enumerate() {
                    queue!(out, MoveTo(c.x, c.y + dy as u16), Print(text))?;
                }
                queue!(out, ResetColor, SetAttribute(Attribute::Reset))?;
                bottom = bottom.max(c.y + CELL_HEIGHT as u16);
            }
        }
        FrameBody::List { lines, first } => {
            let (_, h) = size().unwrap_or((width, 24));
            let room = (h as usize).saturating_sub(bottom as usize + 1);
            for (k, l) in lines.iter().skip(*first).take(room).enumerate() {
                queue!(
                    out,
                    MoveTo(0, bottom + k as u16),
                    Print(fit(l, width as usize))
                )?;
            }
            bottom += room as u16;
        }
    }
    queue!(
        out,
        MoveTo(0, bottom),
        Print(fit(&f.status, width as usize))
    )?;
    out.flush()
}

/// Without a terminal: reads every line, then prints the final state of
/// each cell as a protocol line. Bad lines are reported on `err`.
pub fn run_headless(
    input: impl BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> io::Result<()> {
    let mut state = GridState::new("");
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Err(e) = state.feed(&line) {
            writeln!(err, "ptdisp: {e}")?;
        }
    }
    if let Some(l) = &state.legend {
        writeln!(out, "{}", DisplayLine::Legend(l.clone()))?;
    }
    for (host, p) in state.cells() {
        let msg = DisplayMsg {
            host: host.clone(),
            payload: p.clone(),
        };
        writeln!(out, "{}", DisplayLine::Msg(msg))?;
    }
    Ok(())
}

/// Reads protocol lines from `input` and shows them until the user quits
/// (`q`, Esc or Ctrl-C). Arrow keys move the selection, Enter or a mouse
/// click activates a cell. When stdout is not a terminal the final state is
/// printed as a list once the input ends.
pub fn run_display(
    input: impl BufRead + Send + 'static,
    title: &str,
    color_mode: bool,
    hook: ActionHook,
) -> io::Result<()> {
    use crossterm::event::{self, Event, KeyCode, KeyEventKind, KeyModifiers, MouseEventKind};
    use crossterm::{execute, terminal, tty::IsTty};

    let mut stdout = io::stdout();
    if !stdout.is_tty() {
        return run_headless(input, &mut stdout, &mut io::stderr());
    }
    let mut disp = Display::new(title, color_mode, hook);

    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in input.lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    terminal::enable_raw_mode()?;
    execute!(
        stdout,
        terminal::EnterAlternateScreen,
        crossterm::cursor::Hide,
        event::EnableMouseCapture
    )?;
    let result = (|| -> io::Result<()> {
        let mut dirty = true;
        loop {
            while let Ok(line) = rx.try_recv() {
                disp.feed(&line);
                dirty = true;
            }
            let (w, h) = terminal::size()?;
            let frame = disp.frame(w, h);
            if dirty {
                paint(&mut stdout, &frame, w)?;
                dirty = false;
            }
            if !event::poll(Duration::from_millis(100))? {
                continue;
            }
            dirty = true;
            match event::read()? {
                Event::Key(k) if k.kind != KeyEventKind::Release => match k.code {
                    KeyCode::Char('q') | KeyCode::Esc => return Ok(()),
                    KeyCode::Char('c') if k.modifiers.contains(KeyModifiers::CONTROL) => {
                        return Ok(())
                    }
                    KeyCode::Left => disp.move_selection(-1, 0),
                    KeyCode::Right => disp.move_selection(1, 0),
                    KeyCode::Up => disp.move_selection(0, -1),
                    KeyCode::Down => disp.move_selection(0, 1),
                    KeyCode::Enter | KeyCode::Char(' ') => disp.activate(),
                    _ => {}
                },
                Event::Mouse(m) => {
                    if let Some(i) = Display::hit(&frame, m.column, m.row) {
                        disp.select(i);
                        if matches!(m.kind, MouseEventKind::Down(_)) {
                            disp.activate();
                        }
                    }
                }
                _ => {}
            }
        }
    })();
    let _ = execute!(
        stdout,
        event::DisableMouseCapture,
        crossterm::cursor::Show,
        terminal::LeaveAlternateScreen
    );
    let _ = terminal::disable_raw_mode();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::{Arc, Mutex};

    const SESSION: &str =
        "[node1.domain.tld]\nmyfile1\n[node2.domain.tld]\n[node3.domain.tld]\nmyfile1\nmyfile2\n";

    #[test]
    fn headers() {
        assert_eq!(format_headers("node2", &[]), ["[node2]"]);
        assert_eq!(format_headers("n", &["a", "b"]), ["[n]", "a", "b"]);
        assert_eq!(format_headers("h", &[""]), ["[h]", ""]);
    }

    #[test]
    fn spread_session() {
        assert_eq!(
            spread(SESSION).unwrap(),
            "node1.domain.tld:  myfile1\nnode3.domain.tld:  myfile1\nnode3.domain.tld:  myfile2\n"
        );
        assert_eq!(spread("").unwrap(), "");
        assert_eq!(spread("[a]\n[b]\n").unwrap(), "");
        assert_eq!(spread("x\n[a]\n").unwrap_err(), SpreadError { line: 1 });
    }

    #[test]
    fn protocol_forms() {
        let m = |l: &str| match parse_display_line(l).unwrap() {
            DisplayLine::Msg(m) => m,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            m("node1.domain.tld: color black green").payload,
            Payload::Color {
                fg: "black".into(),
                bg: "green".into()
            }
        );
        assert_eq!(
            m("node2.domain.tld: color black red ").payload,
            Payload::Color {
                fg: "black".into(),
                bg: "red".into()
            }
        );
        assert_eq!(m("h: percentage 75").payload, Payload::Percentage(75.0));
        assert_eq!(m("h: 0").payload, Payload::Value(0.0));
        assert_eq!(
            m("h: text up 3 days").payload,
            Payload::Text("up 3 days".into())
        );
        assert_eq!(
            parse_display_line("$LEGEND$: Active black green Inactive black red").unwrap(),
            DisplayLine::Legend(Legend {
                entries: vec![
                    LegendEntry {
                        label: "Active".into(),
                        fg: "black".into(),
                        bg: "green".into()
                    },
                    LegendEntry {
                        label: "Inactive".into(),
                        fg: "black".into(),
                        bg: "red".into()
                    },
                ]
            })
        );
        for bad in [
            "",
            "no colon here",
            ": 5",
            "h: color black",
            "h: percentage high",
            "h: 1 2",
            "h: blink",
            "$LEGEND$: A black",
            "h: percentage nan",
        ] {
            assert!(parse_display_line(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn grid_grows_and_keeps_last_write() {
        let mut g = GridState::new("t");
        g.feed("a: color black green").unwrap();
        g.feed("b: color black red").unwrap();
        assert_eq!(g.shape(), (2, 1));
        g.feed("c: 3").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.shape(), (2, 2));
        g.feed("a: percentage 10").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.cells()[0], ("a".to_string(), Payload::Percentage(10.0)));
        assert!(g.feed("garbage").is_err());
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn frame_colors_and_ramp() {
        let mut g = GridState::new("t");
        g.feed("a: color black green").unwrap();
        g.feed("b: color black red").unwrap();
        let f = render_frame(&g, 80, 24, None, true, "");
        let FrameBody::Grid { cells, .. } = f.body else {
            panic!()
        };
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].view.bg, Some(Color::DarkGreen));
        assert_eq!(cells[1].view.bg, Some(Color::DarkRed));
        let mono = render_frame(&g, 80, 24, None, false, "");
        let FrameBody::Grid { cells, .. } = mono.body else {
            panic!()
        };
        assert_eq!(cells[0].view.bg, None);

        assert_eq!(percentage_color(49.9), Color::DarkGreen);
        assert_eq!(percentage_color(50.0), Color::DarkYellow);
        assert_eq!(percentage_color(79.9), Color::DarkYellow);
        assert_eq!(percentage_color(80.0), Color::DarkRed);
        assert_eq!(percentage_color(250.0), Color::DarkRed);
        assert_eq!(
            cell_view("h", &Payload::Percentage(140.0), true).label,
            "100%"
        );
        assert_eq!(cell_view("h", &Payload::Value(2.50), true).label, "2.5");
    }

    #[test]
    fn small_terminal_falls_back_to_list() {
        let mut g = GridState::new("t");
        for i in 0..40 {
            g.feed(&format!("host{i}: {i}")).unwrap();
        }
        let f = render_frame(&g, 20, 10, Some(30), true, "");
        let FrameBody::List { lines, first } = f.body else {
            panic!("expected list")
        };
        assert_eq!(lines.len(), 40);
        assert!(first <= 30 && 30 < first + 8);
        assert!(lines[30].starts_with("> host30"));
    }

    #[test]
    fn hook_runs_once_for_activated_cell() {
        let calls = Arc::new(Mutex::new(Vec::new()));
        let rec = Arc::clone(&calls);
        let mut d = Display::new(
            "t",
            true,
            Box::new(move |h: &str| {
                rec.lock().unwrap().push(h.to_string());
                Ok(())
            }),
        );
        d.feed("a: 1");
        d.feed("h: 2");
        d.select(1);
        assert_eq!(d.status, "h");
        d.activate();
        assert_eq!(*calls.lock().unwrap(), ["h"]);
    }

    #[test]
    fn hook_failure_lands_in_status() {
        let mut d = Display::new("t", false, Box::new(|_: &str| Err("nope".to_string())));
        d.feed("a: 1");
        d.feed("bad line");
        assert!(d.status.contains("bad line"));
        d.select(0);
        d.activate();
        assert_eq!(d.status, "nope");
        assert_eq!(d.state.len(), 1);
    }

    #[test]
    fn mouse_hits_cells() {
        let mut d = Display::new("t", false, Box::new(|_: &str| Ok(())));
        for l in ["a: 1", "b: 2", "c: 3", "d: 4"] {
            d.feed(l);
        }
        let f = d.frame(40, 20);
        assert_eq!(Display::hit(&f, 1, 1), Some(0));
        assert_eq!(Display::hit(&f, 21, 1), Some(1));
        assert_eq!(Display::hit(&f, 1, 4), Some(2));
        assert_eq!(Display::hit(&f, 1, 0), None);
    }

    fn arb_line() -> impl Strategy<Value = DisplayLine> {
        let host = "[a-z][a-z0-9.-]{0,12}";
        let word = "[a-z]{1,8}";
        prop_oneof![
            (host, word, word).prop_map(|(h, f, b)| DisplayLine::Msg(DisplayMsg {
                host: h,
                payload: Payload::Color { fg: f, bg: b }
            })),
            (host, -1e6f64..1e6).prop_map(|(h, p)| DisplayLine::Msg(DisplayMsg {
                host: h,
                payload: Payload::Percentage(p)
            })),
            (host, "[a-zA-Z0-9]([a-zA-Z0-9 ]{0,20}[a-zA-Z0-9])?").prop_map(|(h, t)| {
                DisplayLine::Msg(DisplayMsg {
                    host: h,
                    payload: Payload::Text(t),
                })
            }),
            (host, -1e9f64..1e9).prop_map(|(h, v)| DisplayLine::Msg(DisplayMsg {
                host: h,
                payload: Payload::Value(v)
            })),
            prop::collection::vec((word, word, word), 1..4).prop_map(|v| {
                DisplayLine::Legend(Legend {
                    entries: v
                        .into_iter()
                        .map(|(label, fg, bg)| LegendEntry { label, fg, bg })
                        .collect(),
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn spread_of_headers(host in "[a-z][a-z0-9.]{0,10}", lines in prop::collection::vec("[^\\[\\n\\r][^\\n\\r]{0,12}|", 0..8)) {
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let text: String = format_headers(&host, &refs).iter().map(|l| format!("{l}\n")).collect();
            let out = spread(&text).unwrap();
            let got: Vec<&str> = out.lines().collect();
            prop_assert_eq!(got.len(), lines.len());
            for (g, l) in got.iter().zip(&lines) {
                prop_assert_eq!(g.to_string(), format!("{host}:  {l}"));
            }
        }

        #[test]
        fn rendered_lines_reparse(line in arb_line()) {
            let text = line.to_string();
            prop_assert_eq!(parse_display_line(&text).unwrap(), line);
        }

        #[test]
        fn parser_is_total(s in "\\PC{0,40}") {
            let _ = parse_display_line(&s);
        }

        #[test]
        fn grid_is_last_write_wins(msgs in prop::collection::vec((0usize..5, 0f64..100.0), 0..40)) {
            let mut g = GridState::new("t");
            let mut order: Vec<usize> = Vec::new();
            let mut last = HashMap::new();
            for (h, v) in &msgs {
                g.feed(&format!("h{h}: {v}")).unwrap();
                if !order.contains(h) {
                    order.push(*h);
                }
                last.insert(*h, *v);
            }
            let expect: Vec<(String, Payload)> = order
                .iter()
                .map(|h| (format!("h{h}"), Payload::Value(last[h])))
                .collect();
            prop_assert_eq!(g.cells(), &expect[..]);
        }
    }
}
