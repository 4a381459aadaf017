//! The structured action space.
//!
//! An agent turn is free text containing a `Thought:` block followed by a
//! `Code:` block. The code block holds tool calls in a restricted call syntax:
//!
//! ```text
//! block     = statement { (NEWLINE | ";") statement } ;
//! statement = ident "(" [ arg { "," arg } [","] ] ")" | "#" comment ;
//! arg       = [ ident "=" ] literal ;
//! literal   = string | number | "True" | "False" | "true" | "false" | "None" ;
//! string    = '"' { char | escape } '"' | "'" { char | escape } "'" ;
//! escape    = "\\" ( '"' | "'" | "\\" | "n" | "t" | "r" ) ;
//! number    = [ "-" | "+" ] digits [ "." digits ] ;
//! ```
//!
//! Nothing is evaluated: only the seven negotiation tools have meaning.
//! A statement may span several lines while a parenthesis or string is open.
//!
//! The code block starts after `Code:` (on the same line or the next one). If
//! it opens with a ``` fence it runs to the closing fence; otherwise it runs to
//! the first blank line or the end of the text.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Money, Role};

pub const MAX_CALLS_PER_TURN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolCall {
    MakeOffer {
        price: Money,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        side_offer: Option<String>,
    },
    RespondToOffer {
        accept: bool,
    },
    SendMessage {
        content: String,
    },
    SearchPrice,
    QuitNegotiation,
    WaitForResponse,
    WaitForTimePeriod {
        duration_s: f64,
    },
}

impl ToolCall {
    pub fn name(&self) -> &'static str {
        match self {
            ToolCall::MakeOffer { .. } => "make_offer",
            ToolCall::RespondToOffer { .. } => "respond_to_offer",
            ToolCall::SendMessage { .. } => "send_message",
            ToolCall::SearchPrice => "search_price",
            ToolCall::QuitNegotiation => "quit_negotiation",
            ToolCall::WaitForResponse => "wait_for_response",
            ToolCall::WaitForTimePeriod { .. } => "wait_for_time_period",
        }
    }

    /// Ends the turn (and possibly the negotiation) once executed.
    pub fn ends_turn(&self) -> bool {
        matches!(self, ToolCall::WaitForResponse | ToolCall::QuitNegotiation | ToolCall::RespondToOffer { accept: true })
    }
}

/// A parsed call together with the identity the agent claimed for itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCall {
    pub call: ToolCall,
    /// Value of the `agent` keyword, if given. Checked against the acting role
    /// when the call is executed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    /// Byte offset of the statement within the raw output.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn at(position: usize, message: impl Into<String>) -> Self {
        Diagnostic { position: Some(position), message: message.into() }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Diagnostic { position: None, message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some(p) => write!(f, "at byte {p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurnOutput {
    pub thought: String,
    pub calls: Vec<ParsedCall>,
    pub raw: String,
    /// Non-fatal notes: ignored arguments, truncation, superseded offers.
    pub diagnostics: Vec<Diagnostic>,
}

impl AgentTurnOutput {
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.calls.iter().map(|c| &c.call)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ParseErrorKind {
    #[error("no Code block found")]
    NoCodeBlock,
    #[error("malformed call at byte {position}")]
    MalformedCall { position: usize },
    #[error("unknown tool {name:?} at byte {position}")]
    UnknownTool { name: String, position: usize },
    #[error("bad argument {arg:?} for {tool} at byte {position}")]
    BadArgument { tool: String, arg: String, position: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub diagnostics: Vec<Diagnostic>,
}

/// Per-message record of how well a raw agent output parsed and executed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    pub parseable: bool,
    pub executed_ok: u32,
    pub exec_attempted: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseReport {
    pub fn from_parse(result: &Result<AgentTurnOutput, ParseError>) -> Self {
        match result {
            Ok(out) => ParseReport { parseable: true, executed_ok: 0, exec_attempted: 0, diagnostics: out.diagnostics.clone() },
            Err(e) => {
                let mut diagnostics = vec![Diagnostic::general(e.kind.to_string())];
                diagnostics.extend(e.diagnostics.iter().cloned());
                ParseReport { parseable: false, executed_ok: 0, exec_attempted: 0, diagnostics }
            }
        }
    }

    /// A block executes successfully when it parsed and every attempted call ran.
    pub fn block_succeeded(&self) -> bool {
        self.parseable && self.executed_ok == self.exec_attempted
    }
}

// ---------------------------------------------------------------------------
// Block extraction

struct Blocks<'a> {
    thought: &'a str,
    code: &'a str,
    code_offset: usize,
}

pub(crate) fn find_marker(raw: &str, marker: &str, from: usize) -> Option<usize> {
    let mut search = from;
    while let Some(rel) = raw[search..].find(marker) {
        let at = search + rel;
        let line_start = raw[..at].rfind('\n').map_or(0, |i| i + 1);
        let prefix = &raw[line_start..at];
        if prefix.chars().all(|c| c.is_whitespace() || c == '*' || c == '#') {
            return Some(at);
        }
        search = at + marker.len();
    }
    None
}

fn extract_blocks(raw: &str) -> Option<Blocks<'_>> {
    let code_at = find_marker(raw, "Code:", 0)?;
    let thought = match find_marker(raw, "Thought:", 0) {
        Some(t) if t < code_at => raw[t + "Thought:".len()..code_at].trim(),
        _ => "",
    };
    let mut start = code_at + "Code:".len();
    // Markdown emphasis right after the marker (`**Code:**`).
    while raw[start..].starts_with('*') {
        start += 1;
    }
    let rest = &raw[start..];
    let trimmed = rest.trim_start();
    let lead = rest.len() - trimmed.len();
    if trimmed.starts_with("```") {
        let fence_at = start + lead;
        let body_start = raw[fence_at..].find('\n').map_or(raw.len(), |i| fence_at + i + 1);
        let body_end = raw[body_start..].find("```").map_or(raw.len(), |i| body_start + i);
        return Some(Blocks { thought, code: &raw[body_start..body_end], code_offset: body_start });
    }
    // Unfenced: skip blank lines after the marker, then run to the next blank
    // line.
    let mut body_start = start;
    for line in raw[start..].split_inclusive('\n') {
        if !line.trim().is_empty() || !line.ends_with('\n') {
            break;
        }
        body_start += line.len();
    }
    let mut end = raw.len();
    let mut pos = body_start;
    for line in raw[body_start..].split_inclusive('\n') {
        if line.trim().is_empty() {
            end = pos;
            break;
        }
        pos += line.len();
    }
    Some(Blocks { thought, code: &raw[body_start..end], code_offset: body_start })
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum Literal {
    Str(String),
    Num(String),
    Bool(bool),
    None,
}

impl Literal {
    fn describe(&self) -> &'static str {
        match self {
            Literal::Str(_) => "string",
            Literal::Num(_) => "number",
            Literal::Bool(_) => "boolean",
            Literal::None => "None",
        }
    }
}

#[derive(Debug)]
struct RawArg {
    name: Option<String>,
    value: Literal,
    position: usize,
}

#[derive(Debug)]
struct RawCall {
    name: String,
    args: Vec<RawArg>,
    position: usize,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn abs(&self) -> usize {
        self.base + self.pos
    }

    /// Skips spaces, and newlines too when inside parentheses.
    fn skip_ws(&mut self, newlines: bool) {
        while let Some(c) = self.peek() {
            if c == ' ' || c == '\t' || c == '\r' || (newlines && c == '\n') {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn ident(&mut self) -> Option<String> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                self.bump();
            } else {
                break;
            }
        }
        Some(self.src[start..self.pos].to_string())
    }

    fn string(&mut self, quote: char) -> Result<String, usize> {
        let start = self.abs();
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(start),
                Some(c) if c == quote => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some(c @ ('"' | '\'' | '\\')) => out.push(c),
                    Some(other) => {
                        out.push('\\');
                        out.push(other);
                    }
                    None => return Err(start),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn number(&mut self) -> Option<String> {
        let start = self.pos;
        if matches!(self.peek(), Some('-' | '+')) {
            self.bump();
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        let mut any = self.pos > digits_start;
        if self.peek() == Some('.') {
            self.bump();
            let frac_start = self.pos;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.bump();
            }
            any |= self.pos > frac_start;
        }
        if !any {
            self.pos = start;
            return None;
        }
        Some(self.src[start..self.pos].to_string())
    }

    fn literal(&mut self) -> Result<Literal, usize> {
        let at = self.abs();
        match self.peek() {
            Some(q @ ('"' | '\'')) => self.string(q).map(Literal::Str),
            Some(c) if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => self.number().map(Literal::Num).ok_or(at),
            _ => match self.ident().as_deref() {
                Some("True" | "true") => Ok(Literal::Bool(true)),
                Some("False" | "false") => Ok(Literal::Bool(false)),
                Some("None" | "null") => Ok(Literal::None),
                _ => Err(at),
            },
        }
    }

    /// Parses one call expression; the cursor must sit on its first character.
    fn call(&mut self) -> Result<RawCall, usize> {
        let position = self.abs();
        let name = self.ident().ok_or(position)?;
        self.skip_ws(false);
        if self.bump() != Some('(') {
            return Err(position);
        }
        let mut args = Vec::new();
        loop {
            self.skip_ws(true);
            if self.peek() == Some(')') {
                self.bump();
                break;
            }
            let arg_pos = self.abs();
            let save = self.pos;
            let mut arg_name = None;
            if let Some(id) = self.ident() {
                self.skip_ws(true);
                if self.peek() == Some('=') {
                    self.bump();
                    self.skip_ws(true);
                    arg_name = Some(id);
                } else {
                    self.pos = save;
                }
            }
            let value = self.literal()?;
            args.push(RawArg { name: arg_name, value, position: arg_pos });
            self.skip_ws(true);
            match self.bump() {
                Some(',') => continue,
                Some(')') => break,
                _ => return Err(self.abs().saturating_sub(1)),
            }
        }
        Ok(RawCall { name, args, position })
    }
}

fn lex_block(code: &str, base: usize) -> Result<Vec<RawCall>, usize> {
    let mut cur = Cursor { src: code, pos: 0, base };
    let mut calls = Vec::new();
    loop {
        cur.skip_ws(true);
        match cur.peek() {
            None => break,
            Some(';') => {
                cur.bump();
            }
            Some('#') => {
                while !matches!(cur.peek(), None | Some('\n')) {
                    cur.bump();
                }
            }
            Some(_) => {
                calls.push(cur.call()?);
                cur.skip_ws(false);
                match cur.peek() {
                    None | Some('\n' | ';' | '#') => {}
                    Some(_) => return Err(cur.abs()),
                }
            }
        }
    }
    Ok(calls)
}

// ---------------------------------------------------------------------------
// Semantic binding

/// Positional parameter order for each tool (`agent` is keyword-only).
fn tool_params(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "make_offer" => &["price", "side_offer"],
        "respond_to_offer" => &["response"],
        "send_message" => &["content"],
        "search_price" | "quit_negotiation" | "wait_for_response" => &[],
        "wait_for_time_period" => &["duration"],
        _ => return None,
    })
}

fn canonical_param<'a>(tool: &str, name: &'a str) -> &'a str {
    match (tool, name) {
        (_, "agent_name") => "agent",
        ("wait_for_time_period", "duration_s" | "seconds") => "duration",
        ("send_message", "message") => "content",
        ("respond_to_offer", "accept") => "response",
        _ => name,
    }
}

fn bind(raw: RawCall, diagnostics: &mut Vec<Diagnostic>) -> Result<ParsedCall, ParseErrorKind> {
    let tool = raw.name.rsplit('.').next().unwrap_or(&raw.name).to_string();
    let params = tool_params(&tool).ok_or_else(|| ParseErrorKind::UnknownTool { name: raw.name.clone(), position: raw.position })?;
    let mut agent = None;
    let mut bound: Vec<(&'static str, Literal, usize)> = Vec::new();
    let mut next_positional = 0;
    for arg in raw.args {
        let key: &str = match &arg.name {
            Some(n) => canonical_param(&tool, n),
            None => {
                let Some(p) = params.get(next_positional) else {
                    diagnostics.push(Diagnostic::at(arg.position, format!("{tool}: extra positional argument ignored")));
                    continue;
                };
                next_positional += 1;
                p
            }
        };
        if key == "agent" {
            match arg.value {
                Literal::Str(s) => agent = Some(s),
                other => {
                    return Err(ParseErrorKind::BadArgument { tool, arg: format!("agent ({})", other.describe()), position: arg.position })
                }
            }
            continue;
        }
        match params.iter().find(|p| **p == key) {
            Some(p) => {
                if let Some(existing) = bound.iter_mut().find(|(n, _, _)| n == p) {
                    diagnostics.push(Diagnostic::at(arg.position, format!("{tool}: duplicate argument {key}; last value wins")));
                    *existing = (p, arg.value, arg.position);
                } else {
                    bound.push((p, arg.value, arg.position));
                }
            }
            None => diagnostics.push(Diagnostic::at(arg.position, format!("{tool}: unknown argument {key:?} ignored"))),
        }
    }
    let take = |bound: &mut Vec<(&'static str, Literal, usize)>, name: &str| {
        bound.iter().position(|(n, _, _)| *n == name).map(|i| bound.remove(i))
    };
    let bad = |arg: &str, position: usize| ParseErrorKind::BadArgument { tool: tool.clone(), arg: arg.to_string(), position };
    let call = match tool.as_str() {
        "make_offer" => {
            let (_, value, pos) = take(&mut bound, "price").ok_or_else(|| bad("price", raw.position))?;
            let price = match value {
                Literal::Num(n) => n.parse::<Money>().map_err(|_| bad("price", pos))?,
                Literal::Str(s) => s.trim().trim_start_matches('$').replace(',', "").parse::<Money>().map_err(|_| bad("price", pos))?,
                _ => return Err(bad("price", pos)),
            };
            if !price.is_positive() {
                return Err(bad("price", pos));
            }
            let side_offer = match take(&mut bound, "side_offer") {
                None | Some((_, Literal::None, _)) => None,
                Some((_, Literal::Str(s), _)) => Some(s),
                Some((_, _, pos)) => return Err(bad("side_offer", pos)),
            };
            ToolCall::MakeOffer { price, side_offer }
        }
        "respond_to_offer" => match take(&mut bound, "response") {
            Some((_, Literal::Bool(b), _)) => ToolCall::RespondToOffer { accept: b },
            Some((_, Literal::Str(s), pos)) => match s.trim().to_ascii_lowercase().as_str() {
                "true" | "accept" | "yes" => ToolCall::RespondToOffer { accept: true },
                "false" | "reject" | "no" => ToolCall::RespondToOffer { accept: false },
                _ => return Err(bad("response", pos)),
            },
            Some((_, _, pos)) => return Err(bad("response", pos)),
            None => return Err(bad("response", raw.position)),
        },
        "send_message" => match take(&mut bound, "content") {
            Some((_, Literal::Str(s), _)) => ToolCall::SendMessage { content: s },
            Some((_, _, pos)) => return Err(bad("content", pos)),
            None => return Err(bad("content", raw.position)),
        },
        "search_price" => ToolCall::SearchPrice,
        "quit_negotiation" => ToolCall::QuitNegotiation,
        "wait_for_response" => ToolCall::WaitForResponse,
        "wait_for_time_period" => match take(&mut bound, "duration") {
            Some((_, Literal::Num(n), pos)) => {
                let d: f64 = n.parse().map_err(|_| bad("duration", pos))?;
                if !d.is_finite() || d < 0.0 {
                    return Err(bad("duration", pos));
                }
                ToolCall::WaitForTimePeriod { duration_s: d }
            }
            Some((_, _, pos)) => return Err(bad("duration", pos)),
            None => return Err(bad("duration", raw.position)),
        },
        _ => unreachable!("tool_params covers every tool"),
    };
    Ok(ParsedCall { call, agent, position: raw.position })
}

/// Parses one raw agent output into its thought and tool calls.
///
/// Only the first `Code:` block is read. More than three calls are truncated
/// to three, and anything after `wait_for_response` is dropped, both with a
/// diagnostic.
pub fn parse_turn(raw: &str) -> Result<AgentTurnOutput, ParseError> {
    let mut diagnostics = Vec::new();
    let Some(blocks) = extract_blocks(raw) else {
        return Err(ParseError { kind: ParseErrorKind::NoCodeBlock, diagnostics });
    };
    let raw_calls = lex_block(blocks.code, blocks.code_offset)
        .map_err(|position| ParseError { kind: ParseErrorKind::MalformedCall { position }, diagnostics: Vec::new() })?;
    if raw_calls.is_empty() {
        diagnostics.push(Diagnostic::general("Code block contains no tool calls"));
        return Err(ParseError { kind: ParseErrorKind::NoCodeBlock, diagnostics });
    }
    let mut calls = Vec::with_capacity(raw_calls.len());
    for rc in raw_calls {
        match bind(rc, &mut diagnostics) {
            Ok(c) => calls.push(c),
            Err(kind) => return Err(ParseError { kind, diagnostics }),
        }
    }
    if let Some(i) = calls.iter().position(|c| c.call == ToolCall::WaitForResponse) {
        if i + 1 < calls.len() {
            diagnostics.push(Diagnostic::at(calls[i + 1].position, "calls after wait_for_response dropped"));
            calls.truncate(i + 1);
        }
    }
    if calls.len() > MAX_CALLS_PER_TURN {
        diagnostics.push(Diagnostic::at(
            calls[MAX_CALLS_PER_TURN].position,
            format!("{} tool calls given; only the first {MAX_CALLS_PER_TURN} are executed", calls.len()),
        ));
        calls.truncate(MAX_CALLS_PER_TURN);
    }
    let offers = calls.iter().filter(|c| matches!(c.call, ToolCall::MakeOffer { .. })).count();
    if offers > 1 {
        diagnostics.push(Diagnostic::general("several make_offer calls in one turn; the last one stands"));
    }
    Ok(AgentTurnOutput { thought: blocks.thought.to_string(), calls, raw: raw.to_string(), diagnostics })
}

// ---------------------------------------------------------------------------
// Serialization

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders a call in canonical syntax, with the caller's role as `agent`.
pub fn serialize(call: &ToolCall, agent: Role) -> String {
    let who = quote(agent.as_str());
    match call {
        ToolCall::MakeOffer { price, side_offer: None } => format!("make_offer(agent={who}, price={price})"),
        ToolCall::MakeOffer { price, side_offer: Some(side) } => {
            format!("make_offer(agent={who}, price={price}, side_offer={})", quote(side))
        }
        ToolCall::RespondToOffer { accept } => {
            format!("respond_to_offer(agent={who}, response={})", if *accept { "True" } else { "False" })
        }
        ToolCall::SendMessage { content } => format!("send_message(agent={who}, content={})", quote(content)),
        ToolCall::SearchPrice => format!("search_price(agent={who})"),
        ToolCall::QuitNegotiation => format!("quit_negotiation(agent={who})"),
        ToolCall::WaitForResponse => format!("wait_for_response(agent={who})"),
        ToolCall::WaitForTimePeriod { duration_s } => format!("wait_for_time_period(agent={who}, duration={duration_s})"),
    }
}

/// Renders a complete turn in the `Thought:` / `Code:` format.
pub fn render_turn(thought: &str, calls: &[ToolCall], agent: Role) -> String {
    let mut out = String::new();
    out.push_str("Thought: ");
    out.push_str(thought.trim());
    out.push_str("\nCode:\n");
    for c in calls {
        out.push_str(&serialize(c, agent));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn calls(raw: &str) -> Vec<ToolCall> {
        parse_turn(raw).unwrap().calls.into_iter().map(|c| c.call).collect()
    }

    #[test]
    fn parses_opening_offer() {
        let raw = "Thought: anchor high\nCode: make_offer(agent=\"seller\", price=1400)\nwait_for_response(agent=\"seller\")";
        let out = parse_turn(raw).unwrap();
        assert_eq!(out.thought, "anchor high");
        assert_eq!(
            out.tool_calls().cloned().collect::<Vec<_>>(),
            vec![ToolCall::MakeOffer { price: Money::from_dollars(1400), side_offer: None }, ToolCall::WaitForResponse]
        );
        assert_eq!(out.calls[0].agent.as_deref(), Some("seller"));
        assert_eq!(out.calls[0].position, raw.find("make_offer").unwrap());
        assert_eq!(out.raw, raw);
    }

    #[test]
    fn parses_acceptance_without_thought() {
        let out = parse_turn("Code: respond_to_offer(agent=\"seller\", response=True)").unwrap();
        assert_eq!(out.thought, "");
        assert_eq!(out.tool_calls().cloned().collect::<Vec<_>>(), vec![ToolCall::RespondToOffer { accept: true }]);
    }

    #[test]
    fn missing_code_block() {
        let err = parse_turn("hello there").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::NoCodeBlock);
        let err = parse_turn("Thought: hmm\nCode:\n\n").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::NoCodeBlock);
        // "Code:" inside prose is not a block marker.
        let err = parse_turn("my Code: make_offer(price=3)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::NoCodeBlock);
    }

    #[test]
    fn positional_arguments_follow_the_transcript_style() {
        assert_eq!(
            calls("Code:\nsend_message(\"Your price is too high for a used laptop\")\nmake_offer(950)"),
            vec![
                ToolCall::SendMessage { content: "Your price is too high for a used laptop".into() },
                ToolCall::MakeOffer { price: Money::from_dollars(950), side_offer: None },
            ]
        );
        assert_eq!(calls("Code: quit_negotiation()"), vec![ToolCall::QuitNegotiation]);
    }

    #[test]
    fn fenced_blocks_and_think_spans() {
        let raw = "<think>they want 1000</think>\nThought: counter\nCode:\n```py\nmake_offer(agent='buyer', price=1,)\nwait_for_response()\n```<end_code>\nmake_offer(price=5)";
        // A trailing comma after the last argument is allowed but `1,` with a
        // following `)` is just price=1.
        assert_eq!(calls(raw), vec![ToolCall::MakeOffer { price: Money::from_dollars(1), side_offer: None }, ToolCall::WaitForResponse]);
    }

    #[test]
    fn error_kinds() {
        let e = parse_turn("Code: make_offer(price=)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::MalformedCall { .. }));
        let e = parse_turn("Code: make_offer(price=10").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::MalformedCall { .. }));
        let e = parse_turn("Code: x = make_offer(price=10)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::MalformedCall { .. }));
        let e = parse_turn("Code: buy_now(price=10)").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownTool { name: "buy_now".into(), position: 6 });
        let e = parse_turn("Code: make_offer(price=0)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadArgument { ref arg, .. } if arg == "price"));
        let e = parse_turn("Code: make_offer(price=-5)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadArgument { .. }));
        let e = parse_turn("Code: respond_to_offer(response=3)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadArgument { ref arg, .. } if arg == "response"));
        let e = parse_turn("Code: wait_for_time_period(duration=-1)").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadArgument { .. }));
        let e = parse_turn("Code: send_message()").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadArgument { .. }));
    }

    #[test]
    fn unknown_keywords_are_ignored_with_a_note() {
        let out = parse_turn("Code: make_offer(price=10, urgency=\"high\")").unwrap();
        assert_eq!(out.calls.len(), 1);
        assert!(out.diagnostics.iter().any(|d| d.message.contains("urgency")));
    }

    #[test]
    fn truncates_to_three_calls_and_at_wait() {
        let raw = "Code:\nsend_message(\"a\")\nsend_message(\"b\")\nsend_message(\"c\")\nsend_message(\"d\")";
        let out = parse_turn(raw).unwrap();
        assert_eq!(out.calls.len(), 3);
        assert!(out.diagnostics.iter().any(|d| d.message.contains("first 3")));

        let out = parse_turn("Code: wait_for_response(); make_offer(price=3)").unwrap();
        assert_eq!(out.tool_calls().cloned().collect::<Vec<_>>(), vec![ToolCall::WaitForResponse]);
    }

    #[test]
    fn double_offer_is_flagged() {
        let out = parse_turn("Code: make_offer(price=3)\nmake_offer(price=4)").unwrap();
        assert_eq!(out.calls.len(), 2);
        assert!(out.diagnostics.iter().any(|d| d.message.contains("last one stands")));
    }

    #[test]
    fn canonical_serialization() {
        let offer = ToolCall::MakeOffer { price: Money::from_dollars(1050), side_offer: None };
        assert_eq!(serialize(&offer, Role::Buyer), "make_offer(agent=\"buyer\", price=1050.00)");
        assert_eq!(serialize(&ToolCall::QuitNegotiation, Role::Buyer), "quit_negotiation(agent=\"buyer\")");
        assert_eq!(
            serialize(&ToolCall::SendMessage { content: String::new() }, Role::Buyer),
            "send_message(agent=\"buyer\", content=\"\")"
        );
        assert_eq!(
            serialize(&ToolCall::WaitForTimePeriod { duration_s: 30.0 }, Role::Seller),
            "wait_for_time_period(agent=\"seller\", duration=30)"
        );
    }

    #[test]
    fn multi_line_statement() {
        let out = calls("Code: send_message(\n  agent=\"buyer\",\n  content=\"line one\\nline two\"\n)\nwait_for_response()");
        assert_eq!(out[0], ToolCall::SendMessage { content: "line one\nline two".into() });
        assert_eq!(out.len(), 2);
    }

    pub(crate) fn arb_call() -> impl Strategy<Value = ToolCall> {
        prop_oneof![
            (1i64..100_000_000, proptest::option::of(".*"))
                .prop_map(|(c, side)| ToolCall::MakeOffer { price: Money::from_cents(c), side_offer: side }),
            any::<bool>().prop_map(|accept| ToolCall::RespondToOffer { accept }),
            ".*".prop_map(|content| ToolCall::SendMessage { content }),
            Just(ToolCall::SearchPrice),
            Just(ToolCall::QuitNegotiation),
            Just(ToolCall::WaitForResponse),
            (0u32..1_000_000, 0u32..1000).prop_map(|(w, f)| ToolCall::WaitForTimePeriod { duration_s: w as f64 + f as f64 / 1000.0 }),
        ]
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(call in arb_call(), buyer in any::<bool>()) {
            let role = if buyer { Role::Buyer } else { Role::Seller };
            let raw = format!("Code: {}", serialize(&call, role));
            let out = parse_turn(&raw).unwrap();
            prop_assert_eq!(out.calls.len(), 1);
            prop_assert_eq!(&out.calls[0].call, &call);
            prop_assert_eq!(out.calls[0].agent.as_deref(), Some(role.as_str()));
        }

        #[test]
        fn parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_turn(&text);
            let _ = parse_turn(&format!("Code: {text}"));
            let _ = parse_turn(&format!("Thought: x\nCode:\n```\n{text}"));
        }

        #[test]
        fn trailing_garbage_keeps_parsed_calls(
            calls in proptest::collection::vec(arb_call(), 1..=3),
            garbage in ".*",
        ) {
            let body = render_turn("plan", &calls, Role::Seller);
            let clean = parse_turn(&body).unwrap();
            let noisy = parse_turn(&format!("{body}\n\n{garbage}")).unwrap();
            prop_assert_eq!(clean.calls, noisy.calls);
        }
    }
}
