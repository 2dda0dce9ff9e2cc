//! Fenced code block extraction and classification for raw model output.
//!
//! A fence opens on a line that begins with three backquotes followed by an
//! optional tag, and closes on a line consisting of exactly three backquotes
//! (trailing whitespace tolerated). Anything else, including inline
//! backquotes, is prose.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const FENCE: &str = "```";
pub const DEFAULT_PAUSE_MARKER: &str = "[AWAIT_HUMAN]";

/// One model output as received for a given step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub step_index: u32,
}

/// A delimiter-fenced region of a response.
///
/// `span` is a byte range into the source text, always on `char` boundaries.
/// It covers the opening fence line through the closing fence line, including
/// the closing line's terminator when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FencedBlock {
    pub info_tag: String,
    pub body: String,
    pub span: Range<usize>,
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum BlockClass {
    ProgramCode { language: String },
    ShellCommand { shell: String },
    Unclassified { raw_tag: String },
}

impl BlockClass {
    pub fn is_actionable(&self) -> bool {
        !matches!(self, BlockClass::Unclassified { .. })
    }
}

/// What a recognized tag maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    Program,
    Shell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParserConfig {
    pub tags: BTreeMap<String, TagKind>,
    pub pause_marker: String,
}

impl Default for ParserConfig {
    fn default() -> Self {
        let mut tags = BTreeMap::new();
        tags.insert("python".to_string(), TagKind::Program);
        for shell in ["cmd", "bash", "powershell", "sh", "shell"] {
            tags.insert(shell.to_string(), TagKind::Shell);
        }
        Self {
            tags,
            pause_marker: DEFAULT_PAUSE_MARKER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub blocks: Vec<(FencedBlock, BlockClass)>,
    pub human_input_requested: bool,
    pub terminal: bool,
}

impl ParsedResponse {
    pub fn program_blocks(&self) -> impl Iterator<Item = (&FencedBlock, &str)> {
        self.blocks.iter().filter_map(|(b, c)| match c {
            BlockClass::ProgramCode { language } => Some((b, language.as_str())),
            _ => None,
        })
    }

    pub fn shell_blocks(&self) -> impl Iterator<Item = (&FencedBlock, &str)> {
        self.blocks.iter().filter_map(|(b, c)| match c {
            BlockClass::ShellCommand { shell } => Some((b, shell.as_str())),
            _ => None,
        })
    }

    pub fn has_program_code(&self) -> bool {
        self.program_blocks().next().is_some()
    }

    pub fn has_shell_commands(&self) -> bool {
        self.shell_blocks().next().is_some()
    }
}

/// Splits `text` into lines, keeping each line's terminator.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |line| {
        let start = offset;
        offset += line.len();
        (start, line)
    })
}

fn strip_terminator(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

/// Returns the info tag if `line` opens a fence.
fn opening_tag(line: &str) -> Option<String> {
    let rest = strip_terminator(line).strip_prefix(FENCE)?;
    if rest.contains('`') {
        return None;
    }
    let tag = rest.split_whitespace().next().unwrap_or("");
    Some(tag.to_lowercase())
}

fn is_closing(line: &str) -> bool {
    strip_terminator(line).trim_end() == FENCE
}

/// Extracts every well-formed fenced block in document order.
///
/// An opening fence that reaches end of input without a closing fence yields
/// nothing; its text stays in the gaps between returned spans.
pub fn extract_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    // (span start, body start, tag)
    let mut open: Option<(usize, usize, String)> = None;

    for (start, line) in lines_with_offsets(text) {
        let end = start + line.len();
        match open.take() {
            None => {
                if let Some(tag) = opening_tag(line) {
                    open = Some((start, end, tag));
                }
            }
            Some((span_start, body_start, tag)) => {
                if is_closing(line) {
                    blocks.push(FencedBlock {
                        info_tag: tag,
                        body: text[body_start..start].to_string(),
                        span: span_start..end,
                        ordinal: blocks.len(),
                    });
                } else {
                    open = Some((span_start, body_start, tag));
                }
            }
        }
    }
    blocks
}

pub fn classify(block: &FencedBlock, tags: &BTreeMap<String, TagKind>) -> BlockClass {
    let tag = block.info_tag.clone();
    match tags.get(&tag) {
        Some(TagKind::Program) => BlockClass::ProgramCode { language: tag },
        Some(TagKind::Shell) => BlockClass::ShellCommand { shell: tag },
        None => BlockClass::Unclassified { raw_tag: tag },
    }
}

fn is_comment(line: &str, shell: &str) -> bool {
    if shell == "cmd" {
        let upper = line.to_ascii_uppercase();
        upper == "REM" || upper.starts_with("REM ") || line.starts_with("::")
    } else {
        line.starts_with('#')
    }
}

/// Splits a shell block body into individual commands, one per line.
pub fn split_commands(block: &FencedBlock, shell: &str) -> Vec<String> {
    block
        .body
        .lines()
        .map(str::trim)
        .filter(|line| !line.is_empty() && !is_comment(line, shell))
        .map(str::to_string)
        .collect()
}

/// Text outside every block, as `(offset, slice)` gaps.
pub fn gaps<'a>(text: &'a str, blocks: &[FencedBlock]) -> Vec<(usize, &'a str)> {
    let mut out = Vec::with_capacity(blocks.len() + 1);
    let mut cursor = 0;
    for block in blocks {
        out.push((cursor, &text[cursor..block.span.start]));
        cursor = block.span.end;
    }
    out.push((cursor, &text[cursor..]));
    out
}

pub fn parse_response(text: &str, config: &ParserConfig) -> ParsedResponse {
    let blocks: Vec<_> = extract_blocks(text)
        .into_iter()
        .map(|b| {
            let class = classify(&b, &config.tags);
            (b, class)
        })
        .collect();

    let bare: Vec<FencedBlock> = blocks.iter().map(|(b, _)| b.clone()).collect();
    let marker = config.pause_marker.trim();
    let human_input_requested = !marker.is_empty()
        && gaps(text, &bare)
            .iter()
            .flat_map(|(_, gap)| gap.lines())
            .any(|line| line.trim() == marker);

    let terminal = !blocks.iter().any(|(_, c)| c.is_actionable());
    ParsedResponse {
        blocks,
        human_input_requested,
        terminal,
    }
}
