//! Byte-level scanning for balanced JSON spans inside arbitrary text.
//!
//! The scanner only tracks brackets and double-quoted strings; it does not
//! validate the grammar. Callers hand the resulting span to `serde_json`.

use std::ops::Range;

/// Result of scanning forward from an opening bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanScan {
    /// Balanced span ending (exclusive) at the given byte offset.
    Closed(usize),
    /// Text ended while brackets or a string were still open.
    Unclosed,
    /// A closing bracket of the wrong kind at the given offset.
    Mismatch(usize),
}

/// Scan from `start`, which must point at `{` or `[`.
pub fn scan_from(bytes: &[u8], start: usize) -> SpanScan {
    debug_assert!(matches!(bytes[start], b'{' | b'['));
    let mut stack: Vec<u8> = Vec::with_capacity(8);
    let mut in_string = false;
    let mut escaped = false;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
        } else {
            match b {
                b'"' => in_string = true,
                b'{' => stack.push(b'}'),
                b'[' => stack.push(b']'),
                b'}' | b']' => {
                    if stack.pop() != Some(b) {
                        return SpanScan::Mismatch(i);
                    }
                    if stack.is_empty() {
                        return SpanScan::Closed(i + 1);
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    SpanScan::Unclosed
}

/// Outcome of locating the outermost JSON value in free text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Located {
    /// The longest balanced span (earliest wins on equal length).
    Found(Range<usize>),
    /// An opener before any balanced candidate never closes: the value was
    /// truncated. Carries the opener offset.
    Truncated(usize),
    /// No opening bracket at all.
    NotFound,
}

/// Find the longest balanced `{..}` / `[..]` span in `text`.
///
/// Starts nested inside an already found span are skipped. If an opener that
/// precedes the chosen span runs to end-of-text unclosed, the outermost value
/// is considered truncated.
pub fn locate_outermost(text: &str) -> Located {
    let bytes = text.as_bytes();
    let mut best: Option<Range<usize>> = None;
    let mut first_unclosed: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        if matches!(bytes[i], b'{' | b'[') {
            match scan_from(bytes, i) {
                SpanScan::Closed(end) => {
                    let better = match &best {
                        Some(b) => end - i > b.len(),
                        None => true,
                    };
                    if better {
                        best = Some(i..end);
                    }
                    i = end;
                    continue;
                }
                SpanScan::Unclosed => {
                    if first_unclosed.is_none() {
                        first_unclosed = Some(i);
                    }
                }
                SpanScan::Mismatch(_) => {}
            }
        }
        i += 1;
    }
    match (best, first_unclosed) {
        (Some(span), Some(open)) if open < span.start => Located::Truncated(open),
        (Some(span), _) => Located::Found(span),
        (None, Some(open)) => Located::Truncated(open),
        (None, None) => Located::NotFound,
    }
}

/// Byte ranges of the top-level elements of a JSON array document.
///
/// Returns `None` when `text` is not (after leading whitespace) an array whose
/// elements can be delimited; callers fall back to whole-document parsing for
/// error reporting.
pub fn array_element_spans(text: &str) -> Option<Vec<Range<usize>>> {
    let bytes = text.as_bytes();
    let open = bytes.iter().position(|b| !b.is_ascii_whitespace())?;
    if bytes[open] != b'[' {
        return None;
    }
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut elem_start: Option<usize> = None;
    for (i, &b) in bytes.iter().enumerate().skip(open + 1) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                elem_start.get_or_insert(i);
            }
            b'{' | b'[' => {
                depth += 1;
                elem_start.get_or_insert(i);
            }
            b'}' | b']' if depth > 0 => depth -= 1,
            b']' => {
                if let Some(s) = elem_start.take() {
                    spans.push(s..trim_end(bytes, s, i));
                }
                return Some(spans);
            }
            b',' if depth == 0 => {
                let s = elem_start.take()?;
                spans.push(s..trim_end(bytes, s, i));
            }
            c if !c.is_ascii_whitespace() => {
                elem_start.get_or_insert(i);
            }
            _ => {}
        }
    }
    None
}

fn trim_end(bytes: &[u8], start: usize, mut end: usize) -> usize {
    while end > start && bytes[end - 1].is_ascii_whitespace() {
        end -= 1;
    }
    end
}

/// 1-based line number of a byte offset.
pub fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}

/// Convert a serde_json (line, column) error position into a byte offset.
pub fn offset_of(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (n, l) in text.split_inclusive('\n').enumerate() {
        if n + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}
