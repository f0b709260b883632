//! Minimal lexical scanning shared by the rule-based estimators and the
//! prompt-pattern detectors: blanking out string literals and comments while
//! preserving line structure and word boundaries.

use crate::corpus::Language;

pub(crate) struct Stripped {
    /// The code with strings and comments replaced by spaces.
    pub code: String,
    /// Whether any comment (line, block, or docstring-style) was present.
    pub has_comment: bool,
}

/// Replace string literals and comments with spaces so later keyword or
/// identifier scans cannot match inside them.
pub(crate) fn strip_code(code: &str, language: &Language) -> Stripped {
    let python = matches!(language, Language::Python);
    let chars: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut has_comment = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        let line_comment =
            (python && c == '#') || (!python && c == '/' && next == Some('/'));
        if line_comment {
            has_comment = true;
            while i < chars.len() && chars[i] != '\n' {
                out.push(' ');
                i += 1;
            }
        } else if !python && c == '/' && next == Some('*') {
            has_comment = true;
            out.push_str("  ");
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                out.push(if chars[i] == '\n' { '\n' } else { ' ' });
                i += 1;
            }
            if i < chars.len() {
                out.push_str("  ");
                i += 2;
            }
        } else if c == '"' || c == '\'' {
            let triple = python && chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
            if triple {
                // Triple-quoted strings double as docstrings.
                has_comment = true;
            }
            let quote = c;
            let quote_len = if triple { 3 } else { 1 };
            for _ in 0..quote_len {
                out.push(' ');
            }
            i += quote_len;
            loop {
                if i >= chars.len() {
                    break;
                }
                if chars[i] == '\\' && i + 1 < chars.len() {
                    out.push_str("  ");
                    i += 2;
                    continue;
                }
                let closes = if triple {
                    chars[i] == quote
                        && chars.get(i + 1) == Some(&quote)
                        && chars.get(i + 2) == Some(&quote)
                } else {
                    chars[i] == quote || (!python && chars[i] == '\n')
                };
                if closes {
                    for _ in 0..quote_len {
                        out.push(' ');
                    }
                    i += quote_len;
                    break;
                }
                out.push(if chars[i] == '\n' { '\n' } else { ' ' });
                i += 1;
            }
        } else {
            out.push(c);
            i += 1;
        }
    }
    Stripped {
        code: out,
        has_comment,
    }
}
