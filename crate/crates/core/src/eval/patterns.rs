//! Heuristic detectors for the four prompt patterns associated with
//! low-return completions: meaningless names, vague intention, unopen
//! context, and self-unexplainable context.
//!
//! These are lexical proxies for human judgment, versioned through
//! [`PatternConfig`]: thresholds and the builtin-identifier list are knobs,
//! not truths.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Language, PromptPair};
use crate::textscan::strip_code;

pub const PATTERN_NAMES: [&str; 4] = [
    "meaningless_names",
    "vague_intention",
    "unopen_context",
    "self_unexplainable_context",
];

/// One bit per pattern; `true` means the prompt follows it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternFeatures {
    pub meaningless_names: bool,
    pub vague_intention: bool,
    pub unopen_context: bool,
    pub self_unexplainable_context: bool,
}

impl PatternFeatures {
    pub fn from_bits(bits: [bool; 4]) -> Self {
        PatternFeatures {
            meaningless_names: bits[0],
            vague_intention: bits[1],
            unopen_context: bits[2],
            self_unexplainable_context: bits[3],
        }
    }

    pub fn bit(&self, index: usize) -> bool {
        match index {
            0 => self.meaningless_names,
            1 => self.vague_intention,
            2 => self.unopen_context,
            3 => self.self_unexplainable_context,
            _ => panic!("pattern index out of range"),
        }
    }

    pub fn as_f64(&self) -> [f64; 4] {
        [
            self.meaningless_names as u8 as f64,
            self.vague_intention as u8 as f64,
            self.unopen_context as u8 as f64,
            self.self_unexplainable_context as u8 as f64,
        ]
    }
}

/// Knobs of the pattern heuristics, versioned alongside results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub version: u32,
    /// An identifier set whose median length is at or below this is
    /// "meaningless".
    pub meaningless_median_len: usize,
    /// An identifier at least this long signals intention on its own.
    pub meaningful_min_len: usize,
    /// Identifiers assumed known to any completion model.
    pub builtins: HashSet<String>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        let builtins = [
            // Shared library vocabulary across the supported languages.
            "String", "System", "out", "println", "print", "Math", "Integer", "Object",
            "Exception", "List", "ArrayList", "Map", "HashMap", "Set", "HashSet", "Arrays",
            "StringBuilder", "len", "range", "str", "int", "float", "list", "dict", "set",
            "tuple", "bool", "type", "super", "self", "this", "append", "get", "put", "add",
            "size", "length", "equals", "toString", "main", "args",
        ]
        .into_iter()
        .map(str::to_string)
        .collect();
        PatternConfig {
            version: 1,
            meaningless_median_len: 2,
            meaningful_min_len: 8,
            builtins,
        }
    }
}

fn keywords(language: &Language) -> &'static [&'static str] {
    match language {
        Language::Python => &[
            "def", "class", "if", "elif", "else", "for", "while", "return", "import", "from",
            "as", "with", "try", "except", "finally", "lambda", "pass", "break", "continue",
            "global", "nonlocal", "yield", "assert", "del", "raise", "in", "is", "not", "and",
            "or", "True", "False", "None",
        ],
        _ => &[
            "public", "private", "protected", "static", "final", "void", "int", "long", "short",
            "byte", "char", "boolean", "double", "float", "if", "else", "for", "while", "do",
            "switch", "case", "break", "continue", "return", "new", "try", "catch", "finally",
            "throw", "throws", "class", "interface", "enum", "extends", "implements", "import",
            "package", "this", "super", "null", "true", "false", "var", "abstract", "default",
            "instanceof", "synchronized",
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok<'a> {
    Ident(&'a str),
    Sym(char),
}

fn tokenize(code: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let bytes = code.as_bytes();
    let is_ident_start = |c: u8| c.is_ascii_alphabetic() || c == b'_';
    let is_ident = |c: u8| c.is_ascii_alphanumeric() || c == b'_';
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if is_ident_start(c) {
            let start = i;
            while i < bytes.len() && is_ident(bytes[i]) {
                i += 1;
            }
            out.push(Tok::Ident(&code[start..i]));
        } else {
            if !c.is_ascii_whitespace() && c.is_ascii() {
                out.push(Tok::Sym(c as char));
            }
            i += 1;
        }
    }
    out
}

/// Identifiers that look defined in the prompt: they follow a declaration
/// keyword or another identifier (type-then-name), or immediately precede a
/// plain `=`.
fn definition_sites<'a>(tokens: &[Tok<'a>], language: &Language) -> HashSet<&'a str> {
    let kw: HashSet<&str> = keywords(language).iter().copied().collect();
    let declares: HashSet<&str> = match language {
        Language::Python => ["def", "class", "as"].into_iter().collect(),
        _ => [
            "int", "long", "short", "byte", "char", "boolean", "double", "float", "void", "var",
            "class", "interface", "enum",
        ]
        .into_iter()
        .collect(),
    };
    let mut defined = HashSet::new();
    for (i, tok) in tokens.iter().enumerate() {
        let Tok::Ident(name) = tok else { continue };
        if kw.contains(name) {
            continue;
        }
        let prev = if i > 0 { Some(&tokens[i - 1]) } else { None };
        let next = tokens.get(i + 1);
        let after_next = tokens.get(i + 2);
        let declared_by_prev = match prev {
            Some(Tok::Ident(p)) => declares.contains(p) || !kw.contains(p),
            _ => false,
        };
        let assigned = matches!(next, Some(Tok::Sym('=')))
            && !matches!(after_next, Some(Tok::Sym('=')));
        if declared_by_prev || assigned {
            defined.insert(*name);
        }
    }
    defined
}

/// Evaluate all four pattern bits for one prompt.
pub fn extract_pattern_features(pair: &PromptPair, config: &PatternConfig) -> PatternFeatures {
    let stripped = strip_code(&pair.prompt, &pair.language);
    let tokens = tokenize(&stripped.code);
    let kw: HashSet<&str> = keywords(&pair.language).iter().copied().collect();

    let idents: Vec<&str> = tokens
        .iter()
        .filter_map(|t| match t {
            Tok::Ident(name) if !kw.contains(name) => Some(*name),
            _ => None,
        })
        .collect();
    if idents.is_empty() {
        // Degenerate prompt: no identifiers to judge anything by.
        return PatternFeatures::default();
    }
    let distinct: HashSet<&str> = idents.iter().copied().collect();
    let introduced: Vec<&str> = distinct
        .iter()
        .copied()
        .filter(|name| !config.builtins.contains(*name))
        .collect();

    // Median length of the prompt's own identifiers.
    let meaningless_names = if introduced.is_empty() {
        false
    } else {
        let mut lens: Vec<usize> = introduced.iter().map(|n| n.chars().count()).collect();
        lens.sort_unstable();
        let median = if lens.len() % 2 == 1 {
            lens[lens.len() / 2] as f64
        } else {
            (lens[lens.len() / 2 - 1] + lens[lens.len() / 2]) as f64 / 2.0
        };
        median <= config.meaningless_median_len as f64
    };

    // No comment and no long identifier anywhere: nothing states intent.
    let vague_intention = !stripped.has_comment
        && !distinct
            .iter()
            .any(|n| n.chars().count() >= config.meaningful_min_len);

    // Bracket nesting returns to zero and the prompt ends on a closer.
    let mut depth = 0i64;
    let mut balanced = true;
    for c in stripped.code.chars() {
        match c {
            '(' | '{' | '[' => depth += 1,
            ')' | '}' | ']' => {
                depth -= 1;
                if depth < 0 {
                    balanced = false;
                }
            }
            _ => {}
        }
    }
    let last = stripped.code.chars().rev().find(|c| !c.is_whitespace());
    let unopen_context =
        balanced && depth == 0 && matches!(last, Some(')') | Some('}') | Some(']'));

    // Any reference that is neither defined here nor a known builtin.
    let defined = definition_sites(&tokens, &pair.language);
    let self_unexplainable_context = distinct.iter().any(|name| {
        !defined.contains(name) && !config.builtins.contains(*name)
    });

    PatternFeatures {
        meaningless_names,
        vague_intention,
        unopen_context,
        self_unexplainable_context,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn java_pair(prompt: &str) -> PromptPair {
        PromptPair {
            snippet_id: "t".to_string(),
            language: Language::Java,
            prompt: prompt.to_string(),
            ground_truth: String::new(),
            split_token_index: 1,
        }
    }

    fn features(prompt: &str) -> PatternFeatures {
        extract_pattern_features(&java_pair(prompt), &PatternConfig::default())
    }

    #[test]
    fn closed_function_is_unopen_context() {
        let f = features("int a(){return 1;}");
        assert!(f.unopen_context);
    }

    #[test]
    fn dangling_prompt_is_not_unopen() {
        let f = features("int a(){ if (x) {");
        assert!(!f.unopen_context);
    }

    #[test]
    fn trailing_statement_is_not_unopen() {
        assert!(!features("int a(){return 1;} int b = 2;").unopen_context);
    }

    #[test]
    fn commented_prompt_is_not_vague() {
        let f = features("// lower case the string\nString lowerCased = s.");
        assert!(!f.vague_intention);
    }

    #[test]
    fn long_identifier_is_not_vague() {
        // "lowerCased" is 10 characters: the name itself carries intent.
        let f = features("String lowerCased = s.");
        assert!(!f.vague_intention);
    }

    #[test]
    fn short_names_without_comments_are_vague() {
        let f = features("String ss = s.");
        assert!(f.vague_intention);
    }

    #[test]
    fn short_identifiers_are_meaningless_names() {
        let f = features("int ss = 1; int x = ss;");
        assert!(f.meaningless_names);
    }

    #[test]
    fn descriptive_identifiers_are_not_meaningless() {
        let f = features("int totalCount = 1; int maxValue = totalCount;");
        assert!(!f.meaningless_names);
    }

    #[test]
    fn undefined_reference_is_self_unexplainable() {
        // myRoom is neither declared in the prompt nor a builtin.
        let f = features("int id = myRoom.roomID();");
        assert!(f.self_unexplainable_context);
    }

    #[test]
    fn fully_local_prompt_is_explainable() {
        let f = features("int counter = 1; counter = counter + 1;");
        assert!(!f.self_unexplainable_context);
    }

    #[test]
    fn degenerate_prompt_has_no_patterns() {
        assert_eq!(features("+++"), PatternFeatures::default());
    }

    #[test]
    fn detectors_are_deterministic() {
        let prompt = "public int f(int x) { if (x > 0) { return myHelper.run(x); } return 0; }";
        assert_eq!(features(prompt), features(prompt));
    }

    #[test]
    fn finished_snippets_always_read_as_unopen() {
        // A prompt that IS a complete function (empty ground truth after a
        // final-boundary split) must trip the unopen-context detector.
        use crate::corpus::{split_snippet, CodeSnippet};
        use crate::tokenizer::BpeVocab;

        let vocab = BpeVocab::byte_level(258);
        let curated = [
            "int a(){return 1;}",
            "public int max(int a, int b) { return a > b ? a : b; }",
            "void log(String s) { System.out.println(s); }",
            "boolean isEmpty() { return size == 0; }",
        ];
        let mut checked = 0;
        for (i, text) in curated.iter().enumerate() {
            for seed in 0..64u64 {
                let snippet = CodeSnippet {
                    id: format!("curated-{i}-{seed}"),
                    language: Language::Java,
                    text: text.to_string(),
                };
                let pair = split_snippet(&snippet, &vocab, seed).unwrap();
                if pair.ground_truth.is_empty() {
                    let f = extract_pattern_features(&pair, &PatternConfig::default());
                    assert!(f.unopen_context, "snippet {i} seed {seed}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no final-boundary splits drawn");
    }

    #[test]
    fn python_prompt_with_docstring_is_not_vague() {
        let pair = PromptPair {
            snippet_id: "p".to_string(),
            language: Language::Python,
            prompt: "def f(x):\n    \"\"\"Add one.\"\"\"\n    return x + 1".to_string(),
            ground_truth: String::new(),
            split_token_index: 1,
        };
        let f = extract_pattern_features(&pair, &PatternConfig::default());
        assert!(!f.vague_intention);
    }
}
