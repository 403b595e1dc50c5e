//! Word-level tokenizer for C-like source, applied one physical line at a time.

const THREE_CHAR_OPS: [&str; 3] = ["<<=", ">>=", "..."];
const TWO_CHAR_OPS: [&str; 21] = [
    "->", "++", "--", "==", "!=", "<=", ">=", "&&", "||", "<<", ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "::",
    "##",
];

/// Splits a single source line into surface tokens. Implementations must be
/// deterministic and never emit empty or whitespace-only tokens.
pub trait LineTokenizer {
    fn tokenize_line(&self, line: &str) -> Vec<String>;
}

/// Identifiers and numeric literals stay whole, string/char literals and
/// comments that start on the line become single tokens, operators use
/// maximal munch over the common C operator set, and any other
/// non-whitespace character is a token of its own.
///
/// Multi-line block comments and preprocessor continuations are not tracked
/// across lines.
#[derive(Clone, Copy, Debug, Default)]
pub struct CTokenizer;

fn is_ident_char(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

impl LineTokenizer for CTokenizer {
    fn tokenize_line(&self, line: &str) -> Vec<String> {
        let chars: Vec<char> = line.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let start = i;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '"' || c == '\'' {
                i += 1;
                while i < chars.len() {
                    if chars[i] == '\\' {
                        i += 2;
                        continue;
                    }
                    i += 1;
                    if chars[i - 1] == c {
                        break;
                    }
                }
                i = i.min(chars.len());
            } else if c == '/' && matches!(chars.get(i + 1), Some('/')) {
                i = chars.len();
            } else if c == '/' && matches!(chars.get(i + 1), Some('*')) {
                i += 2;
                while i < chars.len() && !(chars[i - 1] == '*' && chars[i] == '/' && i - 1 > start + 1) {
                    i += 1;
                }
                i = (i + 1).min(chars.len());
            } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
                let hex = c == '0' && matches!(chars.get(i + 1), Some('x' | 'X'));
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '+' || d == '-')
                        && match chars[i - 1] {
                            'e' | 'E' => !hex,
                            'p' | 'P' => hex,
                            _ => false,
                        };
                    if is_ident_char(d) || d == '.' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
            } else if is_ident_char(c) {
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
            } else {
                let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
                i += if THREE_CHAR_OPS.iter().any(|op| rest.starts_with(op)) {
                    3
                } else if TWO_CHAR_OPS.iter().any(|op| rest.starts_with(op)) {
                    2
                } else {
                    1
                };
            }
            out.push(chars[start..i].iter().collect());
        }
        out
    }
}

pub fn tokenize_line(line: &str) -> Vec<String> {
    CTokenizer.tokenize_line(line)
}
