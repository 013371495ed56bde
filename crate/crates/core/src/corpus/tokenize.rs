use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Marks removed from constructed utterances.
pub const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '[', ']'];

fn is_punct_char(c: char) -> bool {
    PUNCTUATION.contains(&c)
}

/// A token made only of punctuation marks.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct_char)
}

/// A slot placeholder such as `[restaurant_address]`.
pub fn is_placeholder(token: &str) -> bool {
    token.len() > 2
        && token.starts_with('[')
        && token.ends_with(']')
        && token[1..token.len() - 1]
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn placeholder_prefix(s: &str) -> bool {
    s.starts_with('[') && s.find(']').is_some_and(|end| is_placeholder(&s[..=end]))
}

/// Lowercases, splits on whitespace and peels attached punctuation marks
/// into standalone tokens. Placeholders are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut s = chunk;
        while let Some(c) = s.chars().next() {
            if !is_punct_char(c) || placeholder_prefix(s) {
                break;
            }
            out.push(c.to_string());
            s = &s[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = s.chars().next_back() {
            if !is_punct_char(c) || is_placeholder(s) {
                break;
            }
            trailing.push(c.to_string());
            s = &s[..s.len() - c.len_utf8()];
        }
        if !s.is_empty() {
            out.push(s.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub fn strip_punctuation(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| !is_punctuation(t)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn peels_attached_marks() {
        assert_eq!(toks("Hello, World!"), ["hello", ",", "world", "!"]);
        assert_eq!(toks("(maybe)."), ["(", "maybe", ")", "."]);
        assert_eq!(toks("don't"), ["don't"]);
    }

    #[test]
    fn keeps_placeholders_whole() {
        assert_eq!(toks("is [restaurant_address]."), ["is", "[restaurant_address]", "."]);
        assert_eq!(toks("([area])"), ["(", "[area]", ")"]);
        assert_eq!(toks("[not a slot]"), ["[", "not", "a", "slot", "]"]);
    }

    #[test]
    fn punctuation_predicate() {
        assert!(is_punctuation("?!"));
        assert!(!is_punctuation("[x]"));
        assert!(!is_punctuation(""));
        assert!(!is_punctuation("don't"));
    }
}
