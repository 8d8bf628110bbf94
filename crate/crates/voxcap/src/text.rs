//! Shared text normalization: lowercase, punctuation split into separate
//! tokens, whitespace collapsed. Applied identically to references,
//! hypotheses, and decoder vocabulary text.

/// Splits text into normalized tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Normalized tokens joined by single spaces.
pub fn normalize_joined(text: &str) -> String {
    normalize(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits_punctuation() {
        assert_eq!(
            normalize("In the video, a person is playing squash."),
            ["in", "the", "video", ",", "a", "person", "is", "playing", "squash", "."]
        );
    }

    #[test]
    fn collapses_whitespace() {
        assert_eq!(normalize("  the\t cat \n sat  "), ["the", "cat", "sat"]);
        assert!(normalize("   ").is_empty());
        assert!(normalize("").is_empty());
    }

    #[test]
    fn punctuation_runs_become_separate_tokens() {
        assert_eq!(normalize("wait...what?!"), ["wait", ".", ".", ".", "what", "?", "!"]);
    }

    #[test]
    fn idempotent_on_normalized_text() {
        let once = normalize_joined("The CAT, sat!");
        assert_eq!(normalize_joined(&once), once);
    }
}
