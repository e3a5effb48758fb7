//! Tokenization helpers shared by the embedder, the definition checker and
//! the mock summarizer.

/// Lowercased alphanumeric tokens in order of appearance.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "but", "by", "can", "could", "do", "does", "each", "either", "even", "for", "from", "has",
    "have", "how", "in", "into", "is", "it", "its", "just", "may", "more", "most", "not", "of",
    "on", "one", "or", "other", "our", "out", "over", "such", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "to", "too", "under", "up",
    "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "will",
    "with", "would", "you", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Tokens worth comparing for content: no stopwords, at least three chars.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 3 && !is_stopword(t))
        .collect()
}

/// Split prose into sentences on `.`, `!` and `?`. Terminators stay attached.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Truncate to at most `max` chars on a char boundary.
pub fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Body of a `## HEADER` section: everything after the header line up to the
/// next `## ` header, trimmed.
pub fn markdown_section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let marker = format!("## {header}\n");
    let start = if text.starts_with(&marker) {
        marker.len()
    } else {
        text.find(&format!("\n{marker}"))? + marker.len() + 1
    };
    let rest = &text[start..];
    let end = rest.find("\n## ").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn sentence_split() {
        let s = sentences("Breathe in. Breathe out! Rest? and stay");
        assert_eq!(s, vec!["Breathe in.", "Breathe out!", "Rest?", "and stay"]);
    }

    #[test]
    fn tokens_lowercase_and_split() {
        assert_eq!(tokens("See-Hear-Feel, now"), vec!["see", "hear", "feel", "now"]);
        assert_eq!(content_tokens("the ability to allow"), vec!["ability", "allow"]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn sections_by_header() {
        let doc = "## A\none\n\n## B\ntwo\nlines\n## C\n";
        assert_eq!(markdown_section(doc, "A"), Some("one"));
        assert_eq!(markdown_section(doc, "B"), Some("two\nlines"));
        assert_eq!(markdown_section(doc, "C"), Some(""));
        assert_eq!(markdown_section(doc, "D"), None);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("hi", 10), "hi");
    }
}
