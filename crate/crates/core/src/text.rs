//! Text normalization and the shared word-level pre-tokenizer.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalize, trim, and collapse every run of whitespace to one space.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized, case-folded key used for deduplication and exact joins.
pub fn fold_key(text: &str) -> String {
    normalize(text).to_lowercase()
}

/// Lowercased word tokens. Alphanumeric runs (with inner apostrophes) form
/// words; every other non-space character is its own token.
pub fn words(text: &str) -> Vec<String> {
    let lower = normalize(text).to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = lower.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let inner_apostrophe = c == '\''
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_apostrophe {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_punct(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

/// Bundled stopword list (version 1). Changing it changes overlap metrics,
/// so bump [`STOPWORDS_VERSION`] with any edit.
pub const STOPWORDS_VERSION: u32 = 1;

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself", "him",
    "himself", "his", "how", "i", "i'm", "if", "in", "into", "is", "it", "it's", "its", "itself",
    "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
    "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same",
    "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Content words: lowercased tokens minus punctuation and stopwords.
pub fn content_words(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| !is_punct(w) && !is_stopword(w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_sorted_for_binary_search() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  I  love\tsurfing \n"), "I love surfing");
        // decomposed e + combining acute composes under NFC
        assert_eq!(normalize("cafe\u{301}"), "caf\u{e9}");
    }

    #[test]
    fn words_split_punctuation() {
        assert_eq!(words("Hi, I'm Bob!"), vec!["hi", ",", "i'm", "bob", "!"]);
        assert_eq!(words("end.'"), vec!["end", ".", "'"]);
        assert!(words("   ").is_empty());
    }

    #[test]
    fn content_words_drop_stopwords() {
        assert_eq!(content_words("I am a nurse."), vec!["nurse"]);
    }
}
