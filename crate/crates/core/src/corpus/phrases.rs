//! Caption chunking into noun phrases.

/// Splits a caption into candidate concept phrases.
pub trait PhraseExtractor {
    fn extract(&self, caption: &str) -> Vec<String>;
}

/// Closed-class English words that end a phrase: articles, determiners and
/// quantifiers, prepositions, pronouns, conjunctions, auxiliaries and a few
/// linking verbs.
pub const STOPWORDS: &[&str] = &[
    // articles, determiners, quantifiers
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "all",
    "both", "either", "neither", "no", "another", "other", "such", "many", "much", "few",
    "several", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    // prepositions
    "on", "in", "at", "of", "with", "without", "under", "above", "below", "near", "next", "to",
    "from", "by", "for", "beside", "besides", "behind", "over", "into", "onto", "between",
    "among", "around", "through", "across", "against", "along", "inside", "outside", "upon",
    "within", "about", "after", "before", "beneath", "beyond", "during", "off", "out", "up",
    "down", "toward", "towards", "via", "like", "as", "than",
    // pronouns
    "i", "me", "my", "mine", "we", "us", "our", "ours", "you", "your", "yours", "he", "him",
    "his", "she", "her", "hers", "it", "its", "they", "them", "their", "theirs", "who", "whom",
    "whose", "which", "what", "there", "here", "itself", "themselves",
    // conjunctions
    "and", "or", "but", "nor", "so", "yet", "while", "whereas", "if", "because", "although",
    "though", "when", "where",
    // auxiliaries and linking verbs
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "having",
    "do", "does", "did", "can", "could", "will", "would", "shall", "should", "may", "might",
    "must", "not", "seems", "appears", "sits", "lies", "stands",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Rule-based chunker: lowercases the caption, treats punctuation and
/// stopwords as phrase boundaries, and emits each maximal run of remaining
/// tokens as one phrase. Apostrophes and hyphens inside a word are kept, and
/// immediately repeated tokens inside a run collapse to one.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopwordChunker;

impl PhraseExtractor for StopwordChunker {
    fn extract(&self, caption: &str) -> Vec<String> {
        let lower = caption.to_lowercase();
        let mut phrases: Vec<String> = Vec::new();
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, phrases: &mut Vec<String>| {
            if !run.is_empty() {
                let p = run.join(" ");
                if !phrases.contains(&p) {
                    phrases.push(p);
                }
                run.clear();
            }
        };
        let mut word = String::new();
        let chars: Vec<char> = lower.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            let inner_joiner = (c == '\'' || c == '-')
                && !word.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || inner_joiner {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                if is_stopword(&word) {
                    flush(&mut run, &mut phrases);
                } else if run.last() != Some(&word) {
                    run.push(std::mem::take(&mut word));
                }
                word.clear();
            }
            if !c.is_whitespace() {
                flush(&mut run, &mut phrases);
            }
        }
        if !word.is_empty() {
            if is_stopword(&word) {
                flush(&mut run, &mut phrases);
            } else if run.last() != Some(&word) {
                run.push(word);
            }
        }
        flush(&mut run, &mut phrases);
        phrases
    }
}

/// Noun phrases of `caption` using the default [`StopwordChunker`].
pub fn extract_noun_phrases(caption: &str) -> Vec<String> {
    StopwordChunker.extract(caption)
}
