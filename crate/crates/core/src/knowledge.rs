//! Schema-only lexical overlap features.
//!
//! Two bit vectors are produced from the question tokens and the column
//! names: one bit per question token (does this token name a column or a
//! column word?) and one bit per column (does any of its words occur in the
//! question?). Cell values never enter this module.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeVectors {
    pub qmv: Vec<u8>,
    pub hmv: Vec<u8>,
    pub concatenated: Vec<u8>,
}

/// True iff some element of `words` equals `phrase` after case-folding.
/// Partial matches do not count.
pub fn contains_full_match<S: AsRef<str>>(words: &[S], phrase: &str) -> bool {
    let phrase = phrase.to_lowercase();
    words.iter().any(|w| w.as_ref().to_lowercase() == phrase)
}

/// Every full header name plus every whitespace-separated word of every header.
fn header_word_pool<S: AsRef<str>>(headers: &[S]) -> Vec<String> {
    let mut pool = Vec::new();
    for h in headers {
        let h = h.as_ref();
        pool.push(h.trim().to_lowercase());
        pool.extend(h.split_whitespace().map(str::to_lowercase));
    }
    pool
}

/// Marks every question position whose token matches a header or header word.
/// All occurrences of a matching token are marked.
pub fn question_mark_vector<T: AsRef<str>, S: AsRef<str>>(question_tokens: &[T], headers: &[S]) -> Vec<u8> {
    let pool = header_word_pool(headers);
    question_tokens
        .iter()
        .map(|tok| u8::from(contains_full_match(&pool, tok.as_ref())))
        .collect()
}

/// Marks header `j` if the header, or any single word of it, appears as a
/// whole question token.
pub fn header_mark_vector<T: AsRef<str>, S: AsRef<str>>(question_tokens: &[T], headers: &[S]) -> Vec<u8> {
    headers
        .iter()
        .map(|h| {
            let h = h.as_ref();
            let hit = contains_full_match(question_tokens, h.trim())
                || h.split_whitespace().any(|w| contains_full_match(question_tokens, w));
            u8::from(hit)
        })
        .collect()
}

pub fn build<T: AsRef<str>, S: AsRef<str>>(question_tokens: &[T], headers: &[S]) -> KnowledgeVectors {
    let qmv = question_mark_vector(question_tokens, headers);
    let hmv = header_mark_vector(question_tokens, headers);
    let concatenated = qmv.iter().chain(hmv.iter()).copied().collect();
    KnowledgeVectors { qmv, hmv, concatenated }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUESTION: [&str; 9] = [
        "what",
        "is",
        "the",
        "nationality",
        "of",
        "the",
        "player",
        "marcus",
        "camby",
    ];
    const HEADERS: [&str; 4] = ["player", "no.", "nationality", "years in toronto"];

    #[test]
    fn contain_is_full_match_only() {
        assert!(contains_full_match(&["player", "no."], "player"));
        assert!(contains_full_match(&["Player"], "PLAYER"));
        assert!(!contains_full_match::<&str>(&[], "anything"));
        assert!(!contains_full_match(&["played"], "play"));
    }

    #[test]
    fn question_marks() {
        assert_eq!(question_mark_vector(&QUESTION, &HEADERS), [0, 0, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(question_mark_vector(&["zebra"], &HEADERS), [0]);
        assert!(question_mark_vector::<&str, _>(&[], &HEADERS).is_empty());
    }

    #[test]
    fn header_marks() {
        assert_eq!(header_mark_vector(&QUESTION, &HEADERS), [1, 0, 1, 0]);
        let q = ["how", "many", "years", "did", "he", "spend", "in", "toronto"];
        assert_eq!(header_mark_vector(&q, &["years in toronto"]), [1]);
        assert!(header_mark_vector::<_, &str>(&QUESTION, &[]).is_empty());
    }

    #[test]
    fn build_concatenates() {
        let kv = build(&QUESTION, &HEADERS);
        assert_eq!(kv.qmv, [0, 0, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(kv.hmv, [1, 0, 1, 0]);
        assert_eq!(kv.concatenated.len(), 13);
        assert_eq!(kv.concatenated, [0, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 0]);

        let empty = build::<&str, &str>(&[], &[]);
        assert!(empty.qmv.is_empty() && empty.hmv.is_empty() && empty.concatenated.is_empty());

        let one = build(&["score"], &["Score"]);
        assert_eq!((one.qmv, one.hmv), (vec![1], vec![1]));
    }

    #[test]
    fn multi_word_question_token_never_matches_partial_header() {
        // "toronto" is a header word, so it is marked; "years in" is not a token.
        let q = ["toronto", "years in"];
        assert_eq!(question_mark_vector(&q, &HEADERS), [1, 0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vocab_word() -> impl Strategy<Value = String> {
            prop::sample::select(vec!["a", "b", "c", "d", "e", "F", "g"]).prop_map(String::from)
        }

        proptest! {
            #[test]
            fn adding_a_header_is_monotone(
                q in prop::collection::vec(vocab_word(), 0..8),
                hs in prop::collection::vec(prop::collection::vec(vocab_word(), 1..3), 0..5),
                extra in prop::collection::vec(vocab_word(), 1..3),
            ) {
                let headers: Vec<String> = hs.iter().map(|w| w.join(" ")).collect();
                let before = build(&q, &headers);
                let mut more = headers.clone();
                more.push(extra.join(" "));
                let after = build(&q, &more);
                for (b, a) in before.qmv.iter().zip(&after.qmv) {
                    prop_assert!(a >= b);
                }
                prop_assert_eq!(&before.hmv[..], &after.hmv[..headers.len()]);
            }

            #[test]
            fn deterministic(q in prop::collection::vec(vocab_word(), 0..8),
                             hs in prop::collection::vec(vocab_word(), 0..5)) {
                prop_assert_eq!(build(&q, &hs), build(&q, &hs));
            }
        }
    }
}
