//! ROUGE-L over whitespace tokens, case-folded.

use crate::error::{Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Longest-common-subsequence length, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L F1; 0 when either side has no tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Pre-tokenized pool for repeated similarity queries.
#[derive(Debug, Clone, Default)]
pub struct RougeIndex {
    entries: Vec<(String, Vec<String>)>,
}

impl RougeIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: &str, text: &str) {
        self.entries.push((id.to_string(), tokenize(text)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest similarity and the id holding it; ties go to the
    /// lexicographically smallest id.
    pub fn max_similarity(&self, candidate: &str) -> Result<(f64, String)> {
        let cand = tokenize(candidate);
        let mut best: Option<(f64, &str)> = None;
        for (id, toks) in &self.entries {
            let s = rouge_l_tokens(&cand, toks);
            best = match best {
                Some((b, bid)) if b > s || (b == s && bid <= id.as_str()) => Some((b, bid)),
                _ => Some((s, id.as_str())),
            };
        }
        best.map(|(s, id)| (s, id.to_string()))
            .ok_or_else(|| Error::invalid("similarity against an empty pool"))
    }
}

pub fn max_similarity<'a>(candidate: &str, pool: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(f64, String)> {
    let mut idx = RougeIndex::new();
    for (id, text) in pool {
        idx.push(id, text);
    }
    idx.max_similarity(candidate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l("", "x"), 0.0);
        assert_eq!(rouge_l("The  CAT", "the cat"), 1.0);
    }

    #[test]
    fn max_similarity_ties_and_empty_pool() {
        let pool = [("b", "red lamp"), ("a", "red lamp"), ("c", "blue sky")];
        assert_eq!(max_similarity("red lamp", pool).unwrap(), (1.0, "a".to_string()));
        assert_eq!(max_similarity("zzz", [("only", "red lamp")]).unwrap(), (0.0, "only".to_string()));
        assert!(max_similarity("x", []).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")].prop_map(String::from), 0..8)
        }

        proptest! {
            #[test]
            fn bounded_and_symmetric_for_equal_lengths(a in words(), b in words()) {
                let (x, y) = (a.join(" "), b.join(" "));
                let s = rouge_l(&x, &y);
                prop_assert!((0.0..=1.0).contains(&s));
                if a.len() == b.len() {
                    prop_assert_eq!(s, rouge_l(&y, &x));
                }
            }
        }
    }
}
