use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::DatasetSplit;

/// Lowercases a token and drops a trailing question mark.
pub fn normalize_token(token: &str) -> String {
    token.trim_end_matches('?').to_lowercase()
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<String, usize>,
    terminal: bool,
}

/// Set of question categories with longest-prefix lookup.
#[derive(Debug, Clone)]
pub struct CategoryDict {
    entries: BTreeSet<Vec<String>>,
    nodes: Vec<TrieNode>,
    max_len: usize,
}

impl CategoryDict {
    pub fn new<I, S>(categories: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = CategoryDict {
            entries: BTreeSet::new(),
            nodes: vec![TrieNode::default()],
            max_len: 0,
        };
        for cat in categories {
            let tokens: Vec<String> = cat.as_ref().split_whitespace().map(normalize_token).collect();
            if tokens.is_empty() || tokens.iter().any(String::is_empty) {
                continue;
            }
            dict.insert(tokens);
        }
        if dict.entries.is_empty() {
            return Err(Error::InvalidInput("category dictionary is empty".into()));
        }
        Ok(dict)
    }

    fn insert(&mut self, tokens: Vec<String>) {
        let mut node = 0;
        for t in &tokens {
            node = match self.nodes[node].children.get(t) {
                Some(&next) => next,
                None => {
                    self.nodes.push(TrieNode::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t.clone(), next);
                    next
                }
            };
        }
        self.nodes[node].terminal = true;
        self.max_len = self.max_len.max(tokens.len());
        self.entries.insert(tokens);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn contains(&self, category: &str) -> bool {
        let tokens: Vec<String> = category.split_whitespace().map(normalize_token).collect();
        self.entries.contains(&tokens)
    }

    /// Entries as space-joined strings, sorted.
    pub fn entries(&self) -> impl Iterator<Item = String> + '_ {
        self.entries.iter().map(|e| e.join(" "))
    }

    /// Forward maximum matching: the longest entry that is a token prefix
    /// of `question`, compared after normalization.
    pub fn fmm_match(&self, question: &[String]) -> Option<String> {
        let mut node = 0;
        let mut best = None;
        for (depth, tok) in question.iter().take(self.max_len).enumerate() {
            match self.nodes[node].children.get(&normalize_token(tok)) {
                Some(&next) => node = next,
                None => break,
            }
            if self.nodes[node].terminal {
                best = Some(depth + 1);
            }
        }
        best.map(|n| {
            question[..n]
                .iter()
                .map(|t| normalize_token(t))
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    /// Sorted, newline-delimited.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in self.entries() {
            s.push_str(&e);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        CategoryDict::new(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CategoryDict::from_text(&text)
    }
}

impl PartialEq for CategoryDict {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

/// Dictionary of the distinct categories in `split`.
pub fn build_category_dict(split: &DatasetSplit) -> Result<CategoryDict> {
    if split.is_empty() {
        return Err(Error::InvalidInput("cannot build a category dictionary from an empty split".into()));
    }
    CategoryDict::new(split.examples.iter().map(|e| e.question_category.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn brute_force(entries: &[String], question: &[String]) -> Option<String> {
        let q: Vec<String> = question.iter().map(|t| normalize_token(t)).collect();
        entries
            .iter()
            .map(|e| e.split_whitespace().map(normalize_token).collect::<Vec<_>>())
            .filter(|e| !e.is_empty() && e.len() <= q.len() && e[..] == q[..e.len()])
            .max_by_key(|e| e.len())
            .map(|e| e.join(" "))
    }

    #[test]
    fn longest_prefix_wins() {
        let d = CategoryDict::new(["how", "how many"]).unwrap();
        assert_eq!(d.fmm_match(&toks("how many flowers in the vase ?")).as_deref(), Some("how many"));
        assert_eq!(d.fmm_match(&toks("How is the cat ?")).as_deref(), Some("how"));
    }

    #[test]
    fn no_match_is_none() {
        let d = CategoryDict::new(["how many", "what color"]).unwrap();
        assert_eq!(d.fmm_match(&toks("where is the cat ?")), None);
        assert_eq!(d.fmm_match(&[]), None);
    }

    #[test]
    fn matches_through_case_and_question_mark() {
        let d = CategoryDict::new(["is this"]).unwrap();
        assert_eq!(d.fmm_match(&toks("Is this?")).as_deref(), Some("is this"));
    }

    #[test]
    fn duplicates_collapse_and_file_round_trips() {
        let d = CategoryDict::new(["what color", "how many", "what color", "How  many"]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.to_text(), "how many\nwhat color\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("categories.txt");
        d.save(&p).unwrap();
        assert_eq!(CategoryDict::load(&p).unwrap(), d);
    }

    #[test]
    fn empty_dict_rejected() {
        assert!(CategoryDict::new(Vec::<String>::new()).is_err());
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "d", "A", "b?"]).prop_map(String::from)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn fmm_equals_brute_force(
            entries in prop::collection::vec(prop::collection::vec(word(), 1..4).prop_map(|w| w.join(" ")), 1..8),
            question in prop::collection::vec(word(), 0..7),
        ) {
            let d = CategoryDict::new(&entries).unwrap();
            let got = d.fmm_match(&question);
            prop_assert_eq!(got.clone(), brute_force(&entries, &question));
            if let Some(m) = got {
                let n = m.split_whitespace().count();
                let prefix: Vec<String> = question[..n].iter().map(|t| normalize_token(t)).collect();
                prop_assert_eq!(prefix.join(" "), m);
            }
        }
    }
}
