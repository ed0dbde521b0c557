//! Aho-Corasick automaton over word tokens.
//!
//! Patterns are sequences of words; matching is token-aligned and reports
//! every occurrence, overlapping ones included.

use std::collections::{HashMap, VecDeque};

const ROOT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseMatch {
    pub pattern: usize,
    /// Token range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PhraseMatcher {
    alphabet: HashMap<String, u32>,
    next: Vec<HashMap<u32, usize>>,
    fail: Vec<usize>,
    /// Patterns recognized on entering a state (fail-link outputs merged in).
    out: Vec<Vec<usize>>,
    lens: Vec<usize>,
}

impl PhraseMatcher {
    pub fn new<P, W>(patterns: P) -> Self
    where
        P: IntoIterator<Item = W>,
        W: AsRef<[String]>,
    {
        let mut m = PhraseMatcher {
            next: vec![HashMap::new()],
            fail: vec![ROOT],
            out: vec![Vec::new()],
            ..Default::default()
        };
        for (pattern, words) in patterns.into_iter().enumerate() {
            let words = words.as_ref();
            m.lens.push(words.len());
            if words.is_empty() {
                continue;
            }
            let mut state = ROOT;
            for word in words {
                let n = m.alphabet.len() as u32;
                let sym = *m.alphabet.entry(word.clone()).or_insert(n);
                state = match m.next[state].get(&sym) {
                    Some(&s) => s,
                    None => {
                        let s = m.next.len();
                        m.next.push(HashMap::new());
                        m.fail.push(ROOT);
                        m.out.push(Vec::new());
                        m.next[state].insert(sym, s);
                        s
                    }
                };
            }
            m.out[state].push(pattern);
        }
        m.link();
        m
    }

    fn link(&mut self) {
        let mut queue: VecDeque<usize> = self.next[ROOT].values().copied().collect();
        while let Some(state) = queue.pop_front() {
            let edges: Vec<(u32, usize)> = self.next[state].iter().map(|(&k, &v)| (k, v)).collect();
            for (sym, child) in edges {
                let mut f = self.fail[state];
                let target = loop {
                    if let Some(&t) = self.next[f].get(&sym) {
                        break t;
                    }
                    if f == ROOT {
                        break ROOT;
                    }
                    f = self.fail[f];
                };
                self.fail[child] = target;
                let inherited = self.out[target].clone();
                self.out[child].extend(inherited);
                queue.push_back(child);
            }
        }
    }

    fn step(&self, mut state: usize, sym: Option<u32>) -> usize {
        let Some(sym) = sym else { return ROOT };
        loop {
            if let Some(&t) = self.next[state].get(&sym) {
                return t;
            }
            if state == ROOT {
                return ROOT;
            }
            state = self.fail[state];
        }
    }

    /// All occurrences, ordered by end position.
    pub fn find_all<S: AsRef<str>>(&self, words: &[S]) -> Vec<PhraseMatch> {
        let mut state = ROOT;
        let mut found = Vec::new();
        for (i, word) in words.iter().enumerate() {
            state = self.step(state, self.alphabet.get(word.as_ref()).copied());
            for &pattern in &self.out[state] {
                let len = self.lens[pattern];
                found.push(PhraseMatch {
                    pattern,
                    start: i + 1 - len,
                    end: i + 1,
                });
            }
        }
        found
    }
}
