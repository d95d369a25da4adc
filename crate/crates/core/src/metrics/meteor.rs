//! Unigram alignment for METEOR: exact matches first, Porter-stem matches
//! over the remainder, maximal cardinality at both stages, and among maximal
//! alignments the one with the fewest chunks (runs of adjacent pairs).
//!
//! Chunk minimization is a branch-and-bound search over position
//! assignments; cardinality quotas are fixed per word/stem type up front, so
//! the search only decides positions. A node budget keeps pathological
//! inputs bounded; past it the deterministic greedy assignment (which is
//! already maximal) is kept.

use std::collections::BTreeMap;

use super::stem::porter_stem;

/// Result of aligning a candidate against one reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

const SEARCH_BUDGET: usize = 200_000;

struct Side {
    words: Vec<String>,
    stems: Vec<String>,
}

impl Side {
    fn new(tokens: &[String]) -> Side {
        Side {
            words: tokens.to_vec(),
            stems: tokens.iter().map(|t| porter_stem(t)).collect(),
        }
    }
}

fn counts<'a>(items: impl Iterator<Item = &'a String>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for it in items {
        *m.entry(it.as_str()).or_insert(0) += 1;
    }
    m
}

/// Align `candidate` to `reference` and report match and chunk counts.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Alignment {
    if candidate.is_empty() || reference.is_empty() {
        return Alignment { matches: 0, chunks: 0 };
    }
    let cand = Side::new(candidate);
    let refr = Side::new(reference);

    // stage-1 quota per word type
    let cword = counts(cand.words.iter());
    let rword = counts(refr.words.iter());
    let mut quota_word: BTreeMap<&str, usize> = BTreeMap::new();
    for (&w, &c) in &cword {
        let r = rword.get(w).copied().unwrap_or(0);
        if c.min(r) > 0 {
            quota_word.insert(w, c.min(r));
        }
    }

    // stage-2 quota per stem type, over per-word leftovers
    let mut cleft: BTreeMap<String, usize> = BTreeMap::new();
    let mut rleft: BTreeMap<String, usize> = BTreeMap::new();
    for (&w, &c) in &cword {
        let q = quota_word.get(w).copied().unwrap_or(0);
        if c > q {
            *cleft.entry(porter_stem(w)).or_insert(0) += c - q;
        }
    }
    for (&w, &r) in &rword {
        let q = quota_word.get(w).copied().unwrap_or(0);
        if r > q {
            *rleft.entry(porter_stem(w)).or_insert(0) += r - q;
        }
    }
    let mut quota_stem: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, &c) in &cleft {
        let r = rleft.get(s).copied().unwrap_or(0);
        if c.min(r) > 0 {
            quota_stem.insert(s.as_str(), c.min(r));
        }
    }

    let matches: usize = quota_word.values().sum::<usize>() + quota_stem.values().sum::<usize>();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }

    let mut search = Search {
        cand: &cand,
        refr: &refr,
        rem_word: quota_word
            .iter()
            .map(|(&w, &q)| (w.to_string(), q))
            .collect(),
        rem_stem: quota_stem
            .iter()
            .map(|(&s, &q)| (s.to_string(), q))
            .collect(),
        used_ref: vec![false; reference.len()],
        nodes: 0,
        best: usize::MAX,
    };

    // greedy first: gives a feasible incumbent and the fallback answer
    search.best = search.greedy_chunks();
    search.dfs(0, 0, None);

    Alignment {
        matches,
        chunks: search.best,
    }
}

struct Search<'a> {
    cand: &'a Side,
    refr: &'a Side,
    rem_word: BTreeMap<String, usize>,
    rem_stem: BTreeMap<String, usize>,
    used_ref: Vec<bool>,
    nodes: usize,
    best: usize,
}

impl<'a> Search<'a> {
    /// Deterministic greedy assignment: scan candidate positions, prefer the
    /// ref position that continues the current chunk, else the leftmost.
    fn greedy_chunks(&self) -> usize {
        let mut rem_word = self.rem_word.clone();
        let mut rem_stem = self.rem_stem.clone();
        let mut used = vec![false; self.refr.words.len()];
        let mut chunks = 0usize;
        let mut prev: Option<(usize, usize)> = None;
        for i in 0..self.cand.words.len() {
            let w = &self.cand.words[i];
            let s = &self.cand.stems[i];
            let stage1 = rem_word.get(w).copied().unwrap_or(0) > 0;
            let stage2 = !stage1 && rem_stem.get(s).copied().unwrap_or(0) > 0;
            if !stage1 && !stage2 {
                continue;
            }
            let ok = |j: usize, used: &[bool]| -> bool {
                if used[j] {
                    return false;
                }
                if stage1 {
                    self.refr.words[j] == *w
                } else {
                    self.refr.stems[j] == *s
                        && self.refr.words[j] != *w
                        && self.ref_feasible(j, &rem_word, used)
                }
            };
            let preferred = prev.and_then(|(pi, pj)| {
                if pi + 1 == i && pj + 1 < used.len() && ok(pj + 1, &used) {
                    Some(pj + 1)
                } else {
                    None
                }
            });
            let target = preferred.or_else(|| (0..used.len()).find(|&j| ok(j, &used)));
            if let Some(j) = target {
                used[j] = true;
                if stage1 {
                    *rem_word.get_mut(w).unwrap() -= 1;
                } else {
                    *rem_stem.get_mut(s).unwrap() -= 1;
                }
                if !matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j) {
                    chunks += 1;
                }
                prev = Some((i, j));
            }
        }
        chunks
    }

    /// A stage-2 use of ref position j must leave enough same-word ref
    /// positions for that word's stage-1 quota.
    fn ref_feasible(&self, j: usize, rem_word: &BTreeMap<String, usize>, used: &[bool]) -> bool {
        let w = &self.refr.words[j];
        let need = rem_word.get(w).copied().unwrap_or(0);
        if need == 0 {
            return true;
        }
        let free = (0..used.len())
            .filter(|&k| k != j && !used[k] && self.refr.words[k] == *w)
            .count();
        free >= need
    }

    fn dfs(&mut self, i: usize, chunks: usize, prev: Option<(usize, usize)>) {
        if chunks >= self.best {
            return; // cannot strictly improve
        }
        self.nodes += 1;
        if self.nodes > SEARCH_BUDGET {
            return; // keep the greedy incumbent
        }
        let n = self.cand.words.len();
        if i == n {
            if self.rem_word.values().all(|&q| q == 0) && self.rem_stem.values().all(|&q| q == 0) {
                self.best = chunks;
            }
            return;
        }
        let w = self.cand.words[i].clone();
        let s = self.cand.stems[i].clone();

        // feasibility: enough later candidate positions to fill remaining quotas
        let can_skip = {
            let later_words = (i + 1..n).filter(|&k| self.cand.words[k] == w).count();
            later_words >= self.rem_word.get(&w).copied().unwrap_or(0)
        };

        // option: stage-1 match
        if self.rem_word.get(&w).copied().unwrap_or(0) > 0 {
            for j in 0..self.used_ref.len() {
                if self.used_ref[j] || self.refr.words[j] != w {
                    continue;
                }
                self.used_ref[j] = true;
                *self.rem_word.get_mut(&w).unwrap() -= 1;
                let extend = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                self.dfs(i + 1, chunks + usize::from(!extend), Some((i, j)));
                *self.rem_word.get_mut(&w).unwrap() += 1;
                self.used_ref[j] = false;
            }
        }
        // option: stage-2 match over leftovers
        if self.rem_stem.get(&s).copied().unwrap_or(0) > 0 {
            for j in 0..self.used_ref.len() {
                if self.used_ref[j] || self.refr.stems[j] != s || self.refr.words[j] == w {
                    continue;
                }
                if !self.ref_feasible(j, &self.rem_word, &self.used_ref) {
                    continue;
                }
                self.used_ref[j] = true;
                *self.rem_stem.get_mut(&s).unwrap() -= 1;
                let extend = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                self.dfs(i + 1, chunks + usize::from(!extend), Some((i, j)));
                *self.rem_stem.get_mut(&s).unwrap() += 1;
                self.used_ref[j] = false;
            }
        }
        // option: leave this position unmatched
        if can_skip {
            self.dfs(i + 1, chunks, prev);
        }
    }
}
