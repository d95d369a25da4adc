//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! The brute-force metric oracles in this file are independent
//! re-derivations (plain loops and direct formulas) used only to check the
//! library implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use remrg_core::corpus::{FeatureSet, EOS_ID};
use remrg_core::decoding::{
    beam_decode, greedy_decode, log_softmax, repetition_penalty_adjust, sample_decode,
    DecodeConfig, DecodeMode, NextTokenScorer,
};
use remrg_core::metrics::stem::porter_stem;
use remrg_core::metrics::{bleu, cider, meteor_lite, rouge_l, EvalPair};
use remrg_core::model::{init_model, sequence_logprob, ModelConfig};
use remrg_core::tensor::{ParamBuilder, RngState, Tape};
use remrg_core::training::{adam_step, policy_gradient, AdamState};
use remrg_core::verify::{run_gradcheck, GRADCHECK_TOLERANCE};
use remrg_core::xlinear::{
    bilinear_pool, channel_attention, spatial_attention, xlinear_attend, PoolSide, XLinearParams,
};

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("[criterion {:02}] {}: PASS ({})", criterion, name, detail);
}

// ════════════════════════════════════════════════════════════════════════
// criterion 1: gradient correctness
// ════════════════════════════════════════════════════════════════════════

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let reports = run_gradcheck(2024, false);
    assert!(reports.len() >= 4, "the suite must cover at least 4 components");
    let mut worst = 0.0f64;
    for r in &reports {
        assert!(
            r.pass(),
            "component {} exceeded tolerance: {}",
            r.component,
            r.max_rel_err
        );
        worst = worst.max(r.max_rel_err);
    }
    // and through the command-line entry point
    let out = run_cli(&["gradcheck", "--seed", "2024"]);
    assert_eq!(out.status.code(), Some(0));
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradcheck took {:?}, budget is one minute",
        elapsed
    );
    assert!(worst <= GRADCHECK_TOLERANCE);
    pass(
        1,
        "gradient correctness",
        &format!("{} components, worst rel err {:.2e}, {:?}", reports.len(), worst, elapsed),
    );
}

// ════════════════════════════════════════════════════════════════════════
// criterion 2: attention invariants
// ════════════════════════════════════════════════════════════════════════

#[test]
fn criterion_02_attention_invariants() {
    let mut rng = RngState::new(7102);
    let mut checked = 0usize;
    for case in 0..1000u64 {
        let d = 2 + rng.below(5);
        let n = 1 + rng.below(6);
        let params =
            XLinearParams::init(d, d, &mut ParamBuilder::new(RngState::new(10_000 + case)))
                .unwrap();
        let tape = Tape::new();
        let query = tape
            .constant(&[d], (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let k = tape.constant(&[n, d], keys.clone()).unwrap();
        let v = tape.constant(&[n, d], values.clone()).unwrap();

        let x_k = bilinear_pool(&tape, PoolSide::Key, query, k, &params).unwrap();
        let (x_prime, spatial) = spatial_attention(&tape, x_k, &params).unwrap();
        let channel = channel_attention(&tape, x_prime, &params).unwrap();

        let s = tape.value(spatial);
        assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(s.iter().all(|&p| p >= 0.0));
        assert!(tape.value(channel).iter().all(|&g| g > 0.0 && g < 1.0));

        // joint permutation invariance of the attended feature
        let base = tape.value(xlinear_attend(&tape, k, v, query, &params).unwrap());
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let kp: Vec<f64> = perm.iter().flat_map(|&i| keys[i * d..(i + 1) * d].to_vec()).collect();
        let vp: Vec<f64> = perm
            .iter()
            .flat_map(|&i| values[i * d..(i + 1) * d].to_vec())
            .collect();
        let t2 = Tape::new();
        let q2 = t2.constant(&[d], tape.value(query)).unwrap();
        let k2 = t2.constant(&[n, d], kp).unwrap();
        let v2 = t2.constant(&[n, d], vp).unwrap();
        let permuted = t2.value(xlinear_attend(&t2, k2, v2, q2, &params).unwrap());
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() <= 1e-12, "permutation moved the output: {a} vs {b}");
        }
        checked += 1;
    }
    pass(2, "attention invariants", &format!("{checked} random instances"));
}

// ════════════════════════════════════════════════════════════════════════
// criterion 3: metric oracle equivalence
// ════════════════════════════════════════════════════════════════════════

mod oracle {
    //! Brute-force metric implementations: plain position loops and direct
    //! formula evaluation, no shared code with the library paths.

    use super::porter_stem;

    fn count_occurrences(tokens: &[String], gram: &[String]) -> usize {
        if gram.is_empty() || tokens.len() < gram.len() {
            return 0;
        }
        let mut count = 0;
        for start in 0..=tokens.len() - gram.len() {
            if &tokens[start..start + gram.len()] == gram {
                count += 1;
            }
        }
        count
    }

    fn distinct_ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = Vec::new();
        if tokens.len() >= n {
            for start in 0..=tokens.len() - n {
                let gram = tokens[start..start + n].to_vec();
                if !out.contains(&gram) {
                    out.push(gram);
                }
            }
        }
        out
    }

    pub fn bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_k: usize) -> Vec<f64> {
        let mut clipped = vec![0usize; max_k];
        let mut totals = vec![0usize; max_k];
        let mut cand_len = 0usize;
        let mut ref_len = 0usize;
        for (cand, refs) in pairs {
            cand_len += cand.len();
            // closest reference length, ties to the shorter
            let mut best: Option<usize> = None;
            for r in refs {
                let better = match best {
                    None => true,
                    Some(b) => {
                        let db = (b as i64 - cand.len() as i64).abs();
                        let dr = (r.len() as i64 - cand.len() as i64).abs();
                        dr < db || (dr == db && r.len() < b)
                    }
                };
                if better {
                    best = Some(r.len());
                }
            }
            ref_len += best.unwrap_or(0);
            for n in 1..=max_k {
                for gram in distinct_ngrams(cand, n) {
                    let c = count_occurrences(cand, &gram);
                    let mut best_ref = 0;
                    for r in refs {
                        best_ref = best_ref.max(count_occurrences(r, &gram));
                    }
                    clipped[n - 1] += c.min(best_ref);
                }
                totals[n - 1] += cand.len().saturating_sub(n - 1);
            }
        }
        if cand_len == 0 {
            return vec![0.0; max_k];
        }
        let bp = if cand_len >= ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / cand_len as f64).exp()
        };
        (1..=max_k)
            .map(|k| {
                let mut product = 1.0f64;
                for n in 1..=k {
                    if totals[n - 1] == 0 || clipped[n - 1] == 0 {
                        return 0.0;
                    }
                    product *= clipped[n - 1] as f64 / totals[n - 1] as f64;
                }
                bp * product.powf(1.0 / k as f64)
            })
            .collect()
    }

    fn lcs_recursive(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<i64>>) -> usize {
        if i == 0 || j == 0 {
            return 0;
        }
        if memo[i][j] >= 0 {
            return memo[i][j] as usize;
        }
        let r = if a[i - 1] == b[j - 1] {
            1 + lcs_recursive(a, b, i - 1, j - 1, memo)
        } else {
            lcs_recursive(a, b, i - 1, j, memo).max(lcs_recursive(a, b, i, j - 1, memo))
        };
        memo[i][j] = r as i64;
        r
    }

    pub fn rouge_l(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
        let beta2 = 1.2f64 * 1.2;
        let mut total = 0.0;
        for (cand, refs) in pairs {
            let mut best = 0.0f64;
            for r in refs {
                let mut memo = vec![vec![-1i64; r.len() + 1]; cand.len() + 1];
                let l = lcs_recursive(cand, r, cand.len(), r.len(), &mut memo) as f64;
                if l > 0.0 {
                    let rec = l / r.len() as f64;
                    let prec = l / cand.len() as f64;
                    best = best.max((1.0 + beta2) * rec * prec / (rec + beta2 * prec));
                }
            }
            total += best;
        }
        total / pairs.len() as f64
    }

    /// Exhaustive METEOR alignment search: every candidate position is
    /// either unmatched, exact-matched, or stem-matched (different word,
    /// same stem) to a free reference position. Stage semantics are applied
    /// by lexicographic maximization: most exact pairs first, then most
    /// total pairs, then fewest chunks.
    fn alignments(
        cand: &[String],
        refs: &[String],
        cand_stems: &[String],
        ref_stems: &[String],
        pos: usize,
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize, bool)>,
        best: &mut (usize, usize, usize), // (exact, total, min chunks), lexicographic
    ) {
        if pos == cand.len() {
            let exact = pairs.iter().filter(|p| p.2).count();
            let total = pairs.len();
            let chunks = {
                let mut sorted = pairs.clone();
                sorted.sort();
                let mut c = 0;
                let mut prev: Option<(usize, usize)> = None;
                for &(i, j, _) in &sorted {
                    if !matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j) {
                        c += 1;
                    }
                    prev = Some((i, j));
                }
                c
            };
            let candidate = (exact, total, chunks);
            let better = candidate.0 > best.0
                || (candidate.0 == best.0 && candidate.1 > best.1)
                || (candidate.0 == best.0 && candidate.1 == best.1 && candidate.2 < best.2);
            if better {
                *best = candidate;
            }
            return;
        }
        alignments(cand, refs, cand_stems, ref_stems, pos + 1, used, pairs, best);
        for j in 0..refs.len() {
            if used[j] {
                continue;
            }
            let exact = refs[j] == cand[pos];
            let stem_ok = !exact && ref_stems[j] == cand_stems[pos];
            if exact || stem_ok {
                used[j] = true;
                pairs.push((pos, j, exact));
                alignments(cand, refs, cand_stems, ref_stems, pos + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }

    pub fn meteor(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
        let mut total = 0.0;
        for (cand, refs) in pairs {
            let cand_stems: Vec<String> = cand.iter().map(|t| porter_stem(t)).collect();
            let mut best_score = 0.0f64;
            for r in refs {
                if r.is_empty() || cand.is_empty() {
                    continue;
                }
                let ref_stems: Vec<String> = r.iter().map(|t| porter_stem(t)).collect();
                let mut used = vec![false; r.len()];
                let mut stack = Vec::new();
                let mut best = (0usize, 0usize, usize::MAX);
                alignments(cand, r, &cand_stems, &ref_stems, 0, &mut used, &mut stack, &mut best);
                let m = best.1 as f64;
                if m == 0.0 {
                    continue;
                }
                let p = m / cand.len() as f64;
                let rec = m / r.len() as f64;
                let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
                let penalty = 0.5 * (best.2 as f64 / m).powi(3);
                best_score = best_score.max(f_mean * (1.0 - penalty));
            }
            total += best_score;
        }
        total / pairs.len() as f64
    }

    pub fn cider(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
        let num_images = pairs.len() as f64;
        let mut total = 0.0;
        for (cand, refs) in pairs {
            let mut per_n_sum = 0.0;
            for n in 1..=4usize {
                let cand_grams = distinct_ngrams(cand, n);
                let mut ref_sum = 0.0;
                for r in refs {
                    // document frequency over every image's reference set
                    let idf = |gram: &[String]| -> f64 {
                        let mut df = 0usize;
                        for (_, other_refs) in pairs {
                            if other_refs.iter().any(|o| count_occurrences(o, gram) > 0) {
                                df += 1;
                            }
                        }
                        (num_images / df.max(1) as f64).ln()
                    };
                    let mut dot = 0.0;
                    for gram in &cand_grams {
                        let c = count_occurrences(cand, gram);
                        let rc = count_occurrences(r, gram);
                        if rc > 0 {
                            let w = idf(gram);
                            dot += (c.min(rc) as f64 * w) * (rc as f64 * w);
                        }
                    }
                    let mut cnorm = 0.0;
                    for gram in &cand_grams {
                        let w = count_occurrences(cand, gram) as f64 * idf(gram);
                        cnorm += w * w;
                    }
                    let mut rnorm = 0.0;
                    for gram in distinct_ngrams(r, n) {
                        let w = count_occurrences(r, &gram) as f64 * idf(&gram);
                        rnorm += w * w;
                    }
                    if cnorm > 0.0 && rnorm > 0.0 {
                        let delta = cand.len() as f64 - r.len() as f64;
                        let penalty = (-delta * delta / 72.0).exp();
                        ref_sum += penalty * dot / (cnorm.sqrt() * rnorm.sqrt());
                    }
                }
                per_n_sum += ref_sum / refs.len() as f64;
            }
            total += 10.0 * per_n_sum / 4.0;
        }
        total / pairs.len() as f64
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

#[test]
fn criterion_03_metric_oracle_equivalence() {
    // hand-computed anchors
    let brevity = vec![EvalPair::new(
        "img",
        toks("the cat sat"),
        vec![toks("the cat sat on the mat")],
    )];
    let b = bleu(&brevity, 4).unwrap();
    assert!((b[0] - 0.367879).abs() < 1e-6, "BLEU-1 anchor: {}", b[0]);

    let lcs = vec![EvalPair::new(
        "img",
        toks("the cat sat"),
        vec![toks("the cat sat down")],
    )];
    let r = rouge_l(&lcs).unwrap();
    assert!((r - 0.835616).abs() < 1e-6, "ROUGE-L anchor: {r}");

    let single = vec![EvalPair::new("img", toks("a b c"), vec![toks("a b c")])];
    let c = cider(&single).unwrap();
    assert!(c.abs() < 1e-12, "single-image CIDEr anchor: {c}");

    // 50 random corpora against the brute-force oracles
    let alphabet = [
        "scan", "scans", "scanned", "mass", "masses", "find", "finding", "findings", "left", ".",
    ];
    let mut rng = RngState::new(515);
    for corpus in 0..50 {
        let n_pairs = 1 + rng.below(5);
        let mut pairs = Vec::new();
        let mut raw = Vec::new();
        for p in 0..n_pairs {
            let cand: Vec<String> = (0..1 + rng.below(8))
                .map(|_| alphabet[rng.below(alphabet.len())].to_string())
                .collect();
            let n_refs = 1 + rng.below(2);
            let refs: Vec<Vec<String>> = (0..n_refs)
                .map(|_| {
                    (0..1 + rng.below(8))
                        .map(|_| alphabet[rng.below(alphabet.len())].to_string())
                        .collect()
                })
                .collect();
            pairs.push(EvalPair::new(&format!("img{p}"), cand.clone(), refs.clone()));
            raw.push((cand, refs));
        }

        let got_bleu = bleu(&pairs, 4).unwrap();
        let want_bleu = oracle::bleu(&raw, 4);
        for k in 0..4 {
            assert!(
                (got_bleu[k] - want_bleu[k]).abs() < 1e-6,
                "corpus {corpus} BLEU-{}: {} vs oracle {}",
                k + 1,
                got_bleu[k],
                want_bleu[k]
            );
        }
        let got = rouge_l(&pairs).unwrap();
        let want = oracle::rouge_l(&raw);
        assert!((got - want).abs() < 1e-6, "corpus {corpus} ROUGE-L: {got} vs {want}");

        let got = meteor_lite(&pairs).unwrap();
        let want = oracle::meteor(&raw);
        assert!((got - want).abs() < 1e-6, "corpus {corpus} METEOR: {got} vs {want}");

        let got = cider(&pairs).unwrap();
        let want = oracle::cider(&raw);
        assert!((got - want).abs() < 1e-6, "corpus {corpus} CIDEr: {got} vs {want}");
    }
    pass(3, "metric oracle equivalence", "50 random corpora + 3 anchors, 1e-6");
}

// ════════════════════════════════════════════════════════════════════════
// criterion 4: repetition penalty
// ════════════════════════════════════════════════════════════════════════

#[derive(Clone)]
struct TableScorer {
    rows: Vec<Vec<f64>>,
}

impl NextTokenScorer for TableScorer {
    type State = ();
    fn vocab_size(&self) -> usize {
        self.rows.len()
    }
    fn initial_state(&self) {}
    fn step(&self, _: &(), prev: usize) -> ((), Vec<f64>) {
        ((), self.rows[prev].clone())
    }
}

fn rigged_loop(gap: f64) -> TableScorer {
    let vocab = 6;
    let mut rows = vec![vec![-30.0; vocab]; vocab];
    let next = |tok: usize| match tok {
        3 => 4,
        4 => 5,
        _ => 3,
    };
    for prev in 0..vocab {
        rows[prev][next(prev)] = gap;
        rows[prev][EOS_ID] = 0.0;
    }
    TableScorer {
        rows: rows.iter().map(|r| log_softmax(r)).collect(),
    }
}

fn has_repeated_trigram(tokens: &[usize]) -> bool {
    if tokens.len() < 3 {
        return false;
    }
    let grams: Vec<&[usize]> = tokens.windows(3).collect();
    (0..grams.len()).any(|i| (i + 1..grams.len()).any(|j| grams[i] == grams[j]))
}

#[test]
fn criterion_04_repetition_penalty() {
    // exact formula on a constructed prefix, alpha = 2
    let prefix = vec![3, 4, 5, 3, 4, 5, 3, 4];
    let logprobs = vec![-1.0; 6];
    let adjusted = repetition_penalty_adjust(&logprobs, &prefix, 2.0).unwrap();
    assert_eq!(adjusted[5], -5.0); // n = 2 completed trigrams
    assert_eq!(adjusted[3], -1.0);

    // alpha = 0 is bitwise identity on decodes
    let scorer = rigged_loop(1.5);
    let zero_a = greedy_decode(
        &scorer,
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_len: 10,
            alpha: 0.0,
            seed: 0,
        },
    )
    .unwrap();
    let zero_b = greedy_decode(
        &scorer,
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_len: 10,
            alpha: 0.0,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(zero_a.tokens, zero_b.tokens);
    assert_eq!(zero_a.logprob, zero_b.logprob);
    assert_eq!(zero_a.tokens.len(), 10); // unpenalized greedy loops to max_len
    assert!(has_repeated_trigram(&zero_a.tokens));

    // alpha = 2 above the rigged gap escapes with zero repeated trigrams
    let escaped = greedy_decode(
        &scorer,
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_len: 40,
            alpha: 2.0,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(escaped.tokens, vec![3, 4, 5, 3, 4, EOS_ID]);
    assert!(!has_repeated_trigram(&escaped.tokens));
    pass(4, "repetition penalty", "formula exact, alpha 0 identity, loop escape");
}

// ════════════════════════════════════════════════════════════════════════
// criterion 5: search correctness
// ════════════════════════════════════════════════════════════════════════

fn enumerate_best(scorer: &TableScorer, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    fn recurse(
        scorer: &TableScorer,
        cfg: &DecodeConfig,
        prev: usize,
        tokens: &mut Vec<usize>,
        score: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let consider = |tokens: &Vec<usize>, score: f64, best: &mut Option<(Vec<usize>, f64)>| {
            let better = match best {
                None => true,
                Some((bt, bs)) => {
                    score > *bs
                        || (score == *bs
                            && (tokens.len() < bt.len()
                                || (tokens.len() == bt.len() && tokens < bt)))
                }
            };
            if better {
                *best = Some((tokens.clone(), score));
            }
        };
        if tokens.len() == cfg.max_len {
            consider(tokens, score, best);
            return;
        }
        let (_, logprobs) = scorer.step(&(), prev);
        let adjusted = repetition_penalty_adjust(&logprobs, tokens, cfg.alpha).unwrap();
        for (w, &lp) in adjusted.iter().enumerate() {
            tokens.push(w);
            if w == EOS_ID {
                consider(tokens, score + lp, best);
            } else {
                recurse(scorer, cfg, w, tokens, score + lp, best);
            }
            tokens.pop();
        }
    }
    let mut best = None;
    let mut tokens = Vec::new();
    recurse(scorer, cfg, remrg_core::corpus::BOS_ID, &mut tokens, 0.0, &mut best);
    best.unwrap()
}

fn lookahead_toys() -> Vec<TableScorer> {
    let from_logits = |rows: Vec<Vec<f64>>| TableScorer {
        rows: rows.iter().map(|r| log_softmax(r)).collect(),
    };
    let mut toys = Vec::new();

    let mut rows = vec![vec![-30.0; 6]; 6];
    rows[1] = vec![-30.0, -30.0, (0.05f64).ln(), (0.5f64).ln(), (0.4f64).ln(), -30.0];
    rows[3] = vec![-30.0, -30.0, (0.2f64).ln(), -30.0, -30.0, (0.4f64).ln()];
    rows[4] = vec![-30.0, -30.0, (0.9f64).ln(), (0.05f64).ln(), -30.0, -30.0];
    rows[5] = vec![-30.0, -30.0, (0.3f64).ln(), -30.0, (0.2f64).ln(), -30.0];
    toys.push(from_logits(rows));

    let mut rows = vec![vec![-30.0; 6]; 6];
    rows[1] = vec![-30.0, -30.0, 2.0, 1.0, 0.5, -30.0];
    rows[3] = vec![-30.0, -30.0, 0.0, -1.0, -1.0, -1.0];
    rows[4] = vec![-30.0, -30.0, 0.0, -1.0, -1.0, -1.0];
    toys.push(from_logits(rows));

    let mut rows = vec![vec![-30.0; 6]; 6];
    rows[1] = vec![-30.0, -30.0, -8.0, -30.0, -0.60, -0.80];
    rows[4] = vec![-30.0, -30.0, -1.4, -30.0, -30.0, -1.0];
    rows[5] = vec![-30.0, -30.0, -3.0, -30.0, -0.10, -30.0];
    toys.push(from_logits(rows));
    toys
}

#[test]
fn criterion_05_search_correctness() {
    // beam of one equals greedy on 100 random toy models
    let mut rng = RngState::new(55);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| log_softmax(&(0..6).map(|_| rng.uniform(-3.0, 3.0)).collect::<Vec<_>>()))
            .collect();
        let scorer = TableScorer { rows };
        let cfg = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 1,
            max_len: 7,
            alpha: 2.0,
            seed: 0,
        };
        let b = beam_decode(&scorer, &cfg).unwrap();
        let g = greedy_decode(&scorer, &cfg).unwrap();
        assert_eq!(b.tokens, g.tokens);
    }

    // beam of two recovers the enumeration argmax on the lookahead toys
    for (i, scorer) in lookahead_toys().iter().enumerate() {
        let cfg = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 2,
            max_len: 3,
            alpha: 2.0,
            seed: 0,
        };
        let beam = beam_decode(scorer, &cfg).unwrap();
        let (best_tokens, best_score) = enumerate_best(scorer, &cfg);
        assert_eq!(beam.tokens, best_tokens, "toy {i}");
        assert!((beam.logprob - best_score).abs() < 1e-12, "toy {i}");
    }
    pass(5, "search correctness", "beam1==greedy x100, beam2==enumeration on toys");
}

// ════════════════════════════════════════════════════════════════════════
// criterion 6: schedule formulas
// ════════════════════════════════════════════════════════════════════════

#[test]
fn criterion_06_schedule_formulas() {
    use remrg_core::training::{cosine_annealing_lr, noam_lr, plateau_lr, ScheduleConfig, ScheduleKind};

    let noam = ScheduleConfig::pretrain_default();
    assert_eq!(noam.base_lr, 1e-4);
    assert_eq!(noam.warmup_steps, 10_000);
    assert!((noam_lr(10_000, &noam) - 1e-4).abs() < 1e-18, "peak anchor");
    let w = noam.warmup_steps as f64;
    for step in 1..=100_000usize {
        let s = step as f64;
        let expected = noam.base_lr * (s / w).min((w / s).sqrt());
        assert_eq!(noam_lr(step, &noam), expected, "noam step {step}");
    }

    let mut cosine = ScheduleConfig::rl_default();
    cosine.period_epochs = 10;
    assert!((cosine_annealing_lr(5, &cosine) - 5.02e-6).abs() < 1e-12, "midpoint anchor");
    for epoch in 0..=1000usize {
        let t = cosine.period_epochs as f64;
        let phase = (epoch % cosine.period_epochs) as f64 / t;
        let expected = cosine.min_lr
            + 0.5 * (cosine.base_lr - cosine.min_lr)
                * (1.0 + (std::f64::consts::PI * phase).cos());
        assert_eq!(cosine_annealing_lr(epoch, &cosine), expected, "cosine epoch {epoch}");
    }
    assert_eq!(cosine_annealing_lr(0, &cosine), cosine.base_lr);
    assert_eq!(cosine_annealing_lr(10, &cosine), cosine.base_lr); // warm restart

    let plateau = ScheduleConfig {
        kind: ScheduleKind::Plateau,
        ..ScheduleConfig::rl_default()
    };
    assert_eq!(plateau.plateau_factor, 0.8);
    assert_eq!(plateau.plateau_patience, 3);
    let flat = vec![0.5; 4];
    assert!((plateau_lr(&flat, &plateau, 1e-5) - 0.8e-5).abs() < 1e-18);
    let improving = vec![0.1, 0.2, 0.3, 0.4];
    assert_eq!(plateau_lr(&improving, &plateau, 1e-5), 1e-5);
    let two = vec![0.5; 7];
    assert!((plateau_lr(&two, &plateau, 1e-5) - 0.64e-5).abs() < 1e-18);
    pass(6, "schedule formulas", "noam 1..1e5 pointwise, cosine 0..1000, plateau windows");
}

// ════════════════════════════════════════════════════════════════════════
// criterion 7: SCST mechanics
// ════════════════════════════════════════════════════════════════════════

#[test]
fn criterion_07_scst_mechanics() {
    let config = ModelConfig {
        d_model: 8,
        stack_levels: 1,
        vocab_size: 10,
        max_len: 12,
        feature_dim_in: 6,
        n_regions: 4,
    };
    let mut model = init_model(&config, 77).unwrap();
    let mut rng = RngState::new(78);
    let features = FeatureSet::new(
        "img0000",
        config.n_regions,
        config.feature_dim_in,
        (0..config.n_regions * config.feature_dim_in)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    );
    let tokens = vec![4, 7, 5, EOS_ID];

    // zero advantage: the full optimizer step changes no parameter
    let (loss, grads) = policy_gradient(&model, &features, &tokens, 0.0).unwrap();
    assert_eq!(loss, 0.0);
    let snapshot: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.clone()).collect();
    let mut adam = AdamState::new(&model);
    adam_step(&mut model, &grads, &mut adam, 1e-3).unwrap();
    for (p, snap) in model.params().iter().zip(snapshot.iter()) {
        assert_eq!(&p.values, snap, "zero advantage moved a parameter");
    }

    // positive advantage: one descent step on the loss raises the sampled
    // sequence's log-probability
    let before = {
        let tape = Tape::new();
        tape.scalar(sequence_logprob(&tape, &features, &tokens, &model).unwrap())
    };
    let advantage = 0.9;
    let (_, grads) = policy_gradient(&model, &features, &tokens, advantage).unwrap();
    let mut stepped = model.clone();
    for p in stepped.params_mut() {
        if let Some(g) = grads.get(p.id) {
            for (v, &gi) in p.values.iter_mut().zip(g.iter()) {
                *v -= 1e-3 * gi;
            }
        }
    }
    let after = {
        let tape = Tape::new();
        tape.scalar(sequence_logprob(&tape, &features, &tokens, &stepped).unwrap())
    };
    assert!(after > before, "ascent failed: {after} <= {before}");

    // gradients scale linearly with the advantage
    let (_, g1) = policy_gradient(&model, &features, &tokens, 0.3).unwrap();
    let (_, g2) = policy_gradient(&model, &features, &tokens, 0.6).unwrap();
    let mut checked = 0usize;
    for (id, g) in g1.iter() {
        let h = g2.get(id).unwrap();
        for (a, b) in g.iter().zip(h.iter()) {
            assert_eq!(2.0 * a, *b);
            checked += 1;
        }
    }
    assert!(checked > 1000);
    pass(7, "SCST mechanics", "zero-advantage identity, ascent, linear scaling");
}

// ════════════════════════════════════════════════════════════════════════
// criteria 8-10: scaled-down training pipeline (shared artifacts)
// ════════════════════════════════════════════════════════════════════════

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remrg"))
        .args(args)
        .env_remove("REMRG_SEED")
        .output()
        .expect("spawn remrg")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct PipelineArtifacts {
    data_dir: PathBuf,
    seeds: Vec<u64>,
    pretrain_ckpts: Vec<PathBuf>,
    untrained_bleu1: Vec<f64>,
    pretrain_bleu1: Vec<f64>,
    pretrain_cider: Vec<f64>,
    pretrain_elapsed: Duration,
    scst_cider: Vec<f64>,
    scst_elapsed: Duration,
}

fn metric_from_csv(dir: &Path, column: usize) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    row.split(',').nth(column).unwrap().parse().unwrap()
}

const CIDER_COL: usize = 0;
const BLEU1_COL: usize = 3;

fn evaluate_ckpt(ckpt: &Path, data: &Path, out: &Path) {
    let run = run_cli(&[
        "evaluate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--split",
        "test",
        "--mode",
        "greedy",
        "--alpha",
        "2",
    ]);
    assert_ok(&run, "evaluate");
}

fn scratch(name: &str) -> PathBuf {
    // per-process scratch so concurrent test invocations cannot collide
    std::env::temp_dir().join(format!("{}_{}", name, std::process::id()))
}

fn pipeline() -> &'static PipelineArtifacts {
    static ARTIFACTS: OnceLock<PipelineArtifacts> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let root = scratch("remrg_acceptance_pipeline");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();

        // the default synthetic task: 200 images, 16 regions, 32 dims
        let data_dir = root.join("data");
        let out = run_cli(&[
            "synth",
            "--out",
            data_dir.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_ok(&out, "synth");

        let seeds = vec![1u64, 2, 3];
        let mut pretrain_ckpts = Vec::new();
        let mut untrained_bleu1 = Vec::new();
        let mut pretrain_bleu1 = Vec::new();
        let mut pretrain_cider = Vec::new();

        let pretrain_started = Instant::now();
        for &seed in &seeds {
            let seed_s = seed.to_string();
            let untrained_dir = root.join(format!("untrained_s{seed}"));
            let out = run_cli(&[
                "train",
                "--data",
                data_dir.to_str().unwrap(),
                "--out",
                untrained_dir.to_str().unwrap(),
                "--seed",
                &seed_s,
                "--d-model",
                "48",
                "--stack-levels",
                "2",
                "--max-len",
                "48",
                "--epochs",
                "0",
            ]);
            assert_ok(&out, "train --epochs 0");

            let pre_dir = root.join(format!("pretrain_s{seed}"));
            let out = run_cli(&[
                "train",
                "--data",
                data_dir.to_str().unwrap(),
                "--out",
                pre_dir.to_str().unwrap(),
                "--seed",
                &seed_s,
                "--d-model",
                "48",
                "--stack-levels",
                "2",
                "--max-len",
                "48",
                "--epochs",
                "30",
                "--batch-size",
                "8",
                "--base-lr",
                "0.0003",
                "--warmup-steps",
                "100",
            ]);
            assert_ok(&out, "train");

            let e0 = root.join(format!("eval_untrained_s{seed}"));
            evaluate_ckpt(&untrained_dir.join("model.ckpt"), &data_dir, &e0);
            untrained_bleu1.push(metric_from_csv(&e0, BLEU1_COL));

            let e1 = root.join(format!("eval_pretrain_s{seed}"));
            evaluate_ckpt(&pre_dir.join("model.ckpt"), &data_dir, &e1);
            pretrain_bleu1.push(metric_from_csv(&e1, BLEU1_COL));
            pretrain_cider.push(metric_from_csv(&e1, CIDER_COL));
            pretrain_ckpts.push(pre_dir.join("model.ckpt"));
        }
        let pretrain_elapsed = pretrain_started.elapsed();

        let scst_started = Instant::now();
        let mut scst_cider = Vec::new();
        for (&seed, ckpt) in seeds.iter().zip(pretrain_ckpts.iter()) {
            let rl_dir = root.join(format!("scst_s{seed}"));
            let out = run_cli(&[
                "finetune",
                "--data",
                data_dir.to_str().unwrap(),
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--out",
                rl_dir.to_str().unwrap(),
                "--seed",
                &seed.to_string(),
                "--epochs",
                "15",
            ]);
            assert_ok(&out, "finetune");
            let e2 = root.join(format!("eval_scst_s{seed}"));
            evaluate_ckpt(&rl_dir.join("model.ckpt"), &data_dir, &e2);
            scst_cider.push(metric_from_csv(&e2, CIDER_COL));
        }
        let scst_elapsed = scst_started.elapsed();

        PipelineArtifacts {
            data_dir,
            seeds,
            pretrain_ckpts,
            untrained_bleu1,
            pretrain_bleu1,
            pretrain_cider,
            pretrain_elapsed,
            scst_cider,
            scst_elapsed,
        }
    })
}

#[test]
fn criterion_08_pretraining_lifts_bleu() {
    let art = pipeline();
    let mut winners = 0usize;
    for i in 0..art.seeds.len() {
        let lift = art.pretrain_bleu1[i] - art.untrained_bleu1[i];
        println!(
            "  seed {}: BLEU-1 untrained {:.4} -> trained {:.4} (lift {:+.4})",
            art.seeds[i], art.untrained_bleu1[i], art.pretrain_bleu1[i], lift
        );
        if lift >= 0.30 {
            winners += 1;
        }
    }
    assert!(
        winners >= 2,
        "only {winners} of {} seeds lifted BLEU-1 by 0.30",
        art.seeds.len()
    );
    assert!(
        art.pretrain_elapsed <= Duration::from_secs(600),
        "pretraining stage took {:?}, budget 10 minutes",
        art.pretrain_elapsed
    );
    pass(
        8,
        "pretraining lifts BLEU-1",
        &format!("{winners}/3 seeds >= +0.30 in {:?}", art.pretrain_elapsed),
    );
}

#[test]
fn criterion_09_scst_raises_cider() {
    let art = pipeline();
    let mut winners = 0usize;
    for i in 0..art.seeds.len() {
        println!(
            "  seed {}: CIDEr pretrain {:.4} -> SCST {:.4}",
            art.seeds[i], art.pretrain_cider[i], art.scst_cider[i]
        );
        if art.scst_cider[i] > art.pretrain_cider[i] {
            winners += 1;
        }
    }
    assert!(
        winners >= 2,
        "only {winners} of {} seeds strictly increased test CIDEr",
        art.seeds.len()
    );
    assert!(
        art.scst_elapsed <= Duration::from_secs(900),
        "SCST stage took {:?}, budget 15 minutes",
        art.scst_elapsed
    );
    pass(
        9,
        "SCST raises CIDEr",
        &format!("{winners}/3 seeds strictly up in {:?}", art.scst_elapsed),
    );
}

#[test]
fn criterion_10_schedule_study() {
    let art = pipeline();
    let root = scratch("remrg_acceptance_study");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();

    let ckpt = &art.pretrain_ckpts[0];
    let mut finals = BTreeMap::new();
    for arm in ["cosine", "plateau"] {
        let out_dir = root.join(arm);
        let out = run_cli(&[
            "finetune",
            "--data",
            art.data_dir.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "1",
            "--epochs",
            "8",
            "--schedule",
            arm,
        ]);
        assert_ok(&out, arm);
        let curve = fs::read_to_string(out_dir.join("rl_curve.csv")).unwrap();
        let mut lines = curve.lines();
        assert_eq!(lines.next(), Some("epoch,lr,r_greedy,r_sample"));
        assert_eq!(lines.count(), 8);

        let eval_dir = root.join(format!("eval_{arm}"));
        evaluate_ckpt(&out_dir.join("model.ckpt"), &art.data_dir, &eval_dir);
        finals.insert(arm.to_string(), metric_from_csv(&eval_dir, CIDER_COL));
    }

    // comparison artifact: final CIDEr per arm plus the observed direction
    let cosine = finals["cosine"];
    let plateau = finals["plateau"];
    let direction = if cosine >= plateau {
        "cosine >= plateau"
    } else {
        "cosine < plateau (direction is seed-sensitive at this scale)"
    };
    let artifact = format!(
        "arm,final_test_cider\ncosine,{}\nplateau,{}\n# {}\n",
        cosine, plateau, direction
    );
    fs::write(root.join("schedule_study.csv"), &artifact).unwrap();
    println!("  cosine final CIDEr {cosine:.4}, plateau final CIDEr {plateau:.4}: {direction}");
    pass(10, "schedule study", direction);
}

// ════════════════════════════════════════════════════════════════════════
// criterion 11: reproducibility
// ════════════════════════════════════════════════════════════════════════

#[test]
fn criterion_11_reproducibility() {
    let root = scratch("remrg_acceptance_repro");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();

    let tree = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != "run_config.txt") {
                    files.push((
                        path.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                        fs::read(&path).unwrap(),
                    ));
                }
            }
        }
        files.sort();
        files
    };

    let run_all = |tag: &str| -> (PathBuf, PathBuf, PathBuf, PathBuf, Vec<u8>) {
        let data = root.join(format!("data_{tag}"));
        assert_ok(
            &run_cli(&[
                "synth",
                "--out",
                data.to_str().unwrap(),
                "--seed",
                "5",
                "--images",
                "12",
                "--min-count",
                "1",
            ]),
            "synth",
        );
        let pre = root.join(format!("pre_{tag}"));
        assert_ok(
            &run_cli(&[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                pre.to_str().unwrap(),
                "--seed",
                "5",
                "--d-model",
                "16",
                "--stack-levels",
                "1",
                "--max-len",
                "48",
                "--epochs",
                "2",
                "--batch-size",
                "4",
                "--warmup-steps",
                "20",
            ]),
            "train",
        );
        let rl = root.join(format!("rl_{tag}"));
        assert_ok(
            &run_cli(&[
                "finetune",
                "--data",
                data.to_str().unwrap(),
                "--ckpt",
                pre.join("model.ckpt").to_str().unwrap(),
                "--out",
                rl.to_str().unwrap(),
                "--seed",
                "5",
                "--epochs",
                "1",
            ]),
            "finetune",
        );
        let ev = root.join(format!("eval_{tag}"));
        assert_ok(
            &run_cli(&[
                "evaluate",
                "--ckpt",
                rl.join("model.ckpt").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                ev.to_str().unwrap(),
                "--split",
                "test",
                "--seed",
                "5",
            ]),
            "evaluate",
        );
        let feat = fs::read_dir(data.join("features"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .min()
            .unwrap();
        let gen = run_cli(&[
            "generate",
            "--ckpt",
            rl.join("model.ckpt").to_str().unwrap(),
            "--features",
            feat.to_str().unwrap(),
            "--vocab",
            data.join("vocab.txt").to_str().unwrap(),
            "--mode",
            "sample",
            "--seed",
            "5",
        ]);
        assert_ok(&gen, "generate");
        (data, pre, rl, ev, gen.stdout)
    };

    let (data_a, pre_a, rl_a, ev_a, gen_a) = run_all("a");
    let (data_b, pre_b, rl_b, ev_b, gen_b) = run_all("b");

    assert_eq!(tree(&data_a), tree(&data_b), "synth output differs");
    assert_eq!(
        fs::read(pre_a.join("model.ckpt")).unwrap(),
        fs::read(pre_b.join("model.ckpt")).unwrap(),
        "pretrain checkpoint differs"
    );
    assert_eq!(
        fs::read(pre_a.join("pretrain_curve.csv")).unwrap(),
        fs::read(pre_b.join("pretrain_curve.csv")).unwrap()
    );
    assert_eq!(
        fs::read(rl_a.join("model.ckpt")).unwrap(),
        fs::read(rl_b.join("model.ckpt")).unwrap(),
        "finetune checkpoint differs"
    );
    assert_eq!(
        fs::read(rl_a.join("rl_curve.csv")).unwrap(),
        fs::read(rl_b.join("rl_curve.csv")).unwrap()
    );
    assert_eq!(
        fs::read(ev_a.join("hypotheses.txt")).unwrap(),
        fs::read(ev_b.join("hypotheses.txt")).unwrap()
    );
    assert_eq!(
        fs::read(ev_a.join("metrics.csv")).unwrap(),
        fs::read(ev_b.join("metrics.csv")).unwrap()
    );
    assert_eq!(gen_a, gen_b, "generate stdout differs");
    pass(11, "reproducibility", "synth/train/finetune/evaluate/generate byte-identical");
}

// a tiny usage of sample_decode so the import list stays honest
#[test]
fn sampling_is_seed_reproducible_over_the_library_surface() {
    let scorer = rigged_loop(1.0);
    let cfg = DecodeConfig {
        mode: DecodeMode::Sample,
        beam_size: 1,
        max_len: 6,
        alpha: 0.0,
        seed: 0,
    };
    let a = sample_decode(&scorer, &cfg, &mut RngState::new(3)).unwrap();
    let b = sample_decode(&scorer, &cfg, &mut RngState::new(3)).unwrap();
    assert_eq!(a.tokens, b.tokens);
}
