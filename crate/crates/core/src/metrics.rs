//! Translation quality metrics: BLEU and chrF, sentence- and corpus-level.
//!
//! Both metrics return scores in `[0, 1]` and operate on plain detokenized
//! text with a single reference. Corpus scores aggregate match statistics
//! over the whole corpus before computing precisions — they are not a mean
//! of sentence scores. BLEU uses up-to-4-gram precision with exponential
//! smoothing for zero counts (the first zeroed order halves the count floor,
//! the next halves it again), an effective order capped by hypothesis length,
//! and the usual brevity penalty. chrF uses character n-grams up to 6 with
//! whitespace removed and averages F2 over the orders present.

use std::collections::HashMap;

use crate::{Error, Result};

pub const BLEU_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Clipped n-gram match statistics for one hypothesis/reference pair.
#[derive(Debug, Clone, Default)]
pub struct BleuStats {
    pub correct: [u64; BLEU_ORDER],
    pub total: [u64; BLEU_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn accumulate(&mut self, other: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn word_ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Match statistics between one hypothesis and one reference.
pub fn bleu_stats(hyp: &str, reference: &str) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut stats = BleuStats {
        hyp_len: h.len() as u64,
        ref_len: r.len() as u64,
        ..BleuStats::default()
    };
    for n in 1..=BLEU_ORDER {
        let hyp_counts = word_ngram_counts(&h, n);
        let ref_counts = word_ngram_counts(&r, n);
        let mut correct = 0;
        let mut total = 0;
        for (gram, c) in hyp_counts {
            total += c;
            correct += c.min(ref_counts.get(&gram).copied().unwrap_or(0));
        }
        stats.correct[n - 1] = correct;
        stats.total[n - 1] = total;
    }
    stats
}

/// Turns aggregated statistics into a score.
///
/// Orders with no hypothesis n-grams at all are excluded (effective order);
/// among included orders, a zero match count is smoothed to
/// `1 / (2^k * total)` where `k` counts the zeroed orders seen so far.
pub fn bleu_from_stats(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut smooth = 1.0f64;
    for n in 0..BLEU_ORDER {
        if stats.total[n] == 0 {
            continue;
        }
        let p = if stats.correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * stats.total[n] as f64)
        } else {
            stats.correct[n] as f64 / stats.total[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

pub fn sentence_bleu(hyp: &str, reference: &str) -> f64 {
    bleu_from_stats(&bleu_stats(hyp, reference))
}

pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "corpus_bleu got {} hypotheses and {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("corpus_bleu on an empty corpus"));
    }
    let mut agg = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        agg.accumulate(&bleu_stats(h.as_ref(), r.as_ref()));
    }
    Ok(bleu_from_stats(&agg))
}

/// Character n-gram statistics for chrF.
#[derive(Debug, Clone, Default)]
pub struct ChrfStats {
    pub matched: [u64; CHRF_ORDER],
    pub hyp_total: [u64; CHRF_ORDER],
    pub ref_total: [u64; CHRF_ORDER],
}

impl ChrfStats {
    pub fn accumulate(&mut self, other: &ChrfStats) {
        for n in 0..CHRF_ORDER {
            self.matched[n] += other.matched[n];
            self.hyp_total[n] += other.hyp_total[n];
            self.ref_total[n] += other.ref_total[n];
        }
    }
}

fn char_ngram_counts(chars: &[char], n: usize) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn chrf_stats(hyp: &str, reference: &str) -> ChrfStats {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut stats = ChrfStats::default();
    for n in 1..=CHRF_ORDER {
        let hyp_counts = char_ngram_counts(&h, n);
        let ref_counts = char_ngram_counts(&r, n);
        let mut matched = 0;
        let mut hyp_total = 0;
        for (gram, c) in &hyp_counts {
            hyp_total += c;
            matched += c.min(ref_counts.get(gram).unwrap_or(&0));
        }
        stats.matched[n - 1] = matched;
        stats.hyp_total[n - 1] = hyp_total;
        stats.ref_total[n - 1] = ref_counts.values().sum();
    }
    stats
}

/// Average F-beta over the orders where either side has n-grams.
pub fn chrf_from_stats(stats: &ChrfStats) -> f64 {
    let beta2 = CHRF_BETA * CHRF_BETA;
    let mut f_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..CHRF_ORDER {
        if stats.hyp_total[n] == 0 && stats.ref_total[n] == 0 {
            continue;
        }
        orders += 1;
        if stats.hyp_total[n] == 0 || stats.ref_total[n] == 0 {
            continue; // F stays 0 for this order
        }
        let p = stats.matched[n] as f64 / stats.hyp_total[n] as f64;
        let r = stats.matched[n] as f64 / stats.ref_total[n] as f64;
        if p + r > 0.0 {
            f_sum += (1.0 + beta2) * p * r / (beta2 * p + r);
        }
    }
    if orders == 0 {
        0.0
    } else {
        f_sum / orders as f64
    }
}

pub fn sentence_chrf(hyp: &str, reference: &str) -> f64 {
    chrf_from_stats(&chrf_stats(hyp, reference))
}

pub fn corpus_chrf<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "corpus_chrf got {} hypotheses and {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("corpus_chrf on an empty corpus"));
    }
    let mut agg = ChrfStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        agg.accumulate(&chrf_stats(h.as_ref(), r.as_ref()));
    }
    Ok(chrf_from_stats(&agg))
}

/// A registered metric: sentence scorer for sampling-time rewards and
/// corpus scorer for evaluation reports. Both score detokenized text.
#[derive(Debug, Clone, Copy)]
pub struct Metric {
    pub name: &'static str,
    pub sentence: fn(&str, &str) -> f64,
    pub corpus: fn(&[String], &[String]) -> Result<f64>,
}

const REGISTRY: [Metric; 2] = [
    Metric {
        name: "bleu",
        sentence: sentence_bleu,
        corpus: corpus_bleu::<String>,
    },
    Metric {
        name: "chrf",
        sentence: sentence_chrf,
        corpus: corpus_chrf::<String>,
    },
];

/// Looks a metric up by registry key ("bleu", "chrf").
pub fn metric_by_name(name: &str) -> Result<Metric> {
    REGISTRY
        .iter()
        .find(|m| m.name == name)
        .copied()
        .ok_or_else(|| {
            let known: Vec<&str> = REGISTRY.iter().map(|m| m.name).collect();
            Error::contract(format!(
                "unknown metric {name:?}; registered metrics: {known:?}"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::assert_close;

    // ---- independent oracle implementations, used only by tests ----

    /// Naive word n-gram lister; quadratic matching, no hash maps.
    fn oracle_ngrams(tokens: &[&str], n: usize) -> Vec<String> {
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n)
            .map(|i| tokens[i..i + n].join(" "))
            .collect()
    }

    fn oracle_clipped_matches(hyp: &[String], reference: &[String]) -> u64 {
        let mut remaining = reference.to_vec();
        let mut matched = 0;
        for g in hyp {
            if let Some(pos) = remaining.iter().position(|r| r == g) {
                remaining.swap_remove(pos);
                matched += 1;
            }
        }
        matched
    }

    /// Oracle BLEU over a corpus, aggregated-counts formulation, written
    /// independently of the library implementation.
    fn oracle_corpus_bleu(pairs: &[(&str, &str)]) -> f64 {
        let mut correct = [0u64; 4];
        let mut total = [0u64; 4];
        let (mut hlen, mut rlen) = (0u64, 0u64);
        for (h, r) in pairs {
            let ht: Vec<&str> = h.split_whitespace().collect();
            let rt: Vec<&str> = r.split_whitespace().collect();
            hlen += ht.len() as u64;
            rlen += rt.len() as u64;
            for n in 1..=4 {
                let hg = oracle_ngrams(&ht, n);
                let rg = oracle_ngrams(&rt, n);
                total[n - 1] += hg.len() as u64;
                correct[n - 1] += oracle_clipped_matches(&hg, &rg);
            }
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        let mut smooth = 1.0;
        for n in 0..4 {
            if total[n] == 0 {
                continue;
            }
            let p = if correct[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * total[n] as f64)
            } else {
                correct[n] as f64 / total[n] as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        let prec = (log_sum / orders as f64).exp();
        let bp = if hlen < rlen {
            (1.0 - rlen as f64 / hlen as f64).exp()
        } else {
            1.0
        };
        prec * bp
    }

    // ---- BLEU ----

    #[test]
    fn perfect_match_scores_one() {
        assert_close(sentence_bleu("a b c d e", "a b c d e"), 1.0, 1e-12);
    }

    #[test]
    fn all_precisions_one_with_short_hyp_is_pure_brevity_penalty() {
        // hyp is a strict prefix: every n-gram matches, so the score is
        // exactly exp(1 - 5/4).
        let got = sentence_bleu("a b c d", "a b c d e");
        assert_close(got, (-0.25f64).exp(), 1e-12);
        assert_close(got, 0.7788007830714049, 1e-12);
    }

    #[test]
    fn disjoint_unigrams_score_near_zero() {
        let hyp = "a b c d e f g h i j";
        let r = "k l m n o p q r s t";
        let s = sentence_bleu(hyp, r);
        assert!(s < 0.05, "disjoint sentences scored {s}");
        assert!(s > 0.0, "smoothing must keep the score positive");
    }

    #[test]
    fn effective_order_caps_at_hypothesis_length() {
        // Two-token hypothesis: only orders 1-2 participate. p1 = 1/2,
        // p2 = 0 -> smoothed to 1/2; geometric mean 0.5, BP = 1.
        assert_close(sentence_bleu("x y", "x z"), 0.5, 1e-12);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        assert_close(sentence_bleu("", "a b"), 0.0, 1e-12);
    }

    #[test]
    fn corpus_bleu_aggregates_counts_not_sentence_scores() {
        let pairs = [("a b c d", "a b c d e"), ("x y", "x z")];
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.to_string()).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.to_string()).collect();
        let got = corpus_bleu(&hyps, &refs).unwrap();

        // Against the independent oracle implementation, to 1e-9.
        let expect = oracle_corpus_bleu(&pairs);
        assert_close(got, expect, 1e-9);

        // Hand-worked: p = (5/6, 3/4, 2/2, 1/1), no smoothing needed,
        // BP = exp(1 - 7/6). Regression-pinned value.
        let hand = (0.625f64).powf(0.25) * (1.0 - 7.0 / 6.0f64).exp();
        assert_close(got, hand, 1e-12);
        assert_close(got, 0.7526405111736054, 1e-9);

        // And it differs from the mean of sentence scores.
        let mean = (sentence_bleu(pairs[0].0, pairs[0].1) + sentence_bleu(pairs[1].0, pairs[1].1)) / 2.0;
        assert!((got - mean).abs() > 0.05);
    }

    #[test]
    fn corpus_order_is_irrelevant() {
        let hyps: Vec<String> = ["a b c", "x y z w", "q r"].iter().map(|s| s.to_string()).collect();
        let refs: Vec<String> = ["a b d", "x y w z", "q r s"].iter().map(|s| s.to_string()).collect();
        let forward = corpus_bleu(&hyps, &refs).unwrap();
        let hyps_rev: Vec<String> = hyps.iter().rev().cloned().collect();
        let refs_rev: Vec<String> = refs.iter().rev().cloned().collect();
        let reversed = corpus_bleu(&hyps_rev, &refs_rev).unwrap();
        assert_close(forward, reversed, 1e-15);
    }

    #[test]
    fn corpus_bleu_rejects_mismatched_or_empty_input() {
        let one = vec!["a".to_string()];
        assert!(corpus_bleu(&one, &[]).is_err());
        let empty: [String; 0] = [];
        assert!(corpus_bleu(&empty, &empty).is_err());
    }

    // ---- chrF ----

    /// Oracle chrF for a single pair, n-gram lists and quadratic matching.
    fn oracle_chrf(hyp: &str, reference: &str) -> f64 {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let grams = |cs: &[char], n: usize| -> Vec<String> {
            if cs.len() < n {
                return Vec::new();
            }
            (0..=cs.len() - n).map(|i| cs[i..i + n].iter().collect()).collect()
        };
        let mut f_sum = 0.0;
        let mut orders = 0;
        for n in 1..=6 {
            let hg = grams(&h, n);
            let rg = grams(&r, n);
            if hg.is_empty() && rg.is_empty() {
                continue;
            }
            orders += 1;
            if hg.is_empty() || rg.is_empty() {
                continue;
            }
            let m = oracle_clipped_matches(&hg, &rg) as f64;
            let p = m / hg.len() as f64;
            let rec = m / rg.len() as f64;
            if p + rec > 0.0 {
                f_sum += 5.0 * p * rec / (4.0 * p + rec);
            }
        }
        if orders == 0 {
            0.0
        } else {
            f_sum / orders as f64
        }
    }

    #[test]
    fn chrf_identity_is_one() {
        for s in ["abc", "the quick brown fox", "ab"] {
            assert_close(sentence_chrf(s, s), 1.0, 1e-12);
        }
    }

    #[test]
    fn chrf_matches_oracle_and_regression_constant() {
        let got = sentence_chrf("hello world", "hello there");
        assert_close(got, oracle_chrf("hello world", "hello there"), 1e-9);
        // Hand-worked: per-order F values are 3/5, 4/9, 3/8, 2/7, 1/6, 0.
        assert_close(got, 0.3119708994708995, 1e-9);
    }

    #[test]
    fn chrf_ignores_whitespace_differences() {
        assert_close(sentence_chrf("ab cd", "abcd"), 1.0, 1e-12);
    }

    #[test]
    fn chrf_corpus_aggregates_statistics() {
        let hyps: Vec<String> = vec!["hello world".into(), "abc".into()];
        let refs: Vec<String> = vec!["hello there".into(), "abd".into()];
        let got = corpus_chrf(&hyps, &refs).unwrap();
        let mean = (oracle_chrf("hello world", "hello there") + oracle_chrf("abc", "abd")) / 2.0;
        // Aggregation over statistics... the mean of sentence scores is a
        // different quantity, and the test documents that.
        assert!((got - mean).abs() > 1e-3);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn both_metrics_degrade_monotonically_under_corruption() {
        // Statistical check: progressively replacing tokens with junk can
        // only shed n-gram matches on average.
        let reference = "the small cat sat on the very old mat near the door";
        let tokens: Vec<&str> = reference.split_whitespace().collect();
        let mut rng = crate::rng::Rng::new(31);
        for metric in ["bleu", "chrf"] {
            let m = metric_by_name(metric).unwrap();
            let mut prev_mean = f64::INFINITY;
            for corrupt in [0usize, 2, 4, 8] {
                let mut mean = 0.0;
                let trials = 40;
                for _ in 0..trials {
                    let mut t: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
                    for _ in 0..corrupt {
                        let i = rng.below(t.len());
                        t[i] = "zzz".to_string();
                    }
                    mean += (m.sentence)(&t.join(" "), reference);
                }
                mean /= trials as f64;
                assert!(
                    mean < prev_mean + 1e-12,
                    "{metric}: corruption {corrupt} raised mean score {mean} over {prev_mean}"
                );
                prev_mean = mean;
            }
        }
    }

    #[test]
    fn registry_knows_its_metrics_and_rejects_strangers() {
        assert_eq!(metric_by_name("bleu").unwrap().name, "bleu");
        assert_eq!(metric_by_name("chrf").unwrap().name, "chrf");
        let err = metric_by_name("comet").unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(err.to_string().contains("bleu"));
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = crate::rng::Rng::new(77);
        let alphabet = ["aa", "bb", "cc", "dd", "ee"];
        for _ in 0..200 {
            let len_h = 1 + rng.below(8);
            let len_r = 1 + rng.below(8);
            let h: Vec<&str> = (0..len_h).map(|_| alphabet[rng.below(5)]).collect();
            let r: Vec<&str> = (0..len_r).map(|_| alphabet[rng.below(5)]).collect();
            let (h, r) = (h.join(" "), r.join(" "));
            for s in [sentence_bleu(&h, &r), sentence_chrf(&h, &r)] {
                assert!((0.0..=1.0).contains(&s), "score {s} for {h:?} vs {r:?}");
            }
        }
    }
}
