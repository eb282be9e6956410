//! Metrics: corpus BLEU (multi-bleu semantics, no smoothing), Average
//! Lagging, paired bootstrap significance, congruent/incongruent
//! image evaluation, and the entity-before-input analysis.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EntityAnnotation, FeatureStore, SentencePair};
use crate::decoding::{translate_corpus, DecodeTrace, FeatureSource, Hypothesis};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::policy::Policy;
use crate::tensor::Real;

pub const MAX_NGRAM: usize = 4;

/// Corpus BLEU with its components.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct BleuScore {
    /// 0..=100.
    pub score: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Per-sentence sufficient statistics; corpus BLEU is a pure function
/// of their sum, which is what the bootstrap resamples.
#[derive(Debug, Clone, Copy, Default)]
pub struct SentenceStats {
    pub matches: [u64; MAX_NGRAM],
    pub totals: [u64; MAX_NGRAM],
    pub hyp_len: u64,
    pub ref_len: u64,
}

pub fn sentence_stats(hyp: &[String], reference: &[String]) -> SentenceStats {
    let mut stats = SentenceStats {
        hyp_len: hyp.len() as u64,
        ref_len: reference.len() as u64,
        ..Default::default()
    };
    for n in 1..=MAX_NGRAM {
        if hyp.len() < n {
            continue;
        }
        let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
        if reference.len() >= n {
            for w in reference.windows(n) {
                *ref_counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
        for w in hyp.windows(n) {
            *hyp_counts.entry(w).or_insert(0) += 1;
        }
        stats.totals[n - 1] = (hyp.len() - n + 1) as u64;
        for (w, c) in hyp_counts {
            // clipped to the reference count
            stats.matches[n - 1] += c.min(*ref_counts.get(w).unwrap_or(&0));
        }
    }
    stats
}

pub fn bleu_from_stats(stats: &[SentenceStats]) -> BleuScore {
    let mut matches = [0u64; MAX_NGRAM];
    let mut totals = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for s in stats {
        for n in 0..MAX_NGRAM {
            matches[n] += s.matches[n];
            totals[n] += s.totals[n];
        }
        hyp_len += s.hyp_len;
        ref_len += s.ref_len;
    }
    let mut precisions = [0.0; MAX_NGRAM];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..MAX_NGRAM {
        if totals[n] == 0 || matches[n] == 0 {
            zero = true;
        } else {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
            log_sum += precisions[n].ln();
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if zero || hyp_len == 0 {
        0.0
    } else {
        brevity_penalty * (log_sum / MAX_NGRAM as f64).exp() * 100.0
    };
    BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len: hyp_len as usize,
        ref_len: ref_len as usize,
    }
}

/// Corpus-level modified 4-gram precision with clipping and brevity
/// penalty; zero precision at any order gives score 0 (no smoothing).
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let stats: Vec<SentenceStats> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    Ok(bleu_from_stats(&stats))
}

/// Mean over the steps until the source is fully read of how far the
/// decoder runs ahead of an ideal synchronized translator:
/// AL = (1/τ) Σ_{t=1}^{τ} [g(t) − (t−1)/r] with r = |Y|/|X| and τ the
/// first step whose g equals |X| (capped at |Y| for short hypotheses).
pub fn average_lagging(trace: &DecodeTrace) -> Result<f64> {
    let y = trace.g_values.len();
    if y == 0 {
        return Err(Error::Domain("AL undefined for empty hypothesis".into()));
    }
    let n = trace.source_len;
    let r = y as f64 / n as f64;
    let tau = trace
        .g_values
        .iter()
        .position(|&g| g == n)
        .map(|p| p + 1)
        .unwrap_or(y);
    let sum: f64 = (1..=tau)
        .map(|t| trace.g_values[t - 1] as f64 - (t - 1) as f64 / r)
        .sum();
    Ok(sum / tau as f64)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ALScore {
    pub per_sentence: Vec<f64>,
    pub mean: f64,
}

pub fn corpus_average_lagging(traces: &[DecodeTrace]) -> Result<ALScore> {
    let per_sentence: Vec<f64> = traces
        .iter()
        .map(average_lagging)
        .collect::<Result<Vec<_>>>()?;
    let mean = per_sentence.iter().sum::<f64>() / per_sentence.len().max(1) as f64;
    Ok(ALScore { per_sentence, mean })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SignificanceResult {
    pub observed_diff: f64,
    pub p_value: f64,
    pub significant: bool,
    pub resamples: usize,
    pub alpha: f64,
}

/// Paired bootstrap over sentences: resample indices with
/// replacement; the p-value is the fraction of resamples where the
/// BLEU difference flips sign or vanishes relative to the observed
/// difference.
pub fn bootstrap_significance(
    hyps_a: &[Vec<String>],
    hyps_b: &[Vec<String>],
    refs: &[Vec<String>],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<SignificanceResult> {
    if hyps_a.len() != refs.len() || hyps_b.len() != refs.len() {
        return Err(Error::Contract(format!(
            "misaligned inputs: {} / {} hypotheses vs {} references",
            hyps_a.len(),
            hyps_b.len(),
            refs.len()
        )));
    }
    if resamples < 100 {
        return Err(Error::Contract("need at least 100 resamples".into()));
    }
    if refs.is_empty() {
        return Err(Error::Domain("empty test set".into()));
    }
    let stats_a: Vec<SentenceStats> = hyps_a
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    let stats_b: Vec<SentenceStats> = hyps_b
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    let observed_diff = bleu_from_stats(&stats_a).score - bleu_from_stats(&stats_b).score;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = refs.len();
    let sign = observed_diff.signum();
    let mut flips = 0usize;
    for _ in 0..resamples {
        let mut sa = Vec::with_capacity(n);
        let mut sb = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa.push(stats_a[i]);
            sb.push(stats_b[i]);
        }
        let d = bleu_from_stats(&sa).score - bleu_from_stats(&sb).score;
        if d == 0.0 || d.signum() != sign || observed_diff == 0.0 {
            flips += 1;
        }
    }
    let p_value = flips as f64 / resamples as f64;
    Ok(SignificanceResult {
        observed_diff,
        p_value,
        significant: observed_diff != 0.0 && p_value < alpha,
        resamples,
        alpha,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdversarialResult {
    pub congruent: BleuScore,
    pub incongruent: BleuScore,
    pub significance: SignificanceResult,
    /// Index whose image was re-paired with a neighbor because the
    /// reversal left it fixed (middle element of an odd-sized set).
    pub fixed_point_substituted: Option<usize>,
    /// The image permutation used for the incongruent run.
    pub permutation: Vec<usize>,
}

/// Reversed-image permutation: sentence i gets the image of sentence
/// N−1−i. An odd-sized set leaves the middle sentence paired with its
/// own image; it is re-paired with its left neighbor instead.
pub fn incongruent_permutation(n: usize) -> (Vec<usize>, Option<usize>) {
    let mut perm: Vec<usize> = (0..n).map(|i| n - 1 - i).collect();
    let mut substituted = None;
    if n % 2 == 1 && n > 1 {
        let mid = n / 2;
        perm[mid] = mid - 1;
        substituted = Some(mid);
    }
    (perm, substituted)
}

/// Decodes the test set twice, once with each sentence's own image
/// and once under the reversal permutation, and tests the BLEU
/// difference for significance.
pub fn adversarial_eval<T: Real>(
    model: &Model<T>,
    pairs: &[SentencePair],
    features: &FeatureStore,
    policy: Policy,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdversarialResult> {
    if !model.config.multimodal {
        return Err(Error::Contract("adversarial eval needs a multimodal model".into()));
    }
    if pairs.len() < 2 {
        return Err(Error::Contract("adversarial eval needs at least 2 sentences".into()));
    }
    let congruent_hyps = translate_corpus(model, pairs, policy, FeatureSource::Store(features))?;
    let (perm, fixed_point_substituted) = incongruent_permutation(pairs.len());
    let mut shuffled = pairs.to_vec();
    for (i, p) in shuffled.iter_mut().enumerate() {
        p.image_id = pairs[perm[i]].image_id.clone();
    }
    let incongruent_hyps =
        translate_corpus(model, &shuffled, policy, FeatureSource::Store(features))?;

    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    let to_strings = |hyps: &[Hypothesis]| -> Vec<Vec<String>> {
        hyps.iter().map(|h| model.vocab.decode(&h.tokens)).collect()
    };
    let cs = to_strings(&congruent_hyps);
    let is = to_strings(&incongruent_hyps);
    let congruent = bleu(&cs, &refs)?;
    let incongruent = bleu(&is, &refs)?;
    let significance = bootstrap_significance(&cs, &is, &refs, resamples, alpha, seed)?;
    Ok(AdversarialResult {
        congruent,
        incongruent,
        significance,
        fixed_point_substituted,
        permutation: perm,
    })
}

/// An aligned entity whose source span has not been fully read when
/// its target position is emitted under wait-k.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct CountableEntity {
    pub sentence_id: usize,
    pub entity_id: u32,
    /// Reference target-span tokens; correctness requires these to
    /// occur contiguously in the hypothesis.
    pub tokens: Vec<String>,
}

/// Entities counted for a given k: at target step t_start (the first
/// token of the entity's target span) the aligned source span is not
/// yet fully read, i.e. its max source index exceeds g(t_start).
/// Duplicate-id entities are excluded as unalignable.
pub fn count_total_entities(
    pairs: &[SentencePair],
    annotations: &[EntityAnnotation],
    k: usize,
) -> Result<Vec<CountableEntity>> {
    let policy = Policy::new_wait_k(k)?;
    let by_id: HashMap<usize, &SentencePair> = pairs.iter().map(|p| (p.id, p)).collect();
    let mut out = Vec::new();
    for ann in annotations {
        let pair = by_id.get(&ann.sentence_id).ok_or_else(|| {
            Error::Data(format!("annotation for unknown sentence {}", ann.sentence_id))
        })?;
        let n = pair.source.len();
        for e in &ann.entities {
            if e.excluded {
                continue;
            }
            if e.src_span.1 > n || e.tgt_span.1 > pair.target.len() {
                return Err(Error::Data(format!(
                    "sentence {}: entity {} span out of bounds",
                    ann.sentence_id, e.id
                )));
            }
            let t_start = e.tgt_span.0;
            let g = policy.g(t_start, n)?;
            if e.src_span.1 > g {
                out.push(CountableEntity {
                    sentence_id: ann.sentence_id,
                    entity_id: e.id,
                    tokens: pair.target[e.tgt_span.0 - 1..e.tgt_span.1].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// A countable entity is correctly translated when its reference
/// target tokens occur as a contiguous subsequence of the hypothesis.
pub fn count_correct_entities(
    hypotheses: &HashMap<usize, Vec<String>>,
    countable: &[CountableEntity],
) -> usize {
    countable
        .iter()
        .filter(|e| {
            hypotheses
                .get(&e.sentence_id)
                .map(|hyp| contains_subsequence(hyp, &e.tokens))
                .unwrap_or(false)
        })
        .count()
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// One row of the per-k entity table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EntityReportRow {
    pub k: usize,
    pub total: usize,
    /// (system name, correct count), in input order.
    pub correct: Vec<(String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entity;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let corpus = vec![toks("a b c d e"), toks("x y z w q r")];
        let b = bleu(&corpus, &corpus).unwrap();
        assert_eq!(b.score, 100.0);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_no_overlap_is_0() {
        let hyp = vec![toks("a b c d")];
        let r = vec![toks("w x y z")];
        assert_eq!(bleu(&hyp, &r).unwrap().score, 0.0);
    }

    // Brute-force n-gram clipping oracle on the worked example.
    #[test]
    fn bleu_clipping_matches_oracle() {
        let hyp = vec![toks("the the cat")];
        let r = vec![toks("the cat sat")];
        let b = bleu(&hyp, &r).unwrap();
        // unigrams: "the"x2 clipped to 1, "cat" 1 → 2/3
        assert!((b.precisions[0] - 2.0 / 3.0).abs() < 1e-12);
        // bigrams: "the the" 0, "the cat" 1 → 1/2
        assert!((b.precisions[1] - 0.5).abs() < 1e-12);
        // no trigram/4-gram support in a 3-token hyp vs totals
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let hyp = vec![toks("a b c d")];
        let r = vec![toks("a b c d e f g h")];
        let b = bleu(&hyp, &r).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 8.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_rejects_count_mismatch() {
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn bleu_permutation_invariant() {
        let hyps = vec![toks("a b c d e"), toks("f g h i j"), toks("k l m n o p")];
        let refs = vec![toks("a b c x e"), toks("f g h i j"), toks("k l m z o p")];
        let fwd = bleu(&hyps, &refs).unwrap();
        let rh: Vec<Vec<String>> = hyps.iter().rev().cloned().collect();
        let rr: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
        let rev = bleu(&rh, &rr).unwrap();
        assert_eq!(fwd.score, rev.score);
    }

    #[test]
    fn al_full_policy_equals_source_length() {
        // direct evaluation: tau = 1, g(1) = n, subtrahend 0
        for n in [1usize, 5, 11] {
            let trace = DecodeTrace {
                g_values: vec![n; n],
                source_len: n,
            };
            assert_eq!(average_lagging(&trace).unwrap(), n as f64);
        }
    }

    #[test]
    fn al_wait_k_with_ratio_one_is_k() {
        // closed form: each term g(t) - (t-1) = k for t <= tau
        for k in [1usize, 3, 5, 7] {
            let n = 10;
            let policy = Policy::WaitK(k);
            let g_values: Vec<usize> = (1..=n).map(|t| policy.g(t, n).unwrap()).collect();
            let trace = DecodeTrace {
                g_values,
                source_len: n,
            };
            assert_eq!(average_lagging(&trace).unwrap(), k as f64);
        }
    }

    #[test]
    fn al_rejects_empty_and_is_bounded() {
        let empty = DecodeTrace {
            g_values: vec![],
            source_len: 3,
        };
        assert!(average_lagging(&empty).is_err());
        // AL <= |X| whenever g is a valid policy schedule
        for k in 1..=6 {
            let policy = Policy::WaitK(k);
            for (n, y) in [(4usize, 7usize), (6, 3), (5, 5)] {
                let g_values: Vec<usize> = (1..=y).map(|t| policy.g(t, n).unwrap()).collect();
                let trace = DecodeTrace {
                    g_values,
                    source_len: n,
                };
                assert!(average_lagging(&trace).unwrap() <= n as f64);
            }
        }
    }

    #[test]
    fn bootstrap_self_comparison_never_significant() {
        let hyps = vec![toks("a b c d"), toks("e f g h"), toks("i j k l")];
        let refs = vec![toks("a b c d"), toks("e x g h"), toks("i j z l")];
        for seed in 0..20 {
            let r = bootstrap_significance(&hyps, &hyps, &refs, 200, 0.05, seed).unwrap();
            assert_eq!(r.observed_diff, 0.0);
            assert!(!r.significant);
            assert_eq!(r.p_value, 1.0);
        }
    }

    #[test]
    fn bootstrap_detects_clear_difference() {
        let refs: Vec<Vec<String>> = (0..50)
            .map(|i| toks(&format!("w{i} x{i} y{i} z{i} q{i}")))
            .collect();
        let perfect = refs.clone();
        let junk: Vec<Vec<String>> = (0..50).map(|_| toks("a a a a a")).collect();
        let r = bootstrap_significance(&perfect, &junk, &refs, 1000, 0.05, 7).unwrap();
        assert!(r.significant);
        assert!(r.observed_diff > 99.0);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn bootstrap_seeded_reproducible_and_validates() {
        let refs = vec![toks("a b c d e"), toks("f g h i j")];
        let a = vec![toks("a b c d e"), toks("f g q i j")];
        let b = vec![toks("a b c z e"), toks("f g h i j")];
        let r1 = bootstrap_significance(&a, &b, &refs, 500, 0.05, 3).unwrap();
        let r2 = bootstrap_significance(&a, &b, &refs, 500, 0.05, 3).unwrap();
        assert_eq!(r1.p_value, r2.p_value);
        assert!(bootstrap_significance(&a, &b, &refs[..1].to_vec(), 500, 0.05, 0).is_err());
        assert!(bootstrap_significance(&a, &b, &refs, 50, 0.05, 0).is_err());
    }

    #[test]
    fn reversal_permutation_properties() {
        let (perm, fixed) = incongruent_permutation(1000);
        assert!(fixed.is_none());
        let mut seen = perm.clone();
        seen.sort();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
        assert!(perm.iter().enumerate().all(|(i, &p)| i != p));

        let (perm, fixed) = incongruent_permutation(7);
        assert_eq!(fixed, Some(3));
        assert_eq!(perm[3], 2);
        assert!(perm.iter().enumerate().all(|(i, &p)| i != p));
    }

    fn table4() -> (Vec<SentencePair>, Vec<EntityAnnotation>) {
        let pair = SentencePair {
            id: 0,
            source: toks("a person rappelling a cliff above a body of water ."),
            target: toks("海 の 上 に ある 断崖 を 降り て いる 一 人 の 男性 。"),
            image_id: None,
        };
        let ent = |id, tag: &str, s: (usize, usize), t: (usize, usize)| Entity {
            id,
            tag: tag.into(),
            src_span: s,
            tgt_span: t,
            excluded: false,
        };
        let ann = EntityAnnotation {
            sentence_id: 0,
            entities: vec![
                ent(1, "PEOPLE", (1, 2), (11, 14)),
                ent(2, "SCENE", (4, 5), (6, 6)),
                ent(3, "SCENE", (7, 10), (1, 1)),
            ],
        };
        (vec![pair], vec![ann])
    }

    #[test]
    fn entity_counting_worked_example() {
        let (pairs, anns) = table4();
        let countable = count_total_entities(&pairs, &anns, 3).unwrap();
        // at k=3 only the sentence-final source entity emitted at
        // target position 1 is unread: g(1)=3 < 10
        assert_eq!(countable.len(), 1);
        assert_eq!(countable[0].entity_id, 3);
        assert_eq!(countable[0].tokens, toks("海"));
    }

    #[test]
    fn entity_counting_large_k_counts_nothing() {
        let (pairs, anns) = table4();
        let countable = count_total_entities(&pairs, &anns, 30).unwrap();
        assert!(countable.is_empty());
    }

    #[test]
    fn entity_counting_nonincreasing_in_k() {
        let (pairs, anns) = table4();
        let mut prev = usize::MAX;
        for k in 1..=12 {
            let total = count_total_entities(&pairs, &anns, k).unwrap().len();
            assert!(total <= prev, "k={k}");
            prev = total;
        }
    }

    #[test]
    fn entity_counting_skips_excluded() {
        let (pairs, mut anns) = table4();
        for e in anns[0].entities.iter_mut() {
            e.excluded = true;
        }
        assert!(count_total_entities(&pairs, &anns, 1).unwrap().is_empty());
    }

    #[test]
    fn entity_correctness_contiguous_match() {
        let (pairs, anns) = table4();
        let countable = count_total_entities(&pairs, &anns, 3).unwrap();
        let mut hyps = HashMap::new();
        hyps.insert(0usize, toks("人 が 海 の 上 で 崖 を 降り て いる 。"));
        assert_eq!(count_correct_entities(&hyps, &countable), 1);

        hyps.insert(0, vec![]);
        assert_eq!(count_correct_entities(&hyps, &countable), 0);
        assert!(count_correct_entities(&hyps, &countable) <= countable.len());
    }
}
