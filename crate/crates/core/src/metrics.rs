//! Edit distance and the two multi-talker word error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serialization::permutations;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein alignment of `reference` to `hypothesis`. The traceback prefers
/// substitution (or match), then deletion, then insertion.
pub fn edit_distance<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        distance: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + cost == here {
                counts.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// One reference/hypothesis pairing of the speaker-aware metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    /// Index into the reference list, `None` for an unpaired hypothesis segment.
    pub reference_index: Option<usize>,
    /// Index into the hypothesis segments, `None` for an unpaired reference.
    pub hypothesis_index: Option<usize>,
    pub reference: Vec<TokenId>,
    pub hypothesis: Vec<TokenId>,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_tokens: usize,
}

impl AlignedPair {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub pairs: Vec<AlignedPair>,
    pub speaker_aware_wer: f64,
    pub speaker_blind_wer: f64,
    /// Hypothesis segment count.
    pub n: usize,
    /// Reference count.
    pub m: usize,
}

/// Edit distance normalized by `max(|r|, |h|, 1)`; used to rank pairings.
pub fn pairing_cost(reference: &[TokenId], hypothesis: &[TokenId]) -> f64 {
    let denom = reference.len().max(hypothesis.len()).max(1);
    edit_distance(reference, hypothesis).distance as f64 / denom as f64
}

fn strip_eos(seq: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    seq.iter().copied().filter(|&t| t != vocab.eos_id()).collect()
}

/// Splits a hypothesis on `<sc>` after removing `<eos>`; a trailing empty
/// segment is dropped, so "a <sc> b <sc>" and "a <sc> b" both give two.
pub fn hypothesis_segments(hypothesis: &[TokenId], vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    let stripped = strip_eos(hypothesis, vocab);
    let mut segments: Vec<Vec<TokenId>> = stripped
        .split(|&t| t == vocab.sc_id())
        .map(<[TokenId]>::to_vec)
        .collect();
    if segments.last().is_some_and(Vec::is_empty) {
        segments.pop();
    }
    segments
}

/// Minimum over reference orders of the edit distance between the hypothesis
/// and `r1 <sc> r2 <sc> ...`, divided by the serialized reference length.
/// `<sc>` is an ordinary token here.
pub fn speaker_blind_wer(hypothesis: &[TokenId], references: &[TokenSequence], vocab: &Vocabulary) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReference);
    }
    let hyp = strip_eos(hypothesis, vocab);
    let refs: Vec<Vec<TokenId>> = references.iter().map(|r| strip_eos(r.ids(), vocab)).collect();
    let mut best: Option<f64> = None;
    for order in permutations(refs.len()) {
        let mut serialized = Vec::new();
        for &k in &order {
            serialized.extend_from_slice(&refs[k]);
            serialized.push(vocab.sc_id());
        }
        let wer = edit_distance(&serialized, &hyp).distance as f64 / serialized.len() as f64;
        if best.is_none_or(|b| wer < b) {
            best = Some(wer);
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Greedy segment pairing: references in order, each takes the unmatched
/// segment with the lowest pairing cost (lowest index on ties).
pub fn speaker_aware_wer(
    hypothesis: &[TokenId],
    references: &[TokenSequence],
    vocab: &Vocabulary,
) -> Result<WerReport> {
    if references.is_empty() {
        return Err(Error::EmptyReference);
    }
    let refs: Vec<Vec<TokenId>> = references.iter().map(|r| strip_eos(r.ids(), vocab)).collect();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    let segments = hypothesis_segments(hypothesis, vocab);
    let mut used = vec![false; segments.len()];
    let mut pairs = Vec::with_capacity(refs.len().max(segments.len()));
    for (ri, r) in refs.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (si, s) in segments.iter().enumerate() {
            if used[si] {
                continue;
            }
            let cost = pairing_cost(r, s);
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some((si, cost));
            }
        }
        let hyp = match best {
            Some((si, _)) => {
                used[si] = true;
                Some(si)
            }
            None => None,
        };
        pairs.push(make_pair(Some(ri), hyp, r, hyp.map_or(&[][..], |si| &segments[si])));
    }
    for (si, s) in segments.iter().enumerate() {
        if !used[si] {
            pairs.push(make_pair(None, Some(si), &[], s));
        }
    }
    let errors: usize = pairs.iter().map(AlignedPair::errors).sum();
    Ok(WerReport {
        speaker_aware_wer: errors as f64 / total as f64,
        speaker_blind_wer: speaker_blind_wer(hypothesis, references, vocab)?,
        n: segments.len(),
        m: refs.len(),
        pairs,
    })
}

fn make_pair(ri: Option<usize>, si: Option<usize>, r: &[TokenId], h: &[TokenId]) -> AlignedPair {
    let c = edit_distance(r, h);
    AlignedPair {
        reference_index: ri,
        hypothesis_index: si,
        reference: r.to_vec(),
        hypothesis: h.to_vec(),
        substitutions: c.substitutions,
        insertions: c.insertions,
        deletions: c.deletions,
        reference_tokens: r.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub n: usize,
    pub m: usize,
    pub wer_blind: f64,
    pub wer_aware: f64,
}

/// Corpus-level report. Corpus rates pool errors and reference tokens over
/// samples rather than averaging per-sample rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub condition: String,
    pub n_samples: usize,
    pub speaker_blind_wer: f64,
    pub speaker_aware_wer: f64,
    pub per_sample: Vec<SampleScore>,
}

/// Scores `(id, hypothesis, references)` triples in the given order.
pub fn score_corpus<'a, I>(condition: &str, samples: I, vocab: &Vocabulary) -> Result<ScoreReport>
where
    I: IntoIterator<Item = (&'a str, &'a [TokenId], &'a [TokenSequence])>,
{
    let mut per_sample = Vec::new();
    let (mut aware_err, mut aware_tok, mut blind_err, mut blind_tok) = (0.0, 0usize, 0.0, 0usize);
    for (id, hyp, refs) in samples {
        let report = speaker_aware_wer(hyp, refs, vocab)?;
        let aware_tokens: usize = report.pairs.iter().map(|p| p.reference_tokens).sum();
        let blind_tokens: usize = refs.iter().map(|r| strip_eos(r.ids(), vocab).len() + 1).sum();
        aware_err += report.speaker_aware_wer * aware_tokens as f64;
        aware_tok += aware_tokens;
        blind_err += report.speaker_blind_wer * blind_tokens as f64;
        blind_tok += blind_tokens;
        per_sample.push(SampleScore {
            id: id.to_owned(),
            n: report.n,
            m: report.m,
            wer_blind: report.speaker_blind_wer,
            wer_aware: report.speaker_aware_wer,
        });
    }
    let rate = |e: f64, t: usize| if t == 0 { 0.0 } else { e / t as f64 };
    Ok(ScoreReport {
        condition: condition.to_owned(),
        n_samples: per_sample.len(),
        speaker_blind_wer: rate(blind_err, blind_tok),
        speaker_aware_wer: rate(aware_err, aware_tok),
        per_sample,
    })
}
