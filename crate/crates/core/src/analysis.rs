//! Dominance adherence and per-factor bias of the first transcribed speaker.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ctc::{dominance_scores, LogitGrid};
use crate::data::{Component, MixtureSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{hypothesis_segments, pairing_cost};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Reference matched by the first hypothesis segment, `None` when the
/// hypothesis is empty or the best match is tied.
pub fn first_transcribed(hypothesis: &[TokenId], references: &[TokenSequence], vocab: &Vocabulary) -> Option<usize> {
    let segments = hypothesis_segments(hypothesis, vocab);
    let first = segments.first()?;
    let costs: Vec<f64> = references.iter().map(|r| pairing_cost(r.ids(), first)).collect();
    unique_argmin(&costs)
}

fn unique_argmin(xs: &[f64]) -> Option<usize> {
    let best = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hits = xs.iter().enumerate().filter(|(_, &x)| x == best);
    let (i, _) = hits.next()?;
    hits.next().is_none().then_some(i)
}

/// Component with the strictly lowest score; ties and all-infeasible give `None`.
pub fn most_dominant<T: Scalar>(scores: &[Option<T>]) -> Option<usize> {
    let xs: Vec<f64> = scores
        .iter()
        .map(|s| s.map_or(f64::INFINITY, |v| v.to_f64_lossy()))
        .collect();
    unique_argmin(&xs).filter(|&i| scores[i].is_some())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    /// `agree / decided`, or 0 when nothing was decided.
    pub rate: f64,
    pub agree: usize,
    pub decided: usize,
    /// Samples without a unique first speaker or a unique dominant one.
    pub undecidable: usize,
}

/// Fraction of samples whose first transcribed component is the dominant one.
pub fn adherence_from(first: &[Option<usize>], dominant: &[Option<usize>]) -> AdherenceReport {
    let (mut agree, mut decided) = (0, 0);
    for (f, d) in first.iter().zip(dominant) {
        if let (Some(f), Some(d)) = (f, d) {
            decided += 1;
            agree += usize::from(f == d);
        }
    }
    AdherenceReport {
        rate: if decided == 0 {
            0.0
        } else {
            agree as f64 / decided as f64
        },
        agree,
        decided,
        undecidable: first.len() - decided,
    }
}

/// Per-sample decoding result used by the analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDecision {
    pub id: String,
    pub hypothesis: Vec<TokenId>,
    pub first: Option<usize>,
    pub dominance: Vec<Option<f64>>,
    pub dominant: Option<usize>,
}

/// Decodes every sample and scores each component under the encoder CTC head.
pub fn decide<T: Scalar>(
    model: &Model<T>,
    samples: &[MixtureSample],
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<SampleDecision>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let enc = model.encode(&mut g, &s.features.cast())?;
            let grid = LogitGrid::encoder(g.value(enc.grid).clone())?;
            let transcripts = s.transcripts();
            let labels: Vec<&[TokenId]> = transcripts.iter().map(TokenSequence::ids).collect();
            let scores = dominance_scores(&grid, &labels)?;
            let hyp = model.decode_greedy(&mut g, &enc, max_len, vocab).into_ids();
            Ok(SampleDecision {
                id: s.id.clone(),
                first: first_transcribed(&hyp, &transcripts, vocab),
                dominant: most_dominant(&scores),
                dominance: scores.iter().map(|x| x.map(|v| v.to_f64_lossy())).collect(),
                hypothesis: hyp,
            })
        })
        .collect()
}

pub fn adherence_rate(decisions: &[SampleDecision]) -> AdherenceReport {
    let first: Vec<_> = decisions.iter().map(|d| d.first).collect();
    let dominant: Vec<_> = decisions.iter().map(|d| d.dominant).collect();
    adherence_from(&first, &dominant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Loudness,
    Gender,
    ContentLength,
    OverlapLength,
    StartTime,
}

impl Factor {
    pub const ALL: [Factor; 5] = [
        Factor::Loudness,
        Factor::Gender,
        Factor::ContentLength,
        Factor::OverlapLength,
        Factor::StartTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Loudness => "loudness",
            Factor::Gender => "gender",
            Factor::ContentLength => "content_length",
            Factor::OverlapLength => "overlap_length",
            Factor::StartTime => "start_time",
        }
    }

    /// `Some(true)` when `a` wins against `b`, `None` when they do not differ.
    /// Gender wins mean belonging to category 0.
    pub fn wins(self, a: &Component, b: &Component) -> Option<bool> {
        let cmp = |x: f64, y: f64| (x != y).then_some(x > y);
        match self {
            Factor::Loudness => cmp(a.effective_loudness(), b.effective_loudness()),
            Factor::Gender => (a.gender != b.gender).then_some(a.gender == 0),
            Factor::ContentLength => cmp(a.content_length as f64, b.content_length as f64),
            Factor::OverlapLength => cmp(a.overlapped_frames as f64, b.overlapped_frames as f64),
            Factor::StartTime => cmp(-(a.start_frame as f64), -(b.start_frame as f64)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorProportion {
    pub factor: Factor,
    /// `wins / contrasted`, `None` when no sample contrasts on this factor.
    pub proportion: Option<f64>,
    pub wins: usize,
    pub contrasted: usize,
    pub no_contrast: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub condition: String,
    pub n_samples: usize,
    /// Samples without a decided first speaker, excluded from every factor.
    pub undecidable: usize,
    pub factors: Vec<FactorProportion>,
    pub warnings: Vec<String>,
}

impl FactorReport {
    pub fn proportion(&self, f: Factor) -> Option<f64> {
        self.factors.iter().find(|p| p.factor == f).and_then(|p| p.proportion)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "condition {}: {} samples, {} undecidable\n",
            self.condition, self.n_samples, self.undecidable
        );
        let _ = writeln!(
            s,
            "{:<16}{:>12}{:>8}{:>12}{:>13}",
            "factor", "proportion", "wins", "contrasted", "no_contrast"
        );
        for p in &self.factors {
            let prop = p.proportion.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.3}"));
            let _ = writeln!(
                s,
                "{:<16}{:>12}{:>8}{:>12}{:>13}",
                p.factor.as_str(),
                prop,
                p.wins,
                p.contrasted,
                p.no_contrast
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Imbalance between factors: among samples contrasting on both factors, how
/// often the same component wins both. Balanced sets sit near one half.
pub fn imbalance_warnings(samples: &[MixtureSample], tolerance: f64, min_samples: usize) -> Vec<String> {
    let mut out = Vec::new();
    for (i, &f) in Factor::ALL.iter().enumerate() {
        for &h in &Factor::ALL[i + 1..] {
            let (mut same, mut both) = (0usize, 0usize);
            for s in samples.iter().filter(|s| s.components.len() == 2) {
                let (a, b) = (&s.components[0], &s.components[1]);
                if let (Some(x), Some(y)) = (f.wins(a, b), h.wins(a, b)) {
                    both += 1;
                    same += usize::from(x == y);
                }
            }
            if both >= min_samples {
                let agreement = same as f64 / both as f64;
                if (agreement - 0.5).abs() > tolerance {
                    out.push(format!(
                        "{} and {} co-vary: same component wins both in {same}/{both} samples ({agreement:.2})",
                        f.as_str(),
                        h.as_str()
                    ));
                }
            }
        }
    }
    out
}

/// Per factor, the fraction of contrasting samples where the first transcribed
/// component wins. `first[i]` refers to the components of `samples[i]`.
pub fn factor_analysis(condition: &str, samples: &[MixtureSample], first: &[Option<usize>]) -> Result<FactorReport> {
    if samples.len() != first.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} decisions",
            samples.len(),
            first.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.components.len() != 2) {
        return Err(Error::Mix(format!(
            "{}: factor analysis needs two-speaker mixtures",
            s.id
        )));
    }
    let mut factors: Vec<FactorProportion> = Factor::ALL
        .iter()
        .map(|&factor| FactorProportion {
            factor,
            proportion: None,
            wins: 0,
            contrasted: 0,
            no_contrast: 0,
        })
        .collect();
    let mut undecidable = 0;
    for (s, f) in samples.iter().zip(first) {
        let Some(d) = *f else {
            undecidable += 1;
            continue;
        };
        let (dom, other) = (&s.components[d], &s.components[1 - d]);
        for p in &mut factors {
            match p.factor.wins(dom, other) {
                Some(w) => {
                    p.contrasted += 1;
                    p.wins += usize::from(w);
                }
                None => p.no_contrast += 1,
            }
        }
    }
    for p in &mut factors {
        p.proportion = (p.contrasted > 0).then(|| p.wins as f64 / p.contrasted as f64);
    }
    let warnings = imbalance_warnings(samples, 0.15, 20);
    for w in &warnings {
        warn!("{condition}: {w}");
    }
    Ok(FactorReport {
        condition: condition.to_owned(),
        n_samples: samples.len(),
        undecidable,
        factors,
        warnings,
    })
}
