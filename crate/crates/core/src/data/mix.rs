use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seconds_to_frames;
use super::synth::Utterance;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, SotRng};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Every component after the first starts a random in-range delay after
    /// the previous one.
    AlwaysOffset,
    /// The in-range delay is applied with `offset_probability`, otherwise 0.
    PartialOffset,
    /// Every delay is `fixed_offset_frames`.
    FixedOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPolicy {
    pub num_speakers: usize,
    pub offset_mode: OffsetMode,
    /// Inclusive delay range in frames.
    pub offset_range_frames: (usize, usize),
    pub offset_probability: f64,
    pub fixed_offset_frames: usize,
    pub weight_floor: f64,
}

impl MixPolicy {
    /// 0.25 s to 4 s between consecutive starts, always.
    pub fn always_offset(num_speakers: usize) -> Self {
        MixPolicy {
            num_speakers,
            offset_mode: OffsetMode::AlwaysOffset,
            offset_range_frames: (seconds_to_frames(0.25), seconds_to_frames(4.0)),
            offset_probability: 1.0,
            fixed_offset_frames: 0,
            weight_floor: 0.1,
        }
    }

    /// The 0.25 s to 4 s delay on 40% of mixtures, none otherwise.
    pub fn partial_offset(num_speakers: usize) -> Self {
        MixPolicy {
            offset_mode: OffsetMode::PartialOffset,
            offset_probability: 0.4,
            ..Self::always_offset(num_speakers)
        }
    }

    pub fn fixed_offset(num_speakers: usize, frames: usize) -> Self {
        MixPolicy {
            offset_mode: OffsetMode::FixedOffset,
            fixed_offset_frames: frames,
            ..Self::always_offset(num_speakers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(Error::Mix("num_speakers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.offset_probability) {
            return Err(Error::Mix("offset_probability must lie in [0, 1]".into()));
        }
        if self.offset_range_frames.0 > self.offset_range_frames.1 {
            return Err(Error::Mix("offset range is empty".into()));
        }
        if !(0.0..1.0).contains(&self.weight_floor) {
            return Err(Error::Mix("weight_floor must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn draw_offset(&self, rng: &mut SotRng) -> usize {
        let (lo, hi) = self.offset_range_frames;
        match self.offset_mode {
            OffsetMode::AlwaysOffset => rng.random_range(lo..=hi),
            OffsetMode::PartialOffset => {
                if rng.random::<f64>() < self.offset_probability {
                    rng.random_range(lo..=hi)
                } else {
                    0
                }
            }
            OffsetMode::FixedOffset => self.fixed_offset_frames,
        }
    }
}

/// Metadata of one mixed component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub utt_id: String,
    pub transcript: TokenSequence,
    pub start_frame: usize,
    pub weight: f64,
    pub loudness_gain: f64,
    pub gender: u8,
    pub content_length: usize,
    /// Frames of this component during which another component is active.
    pub overlapped_frames: usize,
}

impl Component {
    /// Amplitude scale of the component inside the mixture.
    pub fn effective_loudness(&self) -> f64 {
        self.weight * self.loudness_gain
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub id: String,
    pub features: Matrix<f64>,
    pub components: Vec<Component>,
}

impl MixtureSample {
    pub fn transcripts(&self) -> Vec<TokenSequence> {
        self.components.iter().map(|c| c.transcript.clone()).collect()
    }

    pub fn start_frames(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.start_frame).collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.components.len()
    }
}

/// Draws weights uniformly on (0, 1), raises them to `floor`, and normalizes.
pub fn draw_weights(n: usize, floor: f64, rng: &mut SotRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().max(floor)).collect();
    normalize(&raw)
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Places `weights[i] * utts[i]` at `starts[i]` and sums.
pub fn place(utts: &[&Utterance], weights: &[f64], starts: &[usize]) -> Matrix<f64> {
    let frames = utts
        .iter()
        .zip(starts)
        .map(|(u, &s)| s + u.duration_frames)
        .max()
        .unwrap_or(0);
    let dim = utts.first().map_or(0, |u| u.features.cols());
    let mut out = Matrix::zeros(frames, dim);
    for ((u, &w), &s) in utts.iter().zip(weights).zip(starts) {
        for t in 0..u.duration_frames {
            for (o, &x) in out.row_mut(s + t).iter_mut().zip(u.features.row(t)) {
                *o += w * x;
            }
        }
    }
    out
}

fn overlaps(durations: &[usize], starts: &[usize]) -> Vec<usize> {
    (0..durations.len())
        .map(|i| {
            (starts[i]..starts[i] + durations[i])
                .filter(|&t| (0..durations.len()).any(|j| j != i && t >= starts[j] && t < starts[j] + durations[j]))
                .count()
        })
        .collect()
}

fn assemble(id: String, utts: &[&Utterance], weights: Vec<f64>, starts: Vec<usize>) -> Result<MixtureSample> {
    let dim = utts[0].features.cols();
    if utts.iter().any(|u| u.features.cols() != dim) {
        return Err(Error::Mix("components have different feature dimensions".into()));
    }
    let features = place(utts, &weights, &starts);
    let durations: Vec<usize> = utts.iter().map(|u| u.duration_frames).collect();
    let overlapped = overlaps(&durations, &starts);
    let components = utts
        .iter()
        .enumerate()
        .map(|(i, u)| Component {
            utt_id: u.id.clone(),
            transcript: u.transcript.clone(),
            start_frame: starts[i],
            weight: weights[i],
            loudness_gain: u.loudness_gain,
            gender: u.gender,
            content_length: u.transcript.len(),
            overlapped_frames: overlapped[i],
        })
        .collect();
    Ok(MixtureSample {
        id,
        features,
        components,
    })
}

/// Mixes `utts` under `policy`. The first component starts at frame 0 and
/// every later start is drawn relative to the previous component's start.
pub fn mix(id: impl Into<String>, utts: &[&Utterance], policy: &MixPolicy, rng: &mut SotRng) -> Result<MixtureSample> {
    policy.validate()?;
    if utts.len() != policy.num_speakers {
        return Err(Error::Mix(format!(
            "policy expects {} utterances, got {}",
            policy.num_speakers,
            utts.len()
        )));
    }
    let weights = draw_weights(utts.len(), policy.weight_floor, rng);
    let mut starts = vec![0usize; utts.len()];
    for i in 1..utts.len() {
        starts[i] = starts[i - 1] + policy.draw_offset(rng);
    }
    assemble(id.into(), utts, weights, starts)
}

/// Mixtures of one evaluation condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCondition {
    pub name: String,
    pub n_speakers: usize,
    pub offset_seconds: f64,
    pub samples: Vec<MixtureSample>,
}

/// One fixed-offset condition per (group size, offset). Weights depend only on
/// the group and `seed`, so conditions differ only in their offsets.
pub fn build_eval_conditions(
    groups: &[Vec<&Utterance>],
    offsets_seconds: &[f64],
    seed: u64,
) -> Result<Vec<EvalCondition>> {
    if let Some(bad) = offsets_seconds.iter().find(|o| !(**o >= 0.0 && o.is_finite())) {
        return Err(Error::Mix(format!("offset {bad} must be non-negative")));
    }
    let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::new();
    for &n in &sizes {
        for &offset in offsets_seconds {
            let policy = MixPolicy::fixed_offset(n, seconds_to_frames(offset));
            let mut samples = Vec::new();
            for (gi, group) in groups.iter().enumerate().filter(|(_, g)| g.len() == n) {
                let mut rng = substream(seed, &format!("eval-weights-{gi}"));
                samples.push(mix(format!("mix{n}_{offset}s_{gi:05}"), group, &policy, &mut rng)?);
            }
            out.push(EvalCondition {
                name: format!("{n}mix_{offset}s"),
                n_speakers: n,
                offset_seconds: offset,
                samples,
            });
        }
    }
    Ok(out)
}

/// Construction of a two-speaker set whose factors are balanced by design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSetSpec {
    pub count: usize,
    pub offset_frames: usize,
    /// When set, the louder component is exactly this many times louder (in
    /// weight times gain); otherwise weights are drawn as usual.
    pub loudness_ratio: Option<f64>,
    pub weight_floor: f64,
    pub seed: u64,
}

/// Two-speaker mixtures with stratified factors: sample `i` pairs genders
/// `(0, 1)` for even `i` and `(1, 0)` for odd `i`, and the louder component
/// is index `(i / 2) % 2`, so gender and loudness are independent and neither
/// is tied to component position. Contents are drawn at random.
pub fn build_factor_set(corpus: &[Utterance], spec: &FactorSetSpec) -> Result<Vec<MixtureSample>> {
    let by_gender: [Vec<&Utterance>; 2] = [0u8, 1].map(|g| corpus.iter().filter(|u| u.gender == g).collect());
    if by_gender.iter().any(Vec::is_empty) {
        return Err(Error::Mix("corpus needs utterances of both genders".into()));
    }
    if let Some(r) = spec.loudness_ratio {
        if !(r >= 1.0 && r.is_finite()) {
            return Err(Error::Mix("loudness_ratio must be at least 1".into()));
        }
    }
    let mut rng = substream(spec.seed, "factor-set");
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let genders = if i % 2 == 0 { [0usize, 1] } else { [1, 0] };
        let a = *by_gender[genders[0]].choose(&mut rng).expect("non-empty");
        let mut b = *by_gender[genders[1]].choose(&mut rng).expect("non-empty");
        for _ in 0..8 {
            if b.id != a.id {
                break;
            }
            b = *by_gender[genders[1]].choose(&mut rng).expect("non-empty");
        }
        let utts = [a, b];
        let louder = (i / 2) % 2;
        let quieter = 1 - louder;
        let gains = [a.loudness_gain, b.loudness_gain];
        let mut weights = match spec.loudness_ratio {
            Some(r) => {
                // w_l g_l = r w_q g_q with w_l + w_q = 1
                let wl = r * gains[quieter] / (gains[louder] + r * gains[quieter]);
                let mut w = [0.0; 2];
                w[louder] = wl;
                w[quieter] = 1.0 - wl;
                w.to_vec()
            }
            None => draw_weights(2, spec.weight_floor, &mut rng),
        };
        let eff = |w: &[f64], k: usize| w[k] * gains[k];
        if eff(&weights, louder) < eff(&weights, quieter) {
            // swap effective loudness by solving for the mirrored ratio
            let ratio = eff(&weights, quieter) / eff(&weights, louder);
            let wl = ratio * gains[quieter] / (gains[louder] + ratio * gains[quieter]);
            weights[louder] = wl;
            weights[quieter] = 1.0 - wl;
        }
        out.push(assemble(
            format!("factor_{i:05}"),
            &utts,
            weights,
            vec![0, spec.offset_frames],
        )?);
    }
    Ok(out)
}
