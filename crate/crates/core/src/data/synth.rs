use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::substream;
use crate::vocab::{TokenSequence, Vocabulary};

/// Controls for the synthetic single-talker corpus.
///
/// Each content token owns a random prototype feature vector (zero on the
/// gender channel). An utterance repeats the prototype of each token for a
/// random number of frames, adds Gaussian noise and the speaker's gender
/// offset on `gender_channel`, and scales the whole frame by its loudness gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: (usize, usize),
    pub prototype_noise_std: f64,
    pub gender_channel: usize,
    pub gender_offsets: [f64; 2],
    pub loudness_range: (f64, f64),
    pub utterance_length_range: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 8,
            feature_dim: 16,
            frames_per_token: (8, 12),
            prototype_noise_std: 0.1,
            gender_channel: 15,
            gender_offsets: [0.5, -0.5],
            loudness_range: (0.7, 1.3),
            utterance_length_range: (2, 4),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_owned()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.feature_dim == 0 || self.gender_channel >= self.feature_dim {
            return fail("gender_channel must index a feature dimension");
        }
        let (fmin, fmax) = self.frames_per_token;
        if fmin == 0 || fmin > fmax {
            return fail("frames_per_token must be a non-empty positive range");
        }
        let (lmin, lmax) = self.utterance_length_range;
        if lmin == 0 || lmin > lmax {
            return fail("utterance_length_range must be a non-empty positive range");
        }
        let (gmin, gmax) = self.loudness_range;
        if !(gmin > 0.0 && gmin <= gmax && gmax.is_finite()) {
            return fail("loudness_range must be a positive interval");
        }
        if !(self.prototype_noise_std >= 0.0 && self.prototype_noise_std.is_finite()) {
            return fail("prototype_noise_std must be non-negative");
        }
        if !self.gender_offsets.iter().all(|x| x.is_finite()) {
            return fail("gender offsets must be finite");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::numbered(self.vocab_size)
    }

    /// Token prototypes, `vocab_size x feature_dim`.
    pub fn prototypes(&self) -> Matrix<f64> {
        let mut rng = substream(self.seed, "prototypes");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Matrix::from_fn(self.vocab_size, self.feature_dim, |_, c| {
            let x = normal.sample(&mut rng);
            if c == self.gender_channel {
                0.0
            } else {
                x
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: TokenSequence,
    /// `duration_frames x feature_dim`.
    pub features: Matrix<f64>,
    pub loudness_gain: f64,
    pub gender: u8,
    pub duration_frames: usize,
}

/// Renders one utterance from explicit choices; `noise` supplies one standard
/// normal draw per feature value.
pub fn render_utterance(
    spec: &SynthSpec,
    prototypes: &Matrix<f64>,
    tokens: &[usize],
    frames_per_token: &[usize],
    loudness_gain: f64,
    gender: u8,
    mut noise: impl FnMut() -> f64,
) -> Matrix<f64> {
    let total: usize = frames_per_token.iter().sum();
    let mut features = Matrix::zeros(total, spec.feature_dim);
    let mut t = 0;
    for (&tok, &frames) in tokens.iter().zip(frames_per_token) {
        for _ in 0..frames {
            let row = features.row_mut(t);
            for (c, x) in row.iter_mut().enumerate() {
                let mut v = prototypes.get(tok, c) + spec.prototype_noise_std * noise();
                if c == spec.gender_channel {
                    v += spec.gender_offsets[gender as usize];
                }
                *x = loudness_gain * v;
            }
            t += 1;
        }
    }
    features
}

/// Generates `count` utterances, deterministic in `spec.seed`. Adjacent tokens
/// within an utterance are always distinct.
pub fn generate_corpus(spec: &SynthSpec, count: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Spec("count must be at least 1".into()));
    }
    let prototypes = spec.prototypes();
    let mut rng = substream(spec.seed, "corpus");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = rng.random_range(spec.utterance_length_range.0..=spec.utterance_length_range.1);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        while tokens.len() < len {
            let tok = rng.random_range(0..spec.vocab_size);
            if tokens.last() != Some(&tok) {
                tokens.push(tok);
            }
        }
        let frames: Vec<usize> = (0..len)
            .map(|_| rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1))
            .collect();
        let gain = if spec.loudness_range.0 == spec.loudness_range.1 {
            spec.loudness_range.0
        } else {
            rng.random_range(spec.loudness_range.0..spec.loudness_range.1)
        };
        let gender = rng.random_range(0..2u8);
        let features = render_utterance(spec, &prototypes, &tokens, &frames, gain, gender, || {
            normal.sample(&mut rng)
        });
        out.push(Utterance {
            id: format!("utt{i:05}"),
            transcript: TokenSequence::new(tokens),
            duration_frames: features.rows(),
            features,
            loudness_gain: gain,
            gender,
        });
    }
    Ok(out)
}
