//! Training loop: strategy-dispatched losses, Adam with linear warmup, and
//! averaging of the final epoch checkpoints.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Strategy};
use crate::ctc::{ctc_loss, LogitGrid};
use crate::data::MixtureSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::model::{Gradients, Model, ModelConfig};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::serialization::{
    build_serialized_label, ce_loss, dom_loss, fifo_order, pit_best_permutation, DEFAULT_MAX_PIT_SPEAKERS,
};
use crate::vocab::{TokenSequence, Vocabulary};

/// A training or evaluation example in the model's scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub id: String,
    pub features: Matrix<T>,
    pub transcripts: Vec<TokenSequence>,
    pub start_frames: Vec<usize>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn from_mixture(m: &MixtureSample) -> Self {
        TrainSample {
            id: m.id.clone(),
            features: m.features.cast(),
            transcripts: m.transcripts(),
            start_frames: m.start_frames(),
        }
    }
}

/// Architecture implied by an experiment configuration.
pub fn model_config(cfg: &ExperimentConfig, feature_dim: usize, content_size: usize) -> ModelConfig {
    let mut mc = ModelConfig::new(feature_dim, content_size);
    mc.hidden = cfg.hidden;
    mc.subsample_factor = cfg.subsample_factor;
    mc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss<T> {
    pub loss: T,
    /// Minimum CTC term (dominance strategy only).
    pub ctc_min: Option<T>,
    /// Speaker order of the training label.
    pub order: Vec<usize>,
    pub grads: Option<Gradients<T>>,
}

/// An output node and the adjoint to seed it with, if any.
type Seed<T> = (Var, Option<Matrix<T>>);

/// Loss of one sample under `strategy`. With `fixed_order` the label order
/// (and, for the dominance loss, the CTC component `order[0]`) is taken as
/// given instead of being chosen from the current model.
pub fn sample_loss<T: Scalar>(
    model: &Model<T>,
    sample: &TrainSample<T>,
    strategy: Strategy,
    alpha: T,
    vocab: &Vocabulary,
    fixed_order: Option<&[usize]>,
    with_grad: bool,
) -> Result<SampleLoss<T>> {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &sample.features)?;
    if let Some(&bad) = g.value(enc.grid).as_slice().iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            sample: sample.id.clone(),
            value: bad.to_f64_lossy(),
        });
    }
    let ts = &sample.transcripts;

    let (loss, ctc_min, order, seeds): (T, Option<T>, Vec<usize>, Vec<Seed<T>>) = match (strategy, fixed_order) {
        (Strategy::Fifo, None) => {
            let order = fifo_order(&sample.start_frames);
            let (loss, seed) = ce_for_order(model, &mut g, &enc, ts, &order, vocab, with_grad)?;
            (loss, None, order, vec![seed])
        }
        (Strategy::Fifo | Strategy::Pit, Some(order)) => {
            let (loss, seed) = ce_for_order(model, &mut g, &enc, ts, order, vocab, with_grad)?;
            (loss, None, order.to_vec(), vec![seed])
        }
        (Strategy::Pit, None) => {
            let mut vars = Vec::new();
            let res = pit_best_permutation(
                |label| {
                    let pass = model.decode_teacher_forced(&mut g, &enc, label.ids(), vocab)?;
                    vars.push(pass.logits);
                    Ok(g.value(pass.logits).clone())
                },
                ts,
                vocab,
                DEFAULT_MAX_PIT_SPEAKERS,
                with_grad,
            )?;
            let idx = res
                .all_losses
                .iter()
                .position(|(p, _)| *p == res.best_permutation)
                .expect("winner is among the candidates");
            (
                res.best_loss,
                None,
                res.best_permutation,
                vec![(vars[idx], res.best_grad)],
            )
        }
        (Strategy::Dom, None) => {
            let grid = LogitGrid::encoder(g.value(enc.grid).clone())?;
            let mut logits_var = None;
            let d = dom_loss(
                &grid,
                |label| {
                    let pass = model.decode_teacher_forced(&mut g, &enc, label.ids(), vocab)?;
                    logits_var = Some(pass.logits);
                    Ok(g.value(pass.logits).clone())
                },
                ts,
                alpha,
                vocab,
                with_grad,
            )?;
            let seeds = vec![
                (enc.grid, d.grid_grad),
                (logits_var.expect("decoder was run"), d.logits_grad),
            ];
            (d.loss, Some(d.ctc_min), d.label.order, seeds)
        }
        (Strategy::Dom, Some(order)) => {
            let grid = LogitGrid::encoder(g.value(enc.grid).clone())?;
            let first = *order.first().ok_or_else(|| Error::InvalidPermutation(order.to_vec()))?;
            let ctc = ctc_loss(&grid, ts[first].ids(), with_grad)?;
            let (ce, seed) = ce_for_order(model, &mut g, &enc, ts, order, vocab, with_grad)?;
            let one_minus = T::one() - alpha;
            let seeds = vec![
                (enc.grid, ctc.grad.map(|m| m.scale(alpha))),
                (seed.0, seed.1.map(|m| m.scale(one_minus))),
            ];
            (alpha * ctc.loss + one_minus * ce, Some(ctc.loss), order.to_vec(), seeds)
        }
    };

    if !loss.is_finite() {
        return Err(Error::NonFinite {
            sample: sample.id.clone(),
            value: loss.to_f64_lossy(),
        });
    }
    let grads = if with_grad {
        let seeds: Vec<(Var, &Matrix<T>)> = seeds.iter().filter_map(|(v, m)| m.as_ref().map(|m| (*v, m))).collect();
        Some(model.backward(&g, &seeds)?)
    } else {
        None
    };
    Ok(SampleLoss {
        loss,
        ctc_min,
        order,
        grads,
    })
}

fn ce_for_order<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    enc: &crate::model::Encoded,
    transcripts: &[TokenSequence],
    order: &[usize],
    vocab: &Vocabulary,
    with_grad: bool,
) -> Result<(T, Seed<T>)> {
    let label = build_serialized_label(transcripts, order, vocab)?;
    let pass = model.decode_teacher_forced(g, enc, label.ids(), vocab)?;
    let ce = ce_loss(g.value(pass.logits), label.ids(), vocab, with_grad)?;
    Ok((ce.loss, (pass.logits, ce.grad)))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Matrix<T>> = model.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn update(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.epsilon));
        for (k, p) in model.params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (((x, &g), m), v) in p.as_mut_slice().iter_mut().zip(grads[k].as_slice()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Learning rate at 0-based `step`: linear ramp over `warmup_steps`, then flat.
pub fn learning_rate(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_ctc_min: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    /// Per-step mean batch loss, before each update.
    pub step_losses: Vec<f64>,
    pub skipped: usize,
}

/// Trains from the `init` substream of `cfg.seed`.
pub fn train<T: Scalar>(
    cfg: &ExperimentConfig,
    samples: &[TrainSample<T>],
    vocab: &Vocabulary,
) -> Result<TrainOutput<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no training samples".into()))?;
    let mc = model_config(cfg, first.features.cols(), vocab.content_size());
    let model = Model::init(mc, &mut substream(cfg.seed, "init"));
    train_from(cfg, model, samples, vocab)
}

/// Trains an existing model; batches are drawn from the `shuffle` substream.
pub fn train_from<T: Scalar>(
    cfg: &ExperimentConfig,
    mut model: Model<T>,
    samples: &[TrainSample<T>],
    vocab: &Vocabulary,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let alpha = T::from_f64_lossy(cfg.alpha);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut rng = substream(cfg.seed, "shuffle");
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut recent: VecDeque<Model<T>> = VecDeque::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut skipped = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ctc_sum, mut counted) = (0.0, 0.0, 0usize);
        let mut lr = learning_rate(cfg.learning_rate, adam.steps(), warmup_steps);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Gradients<T>> = None;
            let (mut batch_loss, mut n) = (0.0, 0usize);
            for &i in batch {
                let s = &samples[i];
                let r = match sample_loss(&model, s, cfg.strategy, alpha, vocab, None, true) {
                    Ok(r) => r,
                    Err(Error::AllInfeasible) => {
                        warn!("{}: no component transcript fits the encoder output; skipped", s.id);
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let grads = r.grads.expect("requested");
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (a, g) in a.iter_mut().zip(&grads) {
                            a.add_scaled(g, T::one());
                        }
                    }
                }
                batch_loss += r.loss.to_f64_lossy();
                if let Some(c) = r.ctc_min {
                    ctc_sum += c.to_f64_lossy();
                }
                n += 1;
            }
            let Some(mut grads) = acc else { continue };
            let inv = T::one() / T::from_usize_lossy(n);
            for g in &mut grads {
                *g = g.scale(inv);
            }
            lr = learning_rate(cfg.learning_rate, adam.steps(), warmup_steps);
            adam.update(&mut model, &grads, lr);
            step_losses.push(batch_loss / n as f64);
            loss_sum += batch_loss;
            counted += n;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite {
                sample: format!("epoch {epoch} parameters"),
                value: f64::NAN,
            });
        }
        let mean = |x: f64| if counted == 0 { 0.0 } else { x / counted as f64 };
        let entry = EpochLog {
            epoch,
            mean_loss: mean(loss_sum),
            mean_ctc_min: (cfg.strategy == Strategy::Dom).then(|| mean(ctc_sum)),
            lr,
        };
        info!("epoch {epoch}: loss {:.4}", entry.mean_loss);
        log.push(entry);
        if cfg.checkpoint_average_last > 0 {
            recent.push_back(model.clone());
            if recent.len() > cfg.checkpoint_average_last {
                recent.pop_front();
            }
        }
    }
    let recent: Vec<Model<T>> = recent.into();
    let model = if recent.is_empty() {
        model
    } else {
        Model::average(&recent)?
    };
    Ok(TrainOutput {
        model,
        log,
        step_losses,
        skipped,
    })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    crate::data::io::write_jsonl(path, log)
}

/// Greedy-decodes every sample.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[TrainSample<T>],
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<(String, TokenSequence)>> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), model.transcribe(&s.features, max_len, vocab)?)))
        .collect()
}

/// Writes `id<TAB>tokens` lines; `<sc>` markers are kept.
pub fn write_hypotheses(path: &Path, hyps: &[(String, TokenSequence)], vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, seq) in hyps {
        writeln!(w, "{id}\t{}", vocab.decode(seq)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path, vocab: &Vocabulary) -> Result<Vec<(String, TokenSequence)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected id<TAB>tokens", i + 1)))?;
        let seq = vocab
            .encode_symbols(text)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push((id.to_owned(), seq));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, mix, MixPolicy, SynthSpec};

    fn small_set(n: usize, seed: u64) -> (Vec<TrainSample<f64>>, Vocabulary) {
        let spec = SynthSpec {
            vocab_size: 4,
            feature_dim: 6,
            gender_channel: 5,
            seed,
            ..SynthSpec::default()
        };
        let vocab = spec.vocabulary().unwrap();
        let corpus = generate_corpus(&spec, 2 * n).unwrap();
        let mut rng = substream(seed, "mixing");
        let samples = (0..n)
            .map(|i| {
                let m = mix(
                    format!("s{i}"),
                    &[&corpus[2 * i], &corpus[2 * i + 1]],
                    &MixPolicy::partial_offset(2),
                    &mut rng,
                )
                .unwrap();
                TrainSample::from_mixture(&m)
            })
            .collect();
        (samples, vocab)
    }

    fn quick(strategy: Strategy, epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            epochs,
            warmup_epochs: 1,
            batch_size: 4,
            checkpoint_average_last: 1,
            hidden: 8,
            strategy,
            learning_rate: 1e-2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(learning_rate(1e-3, 0, 10), 1e-4);
        assert_eq!(learning_rate(1e-3, 9, 10), 1e-3);
        assert_eq!(learning_rate(1e-3, 50, 10), 1e-3);
        assert_eq!(learning_rate(1e-3, 0, 0), 1e-3);
        let lrs: Vec<f64> = (0..20).map(|s| learning_rate(2e-3, s, 8)).collect();
        assert!(lrs.windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[8..].iter().all(|&x| x == 2e-3));
    }

    #[test]
    fn training_is_deterministic() {
        let (samples, vocab) = small_set(8, 1);
        for s in Strategy::ALL {
            let a = train(&quick(s, 2), &samples, &vocab).unwrap();
            let b = train(&quick(s, 2), &samples, &vocab).unwrap();
            assert_eq!(a.step_losses, b.step_losses);
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn averaging_one_checkpoint_is_the_last_epoch() {
        let (samples, vocab) = small_set(8, 2);
        let mut cfg = quick(Strategy::Dom, 3);
        let averaged = train(&cfg, &samples, &vocab).unwrap();
        cfg.checkpoint_average_last = 0;
        let raw = train(&cfg, &samples, &vocab).unwrap();
        assert_eq!(averaged.model, raw.model);
        assert!(averaged.log.iter().all(|e| e.mean_ctc_min.is_some()));
    }

    #[test]
    fn loss_decreases_for_every_strategy() {
        for s in Strategy::ALL {
            let mut passes = 0;
            for seed in 0..3 {
                let (samples, vocab) = small_set(20, 10 + seed);
                let mut cfg = quick(s, 40);
                cfg.seed = seed;
                cfg.batch_size = 4;
                let out = train(&cfg, &samples, &vocab).unwrap();
                assert_eq!(out.step_losses.len(), 200);
                let head: f64 = out.step_losses[..5].iter().sum();
                let tail: f64 = out.step_losses[195..].iter().sum();
                passes += usize::from(tail < head);
            }
            assert!(passes >= 2, "{s}: {passes}/3");
        }
    }

    #[test]
    fn hypotheses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::numbered(3).unwrap();
        let hyps = vec![
            ("a".to_owned(), TokenSequence::new(vec![0, v.sc_id(), 2, v.sc_id()])),
            ("b".to_owned(), TokenSequence::new(vec![])),
        ];
        let p = dir.path().join("hyp.txt");
        write_hypotheses(&p, &hyps, &v).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\tw0 <sc> w2 <sc>\nb\t\n");
        assert_eq!(read_hypotheses(&p, &v).unwrap(), hyps);
        write_hypotheses(&p, &[], &v).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
    }
}
