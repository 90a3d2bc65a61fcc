use sot_core::data::{generate_corpus, mix, MixPolicy, SynthSpec};
use sot_core::rng::substream;
use sot_core::trainer::{evaluate, train, TrainSample};
use sot_core::{ExperimentConfig, Strategy};

#[test]
fn single_talker_corpus_is_learned() {
    let spec = SynthSpec {
        seed: 21,
        ..SynthSpec::default()
    };
    let vocab = spec.vocabulary().unwrap();
    let corpus = generate_corpus(&spec, 50).unwrap();
    let mut rng = substream(21, "mixing");
    let samples: Vec<TrainSample<f32>> = corpus
        .iter()
        .enumerate()
        .map(|(i, u)| {
            TrainSample::from_mixture(&mix(format!("u{i}"), &[u], &MixPolicy::fixed_offset(1, 0), &mut rng).unwrap())
        })
        .collect();
    let cfg = ExperimentConfig {
        strategy: Strategy::Fifo,
        epochs: 60,
        warmup_epochs: 2,
        checkpoint_average_last: 1,
        learning_rate: 3e-3,
        seed: 21,
        ..ExperimentConfig::default()
    };
    let model = train(&cfg, &samples, &vocab).unwrap().model;
    let hyps = evaluate(&model, &samples, 16, &vocab).unwrap();
    let exact = hyps
        .iter()
        .zip(&samples)
        .filter(|((_, h), s)| {
            let mut expected = s.transcripts[0].ids().to_vec();
            expected.push(vocab.sc_id());
            h.ids() == expected.as_slice()
        })
        .count();
    assert!(exact >= 45, "{exact} of 50 exact");
}
