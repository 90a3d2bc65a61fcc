//! Weighted, offset mixing of 16-bit mono PCM files.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavMixReport {
    pub samples: usize,
    pub sample_rate: u32,
    /// Output samples that saturated at the 16-bit range.
    pub clipped: usize,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_pcm16(path: &Path) -> Result<(u32, Vec<i16>)> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "unsupported encoding: {} channel(s), {} bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok((spec.sample_rate, samples))
}

pub fn write_pcm16(path: &Path, sample_rate: u32, samples: &[i16]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        w.write_sample(s).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Sums `weights[i] * input[i]` delayed by `offsets[i]` samples and writes the
/// result; out-of-range sums saturate.
pub fn mix_waveforms(inputs: &[&Path], weights: &[f64], offsets: &[usize], output: &Path) -> Result<WavMixReport> {
    if inputs.is_empty() || inputs.len() != weights.len() || inputs.len() != offsets.len() {
        return Err(Error::Mix(
            "inputs, weights and offsets must be non-empty and of equal length".into(),
        ));
    }
    let mut rate = None;
    let mut tracks = Vec::with_capacity(inputs.len());
    for &p in inputs {
        let (r, s) = read_pcm16(p)?;
        match rate {
            None => rate = Some(r),
            Some(prev) if prev != r => {
                return Err(Error::format(p, format!("sample rate {r} differs from {prev}")));
            }
            Some(_) => {}
        }
        tracks.push(s);
    }
    let len = tracks.iter().zip(offsets).map(|(t, &o)| o + t.len()).max().unwrap_or(0);
    let mut acc = vec![0.0f64; len];
    for ((t, &w), &o) in tracks.iter().zip(weights).zip(offsets) {
        for (i, &s) in t.iter().enumerate() {
            acc[o + i] += w * f64::from(s);
        }
    }
    let mut clipped = 0;
    let out: Vec<i16> = acc
        .into_iter()
        .map(|x| {
            let r = x.round();
            if r > f64::from(i16::MAX) || r < f64::from(i16::MIN) {
                clipped += 1;
            }
            r.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
        })
        .collect();
    if clipped > 0 {
        warn!("{}: {clipped} samples clipped", output.display());
    }
    let sample_rate = rate.expect("at least one input");
    write_pcm16(output, sample_rate, &out)?;
    Ok(WavMixReport {
        samples: out.len(),
        sample_rate,
        clipped,
    })
}
