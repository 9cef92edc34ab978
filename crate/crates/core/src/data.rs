//! Paired clean/noisy corpus handling and the synthetic desk-scale corpus.
//!
//! On-disk layout for both supported schemes: `<root>/clean/*.wav` and
//! `<root>/noisy/*.wav` with matching filenames. Under the `voicebank`
//! layout the speaker is the filename prefix up to the first underscore and
//! speakers p226/p287 form the validation split; `paired-dirs` has no
//! speaker semantics and everything lands in the train split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::error::{Error, Result};
use crate::resample::resample_waveform;
use crate::spectral::{stft, ComplexSpectrogram, SpectralConfig, Waveform, PIPELINE_RATE};

/// Speakers held out for validation under the voicebank layout.
pub const VALIDATION_SPEAKERS: [&str; 2] = ["p226", "p287"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusLayout {
    #[default]
    Voicebank,
    PairedDirs,
}

impl std::str::FromStr for CorpusLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voicebank" => Ok(CorpusLayout::Voicebank),
            "paired-dirs" | "paired_dirs" => Ok(CorpusLayout::PairedDirs),
            other => Err(Error::Config(format!("unknown corpus layout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub speaker_id: String,
    pub utterance_id: String,
}

/// One split's worth of paired utterances, ordered by utterance id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    pub split: Split,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Result of scanning a corpus root: per-split manifests plus the files that
/// had no counterpart (reported, never silently dropped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusScan {
    pub train: CorpusManifest,
    pub val: CorpusManifest,
    pub unmatched: Vec<PathBuf>,
}

impl CorpusScan {
    pub fn split(&self, split: Split) -> &CorpusManifest {
        match split {
            Split::Train => &self.train,
            _ => &self.val,
        }
    }
}

fn wav_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) == Some("wav") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn speaker_of(utterance_id: &str) -> String {
    utterance_id
        .split('_')
        .next()
        .unwrap_or(utterance_id)
        .to_string()
}

/// Scan `<root>/clean` + `<root>/noisy` into per-split manifests.
pub fn scan_corpus(root: &Path, layout: CorpusLayout) -> Result<CorpusScan> {
    let clean_dir = root.join("clean");
    let noisy_dir = root.join("noisy");
    let clean = wav_stems(&clean_dir)?;
    let noisy = wav_stems(&noisy_dir)?;

    let mut unmatched = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (stem, clean_path) in &clean {
        match noisy.get(stem) {
            Some(noisy_path) => {
                let speaker = speaker_of(stem);
                let entry = CorpusEntry {
                    clean_path: clean_path.clone(),
                    noisy_path: noisy_path.clone(),
                    speaker_id: speaker.clone(),
                    utterance_id: stem.clone(),
                };
                let is_val = layout == CorpusLayout::Voicebank
                    && VALIDATION_SPEAKERS.contains(&speaker.as_str());
                if is_val {
                    val.push(entry);
                } else {
                    train.push(entry);
                }
            }
            None => unmatched.push(clean_path.clone()),
        }
    }
    for (stem, noisy_path) in &noisy {
        if !clean.contains_key(stem) {
            unmatched.push(noisy_path.clone());
        }
    }
    unmatched.sort();

    if train.is_empty() && val.is_empty() {
        return Err(Error::CorpusEmpty {
            root: root.to_path_buf(),
        });
    }
    Ok(CorpusScan {
        train: CorpusManifest {
            entries: train,
            split: Split::Train,
        },
        val: CorpusManifest {
            entries: val,
            split: Split::Val,
        },
        unmatched,
    })
}

/// Load one pair, resample both sides to `target_rate`, and equalize lengths
/// by truncating to the shorter (logged when it happens). No peak
/// normalization is applied.
pub fn load_pair(entry: &CorpusEntry, target_rate: u32) -> Result<(Waveform, Waveform)> {
    let clean = resample_waveform(&audio::read_wav(&entry.clean_path)?, target_rate)?;
    let noisy = resample_waveform(&audio::read_wav(&entry.noisy_path)?, target_rate)?;
    if clean.len() != noisy.len() {
        log::warn!(
            "{}: clean/noisy lengths differ after resampling ({} vs {}), truncating",
            entry.utterance_id,
            clean.len(),
            noisy.len()
        );
        let n = clean.len().min(noisy.len());
        let clean = Waveform::new(clean.samples()[..n].to_vec(), target_rate)?;
        let noisy = Waveform::new(noisy.samples()[..n].to_vec(), target_rate)?;
        return Ok((clean, noisy));
    }
    Ok((clean, noisy))
}

/// Synthetic corpus: clean utterances are sums of 2-4 harmonics with a slow
/// amplitude envelope; noisy adds one-pole-filtered noise at an SNR drawn
/// uniformly from [0, 10] dB. The last `n_val` utterances are written under
/// speaker `p226` so the voicebank split rule assigns them to validation.
/// Fully determined by `seed`.
pub fn synth_corpus(
    root: &Path,
    n_utts: usize,
    n_val: usize,
    seed: u64,
    duration_s: f64,
) -> Result<CorpusScan> {
    if n_utts == 0 || n_val > n_utts {
        return Err(Error::InvalidInput(format!(
            "need 1 <= n_val <= n_utts, got n_utts={n_utts} n_val={n_val}"
        )));
    }
    let clean_dir = root.join("clean");
    let noisy_dir = root.join("noisy");
    for dir in [&clean_dir, &noisy_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let n_samples = (duration_s * PIPELINE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_utts {
        let (clean, noisy) = synth_pair(n_samples, &mut rng);
        let speaker = if i >= n_utts - n_val { "p226" } else { "s000" };
        let name = format!("{speaker}_{i:04}.wav");
        audio::write_wav_f32(&clean_dir.join(&name), &clean)?;
        audio::write_wav_f32(&noisy_dir.join(&name), &noisy)?;
    }
    scan_corpus(root, CorpusLayout::Voicebank)
}

fn synth_pair(n_samples: usize, rng: &mut ChaCha8Rng) -> (Waveform, Waveform) {
    let n_harmonics = rng.gen_range(2..=4usize);
    let f0 = rng.gen_range(100.0..300.0);
    let env_freq = rng.gen_range(0.3..1.0);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let phases: Vec<f64> = (0..n_harmonics)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut clean: Vec<f64> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / PIPELINE_RATE as f64;
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * env_freq * t + env_phase).sin();
            let mut v = 0.0;
            for (h, phase) in phases.iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                v += (std::f64::consts::TAU * f * t + phase).sin() / (h + 1) as f64;
            }
            env * v
        })
        .collect();
    let rms = (clean.iter().map(|x| x * x).sum::<f64>() / n_samples as f64).sqrt();
    let target_rms = 0.08;
    for s in &mut clean {
        *s *= target_rms / rms;
    }

    // one-pole lowpassed noise, scaled to the drawn SNR
    let snr_db: f64 = rng.gen_range(0.0..10.0);
    let mut noise = Vec::with_capacity(n_samples);
    let mut state = 0.0;
    for _ in 0..n_samples {
        let w: f64 = rng.gen_range(-1.0..1.0);
        state = 0.7 * state + 0.3 * w;
        noise.push(state);
    }
    let p_clean: f64 = clean.iter().map(|x| x * x).sum();
    let p_noise: f64 = noise.iter().map(|x| x * x).sum();
    let scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy: Vec<f64> = clean
        .iter()
        .zip(&noise)
        .map(|(c, n)| c + scale * n)
        .collect();

    (
        Waveform::new(clean, PIPELINE_RATE).expect("finite synth"),
        Waveform::new(noisy, PIPELINE_RATE).expect("finite synth"),
    )
}

/// A clean/noisy spectrogram pair ready for path sampling.
#[derive(Debug, Clone)]
pub struct SpectroPair {
    pub clean: ComplexSpectrogram,
    pub noisy: ComplexSpectrogram,
    pub utterance_id: String,
}

/// A validation utterance kept in the time domain.
#[derive(Debug, Clone)]
pub struct ValUtterance {
    pub id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
}

/// Everything the trainer consumes, preloaded in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<SpectroPair>,
    pub val: Vec<ValUtterance>,
}

/// Load and transform a scanned corpus for training.
pub fn load_train_data(scan: &CorpusScan, spectral: &SpectralConfig) -> Result<TrainData> {
    if scan.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let mut train = Vec::with_capacity(scan.train.len());
    for entry in &scan.train.entries {
        let (clean, noisy) = load_pair(entry, PIPELINE_RATE)?;
        train.push(SpectroPair {
            clean: stft(&clean, spectral)?,
            noisy: stft(&noisy, spectral)?,
            utterance_id: entry.utterance_id.clone(),
        });
    }
    let mut val = Vec::with_capacity(scan.val.len());
    for entry in &scan.val.entries {
        let (clean, noisy) = load_pair(entry, PIPELINE_RATE)?;
        val.push(ValUtterance {
            id: entry.utterance_id.clone(),
            clean,
            noisy,
        });
    }
    Ok(TrainData { train, val })
}
