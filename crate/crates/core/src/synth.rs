//! Synthetic dry/wet corpora with a known reverberation: dry material
//! convolved with a decaying velvet-noise impulse response.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::audio::{save_wav, write_manifest, AudioClip, BitDepth, ClipPair, ManifestEntry};
use crate::dsp::{convolve_truncated, velvet_noise_ir};
use crate::error::Result;

/// Velvet noise shaped by `exp(−k / (len/5))`, with a unit direct-path tap.
pub fn decaying_velvet_ir(len: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    let mut ir = velvet_noise_ir(len, 2000, sample_rate, seed)?;
    let tau = len as f64 / 5.0;
    for (k, v) in ir.iter_mut().enumerate() {
        *v *= (-(k as f64) / tau).exp();
    }
    ir[0] = 1.0;
    Ok(ir)
}

pub fn sine(len: usize, freq: f64, amp: f64, sample_rate: u32) -> Vec<f64> {
    (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / f64::from(sample_rate)).sin()).collect()
}

/// Exponentially decaying notes `(frequency, onset sample)`, peak-normalized.
pub fn notes(len: usize, notes: &[(f64, usize)], decay_per_s: f64, sample_rate: u32) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let mut x = vec![0.0; len];
    for &(f, onset) in notes {
        for (n, v) in x.iter_mut().enumerate().skip(onset) {
            let t = (n - onset) as f64 / sr;
            *v += (-t * decay_per_s).exp() * (2.0 * PI * f * t).sin();
        }
    }
    peak_normalize(&mut x);
    x
}

fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
}

fn to_clip(x: &[f64], sample_rate: u32) -> Result<AudioClip> {
    AudioClip::new(x.iter().map(|&v| v as f32).collect(), sample_rate)
}

/// `dry` and its convolution with `ir`, truncated to the dry length and
/// peak-normalized.
pub fn reverb_pair(id: &str, dry: &[f64], ir: &[f64], sample_rate: u32) -> Result<ClipPair> {
    let mut wet = convolve_truncated(dry, ir);
    peak_normalize(&mut wet);
    ClipPair::new(id, to_clip(dry, sample_rate)?, to_clip(&wet, sample_rate)?)
}

/// `n` sine clips spread over 220–660 Hz, all through the same impulse response.
pub fn sine_corpus(n: usize, len: usize, ir: &[f64], sample_rate: u32) -> Result<Vec<ClipPair>> {
    (0..n)
        .map(|i| {
            let f = if n > 1 { 220.0 + 440.0 * i as f64 / (n - 1) as f64 } else { 220.0 };
            reverb_pair(&format!("sine{i:02}"), &sine(len, f, 0.8, sample_rate), ir, sample_rate)
        })
        .collect()
}

/// Writes every pair as 32-bit float WAVs plus a manifest; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, pairs: &[ClipPair]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for p in pairs {
        // names relative to the manifest, so the directory can be moved
        let dry = PathBuf::from(format!("{}_dry.wav", p.id));
        let wet = PathBuf::from(format!("{}_wet.wav", p.id));
        save_wav(&p.dry, &dir.join(&dry), BitDepth::Float32)?;
        save_wav(&p.wet, &dir.join(&wet), BitDepth::Float32)?;
        entries.push(ManifestEntry { dry, wet, id: p.id.clone() });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
