//! Audio clips, WAV files and the paired dry/wet corpus.

use std::collections::HashSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mono sample sequence at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Pcm24,
    Float32,
}

fn hound_err(path: &Path, e: hound::Error, reading: bool) -> Error {
    match e {
        // the file itself opened fine, so a short read means a truncated chunk
        hound::Error::IoError(io) if reading => Error::Parse { path: path.to_path_buf(), message: io.to_string() },
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat { path: path.to_path_buf(), message: "codec not supported".into() }
        }
        hound::Error::FormatError(m) => Error::Parse { path: path.to_path_buf(), message: m.into() },
        other => Error::Parse { path: path.to_path_buf(), message: other.to_string() },
    }
}

/// Reads a RIFF/WAVE file (PCM 16/24-bit or 32-bit float). Channels are
/// averaged to mono and integer samples scaled by `1/2^(bits−1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = BufReader::new(fs::File::open(path)?);
    let parse_err = |e| hound_err(path, e, true);
    let reader = hound::WavReader::new(file).map_err(parse_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(parse_err)?
        }
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(parse_err)?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                message: format!("{bits}-bit {fmt:?} samples"),
            })
        }
    };
    if channels == 0 {
        return Err(Error::Parse { path: path.to_path_buf(), message: "zero channels".into() });
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(channels).map(|c| c.iter().sum::<f32>() / channels as f32).collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file and returns how many samples were clipped to
/// `[−1, 1]` (always 0 for float output).
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>, depth: BitDepth) -> Result<usize> {
    let path = path.as_ref();
    let (bits, format) = match depth {
        BitDepth::Pcm16 => (16, hound::SampleFormat::Int),
        BitDepth::Pcm24 => (24, hound::SampleFormat::Int),
        BitDepth::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: bits, sample_format: format };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e, false))?;
    let mut clipped = 0;
    match depth {
        BitDepth::Float32 => {
            for &s in &clip.samples {
                writer.write_sample(s).map_err(|e| hound_err(path, e, false))?;
            }
        }
        BitDepth::Pcm16 | BitDepth::Pcm24 => {
            let full = (1i64 << (bits - 1)) as f64;
            let (lo, hi) = (-full, full - 1.0);
            for &s in &clip.samples {
                if s.abs() > 1.0 {
                    clipped += 1;
                }
                let q = (s as f64 * full).round().clamp(lo, hi) as i32;
                writer.write_sample(q).map_err(|e| hound_err(path, e, false))?;
            }
        }
    }
    writer.finalize().map_err(|e| hound_err(path, e, false))?;
    if clipped > 0 {
        warn!("{}: clipped {clipped} samples", path.display());
    }
    Ok(clipped)
}

/// Scales the clip so its peak magnitude is exactly 1.
pub fn normalize_amplitude(clip: &AudioClip) -> Result<AudioClip> {
    let peak = clip.peak();
    if peak == 0.0 {
        return Err(Error::DegenerateInput("cannot normalize an all-zero clip".into()));
    }
    let samples = clip.samples.iter().map(|&v| v / peak).collect();
    AudioClip::new(samples, clip.sample_rate)
}

/// Multiplies the last `duration_s` seconds by a linear ramp from 1 down to
/// exactly 0 on the final sample: `r[k] = 1 − (k+1)/N`.
pub fn apply_fadeout(clip: &AudioClip, duration_s: f64) -> Result<AudioClip> {
    if !(duration_s >= 0.0) {
        return Err(Error::invalid(format!("fade duration {duration_s} must be non-negative")));
    }
    let n = (duration_s * clip.sample_rate as f64).round() as usize;
    if n > clip.len() {
        return Err(Error::invalid(format!(
            "fade of {n} samples is longer than the clip ({} samples)",
            clip.len()
        )));
    }
    let mut samples = clip.samples.clone();
    let start = samples.len() - n;
    for (k, s) in samples[start..].iter_mut().enumerate() {
        *s *= (1.0 - (k + 1) as f64 / n as f64) as f32;
    }
    AudioClip::new(samples, clip.sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One dry/wet example.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub id: String,
    pub dry: AudioClip,
    pub wet: AudioClip,
}

impl ClipPair {
    pub fn new(id: impl Into<String>, dry: AudioClip, wet: AudioClip) -> Result<Self> {
        let id = id.into();
        if dry.len() != wet.len() || dry.sample_rate() != wet.sample_rate() {
            return Err(Error::invalid(format!(
                "pair {id}: dry ({} samples @ {} Hz) and wet ({} samples @ {} Hz) differ",
                dry.len(),
                dry.sample_rate(),
                wet.len(),
                wet.sample_rate()
            )));
        }
        Ok(ClipPair { id, dry, wet })
    }
}

/// Paired corpus with a split assignment per pair.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<ClipPair>,
    splits: Vec<Split>,
}

impl PairedDataset {
    pub fn pairs(&self) -> &[ClipPair] {
        &self.pairs
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn subset(&self, split: Split) -> Vec<&ClipPair> {
        self.pairs.iter().zip(&self.splits).filter(|(_, s)| **s == split).map(|(p, _)| p).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// Builds a dataset with an explicit assignment (mainly for tests).
    pub fn with_splits(pairs: Vec<ClipPair>, splits: Vec<Split>) -> Result<Self> {
        if pairs.len() != splits.len() {
            return Err(Error::invalid("one split per pair required"));
        }
        check_unique_ids(&pairs)?;
        Ok(PairedDataset { pairs, splits })
    }
}

fn check_unique_ids(pairs: &[ClipPair]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::invalid(format!("duplicate pair id `{}`", p.id)));
        }
    }
    Ok(())
}

/// Number of held-out items: `round(frac·n)`, at least 1.
fn held_out(frac: f64, n: usize) -> usize {
    ((frac * n as f64).round() as usize).max(1)
}

/// Seeded shuffle, then the first `round(val_frac·N)` pairs go to
/// validation, the next `round(test_frac·N)` to test, the rest to training.
pub fn split_dataset(pairs: Vec<ClipPair>, val_frac: f64, test_frac: f64, seed: u64) -> Result<PairedDataset> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 pairs to split, got {n}")));
    }
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(val_frac) || !in_unit(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::invalid(format!("invalid split fractions {val_frac}/{test_frac}")));
    }
    check_unique_ids(&pairs)?;
    let n_val = held_out(val_frac, n);
    let n_test = held_out(test_frac, n);
    if n_val + n_test >= n {
        return Err(Error::invalid(format!("{n} pairs leave nothing for training")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_val] {
        splits[i] = Split::Validation;
    }
    for &i in &order[n_val..n_val + n_test] {
        splits[i] = Split::Test;
    }
    Ok(PairedDataset { pairs, splits })
}

/// One manifest line: `dry_path<TAB>wet_path<TAB>id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dry: PathBuf,
    pub wet: PathBuf,
    pub id: String,
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [dry, wet, id] = fields[..] else {
            return Err(Error::invalid(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        out.push(ManifestEntry { dry: base.join(dry), wet: base.join(wet), id: id.to_string() });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.dry.display(), e.wet.display(), e.id));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Corpus preparation applied to every pair before training: per-file peak
/// normalization, then an optional fade-out over the final `fadeout_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub normalize: bool,
    pub fadeout_s: f64,
    pub required_rate: u32,
}

pub fn condition_clip(clip: &AudioClip, cond: &Conditioning) -> Result<AudioClip> {
    if clip.sample_rate() != cond.required_rate {
        return Err(Error::invalid(format!(
            "clip is sampled at {} Hz; {} Hz is required (resample offline)",
            clip.sample_rate(),
            cond.required_rate
        )));
    }
    let mut c = if cond.normalize { normalize_amplitude(clip)? } else { clip.clone() };
    if cond.fadeout_s > 0.0 {
        c = apply_fadeout(&c, cond.fadeout_s)?;
    }
    Ok(c)
}

/// Loads every manifest pair and applies `cond` to both sides.
pub fn load_pairs(entries: &[ManifestEntry], cond: &Conditioning) -> Result<Vec<ClipPair>> {
    entries
        .iter()
        .map(|e| {
            let dry = condition_clip(&load_wav(&e.dry)?, cond)?;
            let wet = condition_clip(&load_wav(&e.wet)?, cond)?;
            ClipPair::new(e.id.clone(), dry, wet)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(v: &[f32]) -> AudioClip {
        AudioClip::new(v.to_vec(), 16000).unwrap()
    }

    fn write_i16(path: &Path, channels: u16, samples: &[i16]) {
        let spec = hound::WavSpec { channels, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_i16(&p, 1, &[32767, 0, -32768]);
        let c = load_wav(&p).unwrap();
        assert!((c.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(c.samples()[1], 0.0);
        assert_eq!(c.samples()[2], -1.0);
        assert_eq!(c.sample_rate(), 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [1.0f32, 0.0, 0.25, 0.75] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let c = load_wav(&p).unwrap();
        assert_eq!(c.samples(), &[0.5, 0.5]);
    }

    #[test]
    fn malformed_and_unsupported_files() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"RIFF\x10\x00\x00\x00WAVEjunkjunk").unwrap();
        let r = load_wav(&junk);
        assert!(matches!(r, Err(Error::Parse { .. } | Error::UnsupportedFormat { .. })), "{r:?}");

        let p8 = dir.path().join("eight.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 8, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p8), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn silence_pcm16_size_and_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        save_wav(&clip(&vec![0.0; 16000]), &p, BitDepth::Pcm16).unwrap();
        let reader = hound::WavReader::open(&p).unwrap();
        assert_eq!(reader.len() * 2, 32000);

        let clipped = save_wav(&clip(&[1.5, 0.2, -3.0]), &p, BitDepth::Pcm16).unwrap();
        assert_eq!(clipped, 2);
        let back = load_wav(&p).unwrap();
        assert!((back.samples()[0] - 32767.0 / 32768.0).abs() < 1e-7);
        assert_eq!(back.samples()[2], -1.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_amplitude(&clip(&[0.5, -0.25])).unwrap().samples(), &[1.0, -0.5]);
        assert_eq!(normalize_amplitude(&clip(&[-0.1])).unwrap().samples(), &[-1.0]);
        assert!(matches!(normalize_amplitude(&clip(&[0.0, 0.0])), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn fadeout_ramp() {
        let c = AudioClip::new(vec![1.0; 8], 8).unwrap();
        let f = apply_fadeout(&c, 0.5).unwrap();
        assert_eq!(f.samples(), &[1.0, 1.0, 1.0, 1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(apply_fadeout(&c, 0.0).unwrap(), c);
        assert!(apply_fadeout(&c, 2.0).is_err());
    }

    fn pairs(n: usize) -> Vec<ClipPair> {
        (0..n).map(|i| ClipPair::new(format!("p{i}"), clip(&[0.1]), clip(&[0.2])).unwrap()).collect()
    }

    #[test]
    fn split_sizes() {
        let d = split_dataset(pairs(624), 0.05, 0.05, 7).unwrap();
        assert_eq!((d.count(Split::Validation), d.count(Split::Test), d.count(Split::Train)), (31, 31, 562));
        let d = split_dataset(pairs(3), 0.05, 0.05, 7).unwrap();
        assert_eq!((d.count(Split::Validation), d.count(Split::Test), d.count(Split::Train)), (1, 1, 1));
        assert!(split_dataset(pairs(2), 0.05, 0.05, 7).is_err());
        assert!(split_dataset(pairs(10), 0.6, 0.5, 7).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let a = split_dataset(pairs(50), 0.1, 0.2, 3).unwrap();
        let b = split_dataset(pairs(50), 0.1, 0.2, 3).unwrap();
        assert_eq!(a.splits, b.splits);
        let total = a.count(Split::Train) + a.count(Split::Validation) + a.count(Split::Test);
        assert_eq!(total, 50);
        let c = split_dataset(pairs(50), 0.1, 0.2, 4).unwrap();
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a.wav\tb.wav\tone\n\n# comment\nc.wav\td.wav\ttwo\n", Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].dry, PathBuf::from("/data/c.wav"));
        assert_eq!(m[1].id, "two");
        assert!(parse_manifest("a.wav b.wav one\n", Path::new(".")).is_err());
    }

    #[test]
    fn conditioning_rejects_other_rates() {
        let c = AudioClip::new(vec![0.5; 10], 44100).unwrap();
        let cond = Conditioning { normalize: true, fadeout_s: 0.0, required_rate: 16000 };
        assert!(condition_clip(&c, &cond).is_err());
    }

    proptest! {
        #[test]
        fn pcm16_round_trip(samples in prop::collection::vec(-0.999f32..0.999, 1..100)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.wav");
            let c = clip(&samples);
            save_wav(&c, &p, BitDepth::Pcm16).unwrap();
            let back = load_wav(&p).unwrap();
            for (a, b) in c.samples().iter().zip(back.samples()) {
                prop_assert!((a - b).abs() < 1.0 / 32768.0);
            }
        }

        #[test]
        fn pcm24_and_float_round_trip(samples in prop::collection::vec(-1.0f32..1.0, 1..100)) {
            let dir = tempfile::tempdir().unwrap();
            let c = clip(&samples);
            let p = dir.path().join("f.wav");
            save_wav(&c, &p, BitDepth::Float32).unwrap();
            let back = load_wav(&p).unwrap();
            prop_assert_eq!(back.samples(), c.samples());
            let p = dir.path().join("i.wav");
            save_wav(&c, &p, BitDepth::Pcm24).unwrap();
            for (a, b) in c.samples().iter().zip(load_wav(&p).unwrap().samples()) {
                prop_assert!((a - b).abs() < 1.0 / 8_388_608.0 + 1e-7);
            }
        }

        #[test]
        fn normalize_is_idempotent(samples in prop::collection::vec(-4.0f32..4.0, 1..64)) {
            prop_assume!(samples.iter().any(|v| *v != 0.0));
            let c = clip(&samples);
            let once = normalize_amplitude(&c).unwrap();
            prop_assert_eq!(once.peak(), 1.0);
            let argmax = |c: &AudioClip| c.samples().iter().enumerate()
                .fold((0, 0.0f32), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) }).0;
            prop_assert_eq!(argmax(&once), argmax(&c));
            let twice = normalize_amplitude(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn fadeout_keeps_prefix(samples in prop::collection::vec(-1.0f32..1.0, 16..64), n in 0usize..16) {
            let c = AudioClip::new(samples.clone(), 16).unwrap();
            let f = apply_fadeout(&c, n as f64 / 16.0).unwrap();
            let keep = samples.len() - n;
            prop_assert_eq!(&f.samples()[..keep], &samples[..keep]);
        }
    }
}
