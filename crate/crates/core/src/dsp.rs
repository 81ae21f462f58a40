//! Framing, overlap-add synthesis, pre-emphasis, spectra and the velvet-noise
//! generator.
//!
//! Analysis frames are rectangular; the periodic Hann window is applied only
//! when frames are overlap-added back into a waveform.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Added to the power spectrum before the logarithm; `ln(1e-10) ≈ −23.03`.
pub const SPECTRAL_FLOOR: f64 = 1e-10;

/// Pre-emphasis coefficient of the time-domain loss, `H(z) = 1 − 0.95 z⁻¹`.
pub const PRE_EMPHASIS: f64 = 0.95;

/// Splits `signal` into frames of `frame_size` starting every `hop` samples.
///
/// Frame `i` covers `[i·hop, i·hop + frame_size)`; there are
/// `ceil(len / hop)` frames and the tail is zero-padded.
pub fn frame_signal<T: Real>(signal: &[T], frame_size: usize, hop: usize) -> Result<Vec<Vec<T>>> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot frame an empty signal"));
    }
    if frame_size == 0 || frame_size % 2 != 0 || hop * 2 != frame_size {
        return Err(Error::invalid(format!("frame size {frame_size} must be even with hop = frame/2 (got hop {hop})")));
    }
    let count = signal.len().div_ceil(hop);
    Ok((0..count)
        .map(|i| {
            let start = i * hop;
            let end = (start + frame_size).min(signal.len());
            let mut f = vec![T::zero(); frame_size];
            f[..end - start].copy_from_slice(&signal[start..end]);
            f
        })
        .collect())
}

/// One model input: the current frame with `k` neighbours on each side.
#[derive(Clone, Debug)]
pub struct FrameStack<T> {
    /// `[2k+1 × frame_size]`, oldest first; row `k` is the current frame.
    pub frames: Tensor<T>,
    pub center_index: usize,
    pub hop: usize,
}

impl<T: Real> FrameStack<T> {
    pub fn context(&self) -> usize {
        (self.frames.shape()[0] - 1) / 2
    }

    pub fn frame_size(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn current(&self) -> &[T] {
        self.frames.row(self.context())
    }

    pub fn row(&self, j: usize) -> &[T] {
        self.frames.row(j)
    }

    pub fn zeros(k: usize, frame_size: usize, hop: usize) -> Self {
        FrameStack { frames: Tensor::zeros(&[2 * k + 1, frame_size]), center_index: 0, hop }
    }
}

/// Stacks `frames[i−k ..= i+k]`, substituting zero rows past either end.
pub fn make_context<T: Real>(frames: &[Vec<T>], i: usize, k: usize, hop: usize) -> Result<FrameStack<T>> {
    if i >= frames.len() {
        return Err(Error::invalid(format!("frame index {i} out of range for {} frames", frames.len())));
    }
    let n = frames[i].len();
    let mut data = Vec::with_capacity((2 * k + 1) * n);
    for j in 0..=2 * k {
        let src = (i + j).checked_sub(k).and_then(|s| frames.get(s));
        match src {
            Some(f) => data.extend_from_slice(f),
            None => data.extend(std::iter::repeat_n(T::zero(), n)),
        }
    }
    Ok(FrameStack { frames: Tensor::new(&[2 * k + 1, n], data)?, center_index: i, hop })
}

/// Periodic (DFT-even) Hann window.
pub fn hann_periodic<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Sum of the window over all hop-shifted copies at sample 0 (constant for a
/// COLA-compliant window/hop pair).
pub fn overlap_gain<T: Real>(window: &[T], hop: usize) -> T {
    (0..window.len()).step_by(hop).map(|i| window[i]).sum()
}

/// Windowed overlap-add. The result has `(n−1)·hop + frame_size` samples.
pub fn overlap_add<T: Real>(frames: &[Vec<T>], hop: usize) -> Result<Vec<T>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if frames.iter().any(|f| f.len() != n) {
        return Err(Error::invalid("overlap_add: frames have inconsistent lengths"));
    }
    if hop == 0 || hop * 2 != n {
        return Err(Error::invalid(format!("overlap_add: hop {hop} must be half the frame length {n}")));
    }
    let window = hann_periodic::<T>(n);
    let gain = overlap_gain(&window, hop);
    let mut out = vec![T::zero(); (frames.len() - 1) * hop + n];
    for (i, f) in frames.iter().enumerate() {
        let dst = &mut out[i * hop..i * hop + n];
        for ((o, &s), &w) in dst.iter_mut().zip(f).zip(&window) {
            *o = *o + s * w;
        }
    }
    out.iter_mut().for_each(|v| *v = *v / gain);
    Ok(out)
}

pub fn pre_emphasis<T: Real>(signal: &[T], coeff: T) -> Result<Vec<T>> {
    if signal.is_empty() {
        return Err(Error::invalid("pre-emphasis of an empty signal"));
    }
    let mut out = Vec::with_capacity(signal.len());
    out.push(signal[0]);
    out.extend(signal.windows(2).map(|w| w[1] - coeff * w[0]));
    Ok(out)
}

/// Non-redundant half of the DFT: bins `0 ..= n/2`.
pub fn rfft<T: Real>(x: &[T]) -> Result<Vec<Complex<T>>> {
    if x.is_empty() {
        return Err(Error::invalid("FFT of an empty frame"));
    }
    let n = x.len();
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// In-place inverse DFT without the `1/n` factor.
pub fn ifft_unnormalized<T: Real>(buf: &mut [Complex<T>]) {
    FftPlanner::new().plan_fft_inverse(buf.len()).process(buf);
}

/// Log-power spectrum of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFrame<T> {
    pub bins: Vec<T>,
}

pub fn log_power_spectrum<T: Real>(frame: &[T]) -> Result<SpectralFrame<T>> {
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("log_power_spectrum: non-finite input"));
    }
    let eps = T::lit(SPECTRAL_FLOOR);
    let bins = rfft(frame)?.iter().map(|z| (z.norm_sqr() + eps).ln()).collect();
    Ok(SpectralFrame { bins })
}

/// Velvet-noise impulse response: one ±1 pulse at a uniformly random
/// position inside every grid interval of `sample_rate / density` samples.
pub fn velvet_noise_ir(length: usize, density_per_s: u32, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if density_per_s == 0 || sample_rate % density_per_s != 0 {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} is not a multiple of the pulse density {density_per_s}"
        )));
    }
    let grid = (sample_rate / density_per_s) as usize;
    if length % grid != 0 {
        return Err(Error::invalid(format!("length {length} is not a multiple of the grid {grid}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ir = vec![0.0; length];
    for start in (0..length).step_by(grid) {
        let pos = rng.random_range(0..grid);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        ir[start + pos] = sign;
    }
    Ok(ir)
}

/// Direct-form causal convolution truncated to `x.len()` samples.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (lag, &hv) in h.iter().enumerate() {
        if hv == 0.0 || lag >= x.len() {
            continue;
        }
        for (o, &xv) in out[lag..].iter_mut().zip(x) {
            *o += hv * xv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_counts_cover_signal() {
        let frames = frame_signal(&vec![1.0f64; 8192], 4096, 2048).unwrap();
        assert_eq!(frames.len(), 4);
        assert!(frames[3][2048..].iter().all(|&v| v == 0.0));
        assert!(frames[2].iter().all(|&v| v == 1.0));

        let frames = frame_signal(&vec![1.0f64; 4096], 4096, 2048).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[1][..2048].iter().all(|&v| v == 1.0));
        assert!(frames[1][2048..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn framing_rejects_bad_arguments() {
        assert!(frame_signal::<f64>(&[], 8, 4).is_err());
        assert!(frame_signal(&[1.0f64; 10], 8, 3).is_err());
        assert!(frame_signal(&[1.0f64; 10], 7, 3).is_err());
    }

    #[test]
    fn context_pads_with_zero_rows() {
        let frames: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 + 1.0; 4]).collect();
        let s = make_context(&frames, 0, 4, 2).unwrap();
        for j in 0..4 {
            assert!(s.row(j).iter().all(|&v| v == 0.0));
        }
        assert_eq!(s.current(), &frames[0][..]);

        let s = make_context(&frames, 4, 4, 2).unwrap();
        for j in 0..9 {
            assert_eq!(s.row(j), &frames[j][..]);
        }
        assert!(make_context(&frames, 9, 4, 2).is_err());
    }

    #[test]
    fn hann_overlap_sum_is_constant() {
        for n in [8usize, 512, 4096] {
            let w = hann_periodic::<f64>(n);
            let hop = n / 2;
            for i in 0..hop {
                assert!((w[i] + w[i + hop] - 1.0).abs() < 1e-12);
            }
            assert!((overlap_gain(&w, hop) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_add_reconstructs_interior() {
        let x = noise(40960, 1);
        let frames = frame_signal(&x, 4096, 2048).unwrap();
        let y = overlap_add(&frames, 2048).unwrap();
        let err = x[2048..x.len() - 2048]
            .iter()
            .zip(&y[2048..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "interior error {err}");
    }

    #[test]
    fn overlap_add_edge_cases() {
        let zeros = vec![vec![0.0f64; 8]; 3];
        assert!(overlap_add(&zeros, 4).unwrap().iter().all(|&v| v == 0.0));

        let mut f = vec![0.0f64; 4096];
        f[2048] = 1.0;
        let y = overlap_add(&[f], 2048).unwrap();
        assert!((y[2048] - 1.0).abs() < 1e-12);

        assert!(overlap_add(&[vec![0.0f64; 8], vec![0.0; 6]], 4).is_err());
    }

    #[test]
    fn pre_emphasis_direct_formula() {
        assert_eq!(pre_emphasis(&[1.0, 0.0, 0.0], 0.95).unwrap(), vec![1.0, -0.95, 0.0]);
        let y = pre_emphasis(&[1.0f64, 1.0, 1.0], 0.95).unwrap();
        assert_eq!(y[0], 1.0);
        assert!((y[1] - 0.05).abs() < 1e-15 && (y[2] - 0.05).abs() < 1e-15);
        assert!(pre_emphasis::<f64>(&[], 0.95).is_err());
    }

    #[test]
    fn log_spectrum_closed_forms() {
        let floor = SPECTRAL_FLOOR.ln();
        let z = log_power_spectrum(&vec![0.0f64; 4096]).unwrap();
        assert_eq!(z.bins.len(), 2049);
        assert!(z.bins.iter().all(|&b| (b - floor).abs() < 1e-9));

        let mut imp = vec![0.0f64; 4096];
        imp[0] = 1.0;
        let s = log_power_spectrum(&imp).unwrap();
        assert!(s.bins.iter().all(|&b| (b - (1.0 + SPECTRAL_FLOOR).ln()).abs() < 1e-6));

        let mut bad = vec![0.0f64; 16];
        bad[3] = f64::NAN;
        assert!(log_power_spectrum(&bad).is_err());
    }

    #[test]
    fn shifted_impulse_has_identical_power() {
        let mut a = vec![0.0f64; 64];
        let mut b = vec![0.0f64; 64];
        a[0] = 1.0;
        b[17] = 1.0;
        let (sa, sb) = (log_power_spectrum(&a).unwrap(), log_power_spectrum(&b).unwrap());
        for (x, y) in sa.bins.iter().zip(&sb.bins) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn velvet_noise_structure() {
        let ir = velvet_noise_ir(16, 2000, 16000, 5).unwrap();
        let nz: Vec<usize> = (0..16).filter(|&i| ir[i] != 0.0).collect();
        assert_eq!(nz.len(), 2);
        assert!(nz[0] < 8 && (8..16).contains(&nz[1]));
        assert!(ir.iter().all(|&v| v == 0.0 || v.abs() == 1.0));

        let second = velvet_noise_ir(16000, 2000, 16000, 9).unwrap();
        assert_eq!(second.iter().filter(|&&v| v != 0.0).count(), 2000);
        assert_eq!(second, velvet_noise_ir(16000, 2000, 16000, 9).unwrap());
        assert!(velvet_noise_ir(15, 2000, 16000, 0).is_err());
    }
}
