//! Objective metrics and spectrogram export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::loss::{compute_loss, LossBreakdown};
use crate::audio::{AudioClip, ClipPair};
use crate::autodiff::Real;
use crate::dsp::{frame_signal, log_power_spectrum};
use crate::error::{Error, Result};
use crate::model::{padded_frames, ReverbModel};

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub loss: LossBreakdown,
}

/// Per-clip losses and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<ClipMetrics>,
    pub mean: LossBreakdown,
}

impl MetricsTable {
    pub const HEADER: &'static str = "id,mae,mse,loss";

    pub fn new(rows: Vec<ClipMetrics>) -> Self {
        let losses: Vec<LossBreakdown> = rows.iter().map(|r| r.loss).collect();
        MetricsTable { mean: LossBreakdown::mean(&losses), rows }
    }

    /// Machine-readable form at full precision, closed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        let mut line = |id: &str, l: &LossBreakdown| {
            let _ = writeln!(s, "{id},{:?},{:?},{:?}", l.mae_time, l.mse_spec, l.total);
        };
        for r in &self.rows {
            line(&r.id, &r.loss);
        }
        line("mean", &self.mean);
        s
    }

    /// Aligned text with five decimals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).chain([4]).max().unwrap_or(4);
        let mut s = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "id", "mae", "mse", "loss");
        let mut line = |id: &str, l: &LossBreakdown| {
            let _ = writeln!(s, "{id:<width$}  {:>9.5}  {:>9.5}  {:>9.5}", l.mae_time, l.mse_spec, l.total);
        };
        for r in &self.rows {
            line(&r.id, &r.loss);
        }
        line("mean", &self.mean);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Mean frame loss between two equal-length signals, framed the way the
/// model frames its input.
pub fn signal_metrics(target: &[f32], output: &[f32], frame: usize, hop: usize) -> Result<LossBreakdown> {
    if target.len() != output.len() {
        return Err(Error::shape(format!("target has {} samples, output {}", target.len(), output.len())));
    }
    let wide = |s: &[f32]| s.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let ft = padded_frames(&wide(target), frame, hop)?;
    let fo = padded_frames(&wide(output), frame, hop)?;
    let per_frame = ft.iter().zip(&fo).map(|(t, o)| compute_loss(t, o)).collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&per_frame))
}

/// Runs the model over every dry clip and scores the result against the wet clip.
pub fn evaluate<T: Real>(model: &ReverbModel<T>, pairs: &[&ClipPair]) -> Result<MetricsTable> {
    if pairs.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the split is empty"));
    }
    let c = &model.config;
    let rows = pairs
        .iter()
        .map(|p| {
            let out = model.process_clip(&p.dry)?;
            let loss = signal_metrics(p.wet.samples(), out.samples(), c.frame_size, c.hop)?;
            Ok(ClipMetrics { id: p.id.clone(), loss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsTable::new(rows))
}

/// Log-power spectra of consecutive rectangular frames: `[frames × (frame/2 + 1)]`.
pub fn spectrogram(clip: &AudioClip, frame: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    let x: Vec<f64> = clip.samples().iter().map(|&v| f64::from(v)).collect();
    frame_signal(&x, frame, hop)?.iter().map(|f| log_power_spectrum(f).map(|s| s.bins)).collect()
}

/// Writes the spectrogram as CSV: a `#` metadata line, a header of bin
/// frequencies in Hz, then one row per frame starting with its time in
/// seconds. Returns `(frames, bins)`.
pub fn export_spectrogram(clip: &AudioClip, frame: usize, hop: usize, path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let grid = spectrogram(clip, frame, hop)?;
    let sr = f64::from(clip.sample_rate());
    let bins = frame / 2 + 1;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# log power spectrogram; sample_rate={} frame={frame} hop={hop} frames={} bins={bins}",
        clip.sample_rate(),
        grid.len()
    )?;
    write!(w, "time_s")?;
    for k in 0..bins {
        write!(w, ",{}", k as f64 * sr / frame as f64)?;
    }
    writeln!(w)?;
    for (i, row) in grid.iter().enumerate() {
        write!(w, "{}", i as f64 * hop as f64 / sr)?;
        for v in row {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok((grid.len(), bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_comparison_is_zero() {
        let x: Vec<f32> = (0..3000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(signal_metrics(&x, &x, 512, 256).unwrap(), LossBreakdown::default());
    }

    #[test]
    fn table_formats() {
        let row = ClipMetrics { id: "plate".into(), loss: LossBreakdown::from_terms(0.00214, 7.75815) };
        let t = MetricsTable::new(vec![row]);
        let text = t.to_table();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["id", "mae", "mse", "loss"]);
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["plate", "0.00214", "7.75815", "0.00292"]);
        let csv = t.to_csv();
        assert!(csv.starts_with("id,mae,mse,loss\nplate,0.00214,7.75815,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,0.00214,7.75815,"));
    }

    #[test]
    fn mean_is_mean_of_rows() {
        let rows = vec![
            ClipMetrics { id: "a".into(), loss: LossBreakdown::from_terms(0.1, 2.0) },
            ClipMetrics { id: "b".into(), loss: LossBreakdown::from_terms(0.3, 4.0) },
        ];
        let t = MetricsTable::new(rows);
        assert!((t.mean.mae_time - 0.2).abs() < 1e-15);
        assert!((t.mean.mse_spec - 3.0).abs() < 1e-15);
    }

    #[test]
    fn silence_spectrogram() {
        let dir = tempfile::tempdir().unwrap();
        let clip = AudioClip::new(vec![0.0; 1024], 16000).unwrap();
        let path = dir.path().join("s.csv");
        let (frames, bins) = export_spectrogram(&clip, 512, 256, &path).unwrap();
        assert_eq!((frames, bins), (4, 257));
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(rows.len(), 4);
        let floor = 1e-10f64.ln();
        for r in rows {
            let vals: Vec<f64> = r.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 257);
            assert!(vals.iter().all(|v| (v - floor).abs() < 1e-9));
        }
    }

    #[test]
    fn tone_has_one_dominant_row_bin() {
        let clip = AudioClip::new((0..2048).map(|i| (2.0 * std::f32::consts::PI * 32.0 * i as f32 / 512.0).cos() * 0.5).collect(), 16000).unwrap();
        let grid = spectrogram(&clip, 512, 256).unwrap();
        for row in &grid[..6] {
            let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, 32);
        }
    }
}
