use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use sfir_reverb::audio::{load_pairs, load_wav, read_manifest, save_wav, split_dataset, BitDepth, Conditioning, PairedDataset, Split};
use sfir_reverb::model::{Checkpoint, Config, ReverbModel};
use sfir_reverb::seed::seed_from_env;
use sfir_reverb::synth;
use sfir_reverb::train::{evaluate, export_spectrogram, ClipFrames, Trainer};
use sfir_reverb::Error;

/// Train and run sparse-FIR reverberation models.
#[derive(Parser, Debug)]
#[command(name = "sfir-reverb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unsupervised front-end reconstruction of dry and wet audio.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Config file, or the preset name `desk` or `full`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Supervised training followed by fine-tuning at a reduced rate.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: String,
        /// Starting checkpoint, usually the pretraining output.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-clip mae, mse and loss over one split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Process one WAV file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DepthArg::Float32)]
        bit_depth: DepthArg,
    },
    /// Log-power spectrogram of a WAV file as CSV.
    Spectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        frame: usize,
        #[arg(long, default_value_t = 2048)]
        hop: usize,
    },
    /// Write a synthetic corpus: sine clips through a velvet-noise reverb.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        clips: usize,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        ir_len: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DepthArg {
    Pcm16,
    Pcm24,
    Float32,
}

impl From<DepthArg> for BitDepth {
    fn from(d: DepthArg) -> Self {
        match d {
            DepthArg::Pcm16 => BitDepth::Pcm16,
            DepthArg::Pcm24 => BitDepth::Pcm24,
            DepthArg::Float32 => BitDepth::Float32,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NumericFailure(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Command) -> sfir_reverb::Result<()> {
    match cmd {
        Command::Pretrain { manifest, config, out, log } => {
            let cfg = load_config(&config)?;
            let data = load_dataset(&manifest, &cfg)?;
            let model = ReverbModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            let (train, val) = frames(&model, &data)?;
            let mut trainer = Trainer::new(model, cfg.train.clone());
            let report = trainer.pretrain(&train, &val)?;
            info!("pretraining: best validation loss {:.6} at epoch {}", report.best_val, report.best_epoch);
            trainer.checkpoint().save(&out)?;
            trainer.log.write_csv(log.unwrap_or_else(|| log_path(&out)))?;
            Ok(())
        }
        Command::Train { manifest, config, init, out, log } => {
            let cfg = load_config(&config)?;
            let ck = Checkpoint::<f32>::load(&init)?;
            if ck.model.config != cfg.model {
                return Err(Error::Config(format!("{} was built for a different model config", init.display())));
            }
            let data = load_dataset(&manifest, &cfg)?;
            let (train, val) = frames(&ck.model, &data)?;
            let mut trainer = Trainer::from_checkpoint(ck, cfg.train.clone());
            let (main, fine) = trainer.train(&train, &val)?;
            info!(
                "main phase best {:.6} (epoch {}), fine-tuning best {:.6} (epoch {}); kept {:.6}",
                main.best_val, main.best_epoch, fine.best_val, fine.best_epoch, trainer.best_val
            );
            trainer.checkpoint().save(&out)?;
            trainer.log.write_csv(log.unwrap_or_else(|| log_path(&out)))?;
            Ok(())
        }
        Command::Eval { manifest, ckpt, split, out } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let data = load_dataset(&manifest, &ck.config())?;
            let table = evaluate(&ck.model, &data.subset(split.into()))?;
            print!("{}", table.to_table());
            table.write_csv(&out)
        }
        Command::Infer { ckpt, input, out, bit_depth } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let clip = load_wav(&input)?;
            let processed = ck.model.process_clip(&clip)?;
            let clipped = save_wav(&processed, &out, bit_depth.into())?;
            if clipped > 0 {
                warn!("{clipped} samples clipped to [-1, 1]");
            }
            info!("wrote {} samples to {}", processed.len(), out.display());
            Ok(())
        }
        Command::Spectrogram { input, out, frame, hop } => {
            let clip = load_wav(&input)?;
            let (frames, bins) = export_spectrogram(&clip, frame, hop, &out)?;
            info!("{frames} frames x {bins} bins written to {}", out.display());
            Ok(())
        }
        Command::Synth { out, clips, samples, ir_len, seed } => {
            let ir = synth::decaying_velvet_ir(ir_len, 16000, seed)?;
            let pairs = synth::sine_corpus(clips, samples, &ir, 16000)?;
            let manifest = synth::write_corpus(&out, &pairs)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

/// A config file, or `desk` / `full` for the built-in presets.
fn load_config(arg: &str) -> sfir_reverb::Result<Config> {
    let mut cfg = if Path::new(arg).exists() {
        Config::load(arg)?
    } else {
        Config::preset(arg).map_err(|_| Error::Config(format!("{arg} is neither a config file nor a preset name")))?
    };
    cfg.train.seed = seed_from_env(cfg.train.seed)?;
    Ok(cfg)
}

fn load_dataset(manifest: &Path, cfg: &Config) -> sfir_reverb::Result<PairedDataset> {
    let entries = read_manifest(manifest)?;
    let cond = Conditioning { normalize: cfg.train.normalize, fadeout_s: cfg.train.fadeout_s, required_rate: cfg.model.sample_rate };
    let pairs = load_pairs(&entries, &cond)?;
    let data = split_dataset(pairs, cfg.train.val_frac, cfg.train.test_frac, cfg.train.seed)?;
    info!(
        "{} pairs: {} train, {} validation, {} test",
        data.pairs().len(),
        data.count(Split::Train),
        data.count(Split::Validation),
        data.count(Split::Test)
    );
    Ok(data)
}

type FrameSets = (Vec<ClipFrames<f32>>, Vec<ClipFrames<f32>>);

fn frames(model: &ReverbModel<f32>, data: &PairedDataset) -> sfir_reverb::Result<FrameSets> {
    Ok((
        ClipFrames::from_pairs(model, &data.subset(Split::Train))?,
        ClipFrames::from_pairs(model, &data.subset(Split::Validation))?,
    ))
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}
