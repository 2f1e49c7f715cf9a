//! `slimvc` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O, 3 malformed
//! input, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use slimvc::codec::{decode_sequence, encode_sequence, Container, SlimVcModel};
use slimvc::io::{read_frames, write_frames};
use slimvc::profile::CostReport;
use slimvc::slim::{Preset, WIDTH_FACTORS};
use slimvc::train::{checkpoint, train_stage, trace_csv, Pattern, SyntheticDataset, TrainData, TrainingConfig};
use slimvc::Error;

#[derive(Parser, Debug)]
#[command(name = "slimvc", version, about = "Slimmable neural video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic clip as PPM frames.
    Synth {
        #[arg(long, default_value = "translate")]
        pattern: String,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// WxH, both at least 48.
        #[arg(long, default_value = "96x96")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long)]
        stage: u8,
        /// key=value overrides of the training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of PPM frames; synthetic clips when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Loss trace CSV, default `<ckpt-out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Code a directory of frames into a container.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        width_idx: usize,
        #[arg(long, default_value_t = 10)]
        gop: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame metrics CSV, default `<out>.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode a container into PPM frames.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter, memory and MAC counts.
    Profile {
        #[arg(long, default_value = "paper")]
        preset: String,
        #[arg(long, default_value = "1920x1080")]
        resolution: String,
        /// Also write the CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => 2,
        Some(Error::Format(_) | Error::Truncated(_)) => 3,
        Some(Error::NonFinite(_) | Error::Diverged { .. }) => 4,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size '{s}' is not WxH"))?;
    Ok((
        w.parse().with_context(|| format!("bad width in '{s}'"))?,
        h.parse().with_context(|| format!("bad height in '{s}'"))?,
    ))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    Ok(fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Synth {
            pattern,
            frames,
            size,
            seed,
            out,
        } => {
            let pattern: Pattern = pattern.parse()?;
            let (w, h) = parse_size(&size)?;
            if w < 48 || h < 48 {
                bail!(Error::InvalidArgument(format!("size {w}x{h} is below 48x48")));
            }
            let clip = SyntheticDataset::new(pattern, frames, seed).clip(0, h, w);
            write_frames(&out, &clip)?;
        }
        Cmd::Train {
            stage,
            config,
            data,
            ckpt_in,
            ckpt_out,
            trace,
        } => {
            if stage != 1 && stage != 2 {
                bail!(Error::InvalidArgument(format!("stage must be 1 or 2, got {stage}")));
            }
            let mut cfg = TrainingConfig::default();
            if let Some(p) = &config {
                let text = String::from_utf8(read(p)?)
                    .map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
                cfg.apply(&text)?;
            }
            let mut model = match &ckpt_in {
                Some(p) => {
                    let m = checkpoint::load(p)?;
                    if m.preset() != cfg.preset {
                        bail!(Error::Config(format!(
                            "checkpoint preset {} differs from configured {}",
                            m.preset(),
                            cfg.preset
                        )));
                    }
                    m
                }
                None if stage == 2 => {
                    bail!(Error::InvalidArgument("stage 2 requires --ckpt-in".into()))
                }
                None => SlimVcModel::new(cfg.preset, cfg.seed),
            };
            let data = match &data {
                Some(dir) => TrainData::Frames(read_frames(dir)?),
                None => TrainData::Synthetic { seed: cfg.seed },
            };
            let steps = if stage == 1 { cfg.steps_stage1 } else { cfg.steps_stage2 };
            let rows = train_stage(&mut model, &cfg, &data, stage, steps)?;
            checkpoint::save(&model, &ckpt_out)?;
            write(&trace.unwrap_or_else(|| with_suffix(&ckpt_out, ".trace.csv")), trace_csv(&rows))?;
            write(&with_suffix(&ckpt_out, ".config.txt"), cfg.dump())?;
        }
        Cmd::Encode {
            ckpt,
            width_idx,
            gop,
            input,
            out,
            metrics,
        } => {
            if width_idx >= WIDTH_FACTORS.len() {
                bail!(Error::InvalidArgument(format!("width index {width_idx} out of range 0..4")));
            }
            let model = checkpoint::load(&ckpt)?;
            let frames = read_frames(&input)?;
            let (_, _, h, w) = frames[0].dims4()?;
            let px = (h * w) as f64;
            let enc = encode_sequence(&model, &frames, width_idx, gop)?;
            write(&out, enc.container.to_bytes())?;
            let mut csv = String::from("width_factor,frame,type,bits,bpp,mse,psnr\n");
            for (i, r) in enc.reports.iter().enumerate() {
                let bits = r.metrics.bits();
                csv += &format!(
                    "{},{i},{},{bits},{:.6},{:.8},{:.4}\n",
                    WIDTH_FACTORS[width_idx],
                    r.kind.name(),
                    bits as f64 / px,
                    r.metrics.mse,
                    r.metrics.psnr
                );
            }
            write(&metrics.unwrap_or_else(|| with_suffix(&out, ".csv")), csv)?;
        }
        Cmd::Decode { ckpt, input, out } => {
            let bytes = read(&input)?;
            let container = Container::from_bytes(&bytes)?;
            let model = checkpoint::load(&ckpt)?;
            if model.preset() != container.header.preset {
                bail!(Error::Format(format!(
                    "container was coded with the {} preset but the checkpoint is {}",
                    container.header.preset,
                    model.preset()
                )));
            }
            let (frames, _) = decode_sequence(&model, &container)?;
            write_frames(&out, &frames)?;
        }
        Cmd::Profile {
            preset,
            resolution,
            csv,
        } => {
            let preset: Preset = preset.parse()?;
            let (w, h) = parse_size(&resolution)?;
            let report = CostReport::new(preset, (w, h))?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                write(&p, report.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            eprintln!("slimvc: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("slimvc: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
