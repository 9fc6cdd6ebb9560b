//! `ctxcodec` command-line tool.

mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxcodec::checkpoint;
use ctxcodec::codec_core::VideoCodec;
use ctxcodec::config::CodecConfig;
use ctxcodec::evaluation::{self, report};
use ctxcodec::training::data::{load_sequence, save_sequence};
use ctxcodec::training::synth::{generate_synthetic_clip, load_flows, save_clip, MotionFamily, SynthParams};
use ctxcodec::training::{train_multistage, TrainClip, TrainOptions};
use ctxcodec::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_BITSTREAM: u8 = 5;
const EXIT_INTERNAL: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "ctxcodec", version, about = "Neural video codec with hybrid temporal contexts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.c0=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Ablation preset A-J.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for parameter initialization, training and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device. Only `cpu` is available in this build.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Use paper-scale training and evaluation settings.
    #[arg(long, global = true)]
    paper_parity: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a codec with the staged schedule.
    Train(TrainArgs),
    /// Code a sequence into a bitstream file.
    Encode(EncodeArgs),
    /// Decode a bitstream file into numbered PNG frames.
    Decode(DecodeArgs),
    /// Evaluate a checkpoint on sequences and write RD records and plots.
    Eval(EvalArgs),
    /// Tabulate presets against an anchor.
    Ablate(AblateArgs),
    /// Write a synthetic clip with ground-truth flow.
    Synth(SynthArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Sequence: a directory of numbered PNGs or a `.yuv` file with sidecar. Repeatable.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    /// Generate synthetic clips of this motion family instead.
    #[arg(long)]
    synth: Option<String>,
    /// Number of synthetic clips.
    #[arg(long, default_value_t = 1)]
    clips: usize,
    /// Frames per synthetic clip.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Synthetic frame width.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Synthetic frame height.
    #[arg(long, default_value_t = 64)]
    height: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Stage to run (0-4). Repeatable; default is the full schedule.
    #[arg(long = "stage")]
    stages: Vec<u32>,
    /// Steps per stage as five comma-separated numbers.
    #[arg(long, value_parser = parse_steps)]
    steps: Option<[usize; 5]>,
    /// Start from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Code only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Also write the encoder-side reconstructions here.
    #[arg(long)]
    recon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also compute MS-SSIM (frames must be at least 160 pixels per side).
    #[arg(long)]
    ms_ssim: bool,
    /// Evaluate only the first N frames of each sequence.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated presets.
    #[arg(long, value_delimiter = ',', default_value = "A,D")]
    presets: Vec<String>,
    #[arg(long, default_value = "A")]
    anchor: String,
    /// Directory with `{preset}_l{index}.ckpt` files. Without it every
    /// preset is trained on the data with the same budget first.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Steps per stage for the training pass.
    #[arg(long, value_parser = parse_steps)]
    steps: Option<[usize; 5]>,
    /// Label for the table and plots.
    #[arg(long, default_value = "data")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// translate, rotate, elastic or occlude.
    #[arg(long)]
    family: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Motion magnitude in pixels per frame.
    #[arg(long, default_value_t = 2.0)]
    magnitude: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::HashMismatch { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::MissingFrame { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) => EXIT_DATA,
        Error::Bitstream(_) | Error::Checksum { .. } => EXIT_BITSTREAM,
        Error::Contract(_) | Error::Tensor(_) | Error::Diverged { .. } => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config { path: item.into(), msg: "override must look like KEY=VALUE".into() })?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.into()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config { path: key.into(), msg: format!("`{p}` is not a table") })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Global {
    fn customized(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty() || self.preset.is_some() || self.paper_parity
    }

    fn check_device(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config { path: "--device".into(), msg: format!("device `{}` is not available, use `cpu`", self.device) });
        }
        Ok(())
    }

    fn config(&self) -> Result<CodecConfig> {
        self.check_device()?;
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config { path: p.display().to_string(), msg: format!("cannot read: {e}") })?,
            None => String::new(),
        };
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config { path: "<root>".into(), msg: e.message().into() })?;
        if let Some(p) = &self.preset {
            apply_override(&mut table, &format!("ablation.preset=\"{p}\""))?;
        }
        for o in &self.overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = CodecConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.paper_parity && !cfg.paper_parity {
            cfg = cfg.paper_parity();
            cfg.validate()?;
        }
        Ok(cfg)
    }

    /// The codec described by `checkpoint`, or a freshly initialized one. When
    /// both a checkpoint and configuration options are given they must agree.
    fn codec(&self, ckpt: Option<&Path>) -> Result<VideoCodec> {
        self.check_device()?;
        match ckpt {
            Some(p) if !self.customized() => Ok(checkpoint::load(p)?.0),
            Some(p) => {
                let codec = VideoCodec::new(&self.config()?)?;
                checkpoint::load_into(&codec, &std::fs::read(p)?)?;
                Ok(codec)
            }
            None => VideoCodec::new(&self.config()?),
        }
    }
}

fn synth_params(d: &DataArgs) -> SynthParams {
    SynthParams { width: d.width, height: d.height, frames: d.frames, ..SynthParams::default() }
}

fn load_clips(d: &DataArgs, seed: u64) -> Result<Vec<TrainClip>> {
    let mut out = Vec::new();
    if let Some(f) = &d.synth {
        let fam = MotionFamily::parse(f)?;
        for i in 0..d.clips {
            out.push(TrainClip::from(generate_synthetic_clip(fam, &synth_params(d), seed.wrapping_add(i as u64))?));
        }
    }
    for p in &d.data {
        let frames = load_sequence(p)?;
        let flows = if p.is_dir() { load_flows(p, frames[0].width, frames[0].height, frames.len())? } else { None };
        out.push(TrainClip { frames, flows });
    }
    if out.is_empty() {
        return Err(Error::Data("no input: pass --data or --synth".into()));
    }
    Ok(out)
}

fn parse_steps(s: &str) -> std::result::Result<[usize; 5], String> {
    let v = s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"))).collect::<std::result::Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 5 comma-separated step counts, got {}", v.len()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Train(a) => {
            let codec = g.codec(a.resume.as_deref())?;
            let data = load_clips(&a.data, codec.cfg.seed)?;
            std::fs::create_dir_all(&a.out)?;
            let opts = TrainOptions {
                stages: a.stages.clone(),
                checkpoint_dir: Some(a.out.clone()),
                log_path: Some(a.out.join("train.jsonl")),
                steps: a.steps,
            };
            let rep = train_multistage(&codec, &data, &opts)?;
            checkpoint::save(&codec, &a.out.join("model.ckpt"), "trained")?;
            for s in &rep.stages {
                println!("stage {}: {} steps, final loss {:.4}", s.stage, s.losses.len(), s.losses.last().copied().unwrap_or(f64::NAN));
            }
        }
        Cmd::Encode(a) => {
            let codec = g.codec(a.checkpoint.as_deref())?;
            let mut frames = load_sequence(&a.input)?;
            if let Some(n) = a.frames {
                frames.truncate(n);
            }
            let (bytes, recon) = codec.encode_sequence(&frames, codec.cfg.gop.intra_period)?;
            if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&a.output, &bytes)?;
            if let Some(dir) = &a.recon {
                save_sequence(dir, &recon)?;
            }
            let pixels: usize = frames.iter().map(|f| f.pixels()).sum();
            println!("{} frames, {} bytes, {:.4} bpp", frames.len(), bytes.len(), 8.0 * bytes.len() as f64 / pixels as f64);
        }
        Cmd::Decode(a) => {
            let codec = g.codec(a.checkpoint.as_deref())?;
            let frames = codec.decode_stream(&std::fs::read(&a.input)?)?;
            save_sequence(&a.output, &frames)?;
            println!("{} frames", frames.len());
        }
        Cmd::Eval(a) => {
            let codec = g.codec(a.checkpoint.as_deref())?;
            let clips = load_clips(&a.data, codec.cfg.seed)?;
            for (i, clip) in clips.iter().enumerate() {
                let mut frames = clip.frames.clone();
                frames.truncate(a.max_frames.unwrap_or(usize::MAX));
                let r = evaluation::evaluate_sequence(&codec, &frames, codec.cfg.gop.intra_period, a.ms_ssim)?;
                report::write_sequence(&a.out.join(format!("seq{i:03}")), &r)?;
                println!("seq{i:03}: {:.4} bpp, {:.3} dB", r.aggregate.bpp, r.aggregate.psnr);
            }
        }
        Cmd::Ablate(a) => {
            let base = g.config()?;
            let clips = load_clips(&a.data, base.seed)?;
            let models = match &a.checkpoints {
                Some(dir) => {
                    let mut m = Vec::new();
                    for (p, _, path) in evaluation::expected_checkpoints(dir, &a.presets, base.rate.lambdas.len())? {
                        m.push((p.to_ascii_uppercase(), checkpoint::load(&path)?.0));
                    }
                    m
                }
                None => {
                    let opts = TrainOptions { steps: a.steps, ..TrainOptions::default() };
                    std::fs::create_dir_all(&a.out)?;
                    evaluation::train_ablation_models(&base, &a.presets, &clips, &opts, Some(&a.out))?
                }
            };
            let seqs: Vec<_> = clips.into_iter().map(|c| c.frames).collect();
            let table = evaluation::run_ablation(&models, &a.anchor.to_ascii_uppercase(), &a.dataset, &seqs, base.gop.intra_period)?;
            report::write_ablation(&a.out, &table)?;
            print!("{}", report::ablation_csv(&table));
            for row in table.rows.iter().filter(|r| r.preset != table.anchor) {
                if let Ok((wins, total)) = table.dominance(&table.anchor, &row.preset) {
                    let held = 2 * wins > total;
                    println!("{} vs {}: cheaper at {wins}/{total} matched-quality points, ordering held: {held}", row.preset, table.anchor);
                }
            }
        }
        Cmd::Synth(a) => {
            let fam = MotionFamily::parse(&a.family)?;
            let seed = g.seed.unwrap_or(0);
            let p = SynthParams { width: a.width, height: a.height, frames: a.frames, magnitude: a.magnitude, ..SynthParams::default() };
            let clip = generate_synthetic_clip(fam, &p, seed)?;
            save_clip(&a.out, &clip, seed)?;
            println!("{} frames of {} motion in {}", clip.frames.len(), fam.name(), a.out.display());
        }
        Cmd::Selftest => {
            let results = selftest::run();
            let mut failed = 0;
            for (name, r) in &results {
                match r {
                    Ok(()) => println!("PASS {name}"),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {name}: {e}");
                    }
                }
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} selftest check(s) failed")));
            }
        }
    }
    Ok(())
}
