//! The `motok` command line.
//!
//! Metrics go to stdout as one JSON object per command; logs go to stderr.
//! Exit codes: 0 ok, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use motok_tensor::checkpoint;

use crate::config::PipelineConfig;
use crate::diffusion::detok::{latent_frame, toy_clip, DetokTrainer, ToyClip};
use crate::diffusion::{build_condition, decode_long, Inversion, KeyframeDenoiser, ToyUNet3D};
use crate::error::Error;
use crate::lm::{LmTrainer, Policy, ToyLm};
use crate::motion::{clip_motion, read_mvec, save_mvec, MotionField, MVEC_MAGIC};
use crate::sequence::{
    build_sequence, load_tokens, motion_groups, save_tokens, validate, visual_groups, ClipTokens, Modality, Order, Pair,
    Special, StubKeyframeTokenizer, TokenSequence, UnifiedVocab, TSEQ_MAGIC,
};
use crate::synth::{mixed_fields, MovingSquare};
use crate::video::{ingest_frames, load_rvid, read_rvid, sample_clips, save_rvid, Clip, RawVideo, RVID_MAGIC};
use crate::vqvae::codebook::codebook_usage;
use crate::vqvae::train::{eval_usage, recon_mse};
use crate::vqvae::{MotionVqvae, VqvaeTrainer};

#[derive(Debug, Parser)]
#[command(name = "motok", version, about = "Keyframe and motion video tokenization at desk scale")]
struct Cli {
    /// Pipeline config JSON; defaults to the built-in full-size config.
    #[arg(long, global = true, env = "MOTOK_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// RVID video to a token file (.tseq, or .jsonl by extension).
    Tokenize {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Caption placed before the clips, one byte per text token.
        #[arg(long)]
        text: Option<String>,
    },
    /// Token file back to an RVID video.
    Detokenize {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inversion steps chaining each clip's keyframe to the previous clip.
        #[arg(long, default_value_t = 10)]
        delta_t: usize,
        /// Single-step inversion instead of the fixed-point solve.
        #[arg(long)]
        explicit: bool,
    },
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the stage's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Samples token sequences from the trained LM.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        text: Option<String>,
        /// Sampling temperature; 0 is greedy.
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        /// Disable the grammar mask.
        #[arg(long)]
        unconstrained: bool,
    },
    /// Prints a summary of any RVID/MVEC/TSEQ/JSONL/MTOK file; exit 0 iff its invariants hold.
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
    /// Numbered PNG/PGM frames to RVID.
    Ingest {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        fps: u32,
        #[arg(long, default_value_t = 1)]
        fps_den: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes synthetic training data.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Clips per square video.
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Prints a config preset as JSON.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Tokenizer,
    Detok,
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Textured squares moving over a flat background, as RVID.
    Squares,
    /// Constant, ramp and rotation fields on the tokenizer grid, as MVEC.
    Fields,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<motok_tensor::TensorError> for Failure {
    fn from(e: motok_tensor::TensorError) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<Value, Failure>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    if let Some(n) = std::env::var("MOTOK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli) {
        Ok(Value::Null) => 0,
        Ok(v) => {
            println!("{v}");
            if v.get("ok") == Some(&Value::Bool(false)) {
                1
            } else {
                0
            }
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.tokenizer.seed = s;
        cfg.detok.seed = s;
        cfg.train.tokenizer.seed = s;
        cfg.train.detok.seed = s;
        cfg.train.lm.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Outcome {
    if let Command::Config { preset } = cli.cmd {
        let c = match preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Desk => PipelineConfig::desk(),
        };
        println!("{}", c.to_json()?);
        return Ok(Value::Null);
    }
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Command::Tokenize { video, out, text } => tokenize(&cfg, &video, &out, text.as_deref()),
        Command::Detokenize {
            tokens,
            out,
            delta_t,
            explicit,
        } => detokenize(&cfg, &tokens, &out, delta_t, explicit),
        Command::Train {
            stage,
            data,
            resume,
            max_steps,
        } => train(&cfg, stage, &data, resume, max_steps),
        Command::Generate {
            out,
            count,
            text,
            temperature,
            unconstrained,
        } => generate(&cfg, &out, count, text.as_deref(), temperature, !unconstrained),
        Command::Inspect { file } => inspect(&cfg, &file),
        Command::Ingest {
            frames,
            fps,
            fps_den,
            out,
        } => {
            if !frames.is_dir() {
                return Err(Failure::Usage(format!("{} is not a directory", frames.display())));
            }
            let v = ingest_frames(&frames, fps, fps_den)?;
            ensure_parent(&out)?;
            save_rvid(&out, &v)?;
            Ok(json!({"frames": v.frames.len(), "width": v.width, "height": v.height, "channels": v.channels, "out": out}))
        }
        Command::Synth {
            kind,
            out,
            count,
            clips,
            size,
        } => synth(&cfg, kind, &out, count, clips, size),
        Command::Config { .. } => unreachable!(),
    }
}

fn load_checkpoint(path: &Path, stage: &str) -> crate::error::Result<Vec<(String, motok_tensor::Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint {
            path: path.display().to_string(),
            hint: format!("motok train --stage {stage} --data <dir>"),
        });
    }
    Ok(checkpoint::load(path)?)
}

/// Raw clip motion normalized by frame size and resized to the tokenizer grid.
pub fn clip_field(cfg: &PipelineConfig, clip: &Clip) -> crate::error::Result<MotionField> {
    let f = clip_motion(clip, cfg.video.block, cfg.video.search)?
        .normalize(clip.keyframe.width, clip.keyframe.height)?;
    if f.hb == cfg.video.grid_h && f.wb == cfg.video.grid_w {
        Ok(f)
    } else {
        Ok(f.resize(cfg.video.grid_h, cfg.video.grid_w)?.field)
    }
}

fn video_clips(cfg: &PipelineConfig, path: &Path) -> crate::error::Result<Vec<Clip>> {
    let v = load_rvid(path)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("video");
    sample_clips(&v, cfg.video.clip_fps, cfg.video.clip_len, id)
}

fn tokenize(cfg: &PipelineConfig, video: &Path, out: &Path, text: Option<&str>) -> Outcome {
    let vq = MotionVqvae::from_tensors(&load_checkpoint(&cfg.checkpoints.tokenizer, "tokenizer")?)?;
    let kf = StubKeyframeTokenizer::from_tensors(&load_checkpoint(&cfg.checkpoints.keyframe, "tokenizer")?)?;
    let vocab = cfg.vocab;
    let clips = video_clips(cfg, video)?;
    if clips.is_empty() {
        return Err(Error::Contract(format!(
            "{} is shorter than one clip of {} frames at {} fps",
            video.display(),
            cfg.video.clip_len + 1,
            cfg.video.clip_fps
        ))
        .into());
    }
    let mut toks = Vec::with_capacity(clips.len());
    let mut local_motion = Vec::new();
    let mut per_clip = Vec::new();
    for clip in &clips {
        let visual = kf.tokenize(&clip.keyframe, &vocab)?;
        let ids = vq.tokenize(&clip_field(cfg, clip)?)?;
        let motion = ids.iter().map(|&i| vocab.motion_id(i)).collect::<crate::error::Result<Vec<_>>>()?;
        per_clip.push(json!({"visual": visual.len(), "motion": motion.len()}));
        local_motion.extend(ids);
        toks.push(ClipTokens { visual, motion });
    }
    let pair = Pair {
        text: vocab.encode_text(text.unwrap_or(""))?,
        clips: toks,
    };
    let seq = build_sequence(&vocab, &[pair], Order::TextFirst)?;
    ensure_parent(out)?;
    save_tokens(out, &vocab, std::slice::from_ref(&seq))?;
    let usage = codebook_usage(&local_motion, cfg.tokenizer.codebook_size)?;
    Ok(json!({
        "clips": clips.len(),
        "per_clip": per_clip,
        "sequence_len": seq.len(),
        "motion_perplexity": usage.perplexity,
        "out": out,
    }))
}

fn detokenize(cfg: &PipelineConfig, tokens: &Path, out: &Path, delta_t: usize, explicit: bool) -> Outcome {
    let vocab = cfg.vocab;
    let seqs = load_tokens(tokens, &vocab)?;
    for (i, s) in seqs.iter().enumerate() {
        validate(&vocab, s).map_err(|v| Error::Contract(format!("sequence {i}: {v}")))?;
    }
    let net = ToyUNet3D::from_tensors(&load_checkpoint(&cfg.checkpoints.detok, "detok")?)?;
    let vq = MotionVqvae::from_tensors(&load_checkpoint(&cfg.checkpoints.tokenizer, "tokenizer")?)?;
    let kf = StubKeyframeTokenizer::from_tensors(&load_checkpoint(&cfg.checkpoints.keyframe, "tokenizer")?)?;
    let sched = cfg.schedule.build()?;
    let (h, w) = (net.cfg.h, net.cfg.w);
    let frame_len = net.cfg.frame_len();
    let mode = if explicit { Inversion::Explicit } else { Inversion::FixedPoint };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::new();
    let mut clip_count = 0;
    for (i, s) in seqs.iter().enumerate() {
        let vis = visual_groups(&vocab, s);
        let mov = motion_groups(&vocab, s);
        if vis.len() != mov.len() {
            return Err(Error::Contract(format!(
                "sequence {i} has {} keyframe and {} motion groups",
                vis.len(),
                mov.len()
            ))
            .into());
        }
        let mut clips = Vec::with_capacity(vis.len());
        for (v, m) in vis.iter().zip(&mov) {
            let key = kf.reconstruct(v, &vocab)?.resize(w, h);
            let cond: Vec<f32> = key.data.iter().map(|&p| crate::diffusion::detok::to_latent(p)).collect();
            let local = m
                .iter()
                .map(|&id| match vocab.local_index(id) {
                    Some((Modality::Motion, k)) => Ok(k),
                    _ => Err(Error::Vocab {
                        index: id as usize,
                        message: "not a motion token".into(),
                    }),
                })
                .collect::<crate::error::Result<Vec<_>>>()?;
            clips.push((cond, vq.decode(&local)?));
        }
        if clips.is_empty() {
            continue;
        }
        clip_count += clips.len();
        let decoded = decode_long(
            &KeyframeDenoiser(&net),
            &net,
            &sched,
            &clips,
            |k, f| build_condition(k, (h, w, 1), f, f.t),
            frame_len,
            delta_t,
            mode,
            &mut rng,
        )?;
        for d in decoded {
            frames.push(latent_frame(&d.keyframe, h, w)?);
            for f in d.frames.chunks(frame_len) {
                frames.push(latent_frame(f, h, w)?);
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::Contract("token file holds no clips".into()).into());
    }
    let n = frames.len();
    ensure_parent(out)?;
    save_rvid(out, &RawVideo::new(cfg.video.clip_fps, 1, frames)?)?;
    Ok(json!({"sequences": seqs.len(), "clips": clip_count, "frames": n, "delta_t": delta_t, "out": out}))
}

fn data_files(dir: &Path, exts: &[&str]) -> std::result::Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!(
            "no {} files in {}",
            exts.join("/"),
            dir.display()
        )));
    }
    Ok(files)
}

fn ensure_parent(p: &Path) -> std::io::Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d),
        _ => Ok(()),
    }
}

/// Steps to run now: up to the configured total, capped by `max_steps`.
fn step_budget(done: usize, total: usize, max_steps: Option<usize>) -> usize {
    let left = total.saturating_sub(done);
    max_steps.map_or(left, |m| m.min(left))
}

fn train(cfg: &PipelineConfig, stage: Stage, data: &Path, resume: bool, max_steps: Option<usize>) -> Outcome {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let start = Instant::now();
    let mut m = match stage {
        Stage::Tokenizer => train_tokenizer(cfg, data, resume, max_steps)?,
        Stage::Detok => train_detok(cfg, data, resume, max_steps)?,
        Stage::Lm => train_lm(cfg, data, resume, max_steps)?,
    };
    m["wall_time_s"] = json!(start.elapsed().as_secs_f64());
    Ok(m)
}

fn train_tokenizer(cfg: &PipelineConfig, data: &Path, resume: bool, max_steps: Option<usize>) -> Outcome {
    let files = data_files(data, &["rvid", "mvec"])?;
    let mut fields = Vec::new();
    let mut keyframes = Vec::new();
    for f in &files {
        if f.extension().is_some_and(|e| e == "mvec") {
            let field = crate::motion::load_mvec(f)?;
            let field = if field.normalized {
                field
            } else {
                return Err(Error::Contract(format!("{} is not normalized", f.display())).into());
            };
            fields.push(field);
        } else {
            for clip in video_clips(cfg, f)? {
                fields.push(clip_field(cfg, &clip)?);
                keyframes.push(clip.keyframe);
            }
        }
    }
    if fields.is_empty() {
        return Err(Failure::Usage(format!("{} holds no complete clips", data.display())));
    }
    let ckpt = &cfg.checkpoints.tokenizer;
    let mut trainer = if resume {
        VqvaeTrainer::from_tensors(&load_checkpoint(ckpt, "tokenizer")?)?
    } else {
        VqvaeTrainer::new(MotionVqvae::new(cfg.tokenizer.clone())?, cfg.train.tokenizer.clone())
    };
    let n = step_budget(trainer.step, trainer.tcfg.steps, max_steps);
    let mut curve = Vec::with_capacity(n);
    for _ in 0..n {
        let s = trainer.step_on(&fields)?;
        log::debug!("tokenizer step {} recon {:.5} commit {:.5}", s.step, s.recon, s.commit);
        curve.push(s.total);
    }
    ensure_parent(ckpt)?;
    checkpoint::save(ckpt, &trainer.to_tensors()?)?;
    let usage = eval_usage(&trainer.model, &fields)?;
    let mse = recon_mse(&trainer.model, &fields)?;
    let mut keyframe = Value::Null;
    if !keyframes.is_empty() {
        let mut kf = StubKeyframeTokenizer::new(cfg.keyframe)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4B46);
        kf.fit(&keyframes, cfg.vocab.visual_size as usize, &mut rng)?;
        ensure_parent(&cfg.checkpoints.keyframe)?;
        checkpoint::save(&cfg.checkpoints.keyframe, &kf.to_tensors()?)?;
        keyframe = json!({"frames": keyframes.len(), "checkpoint": cfg.checkpoints.keyframe});
    }
    Ok(json!({
        "stage": "tokenizer",
        "step": trainer.step,
        "loss_curve": curve,
        "recon_mse": mse,
        "perplexity": usage.perplexity,
        "codes_used": usage.used,
        "codes_dead": usage.dead,
        "fields": fields.len(),
        "keyframe": keyframe,
        "checkpoint": ckpt,
    }))
}

fn train_detok(cfg: &PipelineConfig, data: &Path, resume: bool, max_steps: Option<usize>) -> Outcome {
    let files = data_files(data, &["rvid"])?;
    let mut clips: Vec<ToyClip> = Vec::new();
    for f in &files {
        for clip in video_clips(cfg, f)? {
            let (w, h) = (clip.keyframe.width, clip.keyframe.height);
            let field = clip_motion(&clip, cfg.video.block, cfg.video.search)?.normalize(w, h)?;
            clips.push(toy_clip(&cfg.detok, &clip, &field)?);
        }
    }
    if clips.is_empty() {
        return Err(Failure::Usage(format!("{} holds no complete clips", data.display())));
    }
    let ckpt = &cfg.checkpoints.detok;
    let mut trainer = if resume {
        DetokTrainer::from_tensors(&load_checkpoint(ckpt, "detok")?)?
    } else {
        DetokTrainer::new(ToyUNet3D::new(cfg.detok.clone())?, cfg.schedule.edm, cfg.train.detok.clone())
    };
    let n = step_budget(trainer.step, trainer.tcfg.steps, max_steps);
    let mut curve = Vec::with_capacity(n);
    for _ in 0..n {
        curve.push(trainer.step_on(&clips)?);
    }
    ensure_parent(ckpt)?;
    checkpoint::save(ckpt, &trainer.to_tensors()?)?;
    Ok(json!({
        "stage": "detok",
        "step": trainer.step,
        "loss_curve": curve,
        "clips": clips.len(),
        "checkpoint": ckpt,
    }))
}

/// Splits sequences longer than the context into one sequence per clip.
fn fit_context(vocab: &UnifiedVocab, seqs: Vec<TokenSequence>, context: usize) -> crate::error::Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for s in seqs {
        if s.len() <= context {
            out.push(s);
            continue;
        }
        for (v, m) in visual_groups(vocab, &s).into_iter().zip(motion_groups(vocab, &s)) {
            let pair = Pair {
                text: Vec::new(),
                clips: vec![ClipTokens { visual: v, motion: m }],
            };
            let one = build_sequence(vocab, &[pair], Order::TextFirst)?;
            if one.len() > context {
                return Err(Error::Range(format!("a single clip needs {} tokens, context is {context}", one.len())));
            }
            out.push(one);
        }
    }
    Ok(out)
}

fn train_lm(cfg: &PipelineConfig, data: &Path, resume: bool, max_steps: Option<usize>) -> Outcome {
    let vocab = cfg.vocab;
    let mut corpus = Vec::new();
    for f in data_files(data, &["tseq", "jsonl"])? {
        corpus.extend(load_tokens(&f, &vocab)?);
    }
    let corpus = fit_context(&vocab, corpus, cfg.lm.context)?;
    let ckpt = &cfg.checkpoints.lm;
    let mut trainer = if resume {
        LmTrainer::from_tensors(&load_checkpoint(ckpt, "lm")?)?
    } else {
        LmTrainer::new(ToyLm::new(cfg.lm_config())?, cfg.train.lm.clone())
    };
    let n = step_budget(trainer.step, trainer.tcfg.steps, max_steps);
    let mut curve = Vec::with_capacity(n);
    for _ in 0..n {
        curve.push(trainer.step_on(&corpus)?);
    }
    ensure_parent(ckpt)?;
    checkpoint::save(ckpt, &trainer.to_tensors()?)?;
    Ok(json!({
        "stage": "lm",
        "step": trainer.step,
        "loss_curve": curve,
        "sequences": corpus.len(),
        "checkpoint": ckpt,
    }))
}

fn generate(cfg: &PipelineConfig, out: &Path, count: usize, text: Option<&str>, temperature: f32, constrained: bool) -> Outcome {
    let lm = ToyLm::from_tensors(&load_checkpoint(&cfg.checkpoints.lm, "lm")?)?;
    let vocab = lm.cfg.vocab;
    let mut prefix = vec![vocab.special(Special::Bos)];
    prefix.extend(vocab.encode_text(text.unwrap_or(""))?);
    let prefix = TokenSequence::from_ids(&vocab, prefix)?;
    let policy = if temperature > 0.0 {
        Policy::Temperature(temperature)
    } else {
        Policy::Greedy
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seqs = Vec::with_capacity(count);
    let mut valid = 0;
    let mut truncated = 0;
    for _ in 0..count {
        let g = lm.generate(&prefix, policy, constrained, &mut rng)?;
        valid += validate(&vocab, &g.seq).is_ok() as usize;
        truncated += g.truncated as usize;
        seqs.push(g.seq);
    }
    ensure_parent(out)?;
    save_tokens(out, &vocab, &seqs)?;
    Ok(json!({"generated": count, "valid": valid, "truncated": truncated, "out": out}))
}

fn synth(cfg: &PipelineConfig, kind: SynthKind, out: &Path, count: usize, clips: usize, size: usize) -> Outcome {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match kind {
        SynthKind::Squares => {
            if size < 16 {
                return Err(Failure::Usage("square videos need --size of at least 16".into()));
            }
            let frames = clips * (cfg.video.clip_len + 1);
            let side = size / 4;
            for i in 0..count {
                let room = (size - side) as i64;
                let vmax = (room / frames.max(1) as i64).clamp(0, 3);
                let v = (rng.random_range(-vmax..=vmax), rng.random_range(-vmax..=vmax));
                let span = |vel: i64| {
                    let travel = vel * (frames as i64 - 1);
                    ((-travel).max(0), room - travel.max(0))
                };
                let ((x0, x1), (y0, y1)) = (span(v.0), span(v.1));
                let start = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
                let m = MovingSquare::textured(size, size, side, start, v, &mut rng);
                save_rvid(&out.join(format!("square_{i:03}.rvid")), &m.video(frames, cfg.video.clip_fps))?;
            }
        }
        SynthKind::Fields => {
            let v = &cfg.video;
            for (i, f) in mixed_fields(count, v.clip_len, v.grid_h, v.grid_w, 0.5, &mut rng).iter().enumerate() {
                save_mvec(&out.join(format!("field_{i:03}.mvec")), f)?;
            }
        }
    }
    Ok(json!({"kind": format!("{kind:?}").to_lowercase(), "count": count, "out": out}))
}

/// Known vocabularies for token files: the loaded config's plus both presets'.
fn known_vocabs(cfg: &PipelineConfig) -> Vec<UnifiedVocab> {
    let mut v = vec![cfg.vocab, PipelineConfig::default().vocab, PipelineConfig::desk().vocab];
    v.dedup();
    v
}

fn inspect(cfg: &PipelineConfig, path: &Path) -> Outcome {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut problems: Vec<String> = Vec::new();
    let magic = bytes.get(..4).unwrap_or(&[]);
    let summary = if magic == RVID_MAGIC {
        let v = read_rvid(&bytes)?;
        let (lo, hi) = v
            .frames
            .iter()
            .flat_map(|f| f.data.iter())
            .fold((255u8, 0u8), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        json!({"format": "RVID", "width": v.width, "height": v.height, "channels": v.channels,
               "fps": [v.fps_num, v.fps_den], "frames": v.frames.len(), "pixel_range": [lo, hi]})
    } else if magic == MVEC_MAGIC {
        let f = read_mvec(&bytes)?;
        problems.extend(f.check());
        let (lo, hi) = f
            .vectors
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        json!({"format": "MVEC", "shape": f.shape(), "normalized": f.normalized, "block": f.block_size,
               "search": f.search_range, "range": [lo, hi]})
    } else if magic == checkpoint::MAGIC {
        let tensors = checkpoint::decode(&bytes)?;
        let listing: Vec<Value> = tensors
            .iter()
            .map(|(n, t)| {
                if !t.all_finite() {
                    problems.push(format!("tensor {n} has non-finite values"));
                }
                json!({"name": n, "shape": t.shape()})
            })
            .collect();
        json!({"format": "MTOK", "tensors": listing})
    } else {
        let jsonl = magic != TSEQ_MAGIC;
        let mut first_err = None;
        let mut found = None;
        for vocab in known_vocabs(cfg) {
            let parsed = if jsonl {
                std::str::from_utf8(&bytes)
                    .map_err(|e| Error::Format(e.to_string()))
                    .and_then(|s| crate::sequence::read_jsonl(&vocab, s))
            } else {
                crate::sequence::read_tseq_all(&vocab, &bytes)
            };
            match parsed {
                Ok(seqs) => {
                    found = Some((vocab, seqs));
                    break;
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let Some((vocab, seqs)) = found else {
            return Err(first_err.expect("at least one vocabulary tried").into());
        };
        let mut lens = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            if let Err(v) = validate(&vocab, s) {
                problems.push(format!("sequence {i}: {v}"));
            }
            let count = |sp| s.ids.iter().filter(|&&id| id == vocab.special(sp)).count();
            if count(Special::Img) != count(Special::ImgEnd) || count(Special::Mov) != count(Special::MovEnd) {
                problems.push(format!("sequence {i}: unbalanced delimiters"));
            }
            lens.push(s.len());
        }
        json!({"format": if jsonl { "JSONL" } else { "TSEQ" }, "vocab_sig": format!("{:016x}", vocab.signature()),
               "sequences": seqs.len(), "lengths": lens})
    };
    for p in &problems {
        eprintln!("invariant failed: {p}");
    }
    if problems.is_empty() {
        eprintln!("ok");
    }
    Ok(json!({"ok": problems.is_empty(), "problems": problems, "summary": summary}))
}
