//! Command-line front end. [`run`] maps every outcome to a stable exit code:
//! 0 success, 1 runtime or I/O failure, 2 usage error, 3 numeric abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::DeltaMode;
use crate::checkpoint::load_checkpoint;
use crate::data::{load_paired_dataset, make_synthetic, read_image, write_image, write_pairs, ImageFormat, ImagePair};
use crate::diagnostics::{model_gradcheck, primitive_gradchecks};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, NaLSuper};
use crate::objectives::{LossKind, SsimWindow};
use crate::text::{embed_prompts, load_embeddings, read_prompt_file, write_embeddings, EmbeddingSet, DEFAULT_PROMPTS};
use crate::train::{eval_threads, evaluate, train, TrainOptions, DEFAULT_LR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "nalsuper", version, about = "Text-conditioned low-light image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Enhance one image with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a paired dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and of the full model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic paired dataset.
    MakeSynthetic(SyntheticArgs),
    /// Write a prompt embedding file with the test embedder.
    MakeEmbeddings(EmbeddingArgs),
}

#[derive(Args, Debug)]
pub struct TextArgs {
    /// Prompt file, one prompt per line.
    #[arg(long, conflicts_with = "embeddings")]
    pub prompts: Option<PathBuf>,
    /// Precomputed embedding file.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Embed prompts with the built-in deterministic test embedder (the default
    /// when no embedding file is given).
    #[arg(long, conflicts_with = "embeddings")]
    pub test_embedder: bool,
    /// Seed of the test embedder.
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train on N generated pairs instead of image directories.
    #[arg(long, value_name = "N", conflicts_with_all = ["low_dir", "gt_dir"])]
    pub synthetic: Option<usize>,
    /// Side length of generated images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, requires = "gt_dir")]
    pub low_dir: Option<PathBuf>,
    #[arg(long, requires = "low_dir")]
    pub gt_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub attention_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub d_tau: usize,
    #[arg(long, default_value_t = 1)]
    pub reduction: usize,
    /// Attention temperature: fixed or learnable.
    #[arg(long, default_value = "fixed")]
    pub delta: DeltaMode,
    /// SSIM window: gaussian11 or global.
    #[arg(long, default_value = "gaussian11")]
    pub ssim_window: SsimWindow,
    /// Objective: l1, ssim or l1+ssim.
    #[arg(long, default_value = "l1+ssim")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Seeds initialisation, shuffling and generated data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long, default_value = "nalsuper.nlsc")]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a .trace.csv extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Print a trace line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub text: TextArgs,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub low_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub attention_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub d_tau: usize,
    /// Largest accepted relative error for the full model.
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    /// Largest accepted relative error for each primitive.
    #[arg(long, default_value_t = 1e-6)]
    pub op_threshold: f64,
    /// Random instances per primitive.
    #[arg(long, default_value_t = 20)]
    pub op_seeds: u64,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// png or ppm.
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    /// Prompt file; the two default prompts when omitted.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub d_tau: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// normal output to `out` and diagnostics to stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a, out),
        Command::MakeEmbeddings(a) => cmd_make_embeddings(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn embeddings_for(text: &TextArgs, d_tau: usize) -> Result<EmbeddingSet> {
    if let Some(path) = &text.embeddings {
        return load_embeddings(path);
    }
    let prompts = match &text.prompts {
        Some(p) => read_prompt_file(p)?,
        None => DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
    };
    embed_prompts(&prompts, d_tau, text.embed_seed)
}

fn default_trace_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("trace.csv")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let config = ModelConfig {
        channels: a.channels,
        num_blocks: a.blocks,
        attention_dim: a.attention_dim,
        d_tau: a.d_tau,
        reduction: a.reduction,
        delta_mode: a.delta,
        ssim_window: a.ssim_window,
        seed: a.seed,
    };
    config.validate()?;
    let pairs: Vec<ImagePair> = match (a.synthetic, &a.low_dir, &a.gt_dir) {
        (Some(n), _, _) => make_synthetic(n, a.size, a.size, a.seed)?,
        (None, Some(low), Some(gt)) => load_paired_dataset(low, gt)?,
        _ => return Err(Error::usage("give --synthetic N or both --low-dir and --gt-dir")),
    };
    let embeddings = embeddings_for(&a.text, a.d_tau)?;
    let mut model = NaLSuper::<f32>::init(config, &embeddings)?;
    let options = TrainOptions {
        loss: a.loss,
        steps: a.steps,
        seed: a.seed,
        lr: a.lr,
        batch_size: a.batch_size,
        checkpoint: Some(a.out.clone()),
    };
    let every = a.log_every;
    let mut log_err = None;
    let run = train(&mut model, &pairs, &options, |r| {
        if every > 0 && (r.step % every == 0) && log_err.is_none() {
            log_err = say(
                out,
                format_args!("step {:>6}  total {:.6}  l1 {:.6}  ssim {:.6}\n", r.step, r.total, r.l1, r.ssim),
            )
            .err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let trace = a.trace.unwrap_or_else(|| default_trace_path(&a.out));
    write_text(&trace, &run.trace_csv())?;
    say(
        out,
        format_args!(
            "initial loss {:.6}\nfinal loss {:.6}\ncheckpoint {}\ntrace {}\n",
            run.initial_loss,
            run.final_loss,
            a.out.display(),
            trace.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_enhance(a: EnhanceArgs) -> Result<i32> {
    let model = load_checkpoint::<f32>(&a.ckpt)?;
    let img = read_image(&a.input)?;
    let enhanced = model.forward(&img)?;
    write_image(&a.output, &enhanced)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let model = load_checkpoint::<f32>(&a.ckpt)?;
    let pairs = load_paired_dataset(&a.low_dir, &a.gt_dir)?;
    let report = evaluate(&model, &pairs, eval_threads())?;
    say(out, format_args!("{}", report.table()))?;
    if let Some(path) = &a.csv {
        write_text(path, &report.csv())?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let config = ModelConfig {
        channels: a.channels,
        num_blocks: a.blocks,
        attention_dim: a.attention_dim,
        d_tau: a.d_tau,
        seed: a.seed,
        ..ModelConfig::default()
    };
    config.validate()?;
    if a.size < 3 {
        return Err(Error::usage(format!("--size must be at least 3, got {}", a.size)));
    }
    let mut ok = true;
    say(out, format_args!("{:<24}  {:>12}  status\n", "op", "max_rel_err"))?;
    for rep in primitive_gradchecks(a.seed, a.op_seeds)? {
        let pass = rep.max_rel_error < a.op_threshold;
        ok &= pass;
        say(
            out,
            format_args!("{:<24}  {:>12.3e}  {}\n", rep.name, rep.max_rel_error, verdict(pass)),
        )?;
    }
    let rep = model_gradcheck(&config, a.size, a.seed)?;
    let pass = rep.max_rel_error < a.threshold;
    ok &= pass;
    say(
        out,
        format_args!(
            "{:<24}  {:>12.3e}  {}  ({} parameters)\n",
            "full_model",
            rep.max_rel_error,
            verdict(pass),
            rep.checked
        ),
    )?;
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAIL"
    }
}

fn cmd_make_synthetic(a: SyntheticArgs, out: &mut dyn Write) -> Result<i32> {
    let format = match a.format.as_str() {
        "png" => ImageFormat::Png,
        "ppm" => ImageFormat::Ppm,
        other => return Err(Error::usage(format!("unknown image format {other:?}; expected png or ppm"))),
    };
    let pairs = make_synthetic(a.count, a.size, a.size, a.seed)?;
    let files = write_pairs(&pairs, &a.out_dir, format)?;
    say(out, format_args!("wrote {} files to {}\n", files.len(), a.out_dir.display()))?;
    Ok(EXIT_OK)
}

fn cmd_make_embeddings(a: EmbeddingArgs, out: &mut dyn Write) -> Result<i32> {
    let prompts = match &a.prompts {
        Some(p) => read_prompt_file(p)?,
        None => DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
    };
    let set = embed_prompts(&prompts, a.d_tau, a.seed)?;
    write_embeddings(&a.out, &set)?;
    say(out, format_args!("wrote {} embeddings to {}\n", set.len(), a.out.display()))?;
    Ok(EXIT_OK)
}
