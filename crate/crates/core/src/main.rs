//! `lasyn` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data, I/O or
//! checkpoint error, 4 numeric failure (including a failed gradient check).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lasyn::decoder::{format_records, BeamConfig};
use lasyn::experiment::{self, BenchOptions, ExperimentConfig, GenDataOptions, Translator, DIVERSE_HEADER};
use lasyn::LasynError;

#[derive(Parser)]
#[command(name = "lasyn", version, about = "Latent-syntax translation: data, training, decoding, evaluation")]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with gold tags.
    GenData(GenDataArgs),
    /// Train a model with neural EM and write checkpoints and logs.
    Train(TrainArgs),
    /// Decode sources with beam search, or under tag templates.
    Translate(TranslateArgs),
    /// Decode W outputs per source from tag templates at edit distance d.
    Diverse(DiverseArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradient.
    GradCheck(GradCheckArgs),
    /// Time decoding across tag-vocabulary sizes and beam widths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Grammar file (TOML); the built-in six-class grammar when absent.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Number of sentence pairs before splitting.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Generation seed (default: the grammar's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Learn this many BPE merges per side on the training split.
    #[arg(long)]
    bpe_merges: Option<usize>,
    /// Merge tags, e.g. `DET+ADJ,NOUN,VERB+ADV+PUNCT` (groups separated by commas).
    #[arg(long)]
    merge_tags: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// EM iterations per batch.
    #[arg(long)]
    k: Option<usize>,
    /// Gold-tag weight in the blended posterior (0 = unsupervised).
    #[arg(long)]
    lambda: Option<f64>,
    /// Tag vocabulary size (1 = plain transformer).
    #[arg(long)]
    vz: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TranslateArgs {
    /// Model checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Source sentences, one per line (the first column of a corpus file also works).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Maximum output length, EOS included.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Tag templates, one per source (third column of a corpus file also works).
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Decode file to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Edit distances to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
    d: Vec<usize>,
    /// Outputs per source sentence.
    #[arg(long, default_value_t = 10)]
    w: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// References for BLEU (second column of a corpus file, or plain lines).
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for per-d decode files and the summary table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Decode file or plain hypothesis lines.
    #[arg(long)]
    hyp: PathBuf,
    /// References (second column of a corpus file, or plain lines).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Gold tags (third column of a corpus file) for tag accuracy.
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Metrics log to append the report to.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Experiment config; only the model section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinates to probe.
    #[arg(long, default_value_t = 400)]
    samples: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config; only the model section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    vz_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    beam_list: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    sentences: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Timing repeats; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn threads(flag: Option<usize>) -> Result<usize> {
    match flag {
        Some(0) => Err(LasynError::config("--threads must be at least 1").into()),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let summary = experiment::gen_data(&GenDataOptions {
        grammar: a.grammar,
        n: a.n,
        seed: a.seed,
        out: a.out.clone(),
        bpe_merges: a.bpe_merges,
        merge_tags: a.merge_tags,
    })
    .with_context(|| format!("generating corpus into {}", a.out.display()))?;
    println!("{summary}");
    Ok(())
}

fn train(a: TrainArgs, threads_flag: Option<usize>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.k => cfg.train.k);
    set!(a.lambda => cfg.train.lambda);
    set!(a.epochs => cfg.train.epochs);
    set!(a.seed => cfg.seed);
    set!(a.lr => cfg.train.peak_lr);
    if a.vz.is_some() {
        cfg.model.tag_vocab_size = a.vz;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if threads_flag.is_some() {
        cfg.threads = Some(threads(threads_flag)?);
    }
    cfg.validate()?;
    let (_, trainer) = experiment::train(&cfg, a.resume)?;
    print!("{}", trainer.epoch_log_text());
    Ok(())
}

fn translate(a: TranslateArgs, threads_flag: Option<usize>) -> Result<()> {
    let tr = Translator::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let sources = experiment::read_column(&a.input, 0)?;
    let templates = a.tags.as_deref().map(|p| experiment::read_column(p, 2)).transpose()?;
    if a.beam == 0 || a.max_len == 0 {
        return Err(LasynError::config("--beam and --max-len must be at least 1").into());
    }
    let beam = BeamConfig {
        beam: a.beam,
        max_len: a.max_len,
        length_penalty: a.length_penalty,
    };
    let records = tr.translate(&sources, &beam, templates.as_deref(), threads(threads_flag)?)?;
    emit(a.out.as_deref(), &format_records(&records))
}

fn diverse(a: DiverseArgs, threads_flag: Option<usize>) -> Result<()> {
    let tr = Translator::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let sources = experiment::read_column(&a.input, 0)?;
    let refs = a.reference.as_deref().map(|p| experiment::read_column(p, 1)).transpose()?;
    if a.beam == 0 || a.max_len == 0 || a.d.is_empty() {
        return Err(LasynError::config("--beam and --max-len must be at least 1 and --d non-empty").into());
    }
    let (rows, records) = experiment::diverse_sweep(
        &tr,
        &sources,
        refs.as_deref(),
        &a.d,
        a.w,
        a.beam,
        a.max_len,
        a.seed,
        threads(threads_flag)?,
    )?;
    let args = format!(
        "ckpt = {:?}\ninput = {:?}\nd = {:?}\nw = {}\nbeam = {}\nmax_len = {}\nseed = {}\n",
        a.ckpt, a.input, a.d, a.w, a.beam, a.max_len, a.seed
    );
    emit(Some(&a.out.join("diverse.toml")), &args)?;
    for (row, recs) in rows.iter().zip(&records) {
        emit(Some(&a.out.join(format!("diverse-d{}.tsv", row.d))), &format_records(recs))?;
    }
    let mut table = format!("{DIVERSE_HEADER}\n");
    for r in &rows {
        table.push_str(&r.line());
        table.push('\n');
    }
    emit(Some(&a.out.join("summary.tsv")), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = experiment::evaluate(&a.hyp, &a.reference, a.tags.as_deref())?;
    println!("{report}");
    if let Some(log) = a.log {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .with_context(|| format!("opening {}", log.display()))?;
        writeln!(f, "# eval hyp={} {report}", a.hyp.display())?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let started = Instant::now();
    let report = experiment::grad_check(&cfg, a.samples)?;
    let ok = report.passes(a.tol);
    println!(
        "{} max_rel_error={:.3e} checked={} tol={:e} secs={:.2}",
        if ok { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.checked,
        a.tol,
        started.elapsed().as_secs_f64()
    );
    if ok {
        Ok(())
    } else {
        Err(LasynError::Numeric(format!("gradient check error {:.3e} above {:e}", report.max_rel_error, a.tol)).into())
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let rows = experiment::bench(
        &cfg,
        &BenchOptions {
            vz_list: a.vz_list,
            beam_list: a.beam_list,
            sentences: a.sentences,
            max_len: a.max_len,
            repeats: a.repeats,
        },
    )?;
    println!("tag_vocab_size\tbeam\tsecs_per_sentence");
    for r in rows {
        println!("{}\t{}\t{:.6}", r.tag_vocab_size, r.beam, r.secs_per_sentence);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let t = cli.threads;
    match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, t),
        Command::Translate(a) => translate(a, t),
        Command::Diverse(a) => diverse(a, t),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<LasynError>().map_or(3, LasynError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
