//! End-to-end plumbing shared by the command-line tool, the tests and the
//! Python bindings: corpus directories, training runs, loading a trained
//! model with its vocabularies, decoding, evaluation and benchmarks.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

pub use config::{DecodeSection, ExperimentConfig, ModelSection, TrainSection};

use crate::corpus::bpe::{self, Merge};
use crate::corpus::{
    generate, read_tsv, split, write_tsv, EncodedExample, ParallelExample, SynthGrammar, TagSet, Vocab,
};
use crate::decoder::{
    beam_search, bench_decode, constrained_decode, diverse_translate, parse_records, BeamConfig, BenchRow,
    DecodeOutput, DecodeRecord,
};
use crate::error::{LasynError, Result};
use crate::metrics::{bleu, distinct1, EvalReport};
use crate::model::{check_marginal_nll_gradient, with_eos, wrap_source, LasynModel, ModelConfig, RESERVED_TOKENS};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::rng;
use crate::trainer::{TrainData, Trainer};

pub const SRC_VOCAB_KEY: &str = "vocab.src";
pub const TGT_VOCAB_KEY: &str = "vocab.tgt";
pub const TAGS_KEY: &str = "tags";

fn io_err(path: &Path, e: std::io::Error) -> LasynError {
    LasynError::data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| LasynError::config(format!("thread pool: {e}")))
}

/// Order-preserving parallel map; the output never depends on `threads`.
fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let out: Vec<Result<R>> = pool(threads)?.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect());
    out.into_iter().collect()
}

// ---------------------------------------------------------------- corpus

#[derive(Clone, Debug, Default)]
pub struct GenDataOptions {
    pub grammar: Option<PathBuf>,
    pub n: usize,
    /// Defaults to the grammar's own seed.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub bpe_merges: Option<usize>,
    /// Comma-separated groups of `+`-joined tag names, e.g. `DET+ADJ,NOUN,VERB+ADV+PUNCT`.
    pub merge_tags: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub tags: Vec<String>,
    pub src_types: usize,
    pub tgt_types: usize,
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train={} valid={} test={} tag_vocab_size={} src_types={} tgt_types={}",
            self.train,
            self.valid,
            self.test,
            self.tags.len(),
            self.src_types,
            self.tgt_types
        )
    }
}

/// Parses a tag-merge spec against the current inventory; returns the total
/// map and the merged names in the id order `merge_tagset` assigns.
pub fn parse_merge_spec(spec: &str, names: &[String]) -> Result<(BTreeMap<usize, usize>, Vec<String>)> {
    let mut map = BTreeMap::new();
    let groups: Vec<&str> = spec.split(',').map(str::trim).filter(|g| !g.is_empty()).collect();
    for (g, group) in groups.iter().enumerate() {
        for member in group.split('+').map(str::trim) {
            let id = names
                .iter()
                .position(|n| n == member)
                .ok_or_else(|| LasynError::config(format!("merge spec names unknown tag `{member}`")))?;
            if map.insert(id, g).is_some() {
                return Err(LasynError::config(format!("tag `{member}` appears in two merge groups")));
            }
        }
    }
    let mut merged: Vec<String> = Vec::new();
    let mut seen = vec![false; groups.len()];
    for t in 0..names.len() {
        if let Some(&g) = map.get(&t) {
            if !std::mem::replace(&mut seen[g], true) {
                merged.push(groups[g].to_string());
            }
        }
    }
    Ok((map, merged))
}

fn segment_split(examples: &mut [ParallelExample], src: &[Merge], tgt: &[Merge]) -> Result<()> {
    for ex in examples {
        ex.src = bpe::apply_bpe(&ex.src, src);
        let pieces = bpe::segment(&ex.tgt, tgt);
        ex.tags = bpe::propagate_tags(&ex.tags, &pieces)?;
        ex.tgt = pieces.concat();
    }
    Ok(())
}

fn merges_text(merges: &[Merge]) -> String {
    merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
}

/// Generates, optionally merges tags and BPE-segments, splits and writes
/// `train.tsv`, `valid.tsv`, `test.tsv`, `tags.txt` and the grammar used.
pub fn gen_data(opts: &GenDataOptions) -> Result<GenSummary> {
    let grammar = match &opts.grammar {
        Some(p) => SynthGrammar::load(p)?,
        None => SynthGrammar::default(),
    };
    let mut examples = generate(&grammar, opts.n, opts.seed.unwrap_or(grammar.seed))?;
    let mut names = grammar.tag_names();
    if let Some(spec) = &opts.merge_tags {
        let (map, merged) = parse_merge_spec(spec, &names)?;
        for ex in &mut examples {
            ex.tags = bpe::merge_tagset(&ex.tags, &map, names.len())?.0;
        }
        names = merged;
    }
    let mut s = split(examples);
    if let Some(n) = opts.bpe_merges {
        let src = bpe::learn_bpe(&s.train.iter().map(|e| e.src.clone()).collect::<Vec<_>>(), n);
        let tgt = bpe::learn_bpe(&s.train.iter().map(|e| e.tgt.clone()).collect::<Vec<_>>(), n);
        for part in [&mut s.train, &mut s.valid, &mut s.test] {
            segment_split(part, &src, &tgt)?;
        }
        write(&opts.out.join("bpe.src"), &merges_text(&src))?;
        write(&opts.out.join("bpe.tgt"), &merges_text(&tgt))?;
    }
    let tags = TagSet::new(names)?;
    for ex in s.train.iter().chain(&s.valid).chain(&s.test) {
        ex.check(tags.len())?;
    }
    write(&opts.out.join("grammar.toml"), &grammar.to_toml())?;
    write(&opts.out.join("tags.txt"), &(tags.names().join("\n") + "\n"))?;
    for (name, part) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        write_tsv(&opts.out.join(format!("{name}.tsv")), part, &tags)?;
    }
    Ok(GenSummary {
        train: s.train.len(),
        valid: s.valid.len(),
        test: s.test.len(),
        tags: tags.names().to_vec(),
        src_types: Vocab::build(s.train.iter().map(|e| &e.src)).len() - RESERVED_TOKENS,
        tgt_types: Vocab::build(s.train.iter().map(|e| &e.tgt)).len() - RESERVED_TOKENS,
    })
}

/// A corpus directory as written by [`gen_data`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tags: TagSet,
    pub train: Vec<ParallelExample>,
    pub valid: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let tag_path = dir.join("tags.txt");
        let text = std::fs::read_to_string(&tag_path).map_err(|e| io_err(&tag_path, e))?;
        let tags = TagSet::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())?;
        let part = |name: &str| read_tsv(&dir.join(format!("{name}.tsv")), &tags);
        Ok(Corpus {
            train: part("train")?,
            valid: part("valid")?,
            test: part("test")?,
            tags,
        })
    }

    pub fn vocabs(&self) -> (Vocab, Vocab) {
        (
            Vocab::build(self.train.iter().map(|e| &e.src)),
            Vocab::build(self.train.iter().map(|e| &e.tgt)),
        )
    }
}

// -------------------------------------------------------------- training

/// Tag names stored with a model of `vz` tags trained on `corpus` tags.
fn model_tag_names(corpus: &TagSet, vz: usize) -> Vec<String> {
    if vz == corpus.len() {
        corpus.names().to_vec()
    } else {
        (0..vz).map(|i| format!("z{i}")).collect()
    }
}

/// Encodes a split for a model with `vz` tags. With a single tag every
/// gold label collapses onto it.
fn encode_split(examples: &[ParallelExample], sv: &Vocab, tv: &Vocab, vz: usize) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| {
            let mut enc = EncodedExample::encode(e, sv, tv);
            if vz == 1 {
                enc.tags.iter_mut().for_each(|t| *t = 0);
            }
            enc
        })
        .collect()
}

/// Trains per `cfg` into `cfg.out`, echoing the resolved config there.
/// With `resume` the run continues from `out/model.ckpt` and its logs.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<(LasynModel, Trainer)> {
    cfg.validate()?;
    let data_dir = cfg.data.as_deref().ok_or_else(|| LasynError::config("no corpus directory given"))?;
    let out = cfg.out.as_deref().ok_or_else(|| LasynError::config("no output directory given"))?;
    let corpus = Corpus::load(data_dir)?;
    let (sv, tv) = corpus.vocabs();
    let mc = cfg.model_config(sv.len(), tv.len(), corpus.tags.len());
    mc.validate()?;
    let tc = cfg.train_config();
    let vz = mc.tag_vocab_size;
    if tc.lambda > 0.0 && vz > 1 && vz < corpus.tags.len() {
        return Err(LasynError::config(format!(
            "lambda > 0 needs at least the corpus's {} tags, got tag_vocab_size {vz}",
            corpus.tags.len()
        )));
    }
    let data = TrainData {
        train: encode_split(&corpus.train, &sv, &tv, vz),
        valid: encode_split(&corpus.valid, &sv, &tv, vz),
    };
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let (mut model, mut trainer) = if resume {
        let ck = Checkpoint::load(&out.join("model.ckpt"))?;
        let (model, trainer) = Trainer::resume(tc, &ck, Some(out))?;
        if model.config() != &mc {
            return Err(LasynError::config("checkpoint model shape differs from the configuration"));
        }
        (model, trainer)
    } else {
        let model = LasynModel::new(mc, cfg.seed)?;
        let trainer = Trainer::new(tc, &model)?;
        (model, trainer)
    };
    trainer.header_extra.insert(SRC_VOCAB_KEY.into(), sv.to_line());
    trainer.header_extra.insert(TGT_VOCAB_KEY.into(), tv.to_line());
    trainer
        .header_extra
        .insert(TAGS_KEY.into(), model_tag_names(&corpus.tags, vz).join(" "));
    trainer.train(&mut model, &data, Some(out))?;
    Ok((model, trainer))
}

// -------------------------------------------------------------- decoding

/// Reads one column of a text file: plain lines are taken whole, tab-
/// separated lines (corpus files) yield column `col`.
pub fn read_column(path: &Path, col: usize) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let cell = if cols.len() == 1 {
                cols[0]
            } else {
                cols.get(col).copied().ok_or_else(|| {
                    LasynError::data(format!("{} line {}: no column {}", path.display(), n + 1, col + 1))
                })?
            };
            Ok(cell.split_whitespace().map(str::to_string).collect())
        })
        .collect()
}

/// A trained model with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Translator {
    pub model: LasynModel,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub tags: TagSet,
}

impl Translator {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = LasynModel::from_checkpoint(ck)?;
        let t = Translator {
            src_vocab: Vocab::from_line(ck.header_value(SRC_VOCAB_KEY)?)?,
            tgt_vocab: Vocab::from_line(ck.header_value(TGT_VOCAB_KEY)?)?,
            tags: TagSet::from_line(ck.header_value(TAGS_KEY)?)?,
            model,
        };
        let c = t.model.config();
        if c.src_vocab_size != t.src_vocab.len() || c.tgt_vocab_size != t.tgt_vocab.len() || c.tag_vocab_size != t.tags.len() {
            return Err(LasynError::Checkpoint("stored vocabularies do not match the model".into()));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn encode_source<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        wrap_source(&self.src_vocab.encode(words))
    }

    pub fn encode_target<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        with_eos(&self.tgt_vocab.encode(words))
    }

    pub fn tag_ids<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.tags.id(n.as_ref())).collect()
    }

    pub fn record(&self, id: usize, out: &DecodeOutput) -> DecodeRecord {
        DecodeRecord {
            id,
            tokens: self.tgt_vocab.decode(out.words()),
            tags: out.word_tags().iter().map(|&t| self.tags.name(t).to_string()).collect(),
            score: out.score,
        }
    }

    /// Best beam hypothesis per source, or the template-constrained decode
    /// when `templates` (tag names, one sequence per source) are given.
    pub fn translate(
        &self,
        sources: &[Vec<String>],
        beam: &BeamConfig,
        templates: Option<&[Vec<String>]>,
        threads: usize,
    ) -> Result<Vec<DecodeRecord>> {
        let templates = match templates {
            Some(t) if t.len() != sources.len() => {
                return Err(LasynError::data(format!(
                    "{} tag sequences for {} source sentences",
                    t.len(),
                    sources.len()
                )))
            }
            Some(t) => Some(t.iter().map(|n| self.tag_ids(n)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        par_map(threads, sources, |i, words| {
            let src = self.encode_source(words);
            let out = match &templates {
                Some(t) => constrained_decode(&self.model, &src, &t[i], beam.beam)?,
                None => beam_search(&self.model, &src, beam)?.swap_remove(0),
            };
            Ok(self.record(i, &out))
        })
    }
}

/// One row of the diversity/quality tradeoff table.
#[derive(Clone, Debug, PartialEq)]
pub struct DiverseRow {
    pub d: usize,
    pub w: usize,
    /// Distinct-1 of each source's `W` outputs, averaged over sources.
    pub distinct1: f64,
    /// Corpus BLEU over every (output, reference) pair, when references are given.
    pub bleu: Option<f64>,
    /// Sources for which fewer than `W` distinct templates were found.
    pub shortfall: usize,
}

pub const DIVERSE_HEADER: &str = "d\tw\tdistinct1\tbleu\tshortfall";

impl DiverseRow {
    pub fn line(&self) -> String {
        let bleu = self.bleu.map_or("nan".to_string(), |b| format!("{b:.4}"));
        format!("{}\t{}\t{:.6}\t{}\t{}", self.d, self.w, self.distinct1, bleu, self.shortfall)
    }
}

/// Runs `diverse_translate` for every `d`; each (d, source) pair draws from
/// its own seeded stream.
#[allow(clippy::too_many_arguments)]
pub fn diverse_sweep(
    tr: &Translator,
    sources: &[Vec<String>],
    references: Option<&[Vec<String>]>,
    ds: &[usize],
    w: usize,
    beam: usize,
    max_len: usize,
    seed: u64,
    threads: usize,
) -> Result<(Vec<DiverseRow>, Vec<Vec<DecodeRecord>>)> {
    if let Some(r) = references {
        if r.len() != sources.len() {
            return Err(LasynError::data(format!("{} references for {} sources", r.len(), sources.len())));
        }
    }
    if sources.is_empty() {
        return Err(LasynError::data("no source sentences"));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &d in ds {
        let outs = par_map(threads, sources, |i, words| {
            let mut r = rng::stream(seed, &[rng::label_hash("diverse"), d as u64, i as u64]);
            diverse_translate(&tr.model, &tr.encode_source(words), d, w, beam, max_len, &mut r)
        })?;
        let mut records = Vec::new();
        let (mut div, mut shortfall) = (0.0, 0);
        let (mut hyps, mut refs) = (Vec::new(), Vec::new());
        for (i, o) in outs.iter().enumerate() {
            let recs: Vec<DecodeRecord> = o.outputs.iter().map(|x| tr.record(i, x)).collect();
            let toks: Vec<Vec<String>> = recs.iter().map(|r| r.tokens.clone()).collect();
            div += distinct1(&toks).unwrap_or(0.0);
            shortfall += usize::from(o.shortfall);
            if let Some(r) = references {
                for t in toks {
                    hyps.push(t);
                    refs.push(r[i].clone());
                }
            }
            records.extend(recs);
        }
        rows.push(DiverseRow {
            d,
            w,
            distinct1: div / sources.len() as f64,
            bleu: if references.is_some() { Some(bleu(&hyps, &refs, false)?) } else { None },
            shortfall,
        });
        all.push(records);
    }
    Ok((rows, all))
}

// ------------------------------------------------------------ evaluation

/// Hypothesis tokens and, for decode files, their tags. A corpus file
/// contributes its target column; plain lines are taken whole.
pub fn read_hypotheses(path: &Path) -> Result<(Vec<Vec<String>>, Option<Vec<Vec<String>>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if text.starts_with(crate::decoder::output::HEADER) {
        let recs = parse_records(&text)?;
        let tags = recs.iter().map(|r| r.tags.clone()).collect();
        Ok((recs.into_iter().map(|r| r.tokens).collect(), Some(tags)))
    } else {
        Ok((read_column(path, 1)?, None))
    }
}

/// Scores a hypothesis file against references (second column of a corpus
/// file, or plain lines). With gold tags, hypothesis tags are compared
/// position by position; missing or surplus positions count as errors
/// against the gold length.
pub fn evaluate(hyp: &Path, reference: &Path, gold_tags: Option<&Path>) -> Result<EvalReport> {
    let (hyps, hyp_tags) = read_hypotheses(hyp)?;
    let refs = read_column(reference, 1)?;
    if hyps.len() != refs.len() {
        return Err(LasynError::data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let tag_ids = match gold_tags {
        None => None,
        Some(p) => {
            let gold = read_column(p, 2)?;
            let pred = hyp_tags.ok_or_else(|| LasynError::data("tag accuracy needs a decode file with tags"))?;
            if gold.len() != pred.len() {
                return Err(LasynError::data("gold tag file and hypotheses differ in sentence count"));
            }
            let mut ids: HashMap<String, usize> = HashMap::new();
            let mut intern = |s: &String| {
                let n = ids.len();
                *ids.entry(s.clone()).or_insert(n)
            };
            let gold_ids: Vec<Vec<usize>> = gold.iter().map(|g| g.iter().map(&mut intern).collect()).collect();
            let pred_ids: Vec<Vec<usize>> = pred
                .iter()
                .zip(&gold_ids)
                .map(|(p, g)| {
                    (0..g.len())
                        .map(|j| p.get(j).map_or(usize::MAX, &mut intern))
                        .collect()
                })
                .collect();
            Some((pred_ids, gold_ids))
        }
    };
    EvalReport::compute(&hyps, &refs, tag_ids.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())))
}

// ---------------------------------------------------- checks and timing

fn random_sentences(r: &mut rng::Rng, n: usize, vocab: usize, min: usize, max: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.gen_range(min..=max);
            (0..len).map(|_| r.gen_range(RESERVED_TOKENS..vocab)).collect()
        })
        .collect()
}

/// Untrained model of the configured shape over 64-token vocabularies.
fn probe_config(cfg: &ExperimentConfig, tag_vocab: usize) -> ModelConfig {
    let v = ModelConfig::default();
    cfg.model_config(v.src_vocab_size, v.tgt_vocab_size, tag_vocab)
}

/// Finite-difference check of the marginal-NLL gradient of a freshly
/// initialized model (dropout active with a fixed mask) on a small random
/// batch, over `samples` randomly chosen coordinates.
pub fn grad_check(cfg: &ExperimentConfig, samples: usize) -> Result<GradCheckReport> {
    let mc = probe_config(cfg, ModelConfig::default().tag_vocab_size);
    mc.validate()?;
    let model = LasynModel::new(mc.clone(), cfg.seed)?;
    let mut r = rng::named_stream(cfg.seed, "grad-check");
    let srcs: Vec<Vec<usize>> = random_sentences(&mut r, 3, mc.src_vocab_size, 2, 5)
        .iter()
        .map(|s| wrap_source(s))
        .collect();
    let tgts: Vec<Vec<usize>> = random_sentences(&mut r, 3, mc.tgt_vocab_size, 2, 5)
        .iter()
        .map(|s| with_eos(s))
        .collect();
    let pairs: Vec<(&[usize], &[usize])> = srcs.iter().zip(&tgts).map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let report = check_marginal_nll_gradient(&model, &pairs, Some(cfg.seed), 1e-5, samples, cfg.seed)?;
    if !report.max_rel_error.is_finite() {
        return Err(LasynError::Numeric("non-finite gradient error".into()));
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub vz_list: Vec<usize>,
    pub beam_list: Vec<usize>,
    pub sentences: usize,
    pub max_len: usize,
    pub repeats: usize,
}

/// Decode timing of untrained models of the configured shape, one per tag
/// vocabulary size, on random sources. Untrained models rarely emit EOS,
/// so every hypothesis runs to `max_len` and the work per sentence is
/// comparable across settings.
pub fn bench(cfg: &ExperimentConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.vz_list.is_empty() || opts.beam_list.is_empty() || opts.sentences == 0 {
        return Err(LasynError::config("bench needs tag sizes, beam widths and at least one sentence"));
    }
    let models = opts
        .vz_list
        .iter()
        .map(|&vz| LasynModel::new(probe_config(cfg, vz), cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::named_stream(cfg.seed, "bench");
    let sources: Vec<Vec<usize>> = random_sentences(&mut r, opts.sentences, ModelConfig::default().src_vocab_size, 5, 10)
        .iter()
        .map(|s| wrap_source(s))
        .collect();
    bench_decode(&models, &sources, &opts.beam_list, opts.max_len, opts.repeats)
}
