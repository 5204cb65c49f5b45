use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::{
    clip_global_norm, eval_steps, lower_bound_from_steps, lr_schedule, posteriors_from_steps, regularize_posterior,
    shard_loss_and_grads, AdamState, Objective, Posterior, TrainConfig,
};
use crate::corpus::{make_batches, EncodedExample};
use crate::decoder::greedy_decode;
use crate::error::{LasynError, Result};
use crate::metrics::bleu;
use crate::model::{argmax, LasynModel, LatentStepOutput};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{rng, Tensor};

pub const STEP_LOG_HEADER: &str = "epoch\tbatch\tk\tnll\tlower_bound\ttag_acc\tlr\twall_ms";
pub const EPOCH_LOG_HEADER: &str =
    "epoch\tsteps\ttrain_nll\ttrain_lower_bound\tvalid_nll\tvalid_tag_acc\tvalid_bleu\twall_ms";

const DROPOUT_STREAM: u64 = 0xd20;
const BATCH_STREAM: u64 = 0xba7c;

/// One inner EM step. `nll` and `lower_bound` are per target token and are
/// measured after the update: the bound pairs the posterior used by the
/// update with the updated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub k: usize,
    pub nll: f64,
    pub lower_bound: f64,
    /// Argmax posterior against gold tags; NaN when not measurable.
    pub tag_acc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepLog {
    fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.batch, self.k, self.nll, self.lower_bound, self.tag_acc, self.lr, self.wall_ms
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        let bad = || LasynError::Checkpoint(format!("unreadable metrics line `{line}`"));
        if c.len() != 8 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let u = |s: &str| s.parse::<u64>().map_err(|_| bad());
        Ok(StepLog {
            epoch: u(c[0])? as usize,
            batch: u(c[1])? as usize,
            k: u(c[2])? as usize,
            nll: f(c[3])?,
            lower_bound: f(c[4])?,
            tag_acc: f(c[5])?,
            lr: f(c[6])?,
            wall_ms: u(c[7])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_nll: f64,
    pub train_lower_bound: f64,
    pub valid_nll: f64,
    pub valid_tag_acc: f64,
    pub valid_bleu: f64,
    pub wall_ms: u64,
}

impl EpochLog {
    fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.steps,
            self.train_nll,
            self.train_lower_bound,
            self.valid_nll,
            self.valid_tag_acc,
            self.valid_bleu,
            self.wall_ms
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        let bad = || LasynError::Checkpoint(format!("unreadable epoch line `{line}`"));
        if c.len() != 8 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let u = |s: &str| s.parse::<u64>().map_err(|_| bad());
        Ok(EpochLog {
            epoch: u(c[0])? as usize,
            steps: u(c[1])?,
            train_nll: f(c[2])?,
            train_lower_bound: f(c[3])?,
            valid_nll: f(c[4])?,
            valid_tag_acc: f(c[5])?,
            valid_bleu: f(c[6])?,
            wall_ms: u(c[7])?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<EncodedExample>,
    pub valid: Vec<EncodedExample>,
}

/// Training driver: owns optimizer state, the worker pool and the logs.
pub struct Trainer {
    cfg: TrainConfig,
    pool: rayon::ThreadPool,
    adam: AdamState,
    epochs_done: usize,
    step_log: Vec<StepLog>,
    epoch_log: Vec<EpochLog>,
    mode: &'static str,
    /// Extra key/values stored in every checkpoint header.
    pub header_extra: BTreeMap<String, String>,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LasynError::config(format!("thread pool: {e}")))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &LasynModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            pool: pool(cfg.threads)?,
            adam: AdamState::new(model.params()),
            epochs_done: 0,
            step_log: Vec::new(),
            epoch_log: Vec::new(),
            mode: cfg.mode_label(model.config().tag_vocab_size),
            header_extra: BTreeMap::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn mode(&self) -> &'static str {
        self.mode
    }

    pub fn step_log(&self) -> &[StepLog] {
        &self.step_log
    }

    pub fn epoch_log(&self) -> &[EpochLog] {
        &self.epoch_log
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Changes the worker count; results do not depend on it.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        self.pool = pool(threads)?;
        self.cfg.threads = threads;
        Ok(())
    }

    fn shards<'a, 'b>(&self, batch: &'b [&'a EncodedExample]) -> Vec<&'b [&'a EncodedExample]> {
        batch.chunks(self.cfg.shard_sentences).collect()
    }

    /// Eval-mode teacher-forced outputs, computed shard by shard.
    fn eval_batch(&self, model: &LasynModel, batch: &[&EncodedExample]) -> Result<Vec<Vec<LatentStepOutput>>> {
        let objective = self.cfg.objective;
        let shards = self.shards(batch);
        let parts: Vec<Result<Vec<Vec<LatentStepOutput>>>> = self
            .pool
            .install(|| shards.par_iter().map(|s| eval_steps(model, s, objective)).collect());
        let mut out = Vec::with_capacity(batch.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn check_tags(&self, model: &LasynModel, data: &[EncodedExample]) -> Result<()> {
        if self.cfg.lambda == 0.0 || self.cfg.objective == Objective::Plain {
            return Ok(());
        }
        let vz = model.config().tag_vocab_size;
        for (i, e) in data.iter().enumerate() {
            if e.tags.len() + 1 != e.tgt.len() {
                return Err(LasynError::config(format!(
                    "lambda > 0 needs a gold tag for every target word (example {i})"
                )));
            }
            if e.tags.iter().any(|&t| t >= vz) {
                return Err(LasynError::config(format!(
                    "gold tags of example {i} exceed the tag vocabulary of {vz}"
                )));
            }
        }
        Ok(())
    }

    /// `K` EM iterations on one batch. Each iteration recomputes the exact
    /// posterior under the current parameters, blends it with the gold tags,
    /// takes one optimizer step on the expected complete-data NLL, and logs
    /// the bound and NLL under the updated parameters.
    pub fn train_batch(
        &mut self,
        model: &mut LasynModel,
        batch: &[&EncodedExample],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<Vec<StepLog>> {
        let started = Instant::now();
        let tokens: usize = batch.iter().map(|e| e.tgt.len()).sum();
        let mut steps = self.eval_batch(model, batch)?;
        let mut logs = Vec::with_capacity(self.cfg.k);
        for k in 1..=self.cfg.k {
            let q = posteriors_from_steps(&steps, batch)?;
            let q = match self.cfg.objective {
                Objective::Latent => q
                    .iter()
                    .zip(batch)
                    .map(|(q, e)| {
                        let gold = if self.cfg.lambda > 0.0 { &e.tags[..] } else { &[] };
                        regularize_posterior(q, gold, self.cfg.lambda)
                    })
                    .collect::<Result<Vec<_>>>()?,
                Objective::Plain => q,
            };
            let step = self.adam.step + 1;
            let lr = lr_schedule(step, self.cfg.peak_lr, self.cfg.warmup_steps);
            let (loss, mut grads) = self.gradients(model, batch, &q, tokens, step)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(LasynError::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}, inner step {k}"
                )));
            }
            clip_global_norm(&mut grads, self.cfg.clip_norm);
            self.adam.apply(model.params_mut(), &grads, lr, &self.cfg.adam);

            steps = self.eval_batch(model, batch)?;
            let mut nll = 0.0;
            let mut bound = 0.0;
            let (mut hits, mut tagged) = (0usize, 0usize);
            for ((s, e), q) in steps.iter().zip(batch).zip(&q) {
                nll -= s
                    .iter()
                    .zip(&e.tgt)
                    .map(|(o, &y)| o.marginal_word_logprobs()[y])
                    .sum::<f64>();
                bound += lower_bound_from_steps(s, &e.tgt, q);
                for (o, (&y, &t)) in s.iter().zip(e.tgt.iter().zip(&e.tags)) {
                    tagged += 1;
                    hits += usize::from(argmax(&o.joint_logprobs(y)) == t);
                }
            }
            let measurable = self.cfg.objective == Objective::Latent && model.config().tag_vocab_size > 1;
            let log = StepLog {
                epoch,
                batch: batch_idx,
                k,
                nll: nll / tokens as f64,
                lower_bound: bound / tokens as f64,
                tag_acc: if measurable && tagged > 0 {
                    hits as f64 / tagged as f64
                } else {
                    f64::NAN
                },
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if !log.nll.is_finite() {
                return Err(LasynError::Numeric(format!(
                    "non-finite NLL at epoch {epoch}, batch {batch_idx}, inner step {k}"
                )));
            }
            logs.push(log);
        }
        self.step_log.extend(logs.iter().cloned());
        Ok(logs)
    }

    /// Loss and gradient summed over shards in shard order, so the result
    /// does not depend on how many workers ran them.
    fn gradients(
        &self,
        model: &LasynModel,
        batch: &[&EncodedExample],
        q: &[Posterior],
        tokens: usize,
        step: u64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let size = self.cfg.shard_sentences;
        let shards = self.shards(batch);
        let objective = self.cfg.objective;
        let seed = self.cfg.seed;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = self.pool.install(|| {
            shards
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let qs: Vec<&Posterior> = q[i * size..i * size + s.len()].iter().collect();
                    let dropout = rng::derive_seed(seed, &[DROPOUT_STREAM, step, i as u64]);
                    shard_loss_and_grads(model, s, &qs, objective, tokens, dropout)
                })
                .collect()
        });
        let mut total = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for p in parts {
            let (l, g) = p?;
            total += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Ok((total, grads.unwrap_or_default()))
    }

    /// Batches for `epoch` (1-based); a pure function of seed and epoch.
    pub fn epoch_batches(&self, data: &[EncodedExample], epoch: usize) -> Result<Vec<Vec<usize>>> {
        let seed = rng::derive_seed(self.cfg.seed, &[BATCH_STREAM, epoch as u64]);
        Ok(make_batches(data, self.cfg.tokens_per_batch, seed)?
            .into_iter()
            .map(|b| b.indices)
            .collect())
    }

    /// Runs the remaining epochs, writing logs and a checkpoint after each
    /// one when `out` is given.
    pub fn train(&mut self, model: &mut LasynModel, data: &TrainData, out: Option<&Path>) -> Result<()> {
        self.check_tags(model, &data.train)?;
        if data.train.is_empty() {
            return Err(LasynError::data("empty training set"));
        }
        for epoch in self.epochs_done + 1..=self.cfg.epochs {
            let started = Instant::now();
            let first = self.step_log.len();
            for (b, idx) in self.epoch_batches(&data.train, epoch)?.iter().enumerate() {
                let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &data.train[i]).collect();
                self.train_batch(model, &batch, epoch, b)?;
            }
            let (mut nll, mut bound, mut toks) = (0.0, 0.0, 0.0);
            let batches = self.epoch_batches(&data.train, epoch)?;
            for log in self.step_log[first..].iter().filter(|l| l.k == self.cfg.k) {
                let t: usize = batches[log.batch].iter().map(|&i| data.train[i].tgt.len()).sum();
                nll += log.nll * t as f64;
                bound += log.lower_bound * t as f64;
                toks += t as f64;
            }
            let (valid_nll, valid_tag_acc, valid_bleu) = self.validate(model, &data.valid)?;
            self.epoch_log.push(EpochLog {
                epoch,
                steps: self.adam.step,
                train_nll: nll / toks,
                train_lower_bound: bound / toks,
                valid_nll,
                valid_tag_acc,
                valid_bleu,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            self.epochs_done = epoch;
            if let Some(dir) = out {
                self.write_outputs(model, dir)?;
            }
        }
        Ok(())
    }

    /// Validation NLL per token, posterior tag accuracy and greedy BLEU on
    /// the first `valid_decode_limit` sentences. NaN when not available.
    pub fn validate(&self, model: &LasynModel, valid: &[EncodedExample]) -> Result<(f64, f64, f64)> {
        if valid.is_empty() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        let refs: Vec<&EncodedExample> = valid.iter().collect();
        let steps = self.eval_batch(model, &refs)?;
        let (mut nll, mut toks, mut hits, mut tagged) = (0.0, 0usize, 0usize, 0usize);
        for (s, e) in steps.iter().zip(valid) {
            for (n, (o, &y)) in s.iter().zip(&e.tgt).enumerate() {
                nll -= o.marginal_word_logprobs()[y];
                toks += 1;
                if let Some(&t) = e.tags.get(n) {
                    tagged += 1;
                    hits += usize::from(argmax(&o.joint_logprobs(y)) == t);
                }
            }
        }
        let tag_acc = if self.cfg.objective == Objective::Latent && model.config().tag_vocab_size > 1 && tagged > 0 {
            hits as f64 / tagged as f64
        } else {
            f64::NAN
        };
        let limit = self.cfg.valid_decode_limit.min(valid.len());
        let bleu_score = if limit == 0 {
            f64::NAN
        } else {
            let max_len = model.config().max_len;
            let hyps: Vec<Result<Vec<usize>>> = self.pool.install(|| {
                valid[..limit]
                    .par_iter()
                    .map(|e| Ok(greedy_decode(model, &e.src, max_len)?.words().to_vec()))
                    .collect()
            });
            let hyps = hyps.into_iter().collect::<Result<Vec<_>>>()?;
            let refs: Vec<Vec<usize>> = valid[..limit].iter().map(|e| e.words().to_vec()).collect();
            bleu(&hyps, &refs, false)?
        };
        Ok((nll / toks as f64, tag_acc, bleu_score))
    }

    pub fn step_log_text(&self) -> String {
        let mut s = format!("# mode={}\n{STEP_LOG_HEADER}\n", self.mode);
        for l in &self.step_log {
            let _ = writeln!(s, "{}", l.line());
        }
        s
    }

    pub fn epoch_log_text(&self) -> String {
        let mut s = format!("# mode={}\n{EPOCH_LOG_HEADER}\n", self.mode);
        for l in &self.epoch_log {
            let _ = writeln!(s, "{}", l.line());
        }
        s
    }

    /// Model parameters, Adam moments and the trainer position.
    pub fn checkpoint(&self, model: &LasynModel) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        for (k, v) in &self.header_extra {
            ck.header.insert(k.clone(), v.clone());
        }
        ck.header.insert("train.step".into(), self.adam.step.to_string());
        ck.header.insert("train.epochs_done".into(), self.epochs_done.to_string());
        ck.header.insert("train.mode".into(), self.mode.to_string());
        let params = model.params();
        for (i, name) in params.names.iter().enumerate() {
            let shape = params.tensors[i].shape().to_vec();
            ck.entries.push((
                format!("adam.m/{name}"),
                Tensor::new(shape.clone(), self.adam.m[i].clone()).expect("moment shape"),
            ));
            ck.entries.push((
                format!("adam.v/{name}"),
                Tensor::new(shape, self.adam.v[i].clone()).expect("moment shape"),
            ));
        }
        ck
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join("checkpoints").join(format!("epoch-{epoch}.ckpt"))
    }

    pub fn write_outputs(&self, model: &LasynModel, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let ck = self.checkpoint(model);
        ck.save(&Self::checkpoint_path(dir, self.epochs_done))?;
        ck.save(&dir.join("model.ckpt"))?;
        std::fs::write(dir.join("metrics.tsv"), self.step_log_text())?;
        std::fs::write(dir.join("epochs.tsv"), self.epoch_log_text())?;
        Ok(())
    }

    /// Restores model, optimizer state and position from a checkpoint and
    /// the logs of `dir` (entries past the checkpoint are dropped).
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint, dir: Option<&Path>) -> Result<(LasynModel, Self)> {
        let model = LasynModel::from_checkpoint(ck)?;
        let mut t = Trainer::new(cfg, &model)?;
        let parse = |k: &str| -> Result<u64> {
            ck.header_value(k)?
                .parse()
                .map_err(|_| LasynError::Checkpoint(format!("bad `{k}` in checkpoint header")))
        };
        t.adam.step = parse("train.step")?;
        t.epochs_done = parse("train.epochs_done")? as usize;
        let params = model.params();
        for (i, name) in params.names.iter().enumerate() {
            for (which, dst) in [("m", &mut t.adam.m[i]), ("v", &mut t.adam.v[i])] {
                let src = ck
                    .get(&format!("adam.{which}/{name}"))
                    .ok_or_else(|| LasynError::Checkpoint(format!("missing optimizer moment for `{name}`")))?;
                if src.numel() != dst.len() {
                    return Err(LasynError::Checkpoint(format!("optimizer moment shape for `{name}`")));
                }
                dst.copy_from_slice(src.data());
            }
        }
        for (k, v) in &ck.header {
            if !k.starts_with("model.") && !k.starts_with("train.") {
                t.header_extra.insert(k.clone(), v.clone());
            }
        }
        if let Some(dir) = dir {
            let keep = |epoch: usize| epoch <= t.epochs_done;
            if let Ok(text) = std::fs::read_to_string(dir.join("metrics.tsv")) {
                for line in text.lines().skip(2).filter(|l| !l.starts_with('#')) {
                    let l = StepLog::parse(line)?;
                    if keep(l.epoch) {
                        t.step_log.push(l);
                    }
                }
            }
            if let Ok(text) = std::fs::read_to_string(dir.join("epochs.tsv")) {
                for line in text.lines().skip(2).filter(|l| !l.starts_with('#')) {
                    let l = EpochLog::parse(line)?;
                    if keep(l.epoch) {
                        t.epoch_log.push(l);
                    }
                }
            }
        }
        Ok((model, t))
    }
}
