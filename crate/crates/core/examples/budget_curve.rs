//! Test BLEU (greedy) at several step budgets for a given lambda/K/seed.
//! Usage: `budget_curve lambda k seed tokens_per_batch warmup peak_lr steps...`

use lasyn::corpus::{generate, split, EncodedExample, SynthGrammar, Vocab};
use lasyn::decoder::greedy_decode;
use lasyn::metrics::bleu;
use lasyn::model::{LasynModel, ModelConfig};
use lasyn::trainer::{TrainConfig, Trainer};

fn main() -> lasyn::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let lambda: f64 = a[1].parse().unwrap();
    let k: usize = a[2].parse().unwrap();
    let seed: u64 = a[3].parse().unwrap();
    let tpb: usize = a[4].parse().unwrap();
    let warmup: u64 = a[5].parse().unwrap();
    let lr: f64 = a[6].parse().unwrap();
    let budgets: Vec<usize> = a[7..].iter().map(|s| s.parse().unwrap()).collect();
    let grammar = SynthGrammar::default();
    let s = split(generate(&grammar, 5000, 7)?);
    let sv = Vocab::build(s.train.iter().map(|e| &e.src));
    let tv = Vocab::build(s.train.iter().map(|e| &e.tgt));
    let enc = |v: &[lasyn::corpus::ParallelExample]| -> Vec<EncodedExample> {
        v.iter().map(|e| EncodedExample::encode(e, &sv, &tv)).collect()
    };
    let train = enc(&s.train);
    let test = enc(&s.test);
    let cfg = ModelConfig { src_vocab_size: sv.len(), tgt_vocab_size: tv.len(), tag_vocab_size: 6, ..Default::default() };
    let mut model = LasynModel::new(cfg, seed)?;
    let tc = TrainConfig { k, lambda, epochs: 100, seed, tokens_per_batch: tpb, warmup_steps: warmup, peak_lr: lr, ..Default::default() };
    let mut t = Trainer::new(tc, &model)?;
    let mut done = 0;
    let mut epoch = 1;
    let mut out = String::new();
    'outer: loop {
        for (b, idx) in t.epoch_batches(&train, epoch)?.iter().enumerate() {
            let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
            t.train_batch(&mut model, &batch, epoch, b)?;
            done += 1;
            if budgets.contains(&done) {
                let hyps: Vec<Vec<usize>> = test.iter().map(|e| greedy_decode(&model, &e.src, 20).map(|o| o.words().to_vec())).collect::<lasyn::Result<_>>()?;
                let refs: Vec<Vec<usize>> = test.iter().map(|e| e.words().to_vec()).collect();
                out += &format!(" {done}:{:.1}", bleu(&hyps, &refs, false)?);
                if done >= *budgets.iter().max().unwrap() { break 'outer; }
            }
        }
        epoch += 1;
    }
    println!("lambda {lambda} k {k} seed {seed}:{out}");
    Ok(())
}
