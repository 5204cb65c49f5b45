//! Generates the default synthetic corpus and trains one model, printing
//! the per-epoch summary. Usage: `train_synthetic [n] [epochs] [k] [lambda] [seed]`.

use lasyn::corpus::{generate, split, EncodedExample, SynthGrammar, Vocab};
use lasyn::decoder::{beam_search, BeamConfig};
use lasyn::metrics::bleu;
use lasyn::model::{LasynModel, ModelConfig};
use lasyn::trainer::{TrainConfig, TrainData, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> lasyn::Result<()> {
    let (n, epochs, k, lambda, seed) = (arg(1, 5000), arg(2, 3), arg(3, 1), arg(4, 0.2), arg(5, 1u64));
    let tpb: usize = arg(6, 256);
    let warmup: u64 = arg(7, 200);
    let grammar = SynthGrammar::default();
    let s = split(generate(&grammar, n, 7)?);
    let sv = Vocab::build(s.train.iter().map(|e| &e.src));
    let tv = Vocab::build(s.train.iter().map(|e| &e.tgt));
    let enc = |v: &[lasyn::corpus::ParallelExample]| -> Vec<EncodedExample> {
        v.iter().map(|e| EncodedExample::encode(e, &sv, &tv)).collect()
    };
    let data = TrainData { train: enc(&s.train), valid: enc(&s.valid) };
    let test = enc(&s.test);
    let cfg = ModelConfig {
        src_vocab_size: sv.len(),
        tgt_vocab_size: tv.len(),
        tag_vocab_size: grammar.classes.len(),
        ..Default::default()
    };
    let mut model = LasynModel::new(cfg, seed)?;
    let tc = TrainConfig { k, lambda, epochs, seed, tokens_per_batch: tpb, warmup_steps: warmup, valid_decode_limit: 100, ..Default::default() };
    let mut t = Trainer::new(tc, &model)?;
    let start = std::time::Instant::now();
    t.train(&mut model, &data, None)?;
    print!("{}", t.epoch_log_text());
    let bc = BeamConfig { beam: 5, max_len: 20, length_penalty: 1.0 };
    let hyps: Vec<Vec<usize>> = test.iter().map(|e| beam_search(&model, &e.src, &bc).map(|o| o[0].words().to_vec())).collect::<lasyn::Result<_>>()?;
    let refs: Vec<Vec<usize>> = test.iter().map(|e| e.words().to_vec()).collect();
    println!("test bleu {:.3}  train secs {:.1} total {:.1}", bleu(&hyps, &refs, false)?, 0.0, start.elapsed().as_secs_f64());
    Ok(())
}
