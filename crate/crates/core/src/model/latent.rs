use crate::error::{LasynError, Result};
use crate::tensor::kernels::log_sum_exp;

/// Output of the hybrid decoder at one target position.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStepOutput {
    /// `log P(z_n = z | x, y_<n)`, length `|V_z|`.
    pub tag_logprobs: Vec<f64>,
    /// Row-major `|V_z| x |V_y|`; row `z` is `log P(. | z_n = z, x, y_<n)`.
    pub word_logprobs_by_tag: Vec<f64>,
    pub tgt_vocab_size: usize,
}

impl LatentStepOutput {
    pub fn new(tag_logprobs: Vec<f64>, word_logprobs_by_tag: Vec<f64>) -> Result<Self> {
        let tags = tag_logprobs.len();
        if tags == 0 || word_logprobs_by_tag.is_empty() || word_logprobs_by_tag.len() % tags != 0 {
            return Err(LasynError::Dimension {
                op: "latent_step",
                lhs: vec![tags],
                rhs: vec![word_logprobs_by_tag.len()],
            });
        }
        let tgt_vocab_size = word_logprobs_by_tag.len() / tags;
        Ok(LatentStepOutput {
            tag_logprobs,
            word_logprobs_by_tag,
            tgt_vocab_size,
        })
    }

    /// Builds a step from probabilities (test and toy-model convenience).
    pub fn from_probs(tag_probs: &[f64], word_probs_by_tag: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<f64> = word_probs_by_tag.iter().flatten().map(|p| p.ln()).collect();
        Self::new(tag_probs.iter().map(|p| p.ln()).collect(), rows)
    }

    pub fn tag_vocab_size(&self) -> usize {
        self.tag_logprobs.len()
    }

    pub fn word_row(&self, tag: usize) -> &[f64] {
        let v = self.tgt_vocab_size;
        &self.word_logprobs_by_tag[tag * v..(tag + 1) * v]
    }

    /// `log P(y | x, y_<n) = log sum_z P(z | .) P(y | z, .)` for every word.
    pub fn marginal_word_logprobs(&self) -> Vec<f64> {
        let mut terms = vec![0.0; self.tag_vocab_size()];
        (0..self.tgt_vocab_size)
            .map(|y| {
                for (z, t) in terms.iter_mut().enumerate() {
                    *t = self.tag_logprobs[z] + self.word_logprobs_by_tag[z * self.tgt_vocab_size + y];
                }
                log_sum_exp(&terms)
            })
            .collect()
    }

    /// Log joint `log P(z | .) + log P(word | z, .)` for every tag.
    pub fn joint_logprobs(&self, word: usize) -> Vec<f64> {
        (0..self.tag_vocab_size())
            .map(|z| self.tag_logprobs[z] + self.word_logprobs_by_tag[z * self.tgt_vocab_size + word])
            .collect()
    }

    /// Exact tag posterior `q(z) ∝ P(z | .) P(word | z, .)`, computed in log
    /// space and returned as probabilities.
    pub fn tag_posterior(&self, word: usize) -> Result<Vec<f64>> {
        if word >= self.tgt_vocab_size {
            return Err(LasynError::data(format!(
                "word id {word} outside target vocabulary of {}",
                self.tgt_vocab_size
            )));
        }
        let joint = self.joint_logprobs(word);
        let norm = log_sum_exp(&joint);
        Ok(joint.iter().map(|j| (j - norm).exp()).collect())
    }

    /// Most probable tag after observing `word`; ties go to the lowest id.
    pub fn best_tag_given(&self, word: usize) -> usize {
        argmax(&self.joint_logprobs(word))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
