//! Character language models.

mod ngram;
mod rnn;

pub use ngram::{train_ngram, NGramModel};
pub use rnn::{train_rnnlm, RnnGradients, RnnLm, RnnTrainConfig};

use crate::error::{Error, Result};

/// Log-linear combination of an N-gram model and a recurrent LM.
#[derive(Debug, Clone)]
pub struct HybridLm {
    pub ngram: NGramModel,
    pub rnn: RnnLm,
    omega: f64,
}

impl HybridLm {
    pub fn new(ngram: NGramModel, rnn: RnnLm, omega: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::Config(format!("hybrid weight {omega} outside [0, 1]")));
        }
        if ngram.num_classes != rnn.num_classes() {
            return Err(Error::Dimension(format!(
                "n-gram has {} classes, rnnlm has {}",
                ngram.num_classes,
                rnn.num_classes()
            )));
        }
        Ok(Self { ngram, rnn, omega })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// `ω ln P_ngram(C) + (1 - ω) ln P_rnn(C)`.
    pub fn score(&self, sentence: &[u32]) -> f64 {
        hybrid_score(
            self.omega,
            self.ngram.sentence_log_prob(sentence),
            self.rnn.sentence_log_prob(sentence),
        )
    }
}

/// Combines component log-scores. The endpoints return a component
/// unchanged rather than multiplying the other by zero, so `-inf` on the
/// unused side cannot produce NaN.
pub fn hybrid_score(omega: f64, ngram: f64, rnn: f64) -> f64 {
    if omega == 1.0 {
        ngram
    } else if omega == 0.0 {
        rnn
    } else {
        omega * ngram + (1.0 - omega) * rnn
    }
}
