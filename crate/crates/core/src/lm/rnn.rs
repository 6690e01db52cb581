//! Elman recurrent character LM: 1-of-V input, sigmoid hidden layer,
//! softmax output.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

const MAGIC: &[u8; 4] = b"PHR1";
const VERSION: u32 = 1;

/// Vocabulary: the classes plus one boundary token (id `num_classes`) that
/// starts every sentence as input and ends it as a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnLm {
    pub vocab: usize,
    pub hidden: usize,
    /// `H x V`, column `v` is the input embedding of token `v`.
    pub w_hv: Vec<f64>,
    /// `H x H`
    pub w_hh: Vec<f64>,
    /// `V x H`
    pub w_vh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Steps through which errors are back-propagated.
    pub bptt: usize,
    pub init_scale: f64,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 300,
            epochs: 10,
            learning_rate: 0.05,
            bptt: 8,
            init_scale: 0.1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradients shaped like [`RnnLm`]'s matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnGradients {
    pub w_hv: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub w_vh: Vec<f64>,
}

impl RnnLm {
    pub fn zeros(num_classes: usize, hidden: usize) -> Self {
        let vocab = num_classes + 1;
        Self {
            vocab,
            hidden,
            w_hv: vec![0.0; hidden * vocab],
            w_hh: vec![0.0; hidden * hidden],
            w_vh: vec![0.0; vocab * hidden],
        }
    }

    pub fn random(num_classes: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut m = Self::zeros(num_classes, hidden);
        let mut rng = sub_rng(seed, "rnnlm-init", 0);
        for w in m.w_hv.iter_mut().chain(m.w_hh.iter_mut()).chain(m.w_vh.iter_mut()) {
            *w = rng.gen_range(-scale..scale);
        }
        m
    }

    pub fn num_classes(&self) -> usize {
        self.vocab - 1
    }

    pub fn boundary(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden]
    }

    /// One step: consumes `prev` with the previous hidden state and returns
    /// the next-token distribution and the new hidden state.
    pub fn step(&self, prev: u32, hidden: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (h, v) = (self.hidden, self.vocab);
        let p = prev as usize;
        let new_h: Vec<f64> = (0..h)
            .map(|i| {
                let rec: f64 = self.w_hh[i * h..(i + 1) * h].iter().zip(hidden).map(|(a, b)| a * b).sum();
                sigmoid(self.w_hv[i * v + p] + rec)
            })
            .collect();
        let mut logits: Vec<f64> = (0..v)
            .map(|o| self.w_vh[o * h..(o + 1) * h].iter().zip(&new_h).map(|(a, b)| a * b).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter_mut().for_each(|l| *l = (*l - m).exp() / z);
        (logits, new_h)
    }

    /// `ln P(sentence, boundary)` from the boundary token and a zero state.
    pub fn sentence_log_prob(&self, sentence: &[u32]) -> f64 {
        let mut hidden = self.initial_hidden();
        let mut prev = self.boundary();
        let mut total = 0.0;
        for &c in sentence.iter().chain(std::iter::once(&self.boundary())) {
            let (p, h) = self.step(prev, &hidden);
            total += p[c as usize].ln();
            hidden = h;
            prev = c;
        }
        total
    }

    pub fn perplexity(&self, sentences: &[Vec<u32>]) -> f64 {
        let tokens: usize = sentences.iter().map(|s| s.len() + 1).sum();
        let lp: f64 = sentences.iter().map(|s| self.sentence_log_prob(s)).sum();
        (-lp / tokens as f64).exp()
    }

    /// Cross-entropy of one sentence and its gradients, back-propagating
    /// each step's error through at most `bptt` steps.
    pub fn loss_and_gradients(&self, sentence: &[u32], bptt: usize) -> (f64, RnnGradients) {
        let (h, v) = (self.hidden, self.vocab);
        let mut inputs = vec![self.boundary()];
        inputs.extend_from_slice(sentence);
        let targets: Vec<u32> = sentence.iter().copied().chain(std::iter::once(self.boundary())).collect();
        let mut hs = vec![self.initial_hidden()];
        let mut probs = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        for (t, &x) in inputs.iter().enumerate() {
            let (p, hn) = self.step(x, &hs[t]);
            loss -= p[targets[t] as usize].ln();
            probs.push(p);
            hs.push(hn);
        }
        let mut g = RnnGradients {
            w_hv: vec![0.0; h * v],
            w_hh: vec![0.0; h * h],
            w_vh: vec![0.0; v * h],
        };
        for t in 0..inputs.len() {
            let hcur = &hs[t + 1];
            let mut dlogit = probs[t].clone();
            dlogit[targets[t] as usize] -= 1.0;
            let mut dh = vec![0.0; h];
            for o in 0..v {
                let d = dlogit[o];
                for i in 0..h {
                    g.w_vh[o * h + i] += d * hcur[i];
                    dh[i] += d * self.w_vh[o * h + i];
                }
            }
            // back through time from step t
            let mut s = t;
            for _ in 0..bptt.max(1) {
                let hs_s = &hs[s + 1];
                let dpre: Vec<f64> = dh.iter().zip(hs_s).map(|(d, y)| d * y * (1.0 - y)).collect();
                let x = inputs[s] as usize;
                for i in 0..h {
                    g.w_hv[i * v + x] += dpre[i];
                    for j in 0..h {
                        g.w_hh[i * h + j] += dpre[i] * hs[s][j];
                    }
                }
                if s == 0 {
                    break;
                }
                dh = (0..h)
                    .map(|j| (0..h).map(|i| dpre[i] * self.w_hh[i * h + j]).sum())
                    .collect();
                s -= 1;
            }
        }
        (loss, g)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.vocab as u32)?;
        w.write_u32::<LittleEndian>(self.hidden as u32)?;
        for &x in self.w_hv.iter().chain(&self.w_hh).chain(&self.w_vh) {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("rnnlm.bin: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("rnnlm.bin: unsupported version {version}")));
        }
        let vocab = r.read_u32::<LittleEndian>()? as usize;
        let hidden = r.read_u32::<LittleEndian>()? as usize;
        if vocab < 2 {
            return Err(Error::Format("rnnlm.bin: vocabulary too small".into()));
        }
        let mut m = Self::zeros(vocab - 1, hidden);
        r.read_f64_into::<LittleEndian>(&mut m.w_hv)?;
        r.read_f64_into::<LittleEndian>(&mut m.w_hh)?;
        r.read_f64_into::<LittleEndian>(&mut m.w_vh)?;
        Ok(m)
    }
}

/// Sentence-level SGD with truncated back-propagation through time.
/// Returns the model and the training perplexity before and after each epoch.
pub fn train_rnnlm(sentences: &[Vec<u32>], num_classes: usize, cfg: &RnnTrainConfig, seed: u64) -> Result<(RnnLm, Vec<f64>)> {
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no training sentences".into()));
    }
    if let Some(c) = sentences.iter().flatten().find(|&&c| c as usize >= num_classes) {
        return Err(Error::InvalidInput(format!("class {c} outside the {num_classes}-class alphabet")));
    }
    let mut m = RnnLm::random(num_classes, cfg.hidden, cfg.init_scale, seed);
    let mut trace = vec![m.perplexity(sentences)];
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sub_rng(seed, "rnnlm-shuffle", epoch as u64));
        for &i in &order {
            let (_, g) = m.loss_and_gradients(&sentences[i], cfg.bptt);
            for (w, d) in m
                .w_hv
                .iter_mut()
                .chain(m.w_hh.iter_mut())
                .chain(m.w_vh.iter_mut())
                .zip(g.w_hv.iter().chain(&g.w_hh).chain(&g.w_vh))
            {
                *w -= cfg.learning_rate * d;
            }
        }
        let ppl = m.perplexity(sentences);
        info!("rnnlm epoch {epoch}: perplexity {ppl:.3}");
        trace.push(ppl);
    }
    Ok((m, trace))
}
