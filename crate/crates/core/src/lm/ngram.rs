//! Character N-gram model with Witten-Bell interpolation, stored in
//! backoff form so it reads and writes as ARPA text.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

const LN_10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log_prob: f64,
    backoff: f64,
}

/// Backoff N-gram model over class ids plus sentence markers.
///
/// Token `num_classes` is `<s>` and `num_classes + 1` is `</s>`. All
/// probabilities are natural-log internally; ARPA files hold log10.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub num_classes: usize,
    /// `grams[k]` holds the (k+1)-grams.
    grams: Vec<HashMap<Vec<u32>, Entry>>,
}

impl NGramModel {
    pub fn bos(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn eos(&self) -> u32 {
        self.num_classes as u32 + 1
    }

    /// Tokens that can be predicted: every class and `</s>`.
    pub fn predicted(&self) -> impl Iterator<Item = u32> {
        (0..self.num_classes as u32).chain(std::iter::once(self.num_classes as u32 + 1))
    }

    /// Longest history that influences a prediction.
    pub fn context_len(&self) -> usize {
        self.order - 1
    }

    /// `ln P(w | history)`, using at most the last `order - 1` history tokens.
    pub fn log_prob(&self, history: &[u32], w: u32) -> f64 {
        let start = history.len().saturating_sub(self.order - 1);
        let mut h = &history[start..];
        let mut acc = 0.0;
        loop {
            let mut key = h.to_vec();
            key.push(w);
            if let Some(e) = self.grams[h.len()].get(&key) {
                return acc + e.log_prob;
            }
            if h.is_empty() {
                return f64::NEG_INFINITY;
            }
            if let Some(e) = self.grams[h.len() - 1].get(h) {
                acc += e.backoff;
            }
            h = &h[1..];
        }
    }

    /// `ln P(sentence </s> | <s>)`.
    pub fn sentence_log_prob(&self, sentence: &[u32]) -> f64 {
        let mut hist = vec![self.bos()];
        let mut total = 0.0;
        for &c in sentence.iter().chain(std::iter::once(&self.eos())) {
            total += self.log_prob(&hist, c);
            hist.push(c);
        }
        total
    }

    /// Per-token perplexity over sentences, `</s>` included.
    pub fn perplexity(&self, sentences: &[Vec<u32>]) -> f64 {
        let tokens: usize = sentences.iter().map(|s| s.len() + 1).sum();
        let lp: f64 = sentences.iter().map(|s| self.sentence_log_prob(s)).sum();
        (-lp / tokens as f64).exp()
    }

    /// Histories of length `order - 1` or shorter that appear in the model.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = vec![Vec::new()];
        for k in 0..self.order.saturating_sub(1) {
            out.extend(
                self.grams[k]
                    .keys()
                    .filter(|g| *g.last().unwrap() != self.eos())
                    .cloned(),
            );
        }
        out.sort();
        out
    }

    fn word(&self, t: u32) -> String {
        if t == self.bos() {
            "<s>".into()
        } else if t == self.eos() {
            "</s>".into()
        } else {
            t.to_string()
        }
    }

    pub fn write_arpa(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "\\data\\")?;
        for (k, g) in self.grams.iter().enumerate() {
            writeln!(w, "ngram {}={}", k + 1, g.len())?;
        }
        for (k, g) in self.grams.iter().enumerate() {
            writeln!(w, "\n\\{}-grams:", k + 1)?;
            let sorted: BTreeMap<&Vec<u32>, &Entry> = g.iter().collect();
            for (key, e) in sorted {
                let words: Vec<String> = key.iter().map(|&t| self.word(t)).collect();
                let lp = if e.log_prob == f64::NEG_INFINITY { -99.0 } else { e.log_prob / LN_10 };
                if k + 1 < self.order && *key.last().unwrap() != self.eos() {
                    writeln!(w, "{lp:.10}\t{}\t{:.10}", words.join(" "), e.backoff / LN_10)?;
                } else {
                    writeln!(w, "{lp:.10}\t{}", words.join(" "))?;
                }
            }
        }
        writeln!(w, "\n\\end\\")?;
        Ok(())
    }

    /// Reads an ARPA file whose words are `<s>`, `</s>` and class ids.
    pub fn read_arpa(r: impl BufRead) -> Result<Self> {
        let mut counts = Vec::new();
        let mut raw: Vec<Vec<(Vec<String>, f64, f64)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if t == "\\data\\" {
                in_data = true;
                continue;
            }
            if t == "\\end\\" {
                break;
            }
            if let Some(rest) = t.strip_prefix("ngram ") {
                let (n, c) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("lm.arpa: {t:?}")))?;
                let n: usize = n.trim().parse().map_err(|_| Error::Format(format!("lm.arpa: {t:?}")))?;
                let c: usize = c.trim().parse().map_err(|_| Error::Format(format!("lm.arpa: {t:?}")))?;
                if n != counts.len() + 1 {
                    return Err(Error::Format("lm.arpa: ngram counts out of order".into()));
                }
                counts.push(c);
                raw.push(Vec::new());
                continue;
            }
            if t.starts_with('\\') && t.ends_with("-grams:") {
                let n: usize = t[1..t.len() - 7]
                    .parse()
                    .map_err(|_| Error::Format(format!("lm.arpa: {t:?}")))?;
                if n == 0 || n > counts.len() {
                    return Err(Error::Format(format!("lm.arpa: unexpected section {t:?}")));
                }
                section = Some(n);
                continue;
            }
            let n = section.ok_or_else(|| {
                if in_data {
                    Error::Format(format!("lm.arpa: entry outside a section: {t:?}"))
                } else {
                    Error::Format("lm.arpa: missing \\data\\ header".into())
                }
            })?;
            let fields: Vec<&str> = t.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(Error::Format(format!("lm.arpa: {t:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("lm.arpa: {t:?}")));
            let lp = num(fields[0])?;
            let bo = if fields.len() == n + 2 { num(fields[n + 1])? } else { 0.0 };
            raw[n - 1].push((fields[1..=n].iter().map(|s| s.to_string()).collect(), lp, bo));
        }
        if counts.is_empty() {
            return Err(Error::Format("lm.arpa: no n-gram counts".into()));
        }
        for (k, (c, r)) in counts.iter().zip(&raw).enumerate() {
            if *c != r.len() {
                return Err(Error::Format(format!("lm.arpa: {}-gram count {c} but {} entries", k + 1, r.len())));
            }
        }
        let num_classes = raw[0]
            .iter()
            .filter(|(w, _, _)| w[0] != "<s>" && w[0] != "</s>")
            .count();
        let tok = |s: &str| -> Result<u32> {
            match s {
                "<s>" => Ok(num_classes as u32),
                "</s>" => Ok(num_classes as u32 + 1),
                _ => s
                    .parse::<u32>()
                    .ok()
                    .filter(|&v| (v as usize) < num_classes)
                    .ok_or_else(|| Error::Format(format!("lm.arpa: unknown word {s:?}"))),
            }
        };
        let mut grams = Vec::with_capacity(raw.len());
        for section in raw {
            let mut g = HashMap::with_capacity(section.len());
            for (words, lp, bo) in section {
                let key = words.iter().map(|w| tok(w)).collect::<Result<Vec<u32>>>()?;
                let log_prob = if lp <= -99.0 { f64::NEG_INFINITY } else { lp * LN_10 };
                g.insert(
                    key,
                    Entry {
                        log_prob,
                        backoff: bo * LN_10,
                    },
                );
            }
            grams.push(g);
        }
        Ok(Self {
            order: grams.len(),
            num_classes,
            grams,
        })
    }
}

/// Trains an interpolated Witten-Bell model of the given order.
///
/// The unigram level interpolates with the uniform distribution over the
/// classes and `</s>`, so every class has non-zero probability.
pub fn train_ngram(sentences: &[Vec<u32>], num_classes: usize, order: usize) -> Result<NGramModel> {
    if order < 1 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no training sentences".into()));
    }
    let bos = num_classes as u32;
    let eos = bos + 1;
    // counts[k][history of length k][word]
    let mut counts: Vec<HashMap<Vec<u32>, BTreeMap<u32, f64>>> = vec![HashMap::new(); order];
    for s in sentences {
        if let Some(&c) = s.iter().find(|&&c| c >= bos) {
            return Err(Error::InvalidInput(format!("class {c} outside the {num_classes}-class alphabet")));
        }
        let mut toks = vec![bos];
        toks.extend_from_slice(s);
        toks.push(eos);
        for i in 1..toks.len() {
            for k in 0..order.min(i + 1) {
                let h = toks[i - k..i].to_vec();
                *counts[k].entry(h).or_default().entry(toks[i]).or_insert(0.0) += 1.0;
            }
        }
    }
    let vocab = num_classes + 1;
    let uniform = 1.0 / vocab as f64;
    let predicted: Vec<u32> = (0..num_classes as u32).chain(std::iter::once(eos)).collect();

    // interpolated probability, memoized per (history, word) through recursion on the history
    fn wb(
        counts: &[HashMap<Vec<u32>, BTreeMap<u32, f64>>],
        h: &[u32],
        w: u32,
        uniform: f64,
    ) -> f64 {
        let lower = if h.is_empty() { uniform } else { wb(counts, &h[1..], w, uniform) };
        match counts[h.len()].get(h) {
            Some(next) => {
                let total: f64 = next.values().sum();
                let types = next.len() as f64;
                (next.get(&w).copied().unwrap_or(0.0) + types * lower) / (total + types)
            }
            None => lower,
        }
    }

    let mut grams: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); order];
    // unigrams: every predicted token, plus <s> with zero probability
    for &w in &predicted {
        grams[0].insert(
            vec![w],
            Entry {
                log_prob: wb(&counts, &[], w, uniform).ln(),
                backoff: 0.0,
            },
        );
    }
    grams[0].insert(
        vec![bos],
        Entry {
            log_prob: f64::NEG_INFINITY,
            backoff: 0.0,
        },
    );
    for k in 1..order {
        for (h, next) in &counts[k] {
            for &w in next.keys() {
                let mut key = h.clone();
                key.push(w);
                grams[k].insert(
                    key,
                    Entry {
                        log_prob: wb(&counts, h, w, uniform).ln(),
                        backoff: 0.0,
                    },
                );
            }
        }
    }
    // backoff weight of each seen history: the unseen mass at this order
    // divided by the same words' mass one order lower
    for k in 1..order {
        for (h, next) in &counts[k] {
            let alpha = if next.len() == vocab {
                0.0
            } else {
                let seen: f64 = next.keys().map(|&w| wb(&counts, h, w, uniform)).sum();
                let seen_lower: f64 = next.keys().map(|&w| wb(&counts, &h[1..], w, uniform)).sum();
                ((1.0 - seen) / (1.0 - seen_lower)).ln()
            };
            let entry = grams[k - 1]
                .get_mut(h)
                .expect("every history is itself a counted n-gram");
            entry.backoff = alpha;
        }
    }
    Ok(NGramModel {
        order,
        num_classes,
        grams,
    })
}
