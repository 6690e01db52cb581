//! Frame-synchronous Viterbi beam search over cascaded character HMMs.
//!
//! Tokens are keyed by `(class, position, LM context)` and recombine on that
//! key, so with an unlimited beam the search is exact for the declared model.
//! Language-model scores enter when a character is entered and when the line
//! ends.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::classifier::{scaled_likelihood, StatePrior};
use crate::error::{Error, Result};
use crate::features::FrameVectors;
use crate::gmm::GmmHmm;
use crate::hmm::{build_chain, viterbi_chain, CharacterHmm, PositionedState};
use crate::lm::{HybridLm, NGramModel};
use crate::tying::StateTyingMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    #[default]
    None,
    Ngram,
    /// N-gram in the search, hybrid LM when rescoring the n-best list.
    Hybrid,
}

impl std::str::FromStr for LmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LmMode::None),
            "ngram" => Ok(LmMode::Ngram),
            "hybrid" => Ok(LmMode::Hybrid),
            _ => Err(Error::Config(format!("unknown LM mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Active tokens kept per frame; `None` disables pruning and is
    /// written as `"inf"` in configuration files.
    #[serde(with = "beam_serde")]
    pub beam: Option<usize>,
    pub lm_scale: f64,
    pub ins_penalty: f64,
    pub lm: LmMode,
    /// Hypotheses returned in the n-best list.
    pub nbest: usize,
    /// List length used when the hybrid LM rescores.
    pub rescore_depth: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: Some(2000),
            lm_scale: 1.0,
            ins_penalty: 0.0,
            lm: LmMode::None,
            nbest: 1,
            rescore_depth: 8,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == Some(0) {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(self.lm_scale >= 0.0) {
            return Err(Error::Config("LM scale must be non-negative".into()));
        }
        if self.nbest == 0 {
            return Err(Error::Config("n-best size must be at least 1".into()));
        }
        Ok(())
    }

    fn list_size(&self) -> usize {
        if self.lm == LmMode::Hybrid {
            self.nbest.max(self.rescore_depth)
        } else {
            self.nbest
        }
    }
}

mod beam_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(beam: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match beam {
            Some(b) => s.serialize_u64(*b as u64),
            None => s.serialize_str("inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u64),
        // TOML reads a bare `inf` as a float
        Float(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Some(n as usize)),
            Raw::Float(f) if f == f64::INFINITY => Ok(None),
            Raw::Float(f) => Err(de::Error::custom(format!("beam must be a count or \"inf\", got {f}"))),
            Raw::Text(t) if t == "inf" => Ok(None),
            Raw::Text(t) => t
                .parse()
                .map(Some)
                .map_err(|_| de::Error::custom(format!("beam must be a count or \"inf\", got {t:?}"))),
        }
    }
}

/// Language models available to the decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lms<'a> {
    pub ngram: Option<&'a NGramModel>,
    pub hybrid: Option<&'a HybridLm>,
}

/// `T x K` emission scores of the tied states, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub num_frames: usize,
    pub num_states: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(num_frames: usize, num_states: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_frames * num_states {
            return Err(Error::Dimension(format!(
                "{} scores for {num_frames} frames x {num_states} states",
                data.len()
            )));
        }
        Ok(Self {
            num_frames,
            num_states,
            data,
        })
    }

    /// Gaussian log-densities.
    pub fn from_gmm(model: &GmmHmm, frames: &FrameVectors) -> Self {
        Self {
            num_frames: frames.len(),
            num_states: model.emissions.len(),
            data: model.state_log_densities(frames),
        }
    }

    /// Scaled likelihoods `ln P(s|x) - ln P(s)` from `T x K` log-posteriors.
    pub fn from_posteriors(log_post: &[f64], prior: &StatePrior) -> Result<Self> {
        let k = prior.probs.len();
        if k == 0 || log_post.len() % k != 0 {
            return Err(Error::Dimension(format!(
                "{} posteriors do not split into rows of {k}",
                log_post.len()
            )));
        }
        let data = log_post.chunks(k).flat_map(|row| scaled_likelihood(row, prior)).collect();
        Ok(Self {
            num_frames: log_post.len() / k,
            num_states: k,
            data,
        })
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.num_states + k]
    }
}

/// One entry of an n-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub transcript: Vec<u32>,
    /// Acoustic + κ·LM + ρ·length.
    pub score: f64,
    pub acoustic: f64,
    /// Unscaled LM log-probability used in `score`.
    pub lm: f64,
    /// First frame of each character.
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub line_id: u32,
    pub transcript: Vec<u32>,
    pub score: f64,
    /// Tied state of each frame.
    pub alignment: Vec<u32>,
    pub states: Vec<PositionedState>,
    /// First frame of each character; one entry per character.
    pub boundaries: Vec<usize>,
    pub nbest: Vec<Hypothesis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Key {
    class: u32,
    pos: u32,
    ctx: u32,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    score: f64,
    hist: u32,
}

/// A character entry on some path; tokens point at their last one.
#[derive(Debug, Clone, Copy)]
struct HistNode {
    class: u32,
    start: u32,
    prev: u32,
    /// Rolling hash of the transcript prefix, to keep n-best entries distinct.
    hash: u64,
}

const NO_HIST: u32 = u32::MAX;

/// Interned LM histories and memoized transitions between them.
struct LmContexts<'a> {
    lm: Option<&'a NGramModel>,
    histories: Vec<Vec<u32>>,
    ids: HashMap<Vec<u32>, u32>,
    memo: HashMap<(u32, u32), (u32, f64)>,
}

impl<'a> LmContexts<'a> {
    fn new(lm: Option<&'a NGramModel>) -> Self {
        let start = lm.map_or_else(Vec::new, |m| if m.order > 1 { vec![m.bos()] } else { Vec::new() });
        let mut ids = HashMap::new();
        ids.insert(start.clone(), 0);
        Self {
            lm,
            histories: vec![start],
            ids,
            memo: HashMap::new(),
        }
    }

    /// `(context after c, ln P(c | ctx))`.
    fn advance(&mut self, ctx: u32, c: u32) -> (u32, f64) {
        let Some(lm) = self.lm else { return (0, 0.0) };
        if let Some(&r) = self.memo.get(&(ctx, c)) {
            return r;
        }
        let h = &self.histories[ctx as usize];
        let lp = lm.log_prob(h, c);
        let mut next = h.clone();
        next.push(c);
        let keep = lm.order - 1;
        let next = next[next.len().saturating_sub(keep)..].to_vec();
        let id = match self.ids.get(&next) {
            Some(&id) => id,
            None => {
                let id = self.histories.len() as u32;
                self.histories.push(next.clone());
                self.ids.insert(next, id);
                id
            }
        };
        self.memo.insert((ctx, c), (id, lp));
        (id, lp)
    }

    fn end(&self, ctx: u32) -> f64 {
        self.lm.map_or(0.0, |m| m.log_prob(&self.histories[ctx as usize], m.eos()))
    }
}

/// Up to `n` tokens with distinct transcripts, best first.
fn insert(list: &mut Vec<Token>, tok: Token, n: usize, arena: &[HistNode]) {
    let hash = arena[tok.hist as usize].hash;
    if let Some(i) = list.iter().position(|t| arena[t.hist as usize].hash == hash) {
        if tok.score <= list[i].score {
            return;
        }
        list.remove(i);
    }
    let at = list.iter().position(|t| tok.score > t.score).unwrap_or(list.len());
    if at < n {
        list.insert(at, tok);
        list.truncate(n);
    }
}

fn check_inputs(hmms: &[CharacterHmm], tying: &StateTyingMap, scores: &ScoreMatrix) -> Result<()> {
    if scores.num_frames == 0 {
        return Err(Error::InvalidInput("cannot decode a line with zero frames".into()));
    }
    if scores.num_states != tying.num_tied() {
        return Err(Error::Dimension(format!(
            "scorer has {} outputs, the tying map {} tied states",
            scores.num_states,
            tying.num_tied()
        )));
    }
    if hmms.len() != tying.num_classes() {
        return Err(Error::Dimension(format!(
            "{} character HMMs for {} tied classes",
            hmms.len(),
            tying.num_classes()
        )));
    }
    if let Some(h) = hmms.iter().find(|h| h.num_states() == 0 || h.num_states() > tying.num_positions()) {
        return Err(Error::Dimension(format!(
            "class {} has {} states, the tying map {} positions",
            h.class_id,
            h.num_states(),
            tying.num_positions()
        )));
    }
    Ok(())
}

fn traceback(arena: &[HistNode], mut h: u32) -> (Vec<u32>, Vec<usize>) {
    let mut chars = Vec::new();
    let mut starts = Vec::new();
    while h != NO_HIST {
        let n = arena[h as usize];
        chars.push(n.class);
        starts.push(n.start as usize);
        h = n.prev;
    }
    chars.reverse();
    starts.reverse();
    (chars, starts)
}

/// Token-passing search; returns the n-best list from the first pass.
fn search(
    hmms: &[CharacterHmm],
    tying: &StateTyingMap,
    scores: &ScoreMatrix,
    ngram: Option<&NGramModel>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let n = cfg.list_size();
    let kappa = cfg.lm_scale;
    let rho = cfg.ins_penalty;
    let tied: Vec<Vec<usize>> = hmms
        .iter()
        .enumerate()
        .map(|(c, h)| (0..h.num_states()).map(|p| tying.tied_id(c as u32, p) as usize).collect())
        .collect();
    let mut ctxs = LmContexts::new(ngram);
    let mut arena: Vec<HistNode> = Vec::new();
    let num_classes = hmms.len() as u32;

    let enter = |arena: &mut Vec<HistNode>, prev: u32, class: u32, t: usize| -> u32 {
        let prev_hash = if prev == NO_HIST { 0 } else { arena[prev as usize].hash };
        arena.push(HistNode {
            class,
            start: t as u32,
            prev,
            hash: prev_hash.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64 + 1),
        });
        (arena.len() - 1) as u32
    };

    let mut active: HashMap<Key, Vec<Token>> = HashMap::new();
    for c in 0..num_classes {
        let (ctx, lp) = ctxs.advance(0, c);
        let score = kappa * lp + rho + scores.get(0, tied[c as usize][0]);
        if score == f64::NEG_INFINITY {
            continue;
        }
        let hist = enter(&mut arena, NO_HIST, c, 0);
        active.insert(Key { class: c, pos: 0, ctx }, vec![Token { score, hist }]);
    }

    for t in 1..scores.num_frames {
        let mut current: Vec<(Key, Vec<Token>)> = active.drain().collect();
        current.sort_by_key(|(k, _)| *k);
        if let Some(beam) = cfg.beam {
            prune(&mut current, beam);
        }
        let mut next: HashMap<Key, Vec<Token>> = HashMap::with_capacity(current.len() * 2);
        // best exits per resulting LM context, in key order
        let mut exits: Vec<(u32, Vec<Token>)> = Vec::new();
        let mut exit_index: HashMap<u32, usize> = HashMap::new();
        for (key, toks) in &current {
            let h = &hmms[key.class as usize];
            let p = key.pos as usize;
            let log_self = h.log_self(p);
            let log_next = h.log_next(p);
            let e_self = scores.get(t, tied[key.class as usize][p]);
            for tok in toks {
                let s = tok.score + log_self + e_self;
                if s > f64::NEG_INFINITY {
                    insert(next.entry(*key).or_default(), Token { score: s, hist: tok.hist }, n, &arena);
                }
            }
            if p + 1 < h.num_states() {
                let k2 = Key { pos: key.pos + 1, ..*key };
                let e = scores.get(t, tied[key.class as usize][p + 1]);
                for tok in toks {
                    let s = tok.score + log_next + e;
                    if s > f64::NEG_INFINITY {
                        insert(next.entry(k2).or_default(), Token { score: s, hist: tok.hist }, n, &arena);
                    }
                }
            } else {
                let i = *exit_index.entry(key.ctx).or_insert_with(|| {
                    exits.push((key.ctx, Vec::new()));
                    exits.len() - 1
                });
                for tok in toks {
                    let s = tok.score + log_next;
                    if s > f64::NEG_INFINITY {
                        insert(&mut exits[i].1, Token { score: s, hist: tok.hist }, n, &arena);
                    }
                }
            }
        }
        for (ctx, toks) in exits {
            for c in 0..num_classes {
                let (ctx2, lp) = ctxs.advance(ctx, c);
                let add = kappa * lp + rho + scores.get(t, tied[c as usize][0]);
                if add == f64::NEG_INFINITY {
                    continue;
                }
                let key = Key { class: c, pos: 0, ctx: ctx2 };
                for tok in &toks {
                    let s = tok.score + add;
                    let list = next.entry(key).or_default();
                    // cheap pre-check before allocating a history node
                    if list.len() >= n && s <= list[n - 1].score {
                        continue;
                    }
                    let hist = enter(&mut arena, tok.hist, c, t);
                    insert(list, Token { score: s, hist }, n, &arena);
                }
            }
        }
        active = next;
    }

    let mut finals: Vec<Token> = Vec::new();
    let mut keys: Vec<(&Key, &Vec<Token>)> = active.iter().collect();
    keys.sort_by_key(|(k, _)| **k);
    for (key, toks) in keys {
        let h = &hmms[key.class as usize];
        if key.pos as usize + 1 != h.num_states() {
            continue;
        }
        let add = h.log_next(key.pos as usize) + kappa * ctxs.end(key.ctx);
        for tok in toks {
            let s = tok.score + add;
            if s > f64::NEG_INFINITY {
                insert(&mut finals, Token { score: s, hist: tok.hist }, n, &arena);
            }
        }
    }
    if finals.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no complete hypothesis over {} frames",
            scores.num_frames
        )));
    }
    Ok(finals
        .iter()
        .map(|tok| {
            let (transcript, boundaries) = traceback(&arena, tok.hist);
            let lm = ngram.map_or(0.0, |m| m.sentence_log_prob(&transcript));
            Hypothesis {
                acoustic: tok.score - kappa * lm - rho * transcript.len() as f64,
                score: tok.score,
                lm,
                transcript,
                boundaries,
            }
        })
        .collect())
}

/// Histogram pruning: keeps the `beam` best tokens, ties to the lower key.
fn prune(current: &mut Vec<(Key, Vec<Token>)>, beam: usize) {
    let total: usize = current.iter().map(|(_, t)| t.len()).sum();
    if total <= beam {
        return;
    }
    let mut all: Vec<(f64, usize, usize)> = current
        .iter()
        .enumerate()
        .flat_map(|(i, (_, toks))| toks.iter().enumerate().map(move |(j, t)| (t.score, i, j)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut keep = vec![Vec::new(); current.len()];
    for &(_, i, j) in &all[..beam] {
        keep[i].push(j);
    }
    for (i, (_, toks)) in current.iter_mut().enumerate() {
        keep[i].sort_unstable();
        *toks = keep[i].iter().map(|&j| toks[j]).collect();
    }
    current.retain(|(_, t)| !t.is_empty());
}

/// Best state path of each decoded character within its segment.
fn align_segments(
    hmms: &[CharacterHmm],
    tying: &StateTyingMap,
    scores: &ScoreMatrix,
    transcript: &[u32],
    boundaries: &[usize],
) -> Result<Vec<PositionedState>> {
    let mut states = Vec::with_capacity(scores.num_frames);
    for (i, &c) in transcript.iter().enumerate() {
        let start = boundaries[i];
        let end = boundaries.get(i + 1).copied().unwrap_or(scores.num_frames);
        let chain = build_chain(hmms, &[c])?;
        let (_, path) = viterbi_chain(&chain, end - start, |t, j| {
            scores.get(start + t, tying.tied_id(c, chain[j].position) as usize)
        })
        .ok_or_else(|| Error::Invariant(format!("segment {start}..{end} cannot hold class {c}")))?;
        states.extend(path.iter().map(|&j| PositionedState::new(c, chain[j].position)));
    }
    Ok(states)
}

/// Decodes one line.
pub fn decode(
    line_id: u32,
    hmms: &[CharacterHmm],
    tying: &StateTyingMap,
    scores: &ScoreMatrix,
    lms: Lms,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    check_inputs(hmms, tying, scores)?;
    let ngram = match cfg.lm {
        LmMode::None => None,
        LmMode::Ngram | LmMode::Hybrid => Some(
            lms.ngram
                .or(lms.hybrid.map(|h| &h.ngram))
                .ok_or_else(|| Error::Config("LM mode requires an n-gram model".into()))?,
        ),
    };
    if let Some(m) = ngram {
        if m.num_classes != hmms.len() {
            return Err(Error::Dimension(format!(
                "LM covers {} classes, the models {}",
                m.num_classes,
                hmms.len()
            )));
        }
    }
    let mut list = search(hmms, tying, scores, ngram, cfg)?;
    if cfg.lm == LmMode::Hybrid {
        let hybrid = lms
            .hybrid
            .ok_or_else(|| Error::Config("hybrid LM mode requires a hybrid model".into()))?;
        list = rescore_nbest(&list, hybrid, cfg.lm_scale, cfg.ins_penalty);
    }
    list.truncate(cfg.nbest);
    let best = list[0].clone();
    let states = align_segments(hmms, tying, scores, &best.transcript, &best.boundaries)?;
    Ok(DecodeResult {
        line_id,
        transcript: best.transcript,
        score: best.score,
        alignment: states.iter().map(|&s| tying.get(s)).collect(),
        states,
        boundaries: best.boundaries,
        nbest: list,
    })
}

/// Stable re-sort by `acoustic + κ·hybrid + ρ·length`.
pub fn rescore_nbest(list: &[Hypothesis], hybrid: &HybridLm, lm_scale: f64, ins_penalty: f64) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = list
        .iter()
        .map(|h| {
            let lm = hybrid.score(&h.transcript);
            Hypothesis {
                score: h.acoustic + lm_scale * lm + ins_penalty * h.transcript.len() as f64,
                lm,
                ..h.clone()
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out
}

fn join(v: impl IntoIterator<Item = impl ToString>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// `hyp.tsv`: line_id, space-separated class ids.
pub fn write_hypotheses(w: &mut impl Write, results: &[DecodeResult]) -> Result<()> {
    for r in results {
        writeln!(w, "{}\t{}", r.line_id, join(&r.transcript))?;
    }
    Ok(())
}

pub fn read_hypotheses(r: impl BufRead) -> Result<Vec<(u32, Vec<u32>)>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("hyp.tsv: {line:?}"));
        let (id, text) = line.split_once('\t').ok_or_else(bad)?;
        let id = id.parse().map_err(|_| bad())?;
        let chars = text
            .split_whitespace()
            .map(|c| c.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.push((id, chars));
    }
    Ok(out)
}

/// `align_out.tsv`: line_id, character boundaries, per-frame tied states.
pub fn write_alignments_out(w: &mut impl Write, results: &[DecodeResult]) -> Result<()> {
    for r in results {
        writeln!(w, "{}\t{}\t{}", r.line_id, join(&r.boundaries), join(&r.alignment))?;
    }
    Ok(())
}

/// `nbest.tsv`: line_id, rank, score, acoustic, LM log-prob, transcript.
pub fn write_nbest(w: &mut impl Write, results: &[DecodeResult]) -> Result<()> {
    for r in results {
        for (rank, h) in r.nbest.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.line_id,
                rank,
                h.score,
                h.acoustic,
                h.lm,
                join(&h.transcript)
            )?;
        }
    }
    Ok(())
}
