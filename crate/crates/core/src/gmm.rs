//! Gaussian-emission HMMs: flat start, exact Baum-Welch, forced alignment
//! and the positioned-state statistics that drive state tying.

use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FrameVectors;
use crate::gaussian::{log_add, DiagGaussian, GaussianEmission, GaussianNodeStats};
use crate::hmm::{build_chain, viterbi_chain, CharacterHmm, ChainState, PositionedState};
use crate::tying::StateTyingMap;

const MODEL_MAGIC: &[u8; 4] = b"PHG1";
const MODEL_VERSION: u32 = 1;
const MIN_SELF_LOOP: f64 = 1e-3;
const MAX_SELF_LOOP: f64 = 1.0 - 1e-3;

/// A transcribed line of frame vectors.
#[derive(Debug, Clone, Copy)]
pub struct LineRef<'a> {
    pub frames: &'a FrameVectors,
    pub transcript: &'a [u32],
}

/// Frame-level state labels of one line.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub line_id: u32,
    pub states: Vec<PositionedState>,
    /// Emission log-likelihood of each frame under its label.
    pub frame_loglik: Vec<f64>,
    /// Path log-likelihood including transitions.
    pub score: f64,
}

impl Alignment {
    /// Frame index at which each character starts (HMMs with two or more states).
    pub fn char_starts(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&t| self.states[t].position == 0 && (t == 0 || self.states[t - 1].position != 0))
            .collect()
    }
}

/// Character HMMs whose (possibly tied) states emit Gaussian mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmHmm {
    pub hmms: Vec<CharacterHmm>,
    pub tying: StateTyingMap,
    /// One emission per tied state.
    pub emissions: Vec<GaussianEmission>,
    pub var_floor: f64,
}

/// Outcome of one re-estimation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmReport {
    /// Total log-likelihood of the data under the *input* model.
    pub log_likelihood: f64,
    pub frames: usize,
    pub lines_used: usize,
    pub skipped_lines: Vec<u32>,
    /// Tied states that received no occupancy and kept their old emission.
    pub zero_occupancy: Vec<u32>,
}

#[derive(Clone)]
struct Accumulator {
    /// `[tied][component]`
    emission: Vec<Vec<GaussianNodeStats>>,
    /// `[class * S + pos] = (self, next)`
    transitions: Vec<[f64; 2]>,
    log_likelihood: f64,
    frames: usize,
    lines: usize,
}

impl Accumulator {
    fn new(model: &GmmHmm) -> Self {
        let dim = model.dim();
        Self {
            emission: model
                .emissions
                .iter()
                .map(|e| vec![GaussianNodeStats::new(dim); e.num_components()])
                .collect(),
            transitions: vec![[0.0; 2]; model.hmms.len() * model.num_states()],
            log_likelihood: 0.0,
            frames: 0,
            lines: 0,
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.emission.iter_mut().zip(&other.emission) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.transitions.iter_mut().zip(&other.transitions) {
            a[0] += b[0];
            a[1] += b[1];
        }
        self.log_likelihood += other.log_likelihood;
        self.frames += other.frames;
        self.lines += other.lines;
    }

    /// Adds frame `x` with state occupancy `gamma`, split across mixture components.
    fn add_emission(&mut self, model: &GmmHmm, tied: usize, x: &[f32], gamma: f64, scratch: &mut Vec<f64>) {
        let em = &model.emissions[tied];
        if em.num_components() == 1 {
            self.emission[tied][0].add_frame(x, gamma);
            return;
        }
        em.component_log_joint(x, scratch);
        let total = scratch.iter().fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
        for (m, lj) in scratch.iter().enumerate() {
            let w = gamma * (lj - total).exp();
            if w > 0.0 {
                self.emission[tied][m].add_frame(x, w);
            }
        }
    }
}

impl GmmHmm {
    pub fn num_classes(&self) -> usize {
        self.hmms.len()
    }

    pub fn num_states(&self) -> usize {
        self.hmms.first().map_or(0, CharacterHmm::num_states)
    }

    pub fn dim(&self) -> usize {
        self.emissions.first().map_or(0, GaussianEmission::dim)
    }

    fn chain(&self, transcript: &[u32]) -> Result<Vec<ChainState>> {
        build_chain(&self.hmms, transcript)
    }

    /// `T x N` emission log-likelihoods of the chain states.
    fn chain_emissions(&self, frames: &FrameVectors, chain: &[ChainState]) -> Vec<f64> {
        let n = chain.len();
        let tied: Vec<usize> = chain
            .iter()
            .map(|c| self.tying.tied_id(c.class_id, c.position) as usize)
            .collect();
        let mut out = vec![0.0; frames.len() * n];
        let mut cache = vec![f64::NAN; self.emissions.len()];
        for t in 0..frames.len() {
            cache.iter_mut().for_each(|v| *v = f64::NAN);
            let x = frames.frame(t);
            for (j, &k) in tied.iter().enumerate() {
                if cache[k].is_nan() {
                    cache[k] = self.emissions[k].log_density(x);
                }
                out[t * n + j] = cache[k];
            }
        }
        out
    }

    /// `T x num_tied` emission log-likelihoods, row-major; the GMM scorer for decoding.
    pub fn state_log_densities(&self, frames: &FrameVectors) -> Vec<f64> {
        let k = self.emissions.len();
        let mut out = Vec::with_capacity(frames.len() * k);
        for x in frames.iter() {
            out.extend(self.emissions.iter().map(|e| e.log_density(x)));
        }
        out
    }

    /// Total data log-likelihood (forward algorithm), skipping infeasible lines.
    pub fn log_likelihood(&self, lines: &[LineRef]) -> Result<f64> {
        let parts: Vec<Option<f64>> = lines
            .par_iter()
            .map(|l| -> Result<Option<f64>> {
                let chain = self.chain(l.transcript)?;
                if l.frames.len() < chain.len() {
                    return Ok(None);
                }
                let b = self.chain_emissions(l.frames, &chain);
                Ok(Some(forward(&chain, &b, l.frames.len()).1))
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().sum())
    }

    /// Emissions for `tying` built from pooled positioned statistics.
    pub fn with_tying(&self, tying: StateTyingMap, stats: &PositionedStats) -> Result<GmmHmm> {
        if tying.num_classes() != self.num_classes() || tying.num_positions() != self.num_states() {
            return Err(Error::Dimension("tying map does not match the HMM set".into()));
        }
        let dim = self.dim();
        let mut pooled = vec![GaussianNodeStats::new(dim); tying.num_tied()];
        for c in 0..self.num_classes() {
            for p in 0..self.num_states() {
                pooled[tying.tied_id(c as u32, p) as usize] += stats.get(c as u32, p);
            }
        }
        let global = stats.total();
        let emissions = pooled
            .iter()
            .map(|s| {
                let src = if s.occupancy > 0.0 { s } else { &global };
                GaussianEmission::single(DiagGaussian::from_stats(src, self.var_floor))
            })
            .collect();
        Ok(GmmHmm {
            hmms: self.hmms.clone(),
            tying,
            emissions,
            var_floor: self.var_floor,
        })
    }

    fn apply(&self, acc: &Accumulator, report: &mut EmReport) -> GmmHmm {
        let mut out = self.clone();
        for (k, comps) in acc.emission.iter().enumerate() {
            let occ: f64 = comps.iter().map(|c| c.occupancy).sum();
            if occ <= 0.0 {
                report.zero_occupancy.push(k as u32);
                continue;
            }
            let em = &mut out.emissions[k];
            for (m, st) in comps.iter().enumerate() {
                if st.occupancy > 0.0 {
                    em.components[m] = DiagGaussian::from_stats(st, self.var_floor);
                }
                em.weights[m] = st.occupancy / occ;
            }
            // Components with zero occupancy keep their parameters but get zero weight,
            // which would make ln w = -inf; keep a vanishing weight instead.
            if em.weights.iter().any(|&w| w == 0.0) {
                for w in em.weights.iter_mut() {
                    *w = w.max(1e-12);
                }
                let s: f64 = em.weights.iter().sum();
                em.weights.iter_mut().for_each(|w| *w /= s);
            }
        }
        let s = self.num_states();
        for (c, h) in out.hmms.iter_mut().enumerate() {
            for p in 0..s {
                let [stay, adv] = acc.transitions[c * s + p];
                if stay + adv > 0.0 {
                    h.self_loop[p] = (stay / (stay + adv)).clamp(MIN_SELF_LOOP, MAX_SELF_LOOP);
                }
            }
        }
        out
    }

    /// `gmmhmm.bin`: magic `PHG1`, u32 version, u32 classes, u32 states,
    /// u32 D, f64 variance floor; per class per state f64 self-loop; u32
    /// tied count and one u32 tied id per positioned state; per tied state
    /// u32 components, then per component f64 weight, D f64 means, D f64
    /// variances. Little-endian throughout.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.num_classes() as u32)?;
        w.write_u32::<LittleEndian>(self.num_states() as u32)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_f64::<LittleEndian>(self.var_floor)?;
        for h in &self.hmms {
            for &p in &h.self_loop {
                w.write_f64::<LittleEndian>(p)?;
            }
        }
        w.write_u32::<LittleEndian>(self.tying.num_tied() as u32)?;
        for &id in self.tying.ids() {
            w.write_u32::<LittleEndian>(id)?;
        }
        for e in &self.emissions {
            w.write_u32::<LittleEndian>(e.num_components() as u32)?;
            for (wt, g) in e.weights.iter().zip(&e.components) {
                w.write_f64::<LittleEndian>(*wt)?;
                for &m in &g.mean {
                    w.write_f64::<LittleEndian>(m)?;
                }
                for &v in &g.var {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<GmmHmm> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("gmmhmm.bin: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("gmmhmm.bin: unsupported version {version}")));
        }
        let classes = r.read_u32::<LittleEndian>()? as usize;
        let states = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let var_floor = r.read_f64::<LittleEndian>()?;
        let mut hmms = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut self_loop = vec![0.0; states];
            r.read_f64_into::<LittleEndian>(&mut self_loop)?;
            hmms.push(CharacterHmm {
                class_id: c as u32,
                self_loop,
            });
        }
        let tied = r.read_u32::<LittleEndian>()? as usize;
        let mut ids = vec![0u32; classes * states];
        r.read_u32_into::<LittleEndian>(&mut ids)?;
        let tying = StateTyingMap::from_ids(classes, states, ids)?;
        if tying.num_tied() != tied {
            return Err(Error::Format("gmmhmm.bin: tied-state count mismatch".into()));
        }
        let mut emissions = Vec::with_capacity(tied);
        for _ in 0..tied {
            let m = r.read_u32::<LittleEndian>()? as usize;
            let mut weights = Vec::with_capacity(m);
            let mut components = Vec::with_capacity(m);
            for _ in 0..m {
                weights.push(r.read_f64::<LittleEndian>()?);
                let mut mean = vec![0.0; dim];
                let mut var = vec![0.0; dim];
                r.read_f64_into::<LittleEndian>(&mut mean)?;
                r.read_f64_into::<LittleEndian>(&mut var)?;
                components.push(DiagGaussian::new(mean, var));
            }
            emissions.push(GaussianEmission { weights, components });
        }
        Ok(GmmHmm {
            hmms,
            tying,
            emissions,
            var_floor,
        })
    }
}

/// Log-domain forward pass; returns `(alpha, total log-likelihood)`.
fn forward(chain: &[ChainState], b: &[f64], t_len: usize) -> (Vec<f64>, f64) {
    let n = chain.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * n];
    alpha[0] = b[0];
    for t in 1..t_len {
        for j in 0..n.min(t + 1) {
            let stay = alpha[(t - 1) * n + j] + chain[j].log_self;
            let adv = if j > 0 {
                alpha[(t - 1) * n + j - 1] + chain[j - 1].log_next
            } else {
                f64::NEG_INFINITY
            };
            let v = log_add(stay, adv);
            if v > f64::NEG_INFINITY {
                alpha[t * n + j] = v + b[t * n + j];
            }
        }
    }
    let total = alpha[(t_len - 1) * n + n - 1] + chain[n - 1].log_next;
    (alpha, total)
}

fn backward(chain: &[ChainState], b: &[f64], t_len: usize) -> Vec<f64> {
    let n = chain.len();
    let mut beta = vec![f64::NEG_INFINITY; t_len * n];
    beta[(t_len - 1) * n + n - 1] = chain[n - 1].log_next;
    for t in (0..t_len - 1).rev() {
        for j in 0..n {
            let stay = chain[j].log_self + b[(t + 1) * n + j] + beta[(t + 1) * n + j];
            let adv = if j + 1 < n {
                chain[j].log_next + b[(t + 1) * n + j + 1] + beta[(t + 1) * n + j + 1]
            } else {
                f64::NEG_INFINITY
            };
            beta[t * n + j] = log_add(stay, adv);
        }
    }
    beta
}

/// State and transition posteriors of one line, accumulated into `acc`.
fn accumulate_line(model: &GmmHmm, line: &LineRef, acc: &mut Accumulator) -> Result<bool> {
    let chain = model.chain(line.transcript)?;
    let t_len = line.frames.len();
    let n = chain.len();
    if t_len < n || n == 0 {
        return Ok(false);
    }
    let b = model.chain_emissions(line.frames, &chain);
    let (alpha, ll) = forward(&chain, &b, t_len);
    if !ll.is_finite() {
        return Ok(false);
    }
    let beta = backward(&chain, &b, t_len);
    let s = model.num_states();
    let mut scratch = Vec::new();
    for t in 0..t_len {
        let x = line.frames.frame(t);
        for (j, cs) in chain.iter().enumerate() {
            let lg = alpha[t * n + j] + beta[t * n + j] - ll;
            if lg == f64::NEG_INFINITY {
                continue;
            }
            let gamma = lg.exp();
            let tied = model.tying.tied_id(cs.class_id, cs.position) as usize;
            acc.add_emission(model, tied, x, gamma, &mut scratch);
            let tr = &mut acc.transitions[cs.class_id as usize * s + cs.position];
            if t + 1 < t_len {
                let stay = alpha[t * n + j] + cs.log_self + b[(t + 1) * n + j] + beta[(t + 1) * n + j] - ll;
                tr[0] += stay.exp();
                if j + 1 < n {
                    let adv = alpha[t * n + j]
                        + cs.log_next
                        + b[(t + 1) * n + j + 1]
                        + beta[(t + 1) * n + j + 1]
                        - ll;
                    tr[1] += adv.exp();
                }
            } else if j == n - 1 {
                // exit after the last frame
                tr[1] += gamma;
            }
        }
    }
    acc.log_likelihood += ll;
    acc.frames += t_len;
    acc.lines += 1;
    Ok(true)
}

fn reduce(model: &GmmHmm, parts: Vec<Accumulator>) -> Accumulator {
    let mut acc = Accumulator::new(model);
    for p in &parts {
        acc.merge(p);
    }
    acc
}

/// One exact Baum-Welch re-estimation step.
///
/// Lines with fewer frames than states are skipped and reported; tied states
/// without occupancy keep their emission and are reported.
pub fn baum_welch_iterate(model: &GmmHmm, lines: &[LineRef]) -> Result<(GmmHmm, EmReport)> {
    let results: Vec<(Accumulator, Option<u32>)> = lines
        .par_iter()
        .map(|l| -> Result<_> {
            let mut acc = Accumulator::new(model);
            let used = accumulate_line(model, l, &mut acc)?;
            Ok((acc, (!used).then_some(l.frames.line_id)))
        })
        .collect::<Result<_>>()?;
    let mut report = EmReport::default();
    let mut parts = Vec::with_capacity(results.len());
    for (a, skipped) in results {
        if let Some(id) = skipped {
            report.skipped_lines.push(id);
        }
        parts.push(a);
    }
    let acc = reduce(model, parts);
    if acc.lines == 0 {
        return Err(Error::InvalidInput("no usable line for re-estimation".into()));
    }
    report.log_likelihood = acc.log_likelihood;
    report.frames = acc.frames;
    report.lines_used = acc.lines;
    let updated = model.apply(&acc, &mut report);
    if !report.zero_occupancy.is_empty() {
        warn!("{} tied states had zero occupancy", report.zero_occupancy.len());
    }
    Ok((updated, report))
}

/// Viterbi-style re-estimation from forced alignments (faster, no EM guarantee).
pub fn viterbi_train_iterate(model: &GmmHmm, lines: &[LineRef]) -> Result<(GmmHmm, EmReport)> {
    let results: Vec<Option<Accumulator>> = lines
        .par_iter()
        .map(|l| {
            let ali = match forced_align(model, l.frames, l.transcript) {
                Ok(a) => a,
                Err(Error::Infeasible { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut acc = Accumulator::new(model);
            accumulate_hard(model, l, &ali, &mut acc);
            acc.log_likelihood += ali.score;
            acc.frames += l.frames.len();
            acc.lines += 1;
            Ok(Some(acc))
        })
        .collect::<Result<_>>()?;
    let mut report = EmReport::default();
    for (l, r) in lines.iter().zip(&results) {
        if r.is_none() {
            report.skipped_lines.push(l.frames.line_id);
        }
    }
    let acc = reduce(model, results.into_iter().flatten().collect());
    if acc.lines == 0 {
        return Err(Error::InvalidInput("no usable line for re-estimation".into()));
    }
    report.log_likelihood = acc.log_likelihood;
    report.frames = acc.frames;
    report.lines_used = acc.lines;
    let updated = model.apply(&acc, &mut report);
    Ok((updated, report))
}

fn accumulate_hard(model: &GmmHmm, line: &LineRef, ali: &Alignment, acc: &mut Accumulator) {
    let s = model.num_states();
    let mut scratch = Vec::new();
    for (t, st) in ali.states.iter().enumerate() {
        let tied = model.tying.get(*st) as usize;
        acc.add_emission(model, tied, line.frames.frame(t), 1.0, &mut scratch);
        let tr = &mut acc.transitions[st.class_id as usize * s + st.position as usize];
        match ali.states.get(t + 1) {
            Some(nx) if nx == st => tr[0] += 1.0,
            _ => tr[1] += 1.0,
        }
    }
}

/// Viterbi-optimal state sequence constrained to the transcript's HMM cascade.
pub fn forced_align(model: &GmmHmm, frames: &FrameVectors, transcript: &[u32]) -> Result<Alignment> {
    if transcript.is_empty() {
        return Err(Error::InvalidInput(format!("line {}: empty transcript", frames.line_id)));
    }
    let chain = model.chain(transcript)?;
    if frames.len() < chain.len() {
        return Err(Error::Infeasible {
            line_id: frames.line_id,
            frames: frames.len(),
            required: chain.len(),
        });
    }
    let b = model.chain_emissions(frames, &chain);
    let n = chain.len();
    let (score, path) = viterbi_chain(&chain, frames.len(), |t, j| b[t * n + j]).ok_or(
        Error::Infeasible {
            line_id: frames.line_id,
            frames: frames.len(),
            required: n,
        },
    )?;
    Ok(Alignment {
        line_id: frames.line_id,
        states: path
            .iter()
            .map(|&j| PositionedState::new(chain[j].class_id, chain[j].position))
            .collect(),
        frame_loglik: path.iter().enumerate().map(|(t, &j)| b[t * n + j]).collect(),
        score,
    })
}

/// Uniform segmentation of a line: chain state `j` of `n` gets frames
/// `[j * T / n, (j + 1) * T / n)`.
pub fn uniform_segmentation(num_frames: usize, num_chain_states: usize) -> Vec<usize> {
    (0..num_frames)
        .map(|t| {
            // largest j with j * T / n <= t
            let mut j = (t * num_chain_states) / num_frames;
            while j + 1 < num_chain_states && (j + 1) * num_frames / num_chain_states <= t {
                j += 1;
            }
            while j > 0 && j * num_frames / num_chain_states > t {
                j -= 1;
            }
            j
        })
        .collect()
}

/// Flat-start initialization: uniform segmentation of every line, emissions
/// and transitions estimated from the segments.
///
/// Lines with fewer frames than states are skipped with a warning. Returns
/// the model and the flat alignments of the usable lines.
pub fn flat_start(
    lines: &[LineRef],
    num_classes: usize,
    num_states: usize,
    var_floor: f64,
) -> Result<(GmmHmm, Vec<Alignment>)> {
    if num_states == 0 {
        return Err(Error::Config("HMMs need at least one state".into()));
    }
    let dim = lines
        .iter()
        .find(|l| !l.frames.is_empty())
        .map(|l| l.frames.dim)
        .ok_or_else(|| Error::InvalidInput("no frames to initialize from".into()))?;
    let mut stats = PositionedStats::new(num_classes, num_states, dim);
    let mut trans = vec![[0.0f64; 2]; num_classes * num_states];
    let mut labels = Vec::new();
    for l in lines {
        if let Some(&c) = l.transcript.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidInput(format!("class {c} has no HMM")));
        }
        let n = l.transcript.len() * num_states;
        if l.frames.len() < n || n == 0 {
            warn!(
                "line {}: {} frames for {} states, skipped",
                l.frames.line_id,
                l.frames.len(),
                n
            );
            continue;
        }
        let seg = uniform_segmentation(l.frames.len(), n);
        let states: Vec<PositionedState> = seg
            .iter()
            .map(|&j| PositionedState::new(l.transcript[j / num_states], j % num_states))
            .collect();
        for (t, st) in states.iter().enumerate() {
            stats.get_mut(st.class_id, st.position as usize).add_frame(l.frames.frame(t), 1.0);
            let k = st.class_id as usize * num_states + st.position as usize;
            if t + 1 < states.len() && seg[t + 1] == seg[t] {
                trans[k][0] += 1.0;
            } else {
                trans[k][1] += 1.0;
            }
        }
        labels.push((l.frames.line_id, states));
    }
    let hmms: Vec<CharacterHmm> = (0..num_classes)
        .map(|c| {
            let mut h = CharacterHmm::new(c as u32, num_states, 0.5);
            for p in 0..num_states {
                let [stay, adv] = trans[c * num_states + p];
                if stay + adv > 0.0 {
                    h.self_loop[p] = (stay / (stay + adv)).clamp(MIN_SELF_LOOP, MAX_SELF_LOOP);
                }
            }
            h
        })
        .collect();
    let skeleton = GmmHmm {
        hmms,
        tying: StateTyingMap::identity(num_classes, num_states),
        emissions: Vec::new(),
        var_floor,
    };
    let model = GmmHmm {
        emissions: vec![GaussianEmission::single(DiagGaussian::new(vec![0.0; dim], vec![1.0; dim])); 1],
        ..skeleton
    };
    let model = model.with_tying(StateTyingMap::identity(num_classes, num_states), &stats)?;
    let alignments = labels
        .into_iter()
        .map(|(line_id, states)| {
            let l = lines.iter().find(|l| l.frames.line_id == line_id).unwrap();
            let frame_loglik: Vec<f64> = states
                .iter()
                .enumerate()
                .map(|(t, s)| model.emissions[model.tying.get(*s) as usize].log_density(l.frames.frame(t)))
                .collect();
            let score = frame_loglik.iter().sum();
            Alignment {
                line_id,
                states,
                frame_loglik,
                score,
            }
        })
        .collect();
    Ok((model, alignments))
}

/// Splits every Gaussian into two with means at `mu +- 0.2 sigma` and halved
/// weights, `doublings` times.
pub fn split_mixtures(model: &GmmHmm, doublings: usize) -> GmmHmm {
    let mut out = model.clone();
    for _ in 0..doublings {
        for e in out.emissions.iter_mut() {
            let mut weights = Vec::with_capacity(e.weights.len() * 2);
            let mut comps = Vec::with_capacity(e.weights.len() * 2);
            for (w, g) in e.weights.iter().zip(&e.components) {
                for sign in [1.0, -1.0] {
                    let mean = g
                        .mean
                        .iter()
                        .zip(&g.var)
                        .map(|(m, v)| m + sign * 0.2 * v.sqrt())
                        .collect();
                    weights.push(w / 2.0);
                    comps.push(DiagGaussian::new(mean, g.var.clone()));
                }
            }
            e.weights = weights;
            e.components = comps;
        }
    }
    out
}

/// Statistics of every positioned state, indexed `class * S + position`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionedStats {
    pub num_classes: usize,
    pub num_positions: usize,
    pub stats: Vec<GaussianNodeStats>,
}

impl PositionedStats {
    pub fn new(num_classes: usize, num_positions: usize, dim: usize) -> Self {
        Self {
            num_classes,
            num_positions,
            stats: vec![GaussianNodeStats::new(dim); num_classes * num_positions],
        }
    }

    pub fn dim(&self) -> usize {
        self.stats.first().map_or(0, GaussianNodeStats::dim)
    }

    pub fn get(&self, class_id: u32, position: usize) -> &GaussianNodeStats {
        &self.stats[class_id as usize * self.num_positions + position]
    }

    pub fn get_mut(&mut self, class_id: u32, position: usize) -> &mut GaussianNodeStats {
        &mut self.stats[class_id as usize * self.num_positions + position]
    }

    /// Per-class statistics at one position.
    pub fn at_position(&self, position: usize) -> Vec<GaussianNodeStats> {
        (0..self.num_classes)
            .map(|c| self.get(c as u32, position).clone())
            .collect()
    }

    pub fn total(&self) -> GaussianNodeStats {
        let mut t = GaussianNodeStats::new(self.dim());
        for s in &self.stats {
            t += s;
        }
        t
    }
}

/// Where state occupancies come from when accumulating positioned statistics.
#[derive(Debug, Clone, Copy)]
pub enum Occupancy<'a> {
    /// Hard labels; `alignments[i]` belongs to `lines[i]`.
    Alignments(&'a [Alignment]),
    /// Forward-backward state posteriors under the model.
    Posteriors,
}

/// Occupancy, first- and second-order sums per positioned state.
pub fn accumulate_positioned_stats(
    model: &GmmHmm,
    lines: &[LineRef],
    source: Occupancy,
) -> Result<PositionedStats> {
    let (c, s, d) = (model.num_classes(), model.num_states(), model.dim());
    let mut out = PositionedStats::new(c, s, d);
    match source {
        Occupancy::Alignments(alignments) => {
            if alignments.len() != lines.len() {
                return Err(Error::InvalidInput(format!(
                    "{} alignments for {} lines",
                    alignments.len(),
                    lines.len()
                )));
            }
            for (l, a) in lines.iter().zip(alignments) {
                if a.line_id != l.frames.line_id || a.states.len() != l.frames.len() {
                    return Err(Error::InvalidInput(format!(
                        "alignment of line {} does not match line {}",
                        a.line_id, l.frames.line_id
                    )));
                }
                for (t, st) in a.states.iter().enumerate() {
                    out.get_mut(st.class_id, st.position as usize).add_frame(l.frames.frame(t), 1.0);
                }
            }
        }
        Occupancy::Posteriors => {
            let parts: Vec<PositionedStats> = lines
                .par_iter()
                .map(|l| -> Result<PositionedStats> {
                    let mut part = PositionedStats::new(c, s, d);
                    let chain = model.chain(l.transcript)?;
                    let t_len = l.frames.len();
                    let n = chain.len();
                    if t_len < n || n == 0 {
                        return Ok(part);
                    }
                    let b = model.chain_emissions(l.frames, &chain);
                    let (alpha, ll) = forward(&chain, &b, t_len);
                    if !ll.is_finite() {
                        return Ok(part);
                    }
                    let beta = backward(&chain, &b, t_len);
                    for t in 0..t_len {
                        for (j, cs) in chain.iter().enumerate() {
                            let lg = alpha[t * n + j] + beta[t * n + j] - ll;
                            if lg > f64::NEG_INFINITY {
                                part.get_mut(cs.class_id, cs.position).add_frame(l.frames.frame(t), lg.exp());
                            }
                        }
                    }
                    Ok(part)
                })
                .collect::<Result<_>>()?;
            for p in &parts {
                for (a, b) in out.stats.iter_mut().zip(&p.stats) {
                    *a += b;
                }
            }
        }
    }
    Ok(out)
}

/// `align.tsv`: line_id, frame, class_id, position.
pub fn write_alignments(w: &mut impl Write, alignments: &[Alignment]) -> Result<()> {
    for a in alignments {
        for (t, s) in a.states.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", a.line_id, t, s.class_id, s.position)?;
        }
    }
    Ok(())
}

/// Reads `align.tsv`; scores are not stored and come back as zero.
pub fn read_alignments(r: impl BufRead) -> Result<Vec<Alignment>> {
    let mut out: Vec<Alignment> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<u32> = line
            .split('\t')
            .map(|t| t.parse().map_err(|_| Error::Format(format!("align.tsv: {line:?}"))))
            .collect::<Result<_>>()?;
        if f.len() != 4 {
            return Err(Error::Format(format!("align.tsv: {line:?}")));
        }
        let st = PositionedState::new(f[2], f[3] as usize);
        match out.last_mut() {
            Some(a) if a.line_id == f[0] => {
                if f[1] as usize != a.states.len() {
                    return Err(Error::Format(format!("align.tsv: frames of line {} out of order", f[0])));
                }
                a.states.push(st);
                a.frame_loglik.push(0.0);
            }
            _ => out.push(Alignment {
                line_id: f[0],
                states: vec![st],
                frame_loglik: vec![0.0],
                score: 0.0,
            }),
        }
    }
    Ok(out)
}

/// Standard training schedule: flat start, `first` Baum-Welch iterations, a
/// Viterbi realignment pass, then `second` more Baum-Welch iterations.
pub fn train_schedule(
    lines: &[LineRef],
    num_classes: usize,
    num_states: usize,
    var_floor: f64,
    first: usize,
    second: usize,
) -> Result<(GmmHmm, Vec<f64>)> {
    let (mut model, _) = flat_start(lines, num_classes, num_states, var_floor)?;
    let mut trace = Vec::new();
    for _ in 0..first {
        let (m, r) = baum_welch_iterate(&model, lines)?;
        trace.push(r.log_likelihood);
        model = m;
    }
    let (m, _) = viterbi_train_iterate(&model, lines)?;
    model = m;
    for _ in 0..second {
        let (m, r) = baum_welch_iterate(&model, lines)?;
        trace.push(r.log_likelihood);
        model = m;
    }
    Ok((model, trace))
}
