//! End-to-end training pipeline: features, GMM-HMM bootstrap, state tying,
//! frame labels, classifier training and language models.

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    init_profiles, train_adaptive, train_base, AdaptConfig, AdaptiveClassifier, AdaptiveTrainConfig, BaseTrainConfig,
    ClassifierConfig, LabeledLine, StatePrior, WriterProfile,
};
use crate::corpus::TextLineSample;
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::features::{extract_line, FeatureConfig, FrameSequence, FrameVectors};
use crate::gmm::{
    accumulate_positioned_stats, baum_welch_iterate, forced_align, train_schedule, Alignment, GmmHmm, LineRef,
    Occupancy, PositionedStats,
};
use crate::hmm::DEFAULT_STATES;
use crate::lm::{train_ngram, train_rnnlm, NGramModel, RnnLm, RnnTrainConfig};
use crate::tying::{build_parsimonious, generate_all_question_sets, retarget_average_states, Question, StateTyingMap, TyingConfig, TyingOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmTrainConfig {
    /// Baum-Welch iterations before the Viterbi realignment.
    pub first_iterations: usize,
    /// Baum-Welch iterations after it.
    pub second_iterations: usize,
    /// Baum-Welch iterations of the tied model.
    pub tied_iterations: usize,
    pub var_floor: f64,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self {
            first_iterations: 4,
            second_iterations: 4,
            tied_iterations: 2,
            var_floor: crate::gaussian::VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub rnn: RnnTrainConfig,
    /// Weight of the N-gram model in the hybrid.
    pub omega: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: 3,
            rnn: RnnTrainConfig::default(),
            omega: 0.5,
        }
    }
}

/// Every setting of the pipeline; each section maps to one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    /// Emitting states per character HMM.
    pub num_states: usize,
    /// Tied-state budget as an average per character; equal to
    /// `num_states` keeps the system untied.
    pub avg_states: f64,
    pub gmm: GmmTrainConfig,
    pub tying: TyingConfig,
    pub classifier: ClassifierConfig,
    pub base: BaseTrainConfig,
    pub adaptive: AdaptiveTrainConfig,
    pub adapt: AdaptConfig,
    pub lm: LmConfig,
    pub decode: DecodeConfig,
    pub passes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            features: FeatureConfig::default(),
            num_states: DEFAULT_STATES,
            avg_states: 3.0,
            gmm: GmmTrainConfig::default(),
            tying: TyingConfig::default(),
            classifier: ClassifierConfig::default(),
            base: BaseTrainConfig::default(),
            adaptive: AdaptiveTrainConfig::default(),
            adapt: AdaptConfig::default(),
            lm: LmConfig::default(),
            decode: DecodeConfig::default(),
            passes: 3,
        }
    }
}

/// Frame sequences of corpus lines, in input order.
pub fn extract_all(lines: &[TextLineSample], cfg: &FeatureConfig) -> Result<Vec<FrameSequence>> {
    lines.par_iter().map(|l| extract_line(l, cfg)).collect()
}

fn line_refs<'a>(frames: &'a [FrameVectors], transcripts: &'a [&'a [u32]]) -> Vec<LineRef<'a>> {
    frames
        .iter()
        .zip(transcripts)
        .map(|(f, t)| LineRef {
            frames: f,
            transcript: t,
        })
        .collect()
}

/// Trains untied GMM-HMMs with the standard schedule.
pub fn train_gmm_stage(
    frames: &[FrameVectors],
    transcripts: &[&[u32]],
    num_classes: usize,
    num_states: usize,
    cfg: &GmmTrainConfig,
) -> Result<(GmmHmm, Vec<f64>)> {
    let lines = line_refs(frames, transcripts);
    train_schedule(
        &lines,
        num_classes,
        num_states,
        cfg.var_floor,
        cfg.first_iterations,
        cfg.second_iterations,
    )
}

/// Forced alignments; lines too short for their transcript are skipped.
pub fn align_stage(model: &GmmHmm, frames: &[FrameVectors], transcripts: &[&[u32]]) -> Vec<Alignment> {
    frames
        .par_iter()
        .zip(transcripts)
        .filter_map(|(f, t)| match forced_align(model, f, t) {
            Ok(a) => Some(a),
            Err(e) => {
                warn!("line {}: {e}; not aligned", f.line_id);
                None
            }
        })
        .collect()
}

/// Statistics of every positioned state from alignments of `frames`.
pub fn positioned_stats(model: &GmmHmm, frames: &[FrameVectors], alignments: &[Alignment]) -> Result<PositionedStats> {
    let by_id: BTreeMap<u32, &FrameVectors> = frames.iter().map(|f| (f.line_id, f)).collect();
    let mut lines = Vec::with_capacity(alignments.len());
    for a in alignments {
        let f = by_id
            .get(&a.line_id)
            .ok_or_else(|| Error::InvalidInput(format!("alignment of unknown line {}", a.line_id)))?;
        lines.push(LineRef {
            frames: f,
            transcript: &[],
        });
    }
    accumulate_positioned_stats(model, &lines, Occupancy::Alignments(alignments))
}

/// Outcome of the tying stage.
#[derive(Debug, Clone)]
pub struct TieStage {
    pub stats: PositionedStats,
    pub questions: Vec<Vec<Question>>,
    /// Trees and merges; `None` when the system stays untied.
    pub outcome: Option<TyingOutcome>,
    pub map: StateTyingMap,
}

/// Tied map for an average-states budget; a budget equal to the untied
/// state count returns the identity map without building trees.
pub fn tie_stage(stats: PositionedStats, questions: Vec<Vec<Question>>, avg_states: f64, cfg: &TyingConfig) -> Result<TieStage> {
    let (classes, positions) = (stats.num_classes, stats.num_positions);
    let target = retarget_average_states(classes, avg_states)?;
    let (outcome, map) = if target == classes * positions {
        (None, StateTyingMap::identity(classes, positions))
    } else {
        let o = build_parsimonious(&stats, &questions, cfg, target)?;
        let map = o.map.clone();
        (Some(o), map)
    };
    Ok(TieStage {
        stats,
        questions,
        outcome,
        map,
    })
}

/// Re-estimates emissions under the tied map and refines them.
pub fn tied_gmm_stage(
    model: &GmmHmm,
    stage: &TieStage,
    frames: &[FrameVectors],
    transcripts: &[&[u32]],
    iterations: usize,
) -> Result<GmmHmm> {
    let mut tied = model.with_tying(stage.map.clone(), &stage.stats)?;
    let lines = line_refs(frames, transcripts);
    for _ in 0..iterations {
        tied = baum_welch_iterate(&tied, &lines)?.0;
    }
    Ok(tied)
}

/// Per-frame tied-state labels of aligned lines, keyed by line id.
pub fn frame_labels(alignments: &[Alignment], map: &StateTyingMap) -> BTreeMap<u32, Vec<u32>> {
    alignments
        .iter()
        .map(|a| (a.line_id, a.states.iter().map(|&s| map.get(s)).collect()))
        .collect()
}

/// Trained writer-aware classifier and its training summary.
#[derive(Debug, Clone)]
pub struct NnStage {
    pub model: AdaptiveClassifier,
    pub prior: StatePrior,
    pub profiles: BTreeMap<u32, WriterProfile>,
}

/// Base training followed, when the network has adaptation layers and
/// `adaptive` is set, by joint training of adaptation matrices and codes.
pub fn train_nn_stage(
    lines: &[TextLineSample],
    frames: &[FrameSequence],
    labels: &BTreeMap<u32, Vec<u32>>,
    num_outputs: usize,
    cfg: &PipelineConfig,
    adaptive: bool,
) -> Result<NnStage> {
    let patches = frames
        .first()
        .map(|f| &f.patches)
        .ok_or_else(|| Error::InvalidInput("no training frames".into()))?;
    let mut model = AdaptiveClassifier::new(
        cfg.classifier.clone(),
        patches.height,
        patches.width,
        num_outputs,
        cfg.seed,
    )?;
    let labeled = labeled_lines(lines, frames, labels);
    let (prior, report) = train_base(&mut model, &labeled, &cfg.base, cfg.seed)?;
    info!("base classifier: {} frames, loss {:?}", report.frames, report.epoch_loss);
    let profiles = if adaptive {
        train_adaptive_stage(&mut model, &labeled, cfg)?
    } else {
        BTreeMap::new()
    };
    Ok(NnStage { model, prior, profiles })
}

/// Pairs lines with their frames and labels; unlabeled lines are dropped.
pub fn labeled_lines<'a>(
    lines: &[TextLineSample],
    frames: &'a [FrameSequence],
    labels: &'a BTreeMap<u32, Vec<u32>>,
) -> Vec<LabeledLine<'a>> {
    lines
        .iter()
        .zip(frames)
        .filter_map(|(l, f)| {
            labels.get(&l.line_id).map(|lab| LabeledLine {
                line_id: l.line_id,
                writer_id: l.writer_id,
                patches: &f.patches,
                labels: lab,
            })
        })
        .collect()
}

/// Joint training of adaptation matrices and training-writer codes on top
/// of a trained base network. Returns no profiles when P = 0.
pub fn train_adaptive_stage(
    model: &mut AdaptiveClassifier,
    labeled: &[LabeledLine],
    cfg: &PipelineConfig,
) -> Result<BTreeMap<u32, WriterProfile>> {
    if model.num_adapted() == 0 {
        return Ok(BTreeMap::new());
    }
    let mut profiles = init_profiles(
        labeled.iter().map(|l| l.writer_id),
        model.code_dim(),
        cfg.adaptive.code_init_std,
        cfg.seed,
    );
    train_adaptive(model, &mut profiles, labeled, &cfg.adaptive, cfg.seed)?;
    Ok(profiles)
}

/// N-gram and, when `with_rnn`, recurrent LMs on training transcripts.
pub fn train_lm_stage(
    transcripts: &[Vec<u32>],
    num_classes: usize,
    cfg: &LmConfig,
    seed: u64,
    with_rnn: bool,
) -> Result<(NGramModel, Option<RnnLm>)> {
    let ngram = train_ngram(transcripts, num_classes, cfg.order)?;
    let rnn = if with_rnn {
        Some(train_rnnlm(transcripts, num_classes, &cfg.rnn, seed)?.0)
    } else {
        None
    };
    Ok((ngram, rnn))
}

/// A complete recognizer trained from a corpus.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub gmm: GmmHmm,
    pub tying: TieStage,
    pub nn: Option<NnStage>,
    pub ngram: NGramModel,
    pub rnn: Option<RnnLm>,
}

/// What [`train_system`] should build beyond the GMM-HMM and the N-gram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub classifier: bool,
    pub adaptive: bool,
    pub rnnlm: bool,
}

/// Runs the training pipeline on the training lines.
pub fn train_system(train: &[TextLineSample], num_classes: usize, cfg: &PipelineConfig, stages: Stages) -> Result<TrainedSystem> {
    let frames = extract_all(train, &cfg.features)?;
    let vectors: Vec<FrameVectors> = frames.iter().map(|f| f.vectors.clone()).collect();
    let transcripts: Vec<&[u32]> = train.iter().map(|l| l.transcript.as_slice()).collect();
    let (untied, trace) = train_gmm_stage(&vectors, &transcripts, num_classes, cfg.num_states, &cfg.gmm)?;
    info!("gmm-hmm log-likelihood trace {trace:?}");
    let alignments = align_stage(&untied, &vectors, &transcripts);
    let stats = positioned_stats(&untied, &vectors, &alignments)?;
    let questions = generate_all_question_sets(&stats, cfg.tying.question_depth, cfg.tying.var_floor)?;
    let tying = tie_stage(stats, questions, cfg.avg_states, &cfg.tying)?;
    info!("{} tied states", tying.map.num_tied());
    let gmm = if tying.outcome.is_some() {
        tied_gmm_stage(&untied, &tying, &vectors, &transcripts, cfg.gmm.tied_iterations)?
    } else {
        untied
    };
    let nn = if stages.classifier {
        let labels = frame_labels(&alignments, &tying.map);
        Some(train_nn_stage(train, &frames, &labels, tying.map.num_tied(), cfg, stages.adaptive)?)
    } else {
        None
    };
    let owned: Vec<Vec<u32>> = train.iter().map(|l| l.transcript.clone()).collect();
    let (ngram, rnn) = train_lm_stage(&owned, num_classes, &cfg.lm, cfg.seed, stages.rnnlm)?;
    Ok(TrainedSystem {
        gmm,
        tying,
        nn,
        ngram,
        rnn,
    })
}
