//! One PASS/FAIL line per acceptance criterion, written straight to stderr so
//! it shows up without `--nocapture`.
//!
//! Oracle and invariant criteria assert. The directional criteria measured
//! on trained systems (tying trend, adaptation trend, LM decoding) report
//! their outcome without failing the run; their measurements are printed in
//! full.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use phmm::classifier::{prepare_line, read_wcnn, write_wcnn, AdaptiveClassifier, BnMode, ClassifierConfig, Reduction, StatePrior, WcnnFile};
use phmm::corpus::{generate_corpus, Corpus, CorpusConfig, LEFT_BOX};
use phmm::decoder::{decode, DecodeConfig, LmMode, Lms, ScoreMatrix};
use phmm::eval::{cer, edit_counts, multipass_recognize, recognize_line, CerReport, HybridSystem, Reference, TestLine};
use phmm::features::{FrameSequence, Patches};
use phmm::gaussian::{GaussianNodeStats, VARIANCE_FLOOR};
use phmm::gmm::{baum_welch_iterate, flat_start, LineRef};
use phmm::hmm::CharacterHmm;
use phmm::lm::{hybrid_score, train_ngram, HybridLm, RnnLm};
use phmm::rng::sub_rng;
use phmm::system::{extract_all, train_system, PipelineConfig, Stages, TrainedSystem};
use phmm::tying::{
    build_tying_tree, generate_question_set, merge_to_target, pooled_log_likelihood, split_gain, Question,
    StateTyingMap, TyingConfig, TyingTree,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn report(criterion: &str, pass: bool, detail: String) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Weighted maximum-likelihood Gaussian fitted with a two-pass estimate,
/// then scored frame by frame.
fn direct_ll(frames: &[(&[f64], f64)]) -> f64 {
    let n: f64 = frames.iter().map(|f| f.1).sum();
    if n == 0.0 {
        return 0.0;
    }
    let d = frames[0].0.len();
    let mean: Vec<f64> = (0..d).map(|k| frames.iter().map(|(x, w)| w * x[k]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|k| (frames.iter().map(|(x, w)| w * (x[k] - mean[k]).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR))
        .collect();
    frames
        .iter()
        .map(|(x, w)| {
            w * (0..d)
                .map(|k| -0.5 * ((2.0 * PI * var[k]).ln() + (x[k] - mean[k]).powi(2) / var[k]))
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn tying_likelihood_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let sets = 120;
    for i in 0..sets {
        let mut rng = sub_rng(11, "acc-ll", i);
        let dim = [1, 8, 64][i as usize % 3];
        let n = rng.gen_range(5..200);
        let weighted = i % 2 == 1;
        let frames: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|_| {
                // rounded through f32: statistics are accumulated from f32 frames
                let x: Vec<f64> = (0..dim)
                    .map(|k| (k as f64 * 0.1 + rng.gen_range(-2.0..2.0) * rng.gen_range(0.2..1.0)) as f32 as f64)
                    .collect();
                (x, if weighted { rng.gen_range(0.05..1.0) } else { 1.0 })
            })
            .collect();
        let mut stats = GaussianNodeStats::new(dim);
        for (x, w) in &frames {
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            stats.add_frame(&xf, *w);
        }
        let fast = pooled_log_likelihood(&stats, VARIANCE_FLOOR).unwrap();
        let refs: Vec<(&[f64], f64)> = frames.iter().map(|(x, w)| (x.as_slice(), *w)).collect();
        worst = worst.max(rel(fast, direct_ll(&refs)));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && secs < 10.0;
    report(
        "tying-likelihood-oracle",
        pass,
        format!("{sets} stat sets, D in {{1,8,64}}, max relative error {worst:.2e} (tol 1e-6), {secs:.2}s (limit 10s)"),
    );
    assert!(pass);
}

type Frames = Vec<Vec<f64>>;

fn class_data(centres: &[f64], per_class: usize, dim: usize, seed: u64) -> Vec<Frames> {
    let mut rng = sub_rng(seed, "acc-split", 0);
    centres
        .iter()
        .map(|&m| {
            let n = Normal::new(m, 0.3).unwrap();
            (0..per_class)
                .map(|_| (0..dim).map(|_| n.sample(&mut rng) as f32 as f64).collect())
                .collect()
        })
        .collect()
}

fn stats_of(frames: &[Frames]) -> Vec<GaussianNodeStats> {
    frames
        .iter()
        .map(|fs| {
            let mut s = GaussianNodeStats::new(fs[0].len());
            for f in fs {
                let x: Vec<f32> = f.iter().map(|&v| v as f32).collect();
                s.add_frame(&x, 1.0);
            }
            s
        })
        .collect()
}

fn ll_of(frames: &[Frames], classes: &[u32]) -> f64 {
    let all: Vec<(&[f64], f64)> = classes
        .iter()
        .flat_map(|&c| frames[c as usize].iter().map(|f| (f.as_slice(), 1.0)))
        .collect();
    direct_ll(&all)
}

fn pooled(stats: &[GaussianNodeStats], classes: &[u32]) -> GaussianNodeStats {
    let mut s = GaussianNodeStats::new(stats[0].dim());
    for &c in classes {
        s += &stats[c as usize];
    }
    s
}

#[test]
fn split_merge_correctness() {
    let open = TyingConfig {
        split_threshold: 0.0,
        min_occupancy: 0.0,
        ..TyingConfig::default()
    };
    let layouts = [(1usize, 12usize), (2, 6), (3, 4), (4, 3)];
    let (mut node_checks, mut merge_checks, mut min_gain) = (0usize, 0usize, f64::INFINITY);
    let mut failures = Vec::new();
    for trial in 0..100u64 {
        let (positions, classes) = layouts[trial as usize % layouts.len()];
        let mut rng = sub_rng(trial, "acc-trial", 0);
        let mut frames = Vec::new();
        let mut trees: Vec<TyingTree> = Vec::new();
        for p in 0..positions {
            let centres: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.0..3.0)).collect();
            let data = class_data(&centres, 25, 2, trial * 17 + p as u64);
            let stats = stats_of(&data);
            let (_, mut qs) = generate_question_set(p, &stats, None, VARIANCE_FLOOR).unwrap();
            for _ in 0..3 {
                let members: Vec<u32> = (0..classes as u32).filter(|_| rng.gen_bool(0.5)).collect();
                if !members.is_empty() {
                    qs.push(Question {
                        id: qs.len(),
                        position: p,
                        members,
                    });
                }
            }
            let tree = build_tying_tree(p, &qs, &stats, &open).unwrap();
            for node in &tree.nodes {
                let Some((a, b)) = node.children else { continue };
                let mut best: Option<(f64, BTreeSet<u32>)> = None;
                for q in &qs {
                    let Some((yes, no)) = q.partition(&node.classes) else { continue };
                    let gain = split_gain(&pooled(&stats, &yes), &pooled(&stats, &no), VARIANCE_FLOOR).unwrap();
                    min_gain = min_gain.min(gain);
                    let direct = ll_of(&data, &yes) + ll_of(&data, &no) - ll_of(&data, &node.classes);
                    let set: BTreeSet<u32> = yes.into_iter().collect();
                    if best.as_ref().map_or(true, |(g, _)| direct > *g) {
                        best = Some((direct, set));
                    }
                }
                let (g, set) = best.unwrap();
                let chosen: BTreeSet<u32> = tree.nodes[a].classes.iter().copied().collect();
                let other: BTreeSet<u32> = tree.nodes[b].classes.iter().copied().collect();
                if (chosen != set && other != set) || rel(node.gain, g) > 1e-6 {
                    failures.push(format!("trial {trial} position {p}"));
                }
                node_checks += 1;
            }
            if tree.num_leaves() != classes {
                failures.push(format!("trial {trial}: {} leaves", tree.num_leaves()));
            }
            frames.push(data);
            trees.push(tree);
        }
        let out = merge_to_target(&trees, 9, VARIANCE_FLOOR).unwrap();
        let mut sim = trees.clone();
        for step in 0..3 {
            let mut best: Option<(f64, usize, usize)> = None;
            for (p, t) in sim.iter().enumerate() {
                for (n, node) in t.nodes.iter().enumerate() {
                    let Some((a, b)) = node.children else { continue };
                    if !(t.nodes[a].is_leaf() && t.nodes[b].is_leaf()) {
                        continue;
                    }
                    let f = &frames[p];
                    let cost = ll_of(f, &t.nodes[a].classes) + ll_of(f, &t.nodes[b].classes) - ll_of(f, &node.classes);
                    if best.map_or(true, |(c, _, _)| cost < c) {
                        best = Some((cost, p, n));
                    }
                }
            }
            let (cost, p, n) = best.unwrap();
            let rec = &out.merges[step];
            if (rec.position, rec.node) != (p, n) || rel(rec.cost, cost) > 1e-6 && (rec.cost - cost).abs() > 1e-9 {
                failures.push(format!("trial {trial} merge {step}"));
            }
            sim[p].nodes[n].children = None;
            merge_checks += 1;
        }
    }
    let pass = failures.is_empty() && min_gain >= -1e-9;
    report(
        "split-merge-correctness",
        pass,
        format!(
            "100 trials with 12 leaves, {node_checks} splits and {merge_checks} merges checked against exhaustive rescoring, {} mismatches, min candidate gain {min_gain:.3e}",
            failures.len()
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn em_monotonicity() {
    let start = Instant::now();
    let ccfg = CorpusConfig {
        alphabet_size: 5,
        train_writers: 5,
        train_lines_per_writer: 6,
        test_writers: 1,
        test_lines_per_writer: 1,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&ccfg, 5).unwrap();
    let frames = extract_all(&corpus.train, &Default::default()).unwrap();
    let lines: Vec<LineRef> = frames
        .iter()
        .zip(&corpus.train)
        .map(|(f, l)| LineRef {
            frames: &f.vectors,
            transcript: &l.transcript,
        })
        .collect();
    let (mut model, _) = flat_start(&lines, 5, 5, VARIANCE_FLOOR).unwrap();
    let mut trace = Vec::new();
    for _ in 0..10 {
        let (next, rep) = baum_welch_iterate(&model, &lines).unwrap();
        assert!(rep.skipped_lines.is_empty());
        trace.push(rep.log_likelihood);
        model = next;
    }
    trace.push(model.log_likelihood(&lines).unwrap());
    let worst = trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-8 && secs < 120.0;
    report(
        "em-monotonicity",
        pass,
        format!(
            "10 Baum-Welch iterations on {} lines, log-likelihood {:.1} -> {:.1}, largest relative decrease {worst:.2e} (tol 1e-8), {secs:.1}s (limit 120s)",
            lines.len(),
            trace[0],
            trace[10]
        ),
    );
    assert!(pass, "{trace:?}");
}

/// Best path score of one transcript by dynamic programming over its
/// left-to-right state cascade.
fn transcript_score(hmms: &[CharacterHmm], scores: &ScoreMatrix, tying: &StateTyingMap, transcript: &[u32]) -> Option<f64> {
    // (class, position, self loop)
    let chain: Vec<(u32, usize, f64)> = transcript
        .iter()
        .flat_map(|&c| hmms[c as usize].self_loop.iter().enumerate().map(move |(p, &a)| (c, p, a)))
        .collect();
    let (n, t) = (chain.len(), scores.num_frames);
    if n > t {
        return None;
    }
    let emit = |f: usize, j: usize| scores.get(f, tying.tied_id(chain[j].0, chain[j].1) as usize);
    let mut delta = vec![f64::NEG_INFINITY; n];
    delta[0] = emit(0, 0);
    for f in 1..t {
        let mut next = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            let stay = delta[j] + chain[j].2.ln();
            let enter = if j > 0 { delta[j - 1] + (1.0 - chain[j - 1].2).ln() } else { f64::NEG_INFINITY };
            next[j] = stay.max(enter) + emit(f, j);
        }
        delta = next;
    }
    Some(delta[n - 1] + (1.0 - chain[n - 1].2).ln())
}

#[test]
fn decoder_exactness() {
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = sub_rng(seed, "acc-decode", 0);
        let hmms: Vec<CharacterHmm> = (0..3u32)
            .map(|c| {
                let mut h = CharacterHmm::new(c, rng.gen_range(3..=5), 0.5);
                h.self_loop.iter_mut().for_each(|p| *p = rng.gen_range(0.1..0.9));
                h
            })
            .collect();
        let min = hmms.iter().map(|h| h.self_loop.len()).min().unwrap();
        // at most three characters fit
        let t = rng.gen_range(min..=(4 * min - 1).min(20));
        let tying = StateTyingMap::identity(3, 5);
        let data = (0..t * 15).map(|_| rng.gen_range(-6.0..0.0)).collect();
        let scores = ScoreMatrix::new(t, 15, data).unwrap();
        let mut best: Option<(f64, Vec<u32>)> = None;
        for len in 1..=3u32 {
            for code in 0..3u32.pow(len) {
                let tr: Vec<u32> = (0..len).map(|i| code / 3u32.pow(i) % 3).collect();
                if let Some(s) = transcript_score(&hmms, &scores, &tying, &tr) {
                    if best.as_ref().map_or(true, |(b, _)| s > *b) {
                        best = Some((s, tr));
                    }
                }
            }
        }
        let (s, tr) = best.unwrap();
        let cfg = DecodeConfig {
            beam: None,
            lm: LmMode::None,
            ..DecodeConfig::default()
        };
        let r = decode(0, &hmms, &tying, &scores, Lms::default(), &cfg).unwrap();
        worst = worst.max((r.score - s).abs());
        if r.transcript != tr || (r.score - s).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(
        "decoder-exactness",
        pass,
        format!("200 instances (3 classes, T<=20, <=3 chars), {mismatches} mismatches, max score difference {worst:.1e}"),
    );
    assert!(pass);
}

fn small_classifier(seed: u64) -> AdaptiveClassifier {
    let cfg = ClassifierConfig {
        input_pool: 1,
        conv_channels: vec![3, 4],
        dense: 6,
        code_dim: 4,
        adapted_blocks: 2,
        adapt_init_std: 0.3,
        ..ClassifierConfig::default()
    };
    let mut m = AdaptiveClassifier::new(cfg, 8, 6, 5, seed).unwrap();
    let mut rng = sub_rng(seed, "acc-perturb", 0);
    for b in m.blocks.iter_mut() {
        for k in 0..b.out_channels {
            b.running_mean[k] = rng.gen_range(-0.5..0.5);
            b.running_var[k] = rng.gen_range(0.5..2.0);
            b.gamma[k] = rng.gen_range(0.5..1.5);
            b.beta[k] = rng.gen_range(-0.2..0.2);
            b.bias[k] = rng.gen_range(-0.2..0.2);
        }
    }
    // zero biases put ReLU inputs exactly on the kink
    for v in m.hidden.bias.iter_mut().chain(m.output.weight.iter_mut()) {
        *v = rng.gen_range(-0.5..0.5);
    }
    m
}

fn random_patches(n: usize, h: usize, w: usize, seed: u64) -> Patches {
    let mut rng = sub_rng(seed, "acc-patches", 0);
    Patches {
        height: h,
        width: w,
        data: (0..n * h * w).map(|_| rng.gen::<f32>()).collect(),
    }
}

#[test]
fn gradient_checks() {
    let h = 1e-5;
    let mut worst: [f64; 3] = [0.0; 3];
    let mut checked = 0;
    for seed in 0..20u64 {
        let m = small_classifier(seed);
        let x = prepare_line(&m, &random_patches(3, 8, 6, seed));
        let labels = [0u32, 3, 4];
        let mut rng = sub_rng(seed, "acc-code", 0);
        let code: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for mode in [BnMode::Running, BnMode::Batch] {
            let loss = |m: &AdaptiveClassifier, code: &[f64]| {
                m.loss_and_gradients(&x, &labels, Some(code), mode, Reduction::Sum).unwrap().0
            };
            let (_, g, _) = m.loss_and_gradients(&x, &labels, Some(&code), mode, Reduction::Sum).unwrap();
            let err = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
            for gi in 0..m.base_params().len() {
                let len = m.base_params()[gi].len();
                for _ in 0..3 {
                    let i = rng.gen_range(0..len);
                    let (mut p, mut q) = (m.clone(), m.clone());
                    p.base_params_mut()[gi][i] += h;
                    q.base_params_mut()[gi][i] -= h;
                    let num = (loss(&p, &code) - loss(&q, &code)) / (2.0 * h);
                    worst[0] = worst[0].max(err(g.base[gi][i], num));
                    checked += 1;
                }
            }
            for ai in 0..m.num_adapted() {
                let len = m.adapt_params()[ai].len();
                for _ in 0..4 {
                    let i = rng.gen_range(0..len);
                    let (mut p, mut q) = (m.clone(), m.clone());
                    p.adapt_params_mut()[ai][i] += h;
                    q.adapt_params_mut()[ai][i] -= h;
                    let num = (loss(&p, &code) - loss(&q, &code)) / (2.0 * h);
                    worst[1] = worst[1].max(err(g.adapt[ai][i], num));
                    checked += 1;
                }
            }
            for j in 0..code.len() {
                let (mut cp, mut cm) = (code.clone(), code.clone());
                cp[j] += h;
                cm[j] -= h;
                let num = (loss(&m, &cp) - loss(&m, &cm)) / (2.0 * h);
                worst[2] = worst[2].max(err(g.code[j], num));
                checked += 1;
            }
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-4);
    report(
        "gradient-checks",
        pass,
        format!(
            "20 models x 2 batch-norm modes, {checked} coordinates, max relative error base {:.1e}, A {:.1e}, V {:.1e} (tol 1e-4)",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

#[test]
fn zero_code_identity() {
    let mut m = AdaptiveClassifier::new(ClassifierConfig::default(), 40, 20, 60, 3).unwrap();
    let mut rng = sub_rng(3, "acc-zero", 0);
    for b in m.blocks.iter_mut() {
        for k in 0..b.out_channels {
            b.running_mean[k] = rng.gen_range(-0.5..0.5);
            b.running_var[k] = rng.gen_range(0.5..2.0);
        }
    }
    let x = prepare_line(&m, &random_patches(1000, 40, 20, 4));
    let base = m.log_posteriors(&x, 1000, None).unwrap();
    let zero = vec![0.0; m.code_dim()];
    let with_zero = m.log_posteriors(&x, 1000, Some(&zero)).unwrap();
    let mut stripped = m.clone();
    for b in stripped.blocks.iter_mut() {
        b.adapt = None;
    }
    let independent = stripped.log_posteriors(&x, 1000, None).unwrap();
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
    let pass = same(&base, &with_zero) && same(&base, &independent);
    report(
        "zero-code-identity",
        pass,
        format!(
            "1000 frames, {} adapted blocks, V=0 output bit-identical to the writer-independent network: {pass}",
            m.num_adapted()
        ),
    );
    assert!(pass);
}

/// Edit distance straight from its recursive definition, memoized.
fn recursive_distance(a: &[u32], b: &[u32], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let sub = recursive_distance(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = recursive_distance(&a[1..], b, memo) + 1;
    let ins = recursive_distance(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), d);
    d
}

#[test]
fn cer_oracle() {
    let (mut total, mut oracle, mut bad) = (0usize, 0usize, 0usize);
    for i in 0..200u64 {
        let mut rng = sub_rng(i, "acc-cer", 0);
        let k = rng.gen_range(1..6u32);
        let r: Vec<u32> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..k)).collect();
        let h: Vec<u32> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..k)).collect();
        let c = edit_counts(&r, &h);
        let d = recursive_distance(&r, &h, &mut HashMap::new());
        if c.errors() != d || c.n != r.len() || r.len() + c.insertions != h.len() + c.deletions {
            bad += 1;
        }
        total += c.errors();
        oracle += d;
    }
    let pass = bad == 0 && total == oracle;
    report(
        "cer-oracle",
        pass,
        format!("200 random pairs, total edits {total} vs recursive oracle {oracle}, {bad} per-pair mismatches"),
    );
    assert!(pass);
}

/// Corpus and settings of the trend experiments: 40 classes, 20 training
/// writers, 10 unseen writers with 20 lines each.
fn trend_setup(seed: u64) -> (CorpusConfig, PipelineConfig) {
    let ccfg = CorpusConfig {
        alphabet_size: 40,
        train_lines_per_writer: 8,
        test_writers: 10,
        test_lines_per_writer: 20,
        ..CorpusConfig::default()
    };
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.tying.min_occupancy = 10.0;
    cfg.base.epochs = 2;
    cfg.adaptive.epochs = 4;
    cfg.adapt.epochs = 3;
    (ccfg, cfg)
}

const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct SeedRun {
    seed: u64,
    seconds: f64,
    untied_nn: f64,
    untied_gmm: f64,
    tied_gmm: f64,
    passes: Vec<f64>,
    /// (no LM, N-gram) CER reports of the tied hybrid system, pass 1.
    nn_lm: (CerReport, CerReport),
    gmm_lm: (CerReport, CerReport),
}

fn nn_cer(system: &HybridSystem, lines: &[TestLine], refs: &[Reference]) -> CerReport {
    use rayon::prelude::*;
    let hyps: HashMap<u32, Vec<u32>> = lines
        .par_iter()
        .map(|l| (l.line_id, recognize_line(system, l.patches, l.line_id, None).unwrap().transcript))
        .collect();
    cer(refs, &hyps)
}

fn gmm_cer(sys: &TrainedSystem, frames: &[FrameSequence], refs: &[Reference], lms: Lms, cfg: &DecodeConfig) -> CerReport {
    use rayon::prelude::*;
    let hyps: HashMap<u32, Vec<u32>> = frames
        .par_iter()
        .map(|f| {
            let s = ScoreMatrix::from_gmm(&sys.gmm, &f.vectors);
            let r = decode(f.line_id(), &sys.gmm.hmms, &sys.gmm.tying, &s, lms, cfg).unwrap();
            (f.line_id(), r.transcript)
        })
        .collect();
    cer(refs, &hyps)
}

fn run_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let (ccfg, cfg) = trend_setup(seed);
    let corpus = generate_corpus(&ccfg, seed).unwrap();
    let classes = ccfg.alphabet_size;
    let test = extract_all(&corpus.test, &cfg.features).unwrap();
    let refs: Vec<Reference> = corpus
        .test
        .iter()
        .map(|l| Reference {
            line_id: l.line_id,
            writer_id: l.writer_id,
            transcript: &l.transcript,
        })
        .collect();
    let lines: Vec<TestLine> = corpus
        .test
        .iter()
        .zip(&test)
        .map(|(l, f)| TestLine {
            line_id: l.line_id,
            writer_id: l.writer_id,
            patches: &f.patches,
            transcript: &l.transcript,
        })
        .collect();
    let plain = DecodeConfig::default();
    let with_lm = DecodeConfig {
        lm: LmMode::Ngram,
        ..DecodeConfig::default()
    };

    // untied baseline: uniform 3-state HMMs
    let mut ucfg = cfg.clone();
    ucfg.num_states = 3;
    ucfg.avg_states = 3.0;
    let stages = Stages {
        classifier: true,
        adaptive: false,
        rnnlm: false,
    };
    let untied = train_system(&corpus.train, classes, &ucfg, stages).unwrap();
    assert!(untied.tying.map.is_identity());
    let unn = untied.nn.as_ref().unwrap();
    let usys = HybridSystem {
        hmms: &untied.gmm.hmms,
        tying: &untied.tying.map,
        classifier: &unn.model,
        prior: &unn.prior,
        lms: Lms::default(),
        decode: &plain,
    };
    let untied_nn = nn_cer(&usys, &lines, &refs).cer;
    let untied_gmm = gmm_cer(&untied, &test, &refs, Lms::default(), &plain).cer;
    drop(untied);

    // tied system: 5-state HMMs at an average of 3 states per class
    let stages = Stages {
        classifier: true,
        adaptive: true,
        rnnlm: false,
    };
    let sys = train_system(&corpus.train, classes, &cfg, stages).unwrap();
    let nn = sys.nn.as_ref().unwrap();
    let ngram_lms = Lms {
        ngram: Some(&sys.ngram),
        hybrid: None,
    };
    let system = HybridSystem {
        hmms: &sys.gmm.hmms,
        tying: &sys.tying.map,
        classifier: &nn.model,
        prior: &nn.prior,
        lms: Lms::default(),
        decode: &plain,
    };
    let rep = multipass_recognize(&system, &lines, 3, &cfg.adapt, seed).unwrap();
    let passes: Vec<f64> = rep.passes.iter().map(|p| p.cer.cer).collect();
    let lm_system = HybridSystem {
        lms: ngram_lms,
        decode: &with_lm,
        ..system
    };
    let nn_lm = (rep.passes[0].cer.clone(), nn_cer(&lm_system, &lines, &refs));
    let gmm_lm = (
        gmm_cer(&sys, &test, &refs, Lms::default(), &plain),
        gmm_cer(&sys, &test, &refs, ngram_lms, &with_lm),
    );
    SeedRun {
        seed,
        seconds: start.elapsed().as_secs_f64(),
        untied_nn,
        untied_gmm,
        tied_gmm: gmm_lm.0.cer,
        passes,
        nn_lm,
        gmm_lm,
    }
}

fn trend_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| TREND_SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pairs of classes that share a radical box, and how often the tying puts
/// them in one tied state at a position covering that box.
fn sharing_pair_rate(seeds: &[u64]) -> (usize, usize, usize, usize, Vec<String>) {
    let ccfg = CorpusConfig::default();
    let (mut tied, mut total, mut ctl_tied, mut ctl_total) = (0, 0, 0, 0);
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let corpus: Corpus = generate_corpus(&ccfg, seed).unwrap();
        let cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        let stages = Stages {
            classifier: false,
            adaptive: false,
            rnnlm: false,
        };
        let sys = train_system(&corpus.train, ccfg.alphabet_size, &cfg, stages).unwrap();
        let map = &sys.tying.map;
        let s = cfg.num_states;
        // a box covers the first or last two of the five positions
        let left = [0, 1];
        let right = [s - 1, s - 2];
        let together = |a: u32, b: u32, ps: &[usize]| ps.iter().any(|&p| map.tied_id(a, p) == map.tied_id(b, p));
        let pairs = corpus.sharing_pairs();
        let mut n = 0;
        for &(a, b, bx) in &pairs {
            n += usize::from(together(a, b, if bx == LEFT_BOX { &left } else { &right }));
        }
        tied += n;
        total += pairs.len();
        per_seed.push(format!("{n}/{}", pairs.len()));
        // control: pairs sharing nothing in that box
        let shared: BTreeSet<(u32, u32, bool)> = pairs.iter().map(|&(a, b, bx)| (a, b, bx == LEFT_BOX)).collect();
        for a in 0..ccfg.alphabet_size as u32 {
            for b in a + 1..ccfg.alphabet_size as u32 {
                for is_left in [true, false] {
                    if !shared.contains(&(a, b, is_left)) {
                        ctl_total += 1;
                        ctl_tied += usize::from(together(a, b, if is_left { &left } else { &right }));
                    }
                }
            }
        }
    }
    (tied, total, ctl_tied, ctl_total, per_seed)
}

#[test]
fn tying_trend() {
    let start = Instant::now();
    let (tied, total, ctl_tied, ctl_total, per_seed) = sharing_pair_rate(&TREND_SEEDS);
    let rate = tied as f64 / total as f64;
    let runs = trend_runs();
    let tied_nn = mean(runs.iter().map(|r| r.passes[0]));
    let untied_nn = mean(runs.iter().map(|r| r.untied_nn));
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} tied {} / untied {} (GMM {} / {})",
                r.seed,
                pct(r.passes[0]),
                pct(r.untied_nn),
                pct(r.tied_gmm),
                pct(r.untied_gmm)
            )
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = tied_nn <= untied_nn && rate >= 0.8 && secs < 1800.0;
    report(
        "tying-trend",
        pass,
        format!(
            "mean NN CER% tied avg-3 {} vs untied 3-state {} [{}]; sharing pairs tied in their box {tied}/{total} = {:.1}% over 5 seeds [{}] (control pairs {:.1}%); {secs:.0}s (limit 1800s)",
            pct(tied_nn),
            pct(untied_nn),
            detail.join("; "),
            100.0 * rate,
            per_seed.join(" "),
            100.0 * ctl_tied as f64 / ctl_total as f64
        ),
    );
}

#[test]
fn adaptation_trend() {
    let runs = trend_runs();
    let improved = runs.iter().filter(|r| r.passes[1] <= r.passes[0]).count();
    let p2 = mean(runs.iter().map(|r| r.passes[1]));
    let p3 = mean(runs.iter().map(|r| r.passes[2]));
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: {} ({:.0}s)",
                r.seed,
                r.passes.iter().map(|&c| pct(c)).collect::<Vec<_>>().join(" -> "),
                r.seconds
            )
        })
        .collect();
    let pass = improved >= 4 && p3 <= p2;
    report(
        "adaptation-trend",
        pass,
        format!(
            "10 unseen writers x 20 lines; pass-2 <= pass-1 on {improved}/5 seeds (need 4); mean CER% pass 2 {} vs pass 3 {}; per seed CER% [{}]",
            pct(p2),
            pct(p3),
            detail.join("; ")
        ),
    );
}

#[test]
fn lm_sanity() {
    let text: Vec<Vec<u32>> = (0..50u64)
        .map(|i| {
            let mut rng = sub_rng(i, "acc-lm", 0);
            (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..6)).collect()
        })
        .collect();
    let ngram = train_ngram(&text, 6, 3).unwrap();
    let rnn = RnnLm::random(6, 8, 0.5, 2);
    let mut exact = true;
    for s in &text {
        let (g, r) = (ngram.sentence_log_prob(s), rnn.sentence_log_prob(s));
        exact &= hybrid_score(1.0, g, r) == g && hybrid_score(0.0, g, r) == r;
        exact &= HybridLm::new(ngram.clone(), rnn.clone(), 1.0).unwrap().score(s) == g;
        exact &= HybridLm::new(ngram.clone(), rnn.clone(), 0.0).unwrap().score(s) == r;
    }
    assert!(exact);
    let runs = trend_runs();
    let pool = |f: &dyn Fn(&SeedRun) -> &CerReport| {
        let (e, n) = runs.iter().map(f).fold((0, 0), |(e, n), c| (e + c.total.errors(), n + c.total.n));
        e as f64 / n as f64
    };
    let nn = (pool(&|r| &r.nn_lm.0), pool(&|r| &r.nn_lm.1));
    let gmm = (pool(&|r| &r.gmm_lm.0), pool(&|r| &r.gmm_lm.1));
    let pass = exact && nn.1 <= nn.0;
    report(
        "lm-sanity",
        pass,
        format!(
            "hybrid at omega=1 equals the N-gram and at omega=0 the RNNLM exactly on {} sentences: {exact}; pooled CER% of the tied hybrid system without / with trigram {} / {} (GMM-HMM {} / {}) over 5 seeds",
            text.len(),
            pct(nn.0),
            pct(nn.1),
            pct(gmm.0),
            pct(gmm.1)
        ),
    );
}

#[test]
fn compactness_bookkeeping() {
    let ccfg = CorpusConfig::default();
    let corpus = generate_corpus(&ccfg, 1).unwrap();
    let mut counts = Vec::new();
    let mut totals = Vec::new();
    for avg in [5.0, 4.0, 3.0, 2.0, 1.0] {
        let cfg = PipelineConfig {
            avg_states: avg,
            ..PipelineConfig::default()
        };
        let stages = Stages {
            classifier: false,
            adaptive: false,
            rnnlm: false,
        };
        let sys = train_system(&corpus.train, ccfg.alphabet_size, &cfg, stages).unwrap();
        let outputs = sys.tying.map.num_tied();
        let model = AdaptiveClassifier::new(cfg.classifier.clone(), 40, 20, outputs, 1).unwrap();
        let file = WcnnFile {
            prior: StatePrior::uniform(outputs),
            model,
            profiles: Vec::new(),
        };
        let mut bytes = Vec::new();
        write_wcnn(&mut bytes, &file).unwrap();
        let back = read_wcnn(&mut bytes.as_slice()).unwrap();
        let out = &back.model.output;
        counts.push((avg, outputs, out.weight.len() + out.bias.len()));
        let all: usize = back.model.base_params().iter().map(|p| p.len()).sum::<usize>()
            + back.model.adapt_params().iter().map(|p| p.len()).sum::<usize>();
        totals.push(all);
    }
    let base = counts[0].2 as f64;
    let ratios: Vec<f64> = counts.iter().map(|c| c.2 as f64 / base).collect();
    let monotone = ratios.windows(2).all(|w| w[1] < w[0]);
    let detail: Vec<String> = counts
        .iter()
        .zip(&ratios)
        .zip(&totals)
        .map(|(((avg, k, p), r), t)| {
            format!("avg {avg}: {k} states, {p} output params, ratio {r:.4}, whole network {:.4}", *t as f64 / totals[0] as f64)
        })
        .collect();
    report("compactness-bookkeeping", monotone, detail.join("; "));
    assert!(monotone);
}
