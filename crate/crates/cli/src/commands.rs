use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use phmm::classifier::{line_log_posteriors, read_codes_csv, read_wcnn, write_codes_csv, write_wcnn, WcnnFile};
use phmm::corpus::{generate_corpus, Corpus, Partition, TextLineSample};
use phmm::decoder::{
    decode, write_alignments_out, write_hypotheses, write_nbest, DecodeConfig, DecodeResult, LmMode, Lms, ScoreMatrix,
};
use phmm::eval::{cer, multipass_recognize, write_report_csv, CerReport, HybridSystem, Reference, TestLine};
use phmm::features::{read_features, write_features, FrameVectors};
use phmm::gmm::{read_alignments, write_alignments, Alignment, GmmHmm, PositionedStats};
use phmm::lm::{HybridLm, NGramModel, RnnLm};
use phmm::system::{
    align_stage, extract_all, frame_labels, labeled_lines, positioned_stats, tie_stage, tied_gmm_stage,
    train_adaptive_stage, train_gmm_stage, train_lm_stage, train_nn_stage,
};
use phmm::tying::{build_tying_tree, generate_all_question_sets, read_questions, write_questions, Question, StateTyingMap};
use rayon::prelude::*;
use serde_json::json;

use crate::config::Config;
use crate::manifest::{digests, FileDigest, Manifest};
use crate::{Cli, Command, DecodeArgs, LmArg, PartitionArg, Scorer};

struct Ctx {
    work: PathBuf,
    cfg: Config,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    metrics: serde_json::Value,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Records the digest of an input before it is read.
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(digests(path)?);
        Ok(())
    }

    fn create(&mut self, path: &Path) -> Result<BufWriter<File>> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.outputs.push(path.to_path_buf());
        Ok(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn num_classes(&self, corpus: &Corpus) -> usize {
        corpus.config.alphabet_size
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let dir = self.path("corpus");
        self.input(&dir)?;
        Corpus::read_dir(&dir).with_context(|| format!("reading corpus {}; run `phmm synth` first", dir.display()))
    }

    fn features(&mut self, partition: Partition, lines: &[TextLineSample]) -> Result<Vec<FrameVectors>> {
        let path = self.path("features").join(format!("{}.features.bin", partition.name()));
        self.input(&path)?;
        let vectors = read_features(&mut BufReader::new(File::open(&path)?))
            .with_context(|| format!("reading {}", path.display()))?;
        ensure!(
            vectors.len() == lines.len() && vectors.iter().zip(lines).all(|(v, l)| v.line_id == l.line_id),
            "{} does not match the corpus; rerun `phmm extract`",
            path.display()
        );
        Ok(vectors)
    }

    fn gmm(&mut self, name: &str) -> Result<GmmHmm> {
        let path = self.path(name);
        self.input(&path)?;
        GmmHmm::read(&mut BufReader::new(File::open(&path)?)).with_context(|| format!("reading {}", path.display()))
    }

    fn alignments(&mut self, model: &GmmHmm) -> Result<Vec<Alignment>> {
        let path = self.path("align.tsv");
        self.input(&path)?;
        let a = read_alignments(BufReader::new(File::open(&path)?)).with_context(|| format!("reading {}", path.display()))?;
        let (c, s) = (model.num_classes(), model.num_states());
        for al in &a {
            if al.states.iter().any(|x| x.class_id as usize >= c || x.position as usize >= s) {
                bail!("align.tsv line {} refers to states outside a {c}x{s} model", al.line_id);
            }
        }
        Ok(a)
    }

    fn questions(&mut self, positions: usize) -> Result<Vec<Vec<Question>>> {
        let path = self.path("questions.tsv");
        self.input(&path)?;
        read_questions(BufReader::new(File::open(&path)?), positions).with_context(|| format!("reading {}", path.display()))
    }

    fn tying(&mut self) -> Result<StateTyingMap> {
        let path = self.path("tying.tsv");
        self.input(&path)?;
        StateTyingMap::read_tsv(BufReader::new(File::open(&path)?)).with_context(|| format!("reading {}", path.display()))
    }

    fn wcnn(&mut self, path: &Path) -> Result<WcnnFile> {
        self.input(path)?;
        read_wcnn(&mut BufReader::new(File::open(path)?)).with_context(|| format!("reading {}", path.display()))
    }

    fn stats(&mut self, corpus: &Corpus) -> Result<(GmmHmm, PositionedStats)> {
        let model = self.gmm("gmmhmm.bin")?;
        let vectors = self.features(Partition::Train, &corpus.train)?;
        let alignments = self.alignments(&model)?;
        let stats = positioned_stats(&model, &vectors, &alignments)?;
        Ok((model, stats))
    }

    fn training_labels(&mut self) -> Result<BTreeMap<u32, Vec<u32>>> {
        let model = self.gmm("gmmhmm.bin")?;
        let alignments = self.alignments(&model)?;
        let map = self.tying()?;
        ensure!(
            map.num_classes() == model.num_classes() && map.num_positions() == model.num_states(),
            "tying.tsv is {}x{} but gmmhmm.bin is {}x{}",
            map.num_classes(),
            map.num_positions(),
            model.num_classes(),
            model.num_states()
        );
        Ok(frame_labels(&alignments, &map))
    }

    fn lms(&mut self, mode: LmMode, num_classes: usize) -> Result<(Option<NGramModel>, Option<HybridLm>)> {
        if mode == LmMode::None {
            return Ok((None, None));
        }
        let path = self.path("lm.arpa");
        self.input(&path)?;
        let ngram = NGramModel::read_arpa(BufReader::new(File::open(&path)?))
            .with_context(|| format!("reading {}", path.display()))?;
        ensure!(
            ngram.num_classes == num_classes,
            "lm.arpa covers {} classes, the corpus has {num_classes}",
            ngram.num_classes
        );
        let hybrid = if mode == LmMode::Hybrid {
            let path = self.path("rnnlm.bin");
            self.input(&path)?;
            let rnn = RnnLm::read(&mut BufReader::new(File::open(&path)?))
                .with_context(|| format!("reading {}; train it with `phmm train-lm --rnn`", path.display()))?;
            Some(HybridLm::new(ngram.clone(), rnn, self.cfg.pipeline.lm.omega)?)
        } else {
            None
        };
        Ok((Some(ngram), hybrid))
    }
}

fn partition(p: PartitionArg) -> Partition {
    match p {
        PartitionArg::Train => Partition::Train,
        PartitionArg::Adapt => Partition::Adapt,
        PartitionArg::Test => Partition::Test,
    }
}

fn transcripts(lines: &[TextLineSample]) -> Vec<&[u32]> {
    lines.iter().map(|l| l.transcript.as_slice()).collect()
}

fn references(lines: &[TextLineSample]) -> Vec<Reference<'_>> {
    lines
        .iter()
        .map(|l| Reference {
            line_id: l.line_id,
            writer_id: l.writer_id,
            transcript: &l.transcript,
        })
        .collect()
}

fn apply_decode_args(cfg: &mut DecodeConfig, args: &DecodeArgs) -> Result<()> {
    if let Some(b) = &args.beam {
        cfg.beam = match b.as_str() {
            "inf" => None,
            n => Some(n.parse().with_context(|| format!("--beam {n}"))?),
        };
    }
    if let Some(x) = args.lm_scale {
        cfg.lm_scale = x;
    }
    if let Some(x) = args.ins_penalty {
        cfg.ins_penalty = x;
    }
    if let Some(x) = args.nbest {
        cfg.nbest = x;
    }
    if let Some(x) = args.lm {
        cfg.lm = match x {
            LmArg::None => LmMode::None,
            LmArg::Ngram => LmMode::Ngram,
            LmArg::Hybrid => LmMode::Hybrid,
        };
    }
    cfg.validate()?;
    Ok(())
}

fn write_cer_csv(w: &mut impl Write, report: &CerReport) -> Result<()> {
    writeln!(w, "writer_id,n,substitutions,insertions,deletions,cer")?;
    let mut row = |who: &str, c: &phmm::eval::ErrorCounts| {
        writeln!(w, "{who},{},{},{},{},{}", c.n, c.substitutions, c.insertions, c.deletions, c.cer())
    };
    row("all", &report.total)?;
    for (writer, c) in &report.per_writer {
        row(&writer.to_string(), c)?;
    }
    Ok(())
}

fn write_decode_outputs(ctx: &mut Ctx, dir: &Path, results: &[DecodeResult]) -> Result<()> {
    write_hypotheses(&mut ctx.create(&dir.join("hyp.tsv"))?, results)?;
    write_alignments_out(&mut ctx.create(&dir.join("align_out.tsv"))?, results)?;
    write_nbest(&mut ctx.create(&dir.join("nbest.tsv"))?, results)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.pipeline.seed = s;
    }
    let name = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::Extract => "extract",
        Command::TrainGmm { .. } => "train-gmm",
        Command::Align => "align",
        Command::Questions => "questions",
        Command::Tie { .. } => "tie",
        Command::TrainNn => "train-nn",
        Command::TrainAdapt => "train-adapt",
        Command::TrainLm { .. } => "train-lm",
        Command::Decode { .. } => "decode",
        Command::Multipass { .. } => "multipass",
        Command::Eval { .. } => "eval",
        Command::ExportTree { .. } => "export-tree",
        Command::ExportCodes { .. } => "export-codes",
    };
    fs::create_dir_all(&cli.work).with_context(|| format!("creating {}", cli.work.display()))?;
    let mut ctx = Ctx {
        work: cli.work.clone(),
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
        metrics: json!({}),
    };
    match &cli.command {
        Command::Synth { alphabet_size } => {
            if let Some(a) = alphabet_size {
                ctx.cfg.corpus.alphabet_size = *a;
            }
            let corpus = generate_corpus(&ctx.cfg.corpus, ctx.cfg.pipeline.seed)?;
            let dir = ctx.path("corpus");
            corpus.write_dir(&dir)?;
            ctx.outputs.push(dir);
            ctx.metrics = json!({
                "train_lines": corpus.train.len(),
                "adapt_lines": corpus.adapt.len(),
                "test_lines": corpus.test.len(),
                "sharing_pairs": corpus.sharing_pairs().len(),
            });
        }
        Command::Extract => {
            let corpus = ctx.corpus()?;
            for p in Partition::ALL {
                let frames = extract_all(corpus.partition(p), &ctx.cfg.pipeline.features)?;
                let vectors: Vec<FrameVectors> = frames.into_iter().map(|f| f.vectors).collect();
                let path = ctx.path("features").join(format!("{}.features.bin", p.name()));
                write_features(&mut ctx.create(&path)?, &vectors)?;
            }
        }
        Command::TrainGmm { num_states } => {
            if let Some(s) = num_states {
                ctx.cfg.pipeline.num_states = *s;
            }
            let corpus = ctx.corpus()?;
            let vectors = ctx.features(Partition::Train, &corpus.train)?;
            let p = &ctx.cfg.pipeline;
            let (model, trace) = train_gmm_stage(
                &vectors,
                &transcripts(&corpus.train),
                ctx.num_classes(&corpus),
                p.num_states,
                &p.gmm,
            )?;
            model.write(&mut ctx.create(&ctx.path("gmmhmm.bin"))?)?;
            ctx.metrics = json!({ "log_likelihood_trace": trace });
        }
        Command::Align => {
            let corpus = ctx.corpus()?;
            let vectors = ctx.features(Partition::Train, &corpus.train)?;
            let model = ctx.gmm("gmmhmm.bin")?;
            let alignments = align_stage(&model, &vectors, &transcripts(&corpus.train));
            write_alignments(&mut ctx.create(&ctx.path("align.tsv"))?, &alignments)?;
            ctx.metrics = json!({ "aligned": alignments.len(), "lines": corpus.train.len() });
        }
        Command::Questions => {
            let corpus = ctx.corpus()?;
            let (_, stats) = ctx.stats(&corpus)?;
            let t = &ctx.cfg.pipeline.tying;
            let sets = generate_all_question_sets(&stats, t.question_depth, t.var_floor)?;
            write_questions(&mut ctx.create(&ctx.path("questions.tsv"))?, &sets)?;
            ctx.metrics = json!({ "questions_per_position": sets.iter().map(Vec::len).collect::<Vec<_>>() });
        }
        Command::Tie { avg_states } => {
            if let Some(a) = avg_states {
                ctx.cfg.pipeline.avg_states = *a;
            }
            let corpus = ctx.corpus()?;
            let (model, stats) = ctx.stats(&corpus)?;
            let questions = ctx.questions(model.num_states())?;
            let p = ctx.cfg.pipeline.clone();
            let stage = tie_stage(stats, questions, p.avg_states, &p.tying)?;
            let tied = if stage.outcome.is_some() {
                let vectors = ctx.features(Partition::Train, &corpus.train)?;
                tied_gmm_stage(&model, &stage, &vectors, &transcripts(&corpus.train), p.gmm.tied_iterations)?
            } else {
                model
            };
            stage.map.write_tsv(&mut ctx.create(&ctx.path("tying.tsv"))?)?;
            tied.write(&mut ctx.create(&ctx.path("tied.gmmhmm.bin"))?)?;
            ctx.metrics = json!({
                "tied_states": stage.map.num_tied(),
                "identity": stage.map.is_identity(),
                "merges": stage.outcome.as_ref().map_or(0, |o| o.merges.len()),
            });
        }
        Command::TrainNn => {
            let corpus = ctx.corpus()?;
            let labels = ctx.training_labels()?;
            let outputs = ctx.tying()?.num_tied();
            let frames = extract_all(&corpus.train, &ctx.cfg.pipeline.features)?;
            let stage = train_nn_stage(&corpus.train, &frames, &labels, outputs, &ctx.cfg.pipeline, false)?;
            let file = WcnnFile {
                model: stage.model,
                prior: stage.prior,
                profiles: Vec::new(),
            };
            write_wcnn(&mut ctx.create(&ctx.path("wcnn.base.bin"))?, &file)?;
            ctx.metrics = json!({ "outputs": outputs, "labeled_lines": labels.len() });
        }
        Command::TrainAdapt => {
            let corpus = ctx.corpus()?;
            let labels = ctx.training_labels()?;
            let mut file = ctx.wcnn(&ctx.path("wcnn.base.bin"))?;
            if file.model.num_adapted() == 0 {
                warn!("the classifier has no adaptation layers; writing it unchanged");
            }
            let frames = extract_all(&corpus.train, &ctx.cfg.pipeline.features)?;
            let labeled = labeled_lines(&corpus.train, &frames, &labels);
            let profiles = train_adaptive_stage(&mut file.model, &labeled, &ctx.cfg.pipeline)?;
            file.profiles = profiles.into_values().collect();
            write_wcnn(&mut ctx.create(&ctx.path("wcnn.bin"))?, &file)?;
            ctx.metrics = json!({ "writers": file.profiles.len() });
        }
        Command::TrainLm { rnn } => {
            let corpus = ctx.corpus()?;
            let owned: Vec<Vec<u32>> = corpus.train.iter().map(|l| l.transcript.clone()).collect();
            let p = &ctx.cfg.pipeline;
            let (ngram, rnnlm) = train_lm_stage(&owned, ctx.num_classes(&corpus), &p.lm, p.seed, *rnn)?;
            let test: Vec<Vec<u32>> = corpus.test.iter().map(|l| l.transcript.clone()).collect();
            let mut metrics = json!({ "ngram_test_perplexity": ngram.perplexity(&test) });
            ngram.write_arpa(&mut ctx.create(&ctx.path("lm.arpa"))?)?;
            if let Some(r) = rnnlm {
                metrics["rnn_test_perplexity"] = json!(r.perplexity(&test));
                r.write(&mut ctx.create(&ctx.path("rnnlm.bin"))?)?;
            }
            ctx.metrics = metrics;
        }
        Command::Decode {
            partition: part,
            scorer,
            wcnn,
            decode: args,
        } => {
            apply_decode_args(&mut ctx.cfg.pipeline.decode, args)?;
            let corpus = ctx.corpus()?;
            let lines = corpus.partition(partition(*part));
            let model = ctx.gmm("tied.gmmhmm.bin")?;
            let dc = ctx.cfg.pipeline.decode.clone();
            let (ngram, hybrid) = ctx.lms(dc.lm, ctx.num_classes(&corpus))?;
            let lms = Lms {
                ngram: ngram.as_ref(),
                hybrid: hybrid.as_ref(),
            };
            let frames = extract_all(lines, &ctx.cfg.pipeline.features)?;
            let nn = match scorer {
                Scorer::Gmm => None,
                Scorer::Nn => {
                    let path = wcnn.clone().unwrap_or_else(|| ctx.path("wcnn.bin"));
                    let file = ctx.wcnn(&path)?;
                    ensure!(
                        file.model.num_outputs() == model.tying.num_tied(),
                        "{} has {} outputs but tied.gmmhmm.bin has {} tied states",
                        path.display(),
                        file.model.num_outputs(),
                        model.tying.num_tied()
                    );
                    Some(file)
                }
            };
            let results: Vec<DecodeResult> = frames
                .par_iter()
                .map(|f| -> Result<DecodeResult> {
                    let scores = match &nn {
                        None => ScoreMatrix::from_gmm(&model, &f.vectors),
                        Some(file) => {
                            let lp = line_log_posteriors(&file.model, &f.patches, None)?;
                            ScoreMatrix::from_posteriors(&lp, &file.prior)?
                        }
                    };
                    Ok(decode(f.line_id(), &model.hmms, &model.tying, &scores, lms, &dc)?)
                })
                .collect::<Result<_>>()?;
            let dir = ctx.path("decode");
            write_decode_outputs(&mut ctx, &dir, &results)?;
            let hyps: HashMap<u32, Vec<u32>> = results.iter().map(|r| (r.line_id, r.transcript.clone())).collect();
            let report = cer(&references(lines), &hyps);
            info!("CER {:.4}", report.cer);
            ctx.metrics = json!({ "cer": report.cer, "lines": results.len() });
        }
        Command::Multipass {
            partition: part,
            passes,
            wcnn,
            decode: args,
        } => {
            apply_decode_args(&mut ctx.cfg.pipeline.decode, args)?;
            if let Some(p) = passes {
                ctx.cfg.pipeline.passes = *p;
            }
            let corpus = ctx.corpus()?;
            let lines = corpus.partition(partition(*part));
            let model = ctx.gmm("tied.gmmhmm.bin")?;
            let path = wcnn.clone().unwrap_or_else(|| ctx.path("wcnn.bin"));
            let file = ctx.wcnn(&path)?;
            ensure!(
                file.model.num_outputs() == model.tying.num_tied(),
                "{} has {} outputs but tied.gmmhmm.bin has {} tied states",
                path.display(),
                file.model.num_outputs(),
                model.tying.num_tied()
            );
            let p = ctx.cfg.pipeline.clone();
            let (ngram, hybrid) = ctx.lms(p.decode.lm, ctx.num_classes(&corpus))?;
            let system = HybridSystem {
                hmms: &model.hmms,
                tying: &model.tying,
                classifier: &file.model,
                prior: &file.prior,
                lms: Lms {
                    ngram: ngram.as_ref(),
                    hybrid: hybrid.as_ref(),
                },
                decode: &p.decode,
            };
            let frames = extract_all(lines, &p.features)?;
            let test: Vec<TestLine> = lines
                .iter()
                .zip(&frames)
                .map(|(l, f)| TestLine {
                    line_id: l.line_id,
                    writer_id: l.writer_id,
                    patches: &f.patches,
                    transcript: &l.transcript,
                })
                .collect();
            let report = multipass_recognize(&system, &test, p.passes, &p.adapt, p.seed)?;
            let dir = ctx.path("multipass");
            write_decode_outputs(&mut ctx, &dir, &report.results)?;
            let json_path = dir.join("report.json");
            ctx.create(&json_path)?.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
            write_report_csv(&mut ctx.create(&dir.join("report.csv"))?, &report)?;
            write_codes_csv(&mut ctx.create(&dir.join("codes.csv"))?, &report.profiles)?;
            ctx.metrics = json!({ "cer_per_pass": report.passes.iter().map(|p| p.cer.cer).collect::<Vec<_>>() });
        }
        Command::Eval { partition: part, hyp } => {
            let corpus = ctx.corpus()?;
            let path = hyp.clone().unwrap_or_else(|| ctx.path("decode").join("hyp.tsv"));
            ctx.input(&path)?;
            let hyps: HashMap<u32, Vec<u32>> = phmm::decoder::read_hypotheses(BufReader::new(File::open(&path)?))
                .with_context(|| format!("reading {}", path.display()))?
                .into_iter()
                .collect();
            let report = cer(&references(corpus.partition(partition(*part))), &hyps);
            let dir = ctx.path("eval");
            ctx.create(&dir.join("report.json"))?
                .write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
            write_cer_csv(&mut ctx.create(&dir.join("report.csv"))?, &report)?;
            println!("CER {:.4} ({} errors / {} characters)", report.cer, report.total.errors(), report.total.n);
            ctx.metrics = json!({ "cer": report.cer });
        }
        Command::ExportTree { position } => {
            let corpus = ctx.corpus()?;
            let (model, stats) = ctx.stats(&corpus)?;
            let questions = ctx.questions(model.num_states())?;
            let positions: Vec<usize> = match position {
                Some(p) if *p < model.num_states() => vec![*p],
                Some(p) => bail!("position {p} out of range; the model has {} states", model.num_states()),
                None => (0..model.num_states()).collect(),
            };
            let tcfg = ctx.cfg.pipeline.tying;
            for p in positions {
                let tree = build_tying_tree(p, &questions[p], &stats.at_position(p), &tcfg)?;
                let path = ctx.path("trees").join(format!("position{p}.dot"));
                ctx.create(&path)?.write_all(tree.to_dot(&questions[p]).as_bytes())?;
            }
        }
        Command::ExportCodes { wcnn, out } => {
            let path = wcnn.clone().unwrap_or_else(|| ctx.path("wcnn.bin"));
            let file = ctx.wcnn(&path)?;
            if file.profiles.is_empty() {
                warn!("{} holds no writer codes", path.display());
            }
            let out = out.clone().unwrap_or_else(|| ctx.path("codes.csv"));
            write_codes_csv(&mut ctx.create(&out)?, &file.profiles)?;
            // the CSV must read back to the same codes
            let back = read_codes_csv(BufReader::new(File::open(&out)?))?;
            ensure!(back.len() == file.profiles.len(), "codes.csv round trip lost writers");
        }
    }
    finish(ctx, name, &cli)
}

fn finish(ctx: Ctx, name: &str, cli: &Cli) -> Result<()> {
    let mut outputs = Vec::new();
    for p in &ctx.outputs {
        outputs.extend(digests(p)?);
    }
    let manifest = Manifest {
        tool: "phmm",
        version: env!("CARGO_PKG_VERSION"),
        command: name.to_string(),
        argv: std::env::args().collect(),
        seed: ctx.cfg.pipeline.seed,
        config: serde_json::to_value(&ctx.cfg)?,
        inputs: ctx.inputs,
        outputs,
        metrics: ctx.metrics,
    };
    let path = manifest.write(&cli.work)?;
    info!("wrote {}", path.display());
    Ok(())
}
