//! Character error rate and multi-pass recognition with unsupervised
//! writer adaptation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{adapt_unknown_writer, line_log_posteriors, AdaptConfig, AdaptiveClassifier, LabeledLine, StatePrior, WriterProfile};
use crate::decoder::{decode, DecodeConfig, DecodeResult, Lms, ScoreMatrix};
use crate::error::{Error, Result};
use crate::features::Patches;
use crate::hmm::CharacterHmm;
use crate::tying::StateTyingMap;

/// Edit operations against a reference of `n` characters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub n: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors per reference character; exceeds 1 when insertions dominate.
    pub fn cer(&self) -> f64 {
        if self.n == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.n as f64
        }
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.n += o.n;
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments a substitution
/// is preferred, then a deletion, then an insertion.
pub fn edit_counts(reference: &[u32], hypothesis: &[u32]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, substitutions, insertions, deletions)
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    let mut cur = prev.clone();
    for i in 1..=n {
        cur[0] = (i, 0, 0, i);
        for j in 1..=m {
            let d = prev[j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                d
            } else {
                (d.0 + 1, d.1 + 1, d.2, d.3)
            };
            let up = prev[j];
            let del = (up.0 + 1, up.1, up.2, up.3 + 1);
            let left = cur[j - 1];
            let ins = (left.0 + 1, left.1, left.2 + 1, left.3);
            cur[j] = if diag.0 <= del.0 && diag.0 <= ins.0 {
                diag
            } else if del.0 <= ins.0 {
                del
            } else {
                ins
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, s, ins, del) = prev[m];
    ErrorCounts {
        n,
        substitutions: s,
        insertions: ins,
        deletions: del,
    }
}

/// A reference line.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub line_id: u32,
    pub writer_id: u32,
    pub transcript: &'a [u32],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub total: ErrorCounts,
    pub cer: f64,
    pub per_writer: BTreeMap<u32, ErrorCounts>,
    /// Reference lines without a hypothesis, counted as all deletions.
    pub missing_lines: Vec<u32>,
}

/// Scores hypotheses, keyed by line id, against the references.
pub fn cer(references: &[Reference], hypotheses: &HashMap<u32, Vec<u32>>) -> CerReport {
    let mut report = CerReport::default();
    for r in references {
        let counts = match hypotheses.get(&r.line_id) {
            Some(h) => edit_counts(r.transcript, h),
            None => {
                report.missing_lines.push(r.line_id);
                ErrorCounts {
                    n: r.transcript.len(),
                    deletions: r.transcript.len(),
                    ..ErrorCounts::default()
                }
            }
        };
        report.total += counts;
        *report.per_writer.entry(r.writer_id).or_default() += counts;
    }
    if !report.missing_lines.is_empty() {
        warn!("{} reference lines have no hypothesis", report.missing_lines.len());
    }
    report.cer = report.total.cer();
    report
}

/// Everything needed to turn classifier outputs into transcripts.
#[derive(Debug, Clone, Copy)]
pub struct HybridSystem<'a> {
    pub hmms: &'a [CharacterHmm],
    pub tying: &'a StateTyingMap,
    pub classifier: &'a AdaptiveClassifier,
    pub prior: &'a StatePrior,
    pub lms: Lms<'a>,
    pub decode: &'a DecodeConfig,
}

/// A test line: frames and the reference transcript.
#[derive(Debug, Clone, Copy)]
pub struct TestLine<'a> {
    pub line_id: u32,
    pub writer_id: u32,
    pub patches: &'a Patches,
    pub transcript: &'a [u32],
}

impl<'a> TestLine<'a> {
    fn reference(&self) -> Reference<'a> {
        Reference {
            line_id: self.line_id,
            writer_id: self.writer_id,
            transcript: self.transcript,
        }
    }
}

/// Decodes one line with an optional writer code.
pub fn recognize_line(system: &HybridSystem, patches: &Patches, line_id: u32, code: Option<&[f64]>) -> Result<DecodeResult> {
    let lp = line_log_posteriors(system.classifier, patches, code)?;
    let scores = ScoreMatrix::from_posteriors(&lp, system.prior)?;
    decode(line_id, system.hmms, system.tying, &scores, system.lms, system.decode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: usize,
    pub cer: CerReport,
    pub seconds: f64,
    /// Wall-clock time relative to pass 1.
    pub relative_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipassReport {
    pub passes: Vec<PassReport>,
    /// Writer codes after the last adaptation.
    pub profiles: Vec<WriterProfile>,
    /// Decoding output of the last pass, in input order.
    #[serde(skip)]
    pub results: Vec<DecodeResult>,
}

/// Pass 1 decodes with the writer-independent network. Every later pass
/// re-estimates each writer's code on the previous pass's frame alignments
/// and decodes again; pass 3 onwards continues from the previous code.
pub fn multipass_recognize(
    system: &HybridSystem,
    lines: &[TestLine],
    passes: usize,
    adapt: &AdaptConfig,
    seed: u64,
) -> Result<MultipassReport> {
    if passes == 0 {
        return Err(Error::Config("at least one pass is required".into()));
    }
    if passes > 1 && system.classifier.num_adapted() == 0 {
        return Err(Error::Config("multi-pass decoding needs adaptation layers (P > 0)".into()));
    }
    let mut by_writer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in lines.iter().enumerate() {
        by_writer.entry(l.writer_id).or_default().push(i);
    }
    let references: Vec<Reference> = lines.iter().map(TestLine::reference).collect();
    let mut profiles: BTreeMap<u32, WriterProfile> = BTreeMap::new();
    let mut results: Vec<Option<DecodeResult>> = vec![None; lines.len()];
    let mut reports = Vec::with_capacity(passes);
    for pass in 1..=passes {
        let start = Instant::now();
        let outcome: Vec<(u32, Option<WriterProfile>, Vec<(usize, DecodeResult)>)> = by_writer
            .par_iter()
            .map(|(&writer, idx)| -> Result<_> {
                let profile = if pass == 1 {
                    None
                } else {
                    let labeled: Vec<LabeledLine> = idx
                        .iter()
                        .map(|&i| LabeledLine {
                            line_id: lines[i].line_id,
                            writer_id: writer,
                            patches: lines[i].patches,
                            labels: &results[i].as_ref().expect("previous pass decoded every line").alignment,
                        })
                        .collect();
                    let initial = if pass >= 3 { profiles.get(&writer) } else { None };
                    Some(adapt_unknown_writer(system.classifier, writer, &labeled, initial, adapt, seed)?)
                };
                let code = profile.as_ref().map(|p| p.code.as_slice());
                let decoded = idx
                    .iter()
                    .map(|&i| Ok((i, recognize_line(system, lines[i].patches, lines[i].line_id, code)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((writer, profile, decoded))
            })
            .collect::<Result<_>>()?;
        for (writer, profile, decoded) in outcome {
            if let Some(p) = profile {
                profiles.insert(writer, p);
            }
            for (i, r) in decoded {
                results[i] = Some(r);
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let hyps: HashMap<u32, Vec<u32>> = results
            .iter()
            .flatten()
            .map(|r| (r.line_id, r.transcript.clone()))
            .collect();
        let report = cer(&references, &hyps);
        info!("pass {pass}: CER {:.4} in {seconds:.1}s", report.cer);
        let relative_time = reports.first().map_or(1.0, |p: &PassReport| seconds / p.seconds.max(1e-12));
        reports.push(PassReport {
            pass,
            cer: report,
            seconds,
            relative_time,
        });
    }
    Ok(MultipassReport {
        passes: reports,
        profiles: profiles.into_values().collect(),
        results: results.into_iter().flatten().collect(),
    })
}

/// `report.csv`: one row per pass and writer plus an `all` row per pass.
pub fn write_report_csv(w: &mut impl Write, report: &MultipassReport) -> Result<()> {
    writeln!(w, "pass,writer_id,n,substitutions,insertions,deletions,cer,seconds")?;
    for p in &report.passes {
        let row = |w: &mut dyn Write, who: &str, c: &ErrorCounts| {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.pass,
                who,
                c.n,
                c.substitutions,
                c.insertions,
                c.deletions,
                c.cer(),
                p.seconds
            )
        };
        row(w, "all", &p.cer.total)?;
        for (writer, c) in &p.cer.per_writer {
            row(w, &writer.to_string(), c)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight from the recursive definition, with the same tie order.
    fn oracle(r: &[u32], h: &[u32]) -> (usize, usize, usize, usize) {
        match (r.split_last(), h.split_last()) {
            (None, _) => (h.len(), 0, h.len(), 0),
            (_, None) => (r.len(), 0, 0, r.len()),
            (Some((&a, rr)), Some((&b, hh))) => {
                let d = oracle(rr, hh);
                let diag = if a == b { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
                let u = oracle(rr, h);
                let del = (u.0 + 1, u.1, u.2, u.3 + 1);
                let l = oracle(r, hh);
                let ins = (l.0 + 1, l.1, l.2 + 1, l.3);
                if diag.0 <= del.0 && diag.0 <= ins.0 {
                    diag
                } else if del.0 <= ins.0 {
                    del
                } else {
                    ins
                }
            }
        }
    }

    #[test]
    fn matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let r: Vec<u32> = (0..rng.gen_range(0..7)).map(|_| rng.gen_range(0..4)).collect();
            let h: Vec<u32> = (0..rng.gen_range(0..7)).map(|_| rng.gen_range(0..4)).collect();
            let c = edit_counts(&r, &h);
            assert_eq!((c.errors(), c.substitutions, c.insertions, c.deletions), oracle(&r, &h));
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(edit_counts(&[1, 2, 3], &[1, 2, 3]).cer(), 0.0);
        let c = edit_counts(&[0, 1, 2], &[0, 9, 2]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        assert!((c.cer() - 1.0 / 3.0).abs() < 1e-15);
        // substitution beats an insertion plus a deletion
        let c = edit_counts(&[5], &[6]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    }

    #[test]
    fn insertions_can_push_cer_above_one() {
        let c = edit_counts(&[1], &[2, 2, 2, 2]);
        assert!(c.cer() > 1.0);
    }

    #[test]
    fn missing_hypotheses_count_as_deletions() {
        let a = [1u32, 2, 3];
        let b = [4u32, 5];
        let refs = [
            Reference { line_id: 0, writer_id: 7, transcript: &a },
            Reference { line_id: 1, writer_id: 8, transcript: &b },
        ];
        let hyps = HashMap::from([(0, vec![1, 2, 3])]);
        let rep = cer(&refs, &hyps);
        assert_eq!(rep.missing_lines, vec![1]);
        assert_eq!(rep.total.deletions, 2);
        assert_eq!(rep.per_writer[&7].errors(), 0);
        assert!((rep.cer - 0.4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn distance_is_a_metric_bound(r in proptest::collection::vec(0u32..5, 0..12), h in proptest::collection::vec(0u32..5, 0..12)) {
            let c = edit_counts(&r, &h);
            prop_assert_eq!(c.errors(), edit_counts(&h, &r).errors());
            prop_assert!(c.errors() <= r.len().max(h.len()));
            prop_assert!(c.errors() >= r.len().abs_diff(h.len()));
            prop_assert_eq!(c.n + c.insertions - c.deletions, h.len());
        }
    }
}
