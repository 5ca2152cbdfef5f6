//! Robustness evaluation: corpus scoring, relative degradation, and the
//! model-by-testset comparison matrix.
//!
//! Degradation is expressed relative to the same model's clean score:
//! `delta = 1 - score(noisy) / score(clean)`, so 0 means unharmed, 1 means
//! wiped out, and values above 1 are possible for signed metrics. Every
//! cell of the matrix keeps its raw score next to its delta, so a report
//! is always recomputable from itself.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::attack::ids_as_text;
use crate::corpus::ParallelCorpus;
use crate::decode::greedy_decode;
use crate::metrics::metric_by_name;
use crate::transformer::Seq2Seq;
use crate::{Error, Result};

/// The six model variants the robustness comparison covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Finetune,
    SimpleReplacement,
    DualNll,
    DualBleu,
    DualMetric2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Baseline,
        ModelKind::Finetune,
        ModelKind::SimpleReplacement,
        ModelKind::DualNll,
        ModelKind::DualBleu,
        ModelKind::DualMetric2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Finetune => "finetune",
            ModelKind::SimpleReplacement => "simple_replacement",
            ModelKind::DualNll => "dual_nll",
            ModelKind::DualBleu => "dual_bleu",
            ModelKind::DualMetric2 => "dual_metric2",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown model kind {s:?}; expected one of {}",
                    ModelKind::ALL
                        .iter()
                        .map(|k| k.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Corpus score under a registered metric key.
pub fn corpus_metric<S: AsRef<str>>(hyps: &[S], refs: &[S], metric_key: &str) -> Result<f64> {
    let metric = metric_by_name(metric_key)?;
    let hyps: Vec<String> = hyps.iter().map(|s| s.as_ref().to_string()).collect();
    let refs: Vec<String> = refs.iter().map(|s| s.as_ref().to_string()).collect();
    (metric.corpus)(&hyps, &refs)
}

/// Relative degradation `1 - noisy / clean`. A zero clean score leaves the
/// ratio undefined and is reported as a numeric error.
pub fn delta_metric(score_noisy: f64, score_clean: f64) -> Result<f64> {
    if score_clean == 0.0 {
        return Err(Error::numeric(
            "relative degradation against a zero clean score is undefined",
        ));
    }
    Ok(1.0 - score_noisy / score_clean)
}

/// One scored (model, test set, metric) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: ModelKind,
    pub testset: String,
    pub metric: String,
    pub score: f64,
    pub delta: f64,
}

/// The full comparison matrix plus everything needed to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    /// Rows requested but skipped because their checkpoint was missing.
    pub absent: Vec<ModelKind>,
    pub clean_set: String,
    pub testsets: Vec<String>,
    pub metrics: Vec<String>,
    pub seed: u64,
    /// Decode strategy and scoring conventions baked into the numbers.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn cell(&self, model: ModelKind, testset: &str, metric: &str) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.testset == testset && c.metric == metric)
    }

    /// Flat machine-readable rendering: one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,testset,metric,score,delta\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.model, c.testset, c.metric, c.score, c.delta
            ));
        }
        out
    }

    /// Aligned text table for one metric: rows are models, the clean
    /// column shows the raw score (0-100 convention), noisy columns show
    /// relative degradation in percent.
    pub fn to_table(&self, metric: &str) -> String {
        let noisy: Vec<&String> = self
            .testsets
            .iter()
            .filter(|t| **t != self.clean_set)
            .collect();
        let mut header = vec![
            format!("{:<20}", "model"),
            format!("{:>9}", format!("{} x100", metric)),
        ];
        for t in &noisy {
            header.push(format!("{:>9}", format!("d:{t}")));
        }
        let mut lines = vec![header.join("  ")];
        for kind in ModelKind::ALL {
            let clean = match self.cell(kind, &self.clean_set, metric) {
                Some(c) => c,
                None => {
                    if self.absent.contains(&kind) {
                        lines.push(format!("{:<20}  (not built)", kind.to_string()));
                    }
                    continue;
                }
            };
            let mut row = vec![
                format!("{:<20}", kind.to_string()),
                format!("{:>9.1}", clean.score * 100.0),
            ];
            for t in &noisy {
                match self.cell(kind, t, metric) {
                    Some(c) => row.push(format!("{:>8.1}%", c.delta * 100.0)),
                    None => row.push(format!("{:>9}", "-")),
                }
            }
            lines.push(row.join("  "));
        }
        lines.join("\n") + "\n"
    }
}

/// The conventions baked into a report's numbers, recorded alongside them
/// so two reports are comparable only when their fingerprints match.
pub fn report_fingerprint(seed: u64, metrics: &[String]) -> String {
    format!(
        "decode=greedy scores=unit-interval delta=relative seed={seed} metrics={}",
        metrics.join("+")
    )
}

/// Scores one model on one test set: greedy-decodes every source sentence
/// and applies the corpus metric against the references.
pub fn score_model(
    model: &Seq2Seq,
    testset: &ParallelCorpus,
    metric_key: &str,
    render: &dyn Fn(&[usize]) -> String,
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::contract("scoring on an empty test set"));
    }
    let metric = metric_by_name(metric_key)?;
    let max_content = model.cfg.max_len - 1;
    let mut hyps = Vec::with_capacity(testset.len());
    let mut refs = Vec::with_capacity(testset.len());
    for (src, tgt) in &testset.pairs {
        hyps.push(render(&greedy_decode(model, src, max_content)?));
        refs.push(render(tgt));
    }
    (metric.corpus)(&hyps, &refs)
}

/// Builds the model-by-testset comparison matrix. `models` maps each row
/// to its loaded model, or `None` when its checkpoint is missing — such
/// rows are recorded as absent instead of failing the evaluation. The
/// clean set must be among `testsets`, and every test set must share the
/// clean set's references (noise only ever touches sources).
pub fn evaluate_matrix(
    models: &[(ModelKind, Option<&Seq2Seq>)],
    testsets: &[(String, ParallelCorpus)],
    metrics: &[String],
    clean_set: &str,
    seed: u64,
    render: &dyn Fn(&[usize]) -> String,
) -> Result<EvalReport> {
    let clean_corpus = testsets
        .iter()
        .find(|(name, _)| name == clean_set)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::contract(format!("clean set {clean_set:?} not among test sets")))?;
    for (name, corpus) in testsets {
        if corpus.len() != clean_corpus.len() {
            return Err(Error::contract(format!(
                "test set {name:?} has {} sentences but the clean set has {}",
                corpus.len(),
                clean_corpus.len()
            )));
        }
        for (i, ((_, tgt), (_, clean_tgt))) in
            corpus.pairs.iter().zip(&clean_corpus.pairs).enumerate()
        {
            if tgt != clean_tgt {
                return Err(Error::contract(format!(
                    "test set {name:?} disagrees with the clean references at sentence {i}"
                )));
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::contract("no metrics requested"));
    }

    let mut cells = Vec::new();
    let mut absent = Vec::new();
    for (kind, model) in models {
        let model = match model {
            Some(m) => m,
            None => {
                absent.push(*kind);
                continue;
            }
        };
        for metric in metrics {
            let clean_score = score_model(model, clean_corpus, metric, render)?;
            for (name, corpus) in testsets {
                let score = if name == clean_set {
                    clean_score
                } else {
                    score_model(model, corpus, metric, render)?
                };
                cells.push(EvalCell {
                    model: *kind,
                    testset: name.clone(),
                    metric: metric.clone(),
                    score,
                    delta: delta_metric(score, clean_score)?,
                });
            }
        }
    }
    Ok(EvalReport {
        cells,
        absent,
        clean_set: clean_set.to_string(),
        testsets: testsets.iter().map(|(n, _)| n.clone()).collect(),
        metrics: metrics.to_vec(),
        seed,
        fingerprint: report_fingerprint(seed, metrics),
    })
}

/// [`evaluate_matrix`] with the default id renderer.
pub fn evaluate_matrix_ids(
    models: &[(ModelKind, Option<&Seq2Seq>)],
    testsets: &[(String, ParallelCorpus)],
    metrics: &[String],
    clean_set: &str,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_matrix(models, testsets, metrics, clean_set, seed, &ids_as_text)
}
