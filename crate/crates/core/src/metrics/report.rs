use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

use super::overlap::{document_bleu, rouge_n, sari, sentence_bleu};
use super::readability::{dcrs, fkgl, fres, DaleChallList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Rouge1,
    Rouge2,
    SentenceBleu,
    DocumentBleu,
    Sari,
    Fres,
    Fkgl,
    Dcrs,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::SentenceBleu,
        Metric::DocumentBleu,
        Metric::Sari,
        Metric::Fres,
        Metric::Fkgl,
        Metric::Dcrs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1_f1",
            Metric::Rouge2 => "rouge2_f1",
            Metric::SentenceBleu => "s_bleu",
            Metric::DocumentBleu => "d_bleu",
            Metric::Sari => "sari",
            Metric::Fres => "fres",
            Metric::Fkgl => "fkgl",
            Metric::Dcrs => "dcrs",
        }
    }

    /// Whether the metric lives in `[0, 1]` (and is shown ×100).
    pub fn is_bounded(self) -> bool {
        !matches!(self, Metric::Fres | Metric::Fkgl | Metric::Dcrs)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == key || m.name().trim_end_matches("_f1") == key)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocMetrics {
    pub doc_id: String,
    pub values: Vec<(Metric, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub docs: Vec<DocMetrics>,
    /// Whether bounded metrics are stored ×100.
    pub percent: bool,
}

pub struct EvalInputs<'a> {
    pub outputs: &'a [String],
    pub references: &'a [String],
    pub sources: Option<&'a [String]>,
    pub word_list: Option<&'a DaleChallList>,
}

/// Scores every document on every requested metric.
pub fn evaluate_documents(inputs: &EvalInputs<'_>, metrics: &[Metric]) -> Result<MetricReport> {
    let n = inputs.outputs.len();
    if inputs.references.len() != n {
        return Err(Error::Data(format!(
            "{n} system outputs but {} references",
            inputs.references.len()
        )));
    }
    if metrics.contains(&Metric::Sari) {
        match inputs.sources {
            None => {
                return Err(Error::Config(
                    "SARI requires the source texts (pass a sources file)".into(),
                ))
            }
            Some(s) if s.len() != n => return Err(Error::Data(format!("{n} system outputs but {} sources", s.len()))),
            Some(_) => {}
        }
    }
    if metrics.contains(&Metric::Dcrs) && inputs.word_list.is_none() {
        return Err(Error::Config("DCRS requires a familiar-word list (word_list)".into()));
    }
    let mut docs = Vec::with_capacity(n);
    for i in 0..n {
        let out = &inputs.outputs[i];
        let reference = &inputs.references[i];
        let mut values = Vec::with_capacity(metrics.len());
        for &m in metrics {
            let v = match m {
                Metric::Rouge1 => rouge_n(out, reference, 1)?,
                Metric::Rouge2 => rouge_n(out, reference, 2)?,
                Metric::SentenceBleu => sentence_bleu(out, reference),
                Metric::DocumentBleu => document_bleu(out, reference),
                Metric::Sari => sari(&inputs.sources.expect("checked")[i], out, reference),
                Metric::Fres => fres(out),
                Metric::Fkgl => fkgl(out),
                Metric::Dcrs => dcrs(out, inputs.word_list.expect("checked")),
            };
            values.push((m, v));
        }
        docs.push(DocMetrics {
            doc_id: i.to_string(),
            values,
        });
    }
    Ok(MetricReport {
        metrics: metrics.to_vec(),
        docs,
        percent: false,
    })
}

impl MetricReport {
    /// Bounded metrics scaled to percentages.
    pub fn to_percent(&self) -> MetricReport {
        if self.percent {
            return self.clone();
        }
        let docs = self
            .docs
            .iter()
            .map(|d| DocMetrics {
                doc_id: d.doc_id.clone(),
                values: d
                    .values
                    .iter()
                    .map(|&(m, v)| (m, if m.is_bounded() { v * 100.0 } else { v }))
                    .collect(),
            })
            .collect();
        MetricReport {
            metrics: self.metrics.clone(),
            docs,
            percent: true,
        }
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let vals: Vec<f64> = self
            .docs
            .iter()
            .filter_map(|d| d.values.iter().find(|(m, _)| *m == metric).map(|(_, v)| *v))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `doc_id,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("doc_id,metric,value\n");
        for d in &self.docs {
            for (m, v) in &d.values {
                let _ = writeln!(out, "{},{},{}", d.doc_id, m.name(), v);
            }
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            documents: usize,
            percent: bool,
            means: BTreeMap<&'static str, f64>,
        }
        let means = self
            .metrics
            .iter()
            .filter_map(|&m| self.mean(m).map(|v| (m.name(), v)))
            .collect();
        let s = Summary {
            documents: self.docs.len(),
            percent: self.percent,
            means,
        };
        serde_json::to_string_pretty(&s).expect("summary serialises") + "\n"
    }
}
