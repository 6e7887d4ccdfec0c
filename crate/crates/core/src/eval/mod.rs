//! Transferability measurement: attack-success-rate matrices with the
//! surrogate column excluded from the average, feature cosine-similarity
//! reports, and CSV serialization with exact round-tripping.

pub mod gradcam;

pub use gradcam::gradcam;

use crate::adapters::{argmax_rows, ModelAdapter};
use crate::attack::{craft, AttackSpec};
use crate::error::{Error, Result};
use crate::selfadv::AdversarialBatch;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

/// Attack success rate of an adversarial batch against a target, as a
/// percentage of all evaluated samples whose prediction differs from the
/// ground-truth label.
pub fn asr(batch: &AdversarialBatch, target: &dyn ModelAdapter) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Report("cannot evaluate an empty adversarial batch".into()));
    }
    let c = target.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(Error::ClassSpace(format!(
            "label {bad} out of range for target '{}' with {c} classes",
            target.model_id()
        )));
    }
    let mut fooled = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + 64).min(n);
        let xb = batch.adversarial.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let preds = argmax_rows(&target.global_logits(&xb)?);
        for (p, &y) in preds.iter().zip(&batch.labels[start..end]) {
            if *p != y {
                fooled += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * fooled as f64 / n as f64)
}

/// Where an adversarial batch came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvProvenance {
    pub surrogate_id: String,
    pub witness_id: Option<String>,
    pub attack_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub surrogate: String,
    pub witness: String,
    pub attack: String,
    /// One ASR percentage per target column.
    pub cells: Vec<f64>,
    /// Mean over targets with the surrogate column excluded; `None` when
    /// no targets remain (reported as a not-applicable marker, never 0).
    pub avg_asr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub targets: Vec<String>,
    pub rows: Vec<TransferRow>,
}

/// Assemble the ASR matrix for a set of adversarial batches against the
/// target models. `exclude_surrogate` removes each row's own surrogate
/// column from its average; requesting exclusion for a row whose
/// surrogate is not among the targets is a report error.
pub fn transfer_matrix(
    sets: &[(AdvProvenance, &AdversarialBatch)],
    targets: &[&dyn ModelAdapter],
    exclude_surrogate: bool,
) -> Result<TransferReport> {
    if targets.is_empty() {
        return Err(Error::Report("no target models given".into()));
    }
    let target_ids: Vec<String> = targets.iter().map(|t| t.model_id().to_string()).collect();
    let mut rows = Vec::new();
    for (prov, batch) in sets {
        let mut cells = Vec::with_capacity(targets.len());
        for t in targets {
            cells.push(asr(batch, *t)?);
        }
        let avg_asr = if exclude_surrogate {
            if !target_ids.contains(&prov.surrogate_id) {
                return Err(Error::Report(format!(
                    "surrogate '{}' is not among the targets; cannot exclude its column",
                    prov.surrogate_id
                )));
            }
            let kept: Vec<f64> = target_ids
                .iter()
                .zip(&cells)
                .filter(|(id, _)| **id != prov.surrogate_id)
                .map(|(_, &v)| v)
                .collect();
            if kept.is_empty() {
                None
            } else {
                Some(kept.iter().sum::<f64>() / kept.len() as f64)
            }
        } else {
            Some(cells.iter().sum::<f64>() / cells.len() as f64)
        };
        rows.push(TransferRow {
            surrogate: prov.surrogate_id.clone(),
            witness: prov.witness_id.clone().unwrap_or_else(|| "n/a".into()),
            attack: prov.attack_name.clone(),
            cells,
            avg_asr,
        });
    }
    Ok(TransferReport {
        targets: target_ids,
        rows,
    })
}

const NA: &str = "NA";

fn check_csv_field(s: &str) -> Result<()> {
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(Error::Report(format!("field '{s}' may not contain commas or newlines")));
    }
    Ok(())
}

impl TransferReport {
    /// Columns: surrogate, witness, attack, one column per target, avg_asr.
    /// Floats are written shortest-round-trip so parsing is exact.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("surrogate,witness,attack");
        for t in &self.targets {
            check_csv_field(t)?;
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",avg_asr\n");
        for row in &self.rows {
            for f in [&row.surrogate, &row.witness, &row.attack] {
                check_csv_field(f)?;
            }
            out.push_str(&format!("{},{},{}", row.surrogate, row.witness, row.attack));
            if row.cells.len() != self.targets.len() {
                return Err(Error::Report("row width differs from target count".into()));
            }
            for v in &row.cells {
                out.push_str(&format!(",{v}"));
            }
            match row.avg_asr {
                Some(v) => out.push_str(&format!(",{v}\n")),
                None => {
                    out.push(',');
                    out.push_str(NA);
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Report("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "surrogate" || cols[1] != "witness" || cols[2] != "attack" || cols[cols.len() - 1] != "avg_asr" {
            return Err(Error::Report("unexpected transfer report header".into()));
        }
        let targets: Vec<String> = cols[3..cols.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::Report(format!("row {i} has {} fields, expected {}", f.len(), cols.len())));
            }
            let cells = f[3..f.len() - 1]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Report(format!("row {i}: bad cell '{s}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let avg = f[f.len() - 1];
            let avg_asr = if avg == NA {
                None
            } else {
                Some(avg.parse::<f64>().map_err(|e| Error::Report(format!("row {i}: bad avg '{avg}': {e}")))?)
            };
            rows.push(TransferRow {
                surrogate: f[0].to_string(),
                witness: f[1].to_string(),
                attack: f[2].to_string(),
                cells,
                avg_asr,
            });
        }
        Ok(TransferReport { targets, rows })
    }
}

/// Cosine similarity between two vectors; `None` when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Clean,
    Adversarial,
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputKind::Clean => write!(f, "clean"),
            InputKind::Adversarial => write!(f, "adversarial"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignState {
    Unaligned,
    Aligned,
}

impl std::fmt::Display for AlignState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlignState::Unaligned => write!(f, "unaligned"),
            AlignState::Aligned => write!(f, "aligned"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityEntry {
    pub surrogate: String,
    pub witness: String,
    pub kind: InputKind,
    pub state: AlignState,
    /// Mean cosine similarity of global features over the sample.
    pub mean_cosine: f64,
    /// Samples included in the mean.
    pub n: usize,
    /// Samples excluded because a feature vector was zero.
    pub zero_excluded: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FeatureSimilarityReport {
    pub entries: Vec<SimilarityEntry>,
}

impl FeatureSimilarityReport {
    /// Columns: surrogate, witness, kind, state, mean_cosine, n.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("surrogate,witness,kind,state,mean_cosine,n\n");
        for e in &self.entries {
            check_csv_field(&e.surrogate)?;
            check_csv_field(&e.witness)?;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.surrogate, e.witness, e.kind, e.state, e.mean_cosine, e.n
            ));
        }
        Ok(out)
    }
}

/// Mean cosine similarity between two models' global logits on a batch.
/// Returns (mean, included, zero_excluded).
pub fn mean_feature_cosine(
    a: &dyn ModelAdapter,
    b: &dyn ModelAdapter,
    x: &Array4<f64>,
) -> Result<(f64, usize, usize)> {
    let la = a.global_logits(x)?;
    let lb = b.global_logits(x)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (ra, rb) in la.outer_iter().zip(lb.outer_iter()) {
        match cosine(ra.as_slice().unwrap(), rb.as_slice().unwrap()) {
            Some(c) => {
                sum += c;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    if n == 0 {
        return Err(Error::Report("every feature vector was zero; no cosine defined".into()));
    }
    Ok((sum / n as f64, n, excluded))
}

/// Build the similarity report for (surrogate, witness, state) triples on
/// a held-out sample. When `adv_spec` is given, adversarial counterparts
/// are crafted on each pair's surrogate and both models are evaluated on
/// the identical adversarial images.
pub fn cosine_similarity_report(
    pairs: &[(&dyn ModelAdapter, &dyn ModelAdapter, AlignState)],
    sample: &Array4<f64>,
    labels: &[usize],
    adv_spec: Option<&AttackSpec>,
    seed: u64,
) -> Result<FeatureSimilarityReport> {
    let mut report = FeatureSimilarityReport::default();
    for (surrogate, witness, state) in pairs {
        let (mean, n, excluded) = mean_feature_cosine(*surrogate, *witness, sample)?;
        report.entries.push(SimilarityEntry {
            surrogate: surrogate.model_id().to_string(),
            witness: witness.model_id().to_string(),
            kind: InputKind::Clean,
            state: *state,
            mean_cosine: mean,
            n,
            zero_excluded: excluded,
        });
        if let Some(spec) = adv_spec {
            let batch = craft(sample, labels, &[*surrogate], spec, seed)?;
            let (mean, n, excluded) = mean_feature_cosine(*surrogate, *witness, &batch.adversarial)?;
            report.entries.push(SimilarityEntry {
                surrogate: surrogate.model_id().to_string(),
                witness: witness.model_id().to_string(),
                kind: InputKind::Adversarial,
                state: *state,
                mean_cosine: mean,
                n,
                zero_excluded: excluded,
            });
        }
    }
    Ok(report)
}
