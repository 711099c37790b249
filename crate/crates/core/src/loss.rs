use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropyMulticlass,
    /// `−y·F(x)` for a single score column and labels in {−1, +1}.
    CorrelationBinary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    OneHot,
    /// Stored labels {0, 1} read as {−1, +1}.
    PmOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub label_encoding: LabelEncoding,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::cross_entropy()
    }
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropyMulticlass,
            label_encoding: LabelEncoding::OneHot,
        }
    }

    pub fn correlation_binary() -> Self {
        LossSpec {
            kind: LossKind::CorrelationBinary,
            label_encoding: LabelEncoding::PmOne,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::CorrelationBinary && self.label_encoding != LabelEncoding::PmOne {
            return Err(Error::Config("correlation_binary loss requires pm_one labels".into()));
        }
        Ok(())
    }

    fn check_scores(&self, scores: &Tensor) -> Result<()> {
        if self.kind == LossKind::CorrelationBinary && scores.cols() != 1 {
            return Err(Error::shape(
                "correlation_binary loss",
                format!("expects one score column, got {}", scores.cols()),
            ));
        }
        Ok(())
    }

    /// Mean loss over rows, recorded on the tape.
    pub fn tape_loss(&self, tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
        self.validate()?;
        self.check_scores(tape.value(scores))?;
        match self.kind {
            LossKind::CrossEntropyMulticlass => tape.softmax_cross_entropy(scores, labels),
            LossKind::CorrelationBinary => {
                let m = tape.margin(scores, labels)?;
                let mean = tape.mean(m)?;
                tape.scale(mean, -1.0)
            }
        }
    }

    /// Per-row loss values.
    pub fn per_sample(&self, scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_scores(scores)?;
        if labels.len() != scores.rows() {
            return Err(Error::shape("loss", "label count differs from rows"));
        }
        match self.kind {
            LossKind::CrossEntropyMulticlass => Ok(labels
                .iter()
                .enumerate()
                .map(|(r, &y)| {
                    let row = scores.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    z.ln() + mx - row[y]
                })
                .collect()),
            LossKind::CorrelationBinary => Ok(crate::probe::margins(scores, labels)?
                .into_iter()
                .map(|m| -m)
                .collect()),
        }
    }

    pub fn mean(&self, scores: &Tensor, labels: &[usize]) -> Result<f64> {
        let v = self.per_sample(scores, labels)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Class decisions from scores: the sign for a single score column, argmax otherwise.
pub fn predicted_classes(scores: &Tensor) -> Vec<usize> {
    if scores.cols() == 1 {
        scores.data().iter().map(|&s| usize::from(s > 0.0)).collect()
    } else {
        scores.argmax_rows()
    }
}
