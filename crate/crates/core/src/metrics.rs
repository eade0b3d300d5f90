//! Confusion matrices and mean intersection-over-union.

use crate::data::{LabelMap, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::SegmenterModel;

/// `counts[truth * C + pred]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![num_classes, num_classes],
                rhs: vec![counts.len()],
            });
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![pred.height, pred.width],
                rhs: vec![truth.height, truth.width],
            });
        }
        let c = self.num_classes;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::Index {
                    op: "confusion_matrix",
                    index: p.max(t),
                    limit: c,
                });
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class is absent from both truth and
    /// prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Metric("every class has an empty union".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn confusion_matrix(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.accumulate(pred, truth)?;
    Ok(m)
}

/// Anything that maps images to class maps.
pub trait Segment {
    fn num_classes(&self) -> usize;
    fn segment(&self, images: &[&Tensor]) -> Result<Vec<LabelMap>>;
}

impl Segment for SegmenterModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn segment(&self, images: &[&Tensor]) -> Result<Vec<LabelMap>> {
        self.predict(images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

const EVAL_CHUNK: usize = 16;

/// Dataset-level mIoU: one confusion matrix accumulated over every scene.
pub fn evaluate(model: &impl Segment, val: &[Scene]) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::Contract("evaluate needs at least one scene".into()));
    }
    let mut confusion = ConfusionMatrix::new(model.num_classes());
    for chunk in val.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let preds = model.segment(&images)?;
        for (pred, scene) in preds.iter().zip(chunk) {
            confusion.accumulate(pred, &scene.label)?;
        }
    }
    Ok(EvalReport {
        miou: confusion.miou()?,
        per_class_iou: confusion.per_class_iou(),
        confusion,
    })
}
