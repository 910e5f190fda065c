use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};

/// Rows of `z` must have unit norm to within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Unit-normalized views entering the contrastive branch, with the index
/// structure the losses need: the class-to-rows map and each anchor's
/// positive set (same-label rows other than the anchor).
///
/// By default every row is an anchor. Rows outside the anchor set still take
/// part in the class averages and positive sets of the anchors.
#[derive(Clone, Debug)]
pub struct ContrastBatch<'t> {
    z: Var<'t>,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    positive_sets: Vec<Vec<usize>>,
    anchors: Vec<usize>,
}

impl<'t> ContrastBatch<'t> {
    pub fn new(z: Var<'t>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let anchors = (0..labels.len()).collect();
        Self::with_anchors(z, labels, num_classes, anchors)
    }

    pub fn with_anchors(
        z: Var<'t>,
        labels: Vec<usize>,
        num_classes: usize,
        anchors: Vec<usize>,
    ) -> Result<Self> {
        let (rows, _) = z.shape();
        if rows == 0 || anchors.is_empty() {
            return Err(Error::Contract("contrastive batch is empty".into()));
        }
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "{} labels for {rows} representation rows",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Contract(format!(
                "contrastive losses need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let values = z.value();
        for r in 0..rows {
            let norm = values.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "representation row {r} has norm {norm}, expected 1"
                )));
            }
        }

        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            class_index[y].push(i);
        }
        let positive_sets: Vec<Vec<usize>> = (0..rows)
            .map(|i| {
                class_index[labels[i]]
                    .iter()
                    .copied()
                    .filter(|&j| j != i)
                    .collect()
            })
            .collect();
        for &a in &anchors {
            if a >= rows {
                return Err(Error::Contract(format!("anchor {a} out of range")));
            }
            if positive_sets[a].is_empty() {
                return Err(Error::Contract(format!(
                    "anchor {a} (class {}) has no positive in the batch",
                    labels[a]
                )));
            }
        }

        Ok(Self {
            z,
            labels,
            num_classes,
            class_index,
            positive_sets,
            anchors,
        })
    }

    pub fn z(&self) -> Var<'t> {
        self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows carrying class `c`.
    pub fn class_rows(&self, c: usize) -> &[usize] {
        &self.class_index[c]
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positive_sets[i]
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn all_rows_are_anchors(&self) -> bool {
        self.anchors.len() == self.labels.len()
            && self.anchors.iter().enumerate().all(|(k, &a)| k == a)
    }
}

/// Where class prototypes come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeSource {
    /// `P = T·Wᵀ`
    #[default]
    LinearTransform,
    /// Two-layer bias-free MLP with ReLU applied to each classifier weight vector.
    NonlinearMlp,
    /// Per-class mean of a representation snapshot.
    ClassMeans,
}

impl std::fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrototypeSource::LinearTransform => "linear-transform",
            PrototypeSource::NonlinearMlp => "nonlinear-mlp",
            PrototypeSource::ClassMeans => "class-means",
        })
    }
}

/// Prototype matrix `P` (`F×C`, column `c` is the prototype of class `c`).
///
/// The matrix is kept raw. Contrastive losses use [`PrototypeSet::unit_columns`];
/// the alignment loss consumes the raw matrix.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet<'t> {
    matrix: Var<'t>,
    source: PrototypeSource,
}

impl<'t> PrototypeSet<'t> {
    pub fn new(matrix: Var<'t>, source: PrototypeSource) -> Self {
        Self { matrix, source }
    }

    pub fn matrix(&self) -> Var<'t> {
        self.matrix
    }

    pub fn source(&self) -> PrototypeSource {
        self.source
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.shape().1
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape().0
    }

    pub fn unit_columns(&self) -> Result<Var<'t>> {
        self.matrix.normalize_cols()
    }
}
