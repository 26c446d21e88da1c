//! Metric-aware embedding regularizer: frozen image embedder, 2-D projection
//! head, leave-one-out kernel regression and its squared-error loss.

use crate::autodiff::{kernel_weights, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, IMAGE_VOCAB};
use crate::scalar::Scalar;
use crate::synth::{oracle_score, PromptSpec, Resolution, TokenGrid, HR_CELLS};
use crate::tensor::{argmax, matmul, Mat};

/// Lower bound of the adaptive bandwidth.
pub const H_FLOOR: f64 = 1e-3;

/// Per-position token probabilities of a high-resolution grid (`64 × 8`).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGrid<T>(Mat<T>);

impl<T: Scalar> SoftGrid<T> {
    /// Rows must be non-negative and sum to one within `1e-6`.
    pub fn new(probs: Mat<T>) -> Result<Self> {
        if probs.shape() != (HR_CELLS, IMAGE_VOCAB) {
            return Err(Error::shape("soft grid", "64x8", format!("{}x{}", probs.rows(), probs.cols())));
        }
        for i in 0..HR_CELLS {
            let row = probs.row(i);
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("soft grid row {i} is not a distribution")));
            }
        }
        Ok(Self(probs))
    }

    pub fn one_hot(grid: &TokenGrid) -> Result<Self> {
        if grid.resolution() != Resolution::High {
            return Err(Error::shape("soft grid source", "8x8 grid", "4x4 grid"));
        }
        let mut m = Mat::zeros(HR_CELLS, IMAGE_VOCAB);
        for (i, &t) in grid.cells().iter().enumerate() {
            m.set(i, t as usize, T::one());
        }
        Ok(Self(m))
    }

    pub fn uniform() -> Self {
        Self(Mat::filled(HR_CELLS, IMAGE_VOCAB, T::lit(1.0 / IMAGE_VOCAB as f64)))
    }

    pub fn probs(&self) -> &Mat<T> {
        &self.0
    }

    /// Most probable token per cell, lowest id on ties.
    pub fn decode(&self) -> TokenGrid {
        let cells = (0..HR_CELLS).map(|i| argmax(self.0.row(i)) as u8).collect();
        TokenGrid::new(Resolution::High, cells).expect("argmax stays in the image vocabulary")
    }
}

/// `e_I = F · flatten(soft)` with the frozen embedder.
pub fn embed_image<T: Scalar>(model: &Model<T>, soft: &SoftGrid<T>) -> Vec<T> {
    let f = model.store.value(model.ids.embedder);
    let flat = soft.0.clone().reshaped(1, HR_CELLS * IMAGE_VOCAB);
    matmul(&flat, f).data().to_vec()
}

pub(crate) fn project_nodes<T: Scalar>(model: &Model<T>, tape: &mut Tape<'_, T>, e: NodeId) -> NodeId {
    let h = model.linear(tape, e, &model.ids.proj_hidden);
    let h = tape.tanh(h);
    model.linear(tape, h, &model.ids.proj_out)
}

/// Projection head `embed_dim → proj_hidden (tanh) → 2`.
pub fn project<T: Scalar>(model: &Model<T>, e: &[T]) -> Result<[T; 2]> {
    if e.len() != model.config.embed_dim {
        return Err(Error::shape("image embedding", model.config.embed_dim, e.len()));
    }
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(Mat::row_vector(e));
    let z = project_nodes(model, &mut tape, x);
    let v = tape.value(z);
    Ok([v.get(0, 0), v.get(0, 1)])
}

fn check_points<T: Scalar>(z: &Mat<T>) -> Result<()> {
    if z.cols() != 2 {
        return Err(Error::shape("projected points", "N x 2", format!("{}x{}", z.rows(), z.cols())));
    }
    if z.rows() < 2 {
        return Err(Error::Invalid(format!("kernel regression needs at least 2 points, got {}", z.rows())));
    }
    Ok(())
}

/// Median of the pairwise Euclidean distances (mean of the two middle values
/// for an even count), floored at [`H_FLOOR`].
pub fn adaptive_bandwidth<T: Scalar>(z: &Mat<T>) -> Result<T> {
    check_points(z)?;
    let n = z.rows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: T = z.row(i).iter().zip(z.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { (d[m / 2 - 1] + d[m / 2]) * T::lit(0.5) };
    Ok(median.max(T::lit(H_FLOOR)))
}

/// Leave-one-out Nadaraya-Watson estimate with a Gaussian kernel; returns `(ŷ, W)`.
pub fn kernel_regress<T: Scalar>(z: &Mat<T>, y: &[T], h: T) -> Result<(Vec<T>, Mat<T>)> {
    check_points(z)?;
    if y.len() != z.rows() {
        return Err(Error::shape("targets", z.rows(), y.len()));
    }
    if !(h > T::zero()) {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {h}")));
    }
    let (w, yhat, _) = kernel_weights(z, y, h);
    Ok((yhat, w))
}

/// `(1/N) Σ (ŷ_i − y_i)²`.
pub fn maer_loss<T: Scalar>(yhat: &[T], y: &[T]) -> Result<T> {
    if yhat.len() != y.len() {
        return Err(Error::shape("estimates", y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(Error::Invalid("the loss needs at least 2 points".into()));
    }
    let n = T::lit(y.len() as f64);
    Ok(yhat.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}

/// Oracle score of each argmax-decoded soft grid against its prompt.
pub fn score_targets<T: Scalar>(soft: &[SoftGrid<T>], prompts: &[PromptSpec]) -> Result<Vec<T>> {
    if soft.len() != prompts.len() {
        return Err(Error::shape("prompts", soft.len(), prompts.len()));
    }
    Ok(soft.iter().zip(prompts).map(|(s, p)| T::lit(oracle_score(&s.decode(), p))).collect())
}

/// Everything the regularizer computes for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricBatch<T> {
    pub e: Mat<T>,
    pub z: Mat<T>,
    pub y: Vec<T>,
    pub yhat: Vec<T>,
    pub h: T,
    pub w: Mat<T>,
    pub loss: T,
}

impl<T: Scalar> MetricBatch<T> {
    pub fn compute(model: &Model<T>, soft: &[SoftGrid<T>], prompts: &[PromptSpec]) -> Result<Self> {
        let y = score_targets(soft, prompts)?;
        let rows: Vec<Vec<T>> = soft.iter().map(|s| embed_image(model, s)).collect();
        let e = Mat::from_rows(&rows);
        let mut z = Mat::zeros(rows.len(), 2);
        for (i, r) in rows.iter().enumerate() {
            z.row_mut(i).copy_from_slice(&project(model, r)?);
        }
        let h = adaptive_bandwidth(&z)?;
        let (yhat, w) = kernel_regress(&z, &y, h)?;
        let loss = maer_loss(&yhat, &y)?;
        Ok(Self { e, z, y, yhat, h, w, loss })
    }
}
