//! Similarity and classification losses, the class-level soft similarity
//! matrix learned from hash-layer membrane potentials, and the schedule of
//! rounds that refreshes it.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `log(1 + e^z)` on the tape, stable for either sign of `z`. The sign
/// split is taken from the current values and held constant.
pub fn softplus(tape: &mut Tape, z: Var) -> Result<Var> {
    let pos = tape.value(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let flip = pos.map(|m| 2.0 * m - 1.0);
    let pos = tape.constant(pos);
    let flip = tape.constant(flip);
    let linear = tape.mul(z, pos)?;
    let neg_abs = tape.mul(z, flip)?;
    let neg_abs = tape.scale(neg_abs, -1.0)?;
    let e = tape.exp(neg_abs)?;
    let e = tape.add_scalar(e, 1.0)?;
    let tail = tape.log(e)?;
    tape.add(linear, tail)
}

/// `Σ_ij log(1 + e^{Ω_ij}) − m_ij·Ω_ij` with `Ω = ½·B·Bᵀ`, for codes `[N, L]`
/// and a pair matrix `m` `[N, N]`.
pub fn pairwise_similarity_loss(tape: &mut Tape, codes: Var, m: &Tensor) -> Result<Var> {
    let shape = tape.shape(codes).to_vec();
    let [n, _] = shape[..] else {
        return Err(Error::Shape { op: "pairwise_similarity_loss", detail: format!("codes must be [N, L], got {shape:?}") });
    };
    if m.shape() != [n, n] {
        return Err(Error::Shape {
            op: "pairwise_similarity_loss",
            detail: format!("pair matrix {:?} for {n} codes", m.shape()),
        });
    }
    if let Some(i) = tape.data(codes).iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("code entry {i}")));
    }
    let bt = tape.permute(codes, &[1, 0])?;
    let g = tape.matmul(codes, bt)?;
    let omega = tape.scale(g, 0.5)?;
    let sp = softplus(tape, omega)?;
    let mv = tape.constant(m.clone());
    let pull = tape.mul(mv, omega)?;
    let per_pair = tape.sub(sp, pull)?;
    tape.sum_all(per_pair)
}

/// Natural log of the smallest probability the classification loss will
/// charge for.
pub const LOG_PROB_FLOOR: f32 = -27.631_021; // ln(1e-12)

/// Mean of `−log p[y]` over the batch from log probabilities `[B, K]`.
/// Returns the loss and how many rows were clamped at `p = 1e-12`.
pub fn classification_loss(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let shape = tape.shape(log_probs).to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::Shape { op: "classification_loss", detail: format!("expected [B, K], got {shape:?}") });
    };
    if labels.len() != b {
        return Err(Error::Shape { op: "classification_loss", detail: format!("{} labels for {b} rows", labels.len()) });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain { op: "classification_loss", detail: format!("label {y} with {k} classes") });
    }
    let lp = tape.data(log_probs);
    let mut pick = vec![0.0f32; b * k];
    let mut floor = vec![0.0f32; b];
    let mut clamped = 0;
    for (i, &y) in labels.iter().enumerate() {
        if lp[i * k + y] < LOG_PROB_FLOOR || lp[i * k + y].is_nan() {
            floor[i] = LOG_PROB_FLOOR;
            clamped += 1;
        } else {
            pick[i * k + y] = 1.0;
        }
    }
    let pick = tape.constant(Tensor::new(vec![b, k], pick)?);
    let floor = tape.constant(Tensor::new(vec![b], floor)?);
    let picked = tape.mul(log_probs, pick)?;
    let rows = tape.sum(picked, &[1], false)?;
    let rows = tape.add(rows, floor)?;
    let total = tape.sum_all(rows)?;
    Ok((tape.scale(total, -1.0 / b as f32)?, clamped))
}

/// `α·L_s + β·L_cls`.
pub fn total_loss(tape: &mut Tape, similarity: Var, classification: Var, alpha: f32, beta: f32) -> Result<Var> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got α={alpha}, β={beta}")));
    }
    let a = tape.scale(similarity, alpha)?;
    let b = tape.scale(classification, beta)?;
    tape.add(a, b)
}

/// Identity over `classes`: the label-only similarity.
pub fn hard_similarity(classes: usize) -> Tensor {
    Tensor::from_fn(&[classes, classes], |i| if i / classes == i % classes { 1.0 } else { 0.0 })
}

/// `λ·S_hard + (1 − λ)·S_soft`.
pub fn blend(hard: &Tensor, soft: &Tensor, lambda: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain { op: "blend", detail: format!("λ = {lambda} is outside [0, 1]") });
    }
    if hard.shape() != soft.shape() {
        return Err(Error::Shape { op: "blend", detail: format!("{:?} vs {:?}", hard.shape(), soft.shape()) });
    }
    let data = hard.data().iter().zip(soft.data()).map(|(&h, &s)| lambda * h + (1.0 - lambda) * s).collect();
    Tensor::new(hard.shape().to_vec(), data)
}

/// Pair matrix `M[i, j] = S[y_i, y_j]` for a batch.
pub fn expand_to_batch(s: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let c = s.shape()[0];
    if s.shape() != [c, c] {
        return Err(Error::Shape { op: "expand_to_batch", detail: format!("{:?} is not square", s.shape()) });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain { op: "expand_to_batch", detail: format!("label {y} with {c} classes") });
    }
    let n = labels.len();
    Ok(Tensor::from_fn(&[n, n], |i| s.data()[labels[i / n] * c + labels[i % n]]))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Running class-pair similarity of membrane potentials over one round,
/// and the matrix finalized at the end of the previous round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftSimilarity {
    pub classes: usize,
    pub tau: f32,
    sum: Vec<f64>,
    count: Vec<u64>,
    /// Pairs skipped because a potential vector was all zero.
    pub zero_norm_pairs: u64,
    soft: Vec<f32>,
}

impl SoftSimilarity {
    /// Starts from `S_soft = I`.
    pub fn new(classes: usize, tau: f32) -> Self {
        Self {
            classes,
            tau,
            sum: vec![0.0; classes * classes],
            count: vec![0; classes * classes],
            zero_norm_pairs: 0,
            soft: hard_similarity(classes).into_data(),
        }
    }

    /// Adds the cosine of every ordered pair `i ≠ j` of correctly
    /// classified rows of `potentials` `[N, L]`.
    pub fn accumulate(&mut self, potentials: &Tensor, labels: &[usize], predictions: &[usize]) -> Result<()> {
        let shape = potentials.shape();
        let n = labels.len();
        if shape.len() != 2 || shape[0] != n || predictions.len() != n {
            return Err(Error::Shape {
                op: "accumulate_soft",
                detail: format!("potentials {shape:?}, {n} labels, {} predictions", predictions.len()),
            });
        }
        if !potentials.is_finite() {
            return Err(Error::NonFinite("membrane potentials".into()));
        }
        if let Some(&y) = labels.iter().chain(predictions).find(|&&y| y >= self.classes) {
            return Err(Error::Domain { op: "accumulate_soft", detail: format!("class {y} of {}", self.classes) });
        }
        let l = shape[1];
        let row = |i: usize| &potentials.data()[i * l..(i + 1) * l];
        let correct: Vec<usize> = (0..n).filter(|&i| labels[i] == predictions[i]).collect();
        // Each unordered pair is added to both cells in the same order, so
        // the accumulators stay exactly symmetric.
        for (a, &i) in correct.iter().enumerate() {
            for &j in &correct[a + 1..] {
                match cosine(row(i), row(j)) {
                    Some(r) => {
                        for cell in [labels[i] * self.classes + labels[j], labels[j] * self.classes + labels[i]] {
                            self.sum[cell] += r;
                            self.count[cell] += 1;
                        }
                    }
                    None => self.zero_norm_pairs += 2,
                }
            }
        }
        Ok(())
    }

    /// Accumulated `(Σ r, K)` of a class pair in the open round.
    pub fn pending(&self, a: usize, b: usize) -> (f64, u64) {
        let cell = a * self.classes + b;
        (self.sum[cell], self.count[cell])
    }

    /// Closes the round: averages, drops entries at or below `τ`, sets the
    /// diagonal to 1 and clears the accumulators.
    pub fn finalize(&mut self) {
        let c = self.classes;
        for i in 0..c * c {
            let mean = if self.count[i] > 0 { (self.sum[i] / self.count[i] as f64) as f32 } else { 0.0 };
            self.soft[i] = if i / c == i % c {
                1.0
            } else if mean > self.tau {
                mean
            } else {
                0.0
            };
        }
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.count.iter_mut().for_each(|v| *v = 0);
    }

    /// The finalized `S_soft` `[C, C]`.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(vec![self.classes; 2], self.soft.clone()).expect("square storage")
    }

    /// `S_soft` as nested rows, for export.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<&[f32]> = self.soft.chunks(self.classes).collect();
        serde_json::json!({ "classes": self.classes, "tau": self.tau, "s_soft": rows })
    }
}

/// Rounds over which the soft matrix is accumulated: a hard-label initial
/// round, fixed-length rounds after it, and one round per epoch over the
/// last `final_per_epoch` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundSchedule {
    pub total_epochs: usize,
    pub initial_round: usize,
    pub round_length: usize,
    pub final_per_epoch: usize,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        Self { total_epochs: 40, initial_round: 10, round_length: 5, final_per_epoch: 5 }
    }
}

/// What an epoch does under a [`RoundSchedule`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundStep {
    /// Supervise with the blended matrix rather than labels alone.
    pub use_soft: bool,
    /// Finalize the soft matrix when the epoch ends.
    pub finalize_now: bool,
    pub lambda: f32,
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.round_length == 0 {
            return Err(Error::Config("round schedule needs at least one epoch and a positive round length".into()));
        }
        if self.initial_round > self.total_epochs {
            return Err(Error::Config(format!(
                "initial round of {} epochs exceeds {} total",
                self.initial_round, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn step(&self, epoch: usize) -> Result<RoundStep> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::Domain { op: "round_schedule", detail: format!("epoch {epoch} of {}", self.total_epochs) });
        }
        let last = self.total_epochs - 1;
        let end = epoch + 1;
        let finalize_now = end == self.initial_round
            || epoch + self.final_per_epoch >= self.total_epochs
            || (end > self.initial_round && (end - self.initial_round).is_multiple_of(self.round_length));
        if epoch < self.initial_round {
            return Ok(RoundStep { use_soft: false, finalize_now, lambda: 1.0 });
        }
        let span = last - self.initial_round;
        let lambda = if span == 0 { 0.0 } else { 1.0 - (epoch - self.initial_round) as f32 / span as f32 };
        Ok(RoundStep { use_soft: true, finalize_now, lambda })
    }
}
