//! Training objectives: binary cross entropy, focal loss, its per-pixel
//! multiclass variant, class-weighted soft Dice, and weighted combinations.
//!
//! All losses clamp probabilities to `[1e-7, 1 − 1e-7]` before any logarithm
//! and return scalar tensors that participate in the gradient tape.

use serde::{Deserialize, Serialize};

use crate::ndtensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing of both the soft-Dice numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

/// Focusing and class-weighting parameters of the focal loss.
///
/// `alpha` holds one weight per class; a single entry broadcasts to all
/// classes. The default is uniform 1, which makes `gamma = 0` reduce the
/// focal loss exactly to cross entropy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
}

fn default_alpha() -> Vec<f64> {
    vec![1.0]
}

impl FocalParams {
    pub fn uniform(gamma: f64) -> Self {
        FocalParams { gamma, alpha: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return Err(Error::Config(format!("focal alpha must be > 0, got {:?}", self.alpha)));
        }
        Ok(())
    }

    fn alpha_for(&self, class: usize) -> Result<f64> {
        if self.alpha.len() == 1 {
            Ok(self.alpha[0])
        } else {
            self.alpha.get(class).copied().ok_or_else(|| {
                Error::Config(format!(
                    "focal alpha has {} entries, class {class} requested",
                    self.alpha.len()
                ))
            })
        }
    }
}

fn check_binary_inputs<S: Scalar>(p: &Tensor<S>, y: &[u8]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            p.len(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("binary label {bad} is not in {{0,1}}")));
    }
    Ok(())
}

fn clamp_probs<S: Scalar>(p: &Tensor<S>) -> Tensor<S> {
    p.clamp(S::from_f64(PROB_EPS), S::from_f64(1.0 - PROB_EPS))
}

/// Binary cross entropy `−[y·ln p + (1−y)·ln(1−p)]`, mean over the batch.
pub fn bce_binary<S: Scalar>(p: &Tensor<S>, y: &[u8]) -> Result<Tensor<S>> {
    check_binary_inputs(p, y)?;
    let pc = clamp_probs(p);
    let yt = Tensor::from_vec(y.iter().map(|&v| S::from_f64(f64::from(v))).collect(), p.shape())?;
    let one_minus_y = yt.neg().add_scalar(S::one());
    let one_minus_p = pc.neg().add_scalar(S::one());
    let ll = yt.mul(&pc.ln())?.add(&one_minus_y.mul(&one_minus_p.ln())?)?;
    Ok(ll.mean_all().neg())
}

/// Focal loss `−α_t (1−p_t)^γ ln(p_t)` with `p_t = p` for `y = 1` and `1−p`
/// otherwise; mean over the batch. `γ = 0` with unit `α` reduces it to BCE.
pub fn focal_binary<S: Scalar>(p: &Tensor<S>, y: &[u8], params: &FocalParams) -> Result<Tensor<S>> {
    check_binary_inputs(p, y)?;
    params.validate()?;
    let pc = clamp_probs(p);
    let yt = Tensor::from_vec(y.iter().map(|&v| S::from_f64(f64::from(v))).collect(), p.shape())?;
    let one_minus_y = yt.neg().add_scalar(S::one());
    let one_minus_p = pc.neg().add_scalar(S::one());
    // p_t = y*p + (1-y)*(1-p)
    let pt = yt.mul(&pc)?.add(&one_minus_y.mul(&one_minus_p)?)?;
    let mut alpha = Vec::with_capacity(y.len());
    for &yv in y {
        alpha.push(S::from_f64(params.alpha_for(usize::from(yv))?));
    }
    let at = Tensor::from_vec(alpha, p.shape())?;
    let focus = pt.neg().add_scalar(S::one()).powf(params.gamma);
    let loss = at.mul(&focus)?.mul(&pt.ln())?;
    Ok(loss.mean_all().neg())
}

fn check_map_inputs<S: Scalar>(probs: &Tensor<S>, mask: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = match probs.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::Shape(format!(
                "per-pixel loss expects N×C×H×W probabilities, got {other:?}"
            )))
        }
    };
    if mask.len() != n * h * w {
        return Err(Error::Shape(format!(
            "mask has {} pixels, probabilities have {}",
            mask.len(),
            n * h * w
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&v| usize::from(v) >= c) {
        return Err(Error::Validation(format!("mask class {bad} out of range for {c} channels")));
    }
    Ok((n, c, h, w))
}

/// Per-pixel multiclass focal loss over a categorical probability map,
/// averaged over all pixels of the batch. `γ = 0` with unit `α` reduces it
/// to per-pixel categorical cross entropy.
pub fn focal_map<S: Scalar>(probs: &Tensor<S>, mask: &[u8], params: &FocalParams) -> Result<Tensor<S>> {
    check_map_inputs(probs, mask)?;
    params.validate()?;
    let pt = clamp_probs(&probs.gather_channel(mask)?);
    let mut alpha = Vec::with_capacity(mask.len());
    for &cls in mask {
        alpha.push(S::from_f64(params.alpha_for(usize::from(cls))?));
    }
    let at = Tensor::from_vec(alpha, pt.shape())?;
    let focus = pt.neg().add_scalar(S::one()).powf(params.gamma);
    let loss = at.mul(&focus)?.mul(&pt.ln())?;
    Ok(loss.mean_all().neg())
}

/// Per-pixel binary cross entropy of every channel against the one-hot mask,
/// averaged over all channel-pixels of the batch.
pub fn bce_map<S: Scalar>(probs: &Tensor<S>, mask: &[u8]) -> Result<Tensor<S>> {
    let (n, c, h, w) = check_map_inputs(probs, mask)?;
    let pix = h * w;
    let mut onehot = vec![0u8; n * c * pix];
    for ni in 0..n {
        for p in 0..pix {
            let cls = usize::from(mask[ni * pix + p]);
            onehot[(ni * c + cls) * pix + p] = 1;
        }
    }
    bce_binary(probs, &onehot)
}

/// Class-weighted soft Dice loss.
///
/// Per class `c`: `d_c = (2·Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)` with `g`
/// the one-hot ground truth; the loss is `Σ w_c (1−d_c) / Σ w_c`. A class
/// with no mass in either the prediction or the ground truth is skipped
/// entirely (its soft Dice is 1 by the ε convention); softmax inputs give
/// every class mass, so in training all classes always participate.
pub fn dice_weighted<S: Scalar>(probs: &Tensor<S>, mask: &[u8], weights: &[f64]) -> Result<Tensor<S>> {
    let (n, c, h, w) = check_map_inputs(probs, mask)?;
    if weights.len() != c {
        return Err(Error::Config(format!(
            "dice weights: {} entries for {c} classes",
            weights.len()
        )));
    }
    if weights.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Config(format!("dice weights must be > 0, got {weights:?}")));
    }
    let pix = h * w;
    let eps = S::from_f64(DICE_EPS);
    let mut loss: Option<Tensor<S>> = None;
    let mut weight_sum = 0.0;
    for ci in 0..c {
        let mut hot = vec![S::zero(); probs.len()];
        let mut select = vec![S::zero(); probs.len()];
        let mut gsum = 0u64;
        for ni in 0..n {
            for p in 0..pix {
                let idx = (ni * c + ci) * pix + p;
                select[idx] = S::one();
                if usize::from(mask[ni * pix + p]) == ci {
                    hot[idx] = S::one();
                    gsum += 1;
                }
            }
        }
        let hot = Tensor::from_vec(hot, probs.shape())?;
        let select = Tensor::from_vec(select, probs.shape())?;
        let inter = probs.mul(&hot)?.sum_all();
        let psum = probs.mul(&select)?.sum_all();
        if gsum == 0 && psum.item()? <= S::zero() {
            continue;
        }
        weight_sum += weights[ci];
        let num = inter.mul_scalar(S::from_f64(2.0)).add_scalar(eps);
        let den = psum.add_scalar(S::from_f64(gsum as f64) + eps);
        let dice = num.div(&den)?;
        let term = dice.neg().add_scalar(S::one()).mul_scalar(S::from_f64(weights[ci]));
        loss = Some(match loss {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Validation("dice_weighted: no class present".into()))?;
    Ok(loss.mul_scalar(S::from_f64(1.0 / weight_sum)))
}

/// Inverse-class-frequency weights from pixel frequencies, normalized to mean
/// 1. A class absent from the corpus gets the largest present-class weight.
pub fn weights_from_frequencies(freqs: &[f64; 4]) -> Result<[f64; 4]> {
    if freqs.iter().any(|&f| f < 0.0 || !f.is_finite()) {
        return Err(Error::Config(format!("class frequencies must be >= 0, got {freqs:?}")));
    }
    if freqs.iter().all(|&f| f == 0.0) {
        return Err(Error::Validation("all class frequencies are zero".into()));
    }
    let mut raw = [0.0f64; 4];
    let mut max_present = 0.0f64;
    for (r, &f) in raw.iter_mut().zip(freqs) {
        if f > 0.0 {
            *r = 1.0 / f;
            max_present = max_present.max(*r);
        }
    }
    for r in raw.iter_mut() {
        if *r == 0.0 {
            *r = max_present;
        }
    }
    let mean = raw.iter().sum::<f64>() / 4.0;
    Ok([raw[0] / mean, raw[1] / mean, raw[2] / mean, raw[3] / mean])
}

/// Inverse-class-frequency weights tallied over a set of masks.
pub fn inverse_frequency_weights<'a, I>(masks: I) -> Result<[f64; 4]>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = [0u64; 4];
    let mut total = 0u64;
    for m in masks {
        for &v in m {
            let idx = usize::from(v);
            if idx >= 4 {
                return Err(Error::Validation(format!("mask class {v} out of range")));
            }
            counts[idx] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("inverse_frequency_weights: no pixels".into()));
    }
    let freqs = [
        counts[0] as f64 / total as f64,
        counts[1] as f64 / total as f64,
        counts[2] as f64 / total as f64,
        counts[3] as f64 / total as f64,
    ];
    weights_from_frequencies(&freqs)
}

/// One member of a weighted loss combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Focal,
    DiceWeighted,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
}

/// A weighted combination of loss terms plus the parameters the terms need.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    #[serde(default = "default_focal")]
    pub focal: FocalParams,
    #[serde(default = "default_dice_weights")]
    pub dice_weights: [f64; 4],
}

fn default_focal() -> FocalParams {
    FocalParams::uniform(2.0)
}

fn default_dice_weights() -> [f64; 4] {
    [1.0, 1.0, 1.0, 1.0]
}

impl LossSpec {
    pub fn single(kind: LossKind) -> Self {
        LossSpec {
            terms: vec![LossTerm { kind, weight: 1.0 }],
            focal: default_focal(),
            dice_weights: default_dice_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("loss spec needs at least one term".into()));
        }
        if self.terms.iter().any(|t| t.weight <= 0.0 || !t.weight.is_finite()) {
            return Err(Error::Config("loss term weights must be > 0".into()));
        }
        self.focal.validate()?;
        if self.dice_weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config("dice weights must be > 0".into()));
        }
        Ok(())
    }

    pub fn has_focal_term(&self) -> bool {
        self.terms.iter().any(|t| t.kind == LossKind::Focal)
    }
}

/// Predictions paired with their targets for [`combine`].
pub enum Predictions<'a, S: Scalar> {
    /// Binary classification: per-sample probabilities and 0/1 labels.
    Binary { p: &'a Tensor<S>, y: &'a [u8] },
    /// Segmentation: per-pixel categorical probabilities and a class mask.
    Segmentation { probs: &'a Tensor<S>, mask: &'a [u8] },
}

/// Evaluate `Σ weight_i · loss_i` for a [`LossSpec`].
///
/// Term kinds must match the prediction kind: `dice_weighted` only applies to
/// segmentation outputs.
pub fn combine<S: Scalar>(spec: &LossSpec, pred: &Predictions<'_, S>) -> Result<Tensor<S>> {
    spec.validate()?;
    let mut total: Option<Tensor<S>> = None;
    for term in &spec.terms {
        let value = match (term.kind, pred) {
            (LossKind::Bce, Predictions::Binary { p, y }) => bce_binary(p, y)?,
            (LossKind::Focal, Predictions::Binary { p, y }) => focal_binary(p, y, &spec.focal)?,
            (LossKind::Bce, Predictions::Segmentation { probs, mask }) => bce_map(probs, mask)?,
            (LossKind::Focal, Predictions::Segmentation { probs, mask }) => {
                focal_map(probs, mask, &spec.focal)?
            }
            (LossKind::DiceWeighted, Predictions::Segmentation { probs, mask }) => {
                dice_weighted(probs, mask, &spec.dice_weights)?
            }
            (LossKind::DiceWeighted, Predictions::Binary { .. }) => {
                return Err(Error::Config(
                    "dice_weighted term does not apply to binary classification".into(),
                ))
            }
        };
        let weighted = value.mul_scalar(S::from_f64(term.weight));
        total = Some(match total {
            None => weighted,
            Some(acc) => acc.add(&weighted)?,
        });
    }
    Ok(total.expect("validated spec has at least one term"))
}
