//! Softmax, weighted generalized Dice and the gated three-stage objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{collapse_to_stage, contains_mvo, LabelSchema};
use crate::volume::{one_hot, LabelVolume, ProbKind, ProbVolume};

/// How per-label weights are derived from the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_k = M_k / M`
    #[default]
    Paper,
    /// `w_k = 1 / (M_k^p + ε)`
    InversePower(f64),
    /// `w_k = 1 / (M_k² + ε)`
    InverseSquare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights {
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeLossConfig {
    pub lambdas: [f64; 3],
    pub epsilon: f64,
    pub weighting: Weighting,
}

impl Default for CascadeLossConfig {
    fn default() -> Self {
        CascadeLossConfig {
            lambdas: [1.0; 3],
            epsilon: 1e-7,
            weighting: Weighting::Paper,
        }
    }
}

impl CascadeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config(format!("negative stage weight in {:?}", self.lambdas)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Weighting::InversePower(p) = self.weighting {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Config(format!("weighting exponent must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

/// Numerically stable per-voxel softmax over channels.
pub fn softmax_channels(p: &ProbVolume) -> ProbVolume {
    let n = p.nvox();
    let k = p.channels();
    let src = p.data();
    let mut out = vec![0.0; k * n];
    for v in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..k {
            mx = mx.max(src[c * n + v]);
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = (src[c * n + v] - mx).exp();
            out[c * n + v] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * n + v] /= sum;
        }
    }
    let mut q = ProbVolume::new(*p.geometry(), k, ProbKind::Probs, out).expect("same shape");
    if let Some(s) = p.schema() {
        q = q.with_schema(s);
    }
    q
}

/// Label frequencies `M_k / M` of a one-hot volume.
pub fn label_weights(y_onehot: &ProbVolume) -> LabelWeights {
    label_weights_with(y_onehot, Weighting::Paper, 1e-7)
}

pub fn label_weights_with(y_onehot: &ProbVolume, weighting: Weighting, eps: f64) -> LabelWeights {
    let m = y_onehot.nvox() as f64;
    let w = (0..y_onehot.channels())
        .map(|c| {
            let mk: f64 = y_onehot.channel(c).iter().sum();
            match weighting {
                Weighting::Paper => mk / m,
                Weighting::InversePower(p) => 1.0 / (mk.powf(p) + eps),
                Weighting::InverseSquare => 1.0 / (mk * mk + eps),
            }
        })
        .collect();
    LabelWeights { w }
}

#[derive(Debug, Clone)]
pub struct DiceOutput {
    pub loss: f64,
    /// d loss / d ŷ, same layout as ŷ.
    pub grad: ProbVolume,
}

/// Weighted generalized Dice loss and its gradient with respect to `yhat`.
///
/// `loss = 1 − 2 Σ_k w_k Σ_m ŷ_mk y_mk / (Σ_k w_k Σ_m (ŷ_mk² + y_mk) + ε)`
pub fn generalized_dice(y: &ProbVolume, yhat: &ProbVolume, eps: f64) -> Result<DiceOutput> {
    generalized_dice_with(y, yhat, eps, Weighting::Paper)
}

pub fn generalized_dice_with(
    y: &ProbVolume,
    yhat: &ProbVolume,
    eps: f64,
    weighting: Weighting,
) -> Result<DiceOutput> {
    y.geometry().ensure_same(yhat.geometry())?;
    if y.channels() != yhat.channels() {
        return Err(Error::GeometryMismatch(format!(
            "{} vs {} channels",
            y.channels(),
            yhat.channels()
        )));
    }
    if yhat.kind() != ProbKind::Probs {
        return Err(Error::NotProbabilities);
    }
    let weights = label_weights_with(y, weighting, eps);
    let mut num = 0.0;
    let mut den = eps;
    for (c, &w) in weights.w.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (mut inter, mut sq) = (0.0, 0.0);
        for (&t, &q) in y.channel(c).iter().zip(yhat.channel(c)) {
            inter += q * t;
            sq += q * q + t;
        }
        num += w * inter;
        den += w * sq;
    }
    let loss = 1.0 - 2.0 * num / den;

    let mut grad = ProbVolume::zeros(*yhat.geometry(), yhat.channels(), ProbKind::Probs);
    let d2 = den * den;
    for (c, &w) in weights.w.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = grad.channel_mut(c);
        for ((gv, &t), &q) in g.iter_mut().zip(y.channel(c)).zip(yhat.channel(c)) {
            *gv = -2.0 * w * (t * den - 2.0 * num * q) / d2;
        }
    }
    Ok(DiceOutput { loss, grad })
}

/// Gated three-stage objective for one sample.
#[derive(Debug, Clone)]
pub struct CascadeLoss {
    pub total: f64,
    /// Unweighted stage losses; stage 3 is 0 when no stage-3 prediction was given.
    pub per_stage: [f64; 3],
    pub delta_mvo: bool,
    /// d total / d ŷ_i, already scaled by λ_i (and δ for stage 3).
    /// Stage 3 is `None` when the term is gated off.
    pub grads: [Option<ProbVolume>; 3],
}

/// `λ1·L(y1, ŷ1) + λ2·L(y2, ŷ2) + δ_MVO·λ3·L(y, ŷ3)`.
///
/// `yhat3` may be `None` for samples without MVO, which are not forwarded
/// through stage 3.
pub fn cascade_loss(
    y: &LabelVolume,
    yhat1: &ProbVolume,
    yhat2: &ProbVolume,
    yhat3: Option<&ProbVolume>,
    cfg: &CascadeLossConfig,
) -> Result<CascadeLoss> {
    if y.schema() != LabelSchema::Stage3 {
        return Err(Error::SchemaMismatch("ground truth must use the stage-3 schema".into()));
    }
    let delta = contains_mvo(y);
    let preds = [Some(yhat1), Some(yhat2), yhat3];
    for (i, p) in preds.iter().enumerate() {
        if let Some(p) = p {
            let k = LabelSchema::for_stage(i + 1).unwrap().num_labels();
            if p.channels() != k {
                return Err(Error::SchemaMismatch(format!(
                    "stage {} prediction has {} channels, expected {k}",
                    i + 1,
                    p.channels()
                )));
            }
        }
    }
    if delta && yhat3.is_none() {
        return Err(Error::SchemaMismatch(
            "sample contains MVO but no stage-3 prediction was given".into(),
        ));
    }

    let mut total = 0.0;
    let mut per_stage = [0.0; 3];
    let mut grads: [Option<ProbVolume>; 3] = [None, None, None];
    for (i, pred) in preds.iter().enumerate() {
        let Some(pred) = pred else { continue };
        let stage = i + 1;
        let target = collapse_to_stage(y, stage)?;
        let target = one_hot(&target, LabelSchema::for_stage(stage).unwrap().num_labels())?;
        let out = generalized_dice_with(&target, pred, cfg.epsilon, cfg.weighting)?;
        per_stage[i] = out.loss;
        let gate = if stage == 3 && !delta { 0.0 } else { 1.0 };
        if gate == 0.0 {
            continue;
        }
        let scale = cfg.lambdas[i];
        total += scale * out.loss;
        let mut g = out.grad;
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
        grads[i] = Some(g);
    }
    Ok(CascadeLoss {
        total,
        per_stage,
        delta_mvo: delta,
        grads,
    })
}
