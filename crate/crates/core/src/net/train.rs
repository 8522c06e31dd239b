//! Loss evaluation on cascade logits and the gradient step.

use rand::Rng;

use super::model::{CascadeModel, CascadeTrace};
use super::optim::OptimizerState;
use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};
use crate::hierarchy::contains_mvo;
use crate::loss::{cascade_loss, softmax_channels, CascadeLossConfig};
use crate::volume::{Geometry, LabelVolume, ProbKind, ProbVolume};

/// Logits of a single-item batch as a [`ProbVolume`] on `geom`.
pub fn logits_to_volume<T: Real>(t: &Tensor5<T>, geom: Geometry) -> Result<ProbVolume> {
    if t.batch() != 1 || t.spatial() != geom.dims {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} do not match grid {:?}",
            t.shape(),
            geom.dims
        )));
    }
    ProbVolume::new(geom, t.channels(), ProbKind::Logits, t.data().iter().map(|v| v.as_f64()).collect())
}

/// Below this magnitude a logit gradient is stored as zero; keeps f32
/// back-propagation out of the (very slow) subnormal range.
const GRAD_FLOOR: f64 = 1e-30;

/// Pulls a gradient on softmax probabilities back to the logits:
/// `dz_k = q_k (g_k − Σ_j q_j g_j)`.
pub fn softmax_backward<T: Real>(q: &ProbVolume, g: &ProbVolume) -> Tensor5<T> {
    let k = q.channels();
    let n = q.nvox();
    let [nx, ny, nz] = q.geometry().dims;
    let mut out = vec![T::zero(); k * n];
    for v in 0..n {
        let dot: f64 = (0..k).map(|c| q.at(c, v) * g.at(c, v)).sum();
        for c in 0..k {
            let d = q.at(c, v) * (g.at(c, v) - dot);
            out[c * n + v] = if d.abs() < GRAD_FLOOR { T::zero() } else { T::from_f64(d) };
        }
    }
    Tensor5::from_vec([1, k, nx, ny, nz], out).expect("shape matches by construction")
}

/// One forward pass with its loss and logit gradients, ready for
/// [`backward_and_step`].
#[derive(Debug, Clone)]
pub struct SampleTape<T> {
    trace: CascadeTrace<T>,
    dlogits: [Option<Tensor5<T>>; 3],
    pub total: f64,
    pub per_stage: [f64; 3],
    pub delta_mvo: bool,
}

/// Forwards one sample and evaluates the gated cascade objective.
///
/// Stage 3 is only run for samples whose labels contain MVO.
pub fn record_sample<T: Real, R: Rng + ?Sized>(
    model: &CascadeModel<T>,
    x: &Tensor5<T>,
    y: &LabelVolume,
    cfg: &CascadeLossConfig,
    training: bool,
    rng: &mut R,
) -> Result<SampleTape<T>> {
    let geom = *y.geometry();
    let delta = contains_mvo(y);
    let (out, trace) = model.forward_traced(x, training, delta, rng)?;
    let q1 = softmax_channels(&logits_to_volume(&out.p1, geom)?);
    let q2 = softmax_channels(&logits_to_volume(&out.p2, geom)?);
    let q3 = match &out.p3 {
        Some(p) => Some(softmax_channels(&logits_to_volume(p, geom)?)),
        None => None,
    };
    let loss = cascade_loss(y, &q1, &q2, q3.as_ref(), cfg)?;
    let qs = [Some(&q1), Some(&q2), q3.as_ref()];
    let mut dlogits: [Option<Tensor5<T>>; 3] = [None, None, None];
    for (i, g) in loss.grads.iter().enumerate() {
        if let (Some(g), Some(q)) = (g, qs[i]) {
            dlogits[i] = Some(softmax_backward(q, g));
        }
    }
    Ok(SampleTape {
        trace,
        dlogits,
        total: loss.total,
        per_stage: loss.per_stage,
        delta_mvo: loss.delta_mvo,
    })
}

/// Gradient of the batch-mean objective with respect to every parameter.
pub fn accumulate_gradients<T: Real>(model: &CascadeModel<T>, batch: &[SampleTape<T>]) -> Result<CascadeModel<T>> {
    if batch.is_empty() {
        return Err(Error::NoRecordedForward);
    }
    let mut grads = model.zeros_like();
    for tape in batch {
        let [g1, g2, g3] = &tape.dlogits;
        let (Some(g1), Some(g2)) = (g1, g2) else {
            return Err(Error::NoRecordedForward);
        };
        model.backward(Some(&tape.trace), g1, g2, g3.as_ref(), &mut grads)?;
    }
    let scale = T::from_f64(1.0 / batch.len() as f64);
    for t in grads.tensors_mut() {
        for v in t {
            *v *= scale;
        }
    }
    Ok(grads)
}

/// Back-propagates the batch-mean loss, applies Adam and updates the EMA.
pub fn backward_and_step<T: Real>(
    model: &mut CascadeModel<T>,
    opt: &mut OptimizerState<T>,
    batch: &[SampleTape<T>],
) -> Result<()> {
    let grads = accumulate_gradients(model, batch)?;
    opt.step(model, &grads);
    Ok(())
}
