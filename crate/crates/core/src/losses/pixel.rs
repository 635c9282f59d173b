use crate::numerics::{Element, Tape, Tensor, Var};
use crate::vit::{check_masks, MaskSpec};
use crate::{Error, Result};

/// Mean squared error between `g_p(f_dl)` and `f_dh` over items, tokens and
/// features. With `stop_grad_target` the target is cut from the graph.
pub fn cross_prediction_loss<T: Element>(
    tape: &Tape<T>,
    f_dl: Var,
    f_dh: Var,
    predictor: impl Fn(Var) -> Result<Var>,
    stop_grad_target: bool,
) -> Result<Var> {
    let (sl, sh) = (tape.shape(f_dl), tape.shape(f_dh));
    if sl != sh {
        return Err(Error::Consistency(format!(
            "decoder token shapes differ: {sl:?} vs {sh:?}"
        )));
    }
    let pred = predictor(f_dl)?;
    let target = if stop_grad_target {
        tape.detach(f_dh)
    } else {
        f_dh
    };
    tape.mse(pred, target)
}

/// InfoNCE between predicted and target decoder sequences flattened per
/// item: the prediction for item `k` must pick out target `k` among all `N`
/// targets.
pub fn cross_prediction_contrastive<T: Element>(
    tape: &Tape<T>,
    f_dl: Var,
    f_dh: Var,
    predictor: impl Fn(Var) -> Result<Var>,
    stop_grad_target: bool,
    tau: f64,
) -> Result<Var> {
    let (sl, sh) = (tape.shape(f_dl), tape.shape(f_dh));
    if sl != sh || sl.len() != 3 {
        return Err(Error::Consistency(format!(
            "decoder token shapes differ: {sl:?} vs {sh:?}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    let n = sl[0];
    let flat = sl[1] * sl[2];
    let pred = predictor(f_dl)?;
    let target = if stop_grad_target {
        tape.detach(f_dh)
    } else {
        f_dh
    };
    let p = tape.l2_normalize(tape.reshape(pred, &[n, flat])?)?;
    let t = tape.l2_normalize(tape.reshape(target, &[n, flat])?)?;
    let s = tape.matmul(p, tape.transpose(t)?)?;
    let s = tape.scale(s, T::of(1.0 / tau));
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(s, &targets, None)
}

/// Per-pixel mean squared error of one branch's patch predictions
/// `[B, |S|, n*n*C]` against the patchified view. With `masked_only` just
/// the masked patches count, and an empty mask contributes exactly zero.
pub fn branch_reconstruction<T: Element>(
    tape: &Tape<T>,
    pixels: Var,
    target: &Tensor<T>,
    masks: &[MaskSpec],
    masked_only: bool,
) -> Result<Var> {
    let sp = tape.shape(pixels);
    if sp != target.shape() || sp.len() != 3 {
        return Err(Error::shape("reconstruction", &sp, target.shape()));
    }
    if masks.len() != sp[0] {
        return Err(Error::Consistency(format!(
            "{} masks for a batch of {}",
            masks.len(),
            sp[0]
        )));
    }
    let target = tape.constant(target.clone());
    if !masked_only {
        return tape.mse(pixels, target);
    }
    check_masks(masks, sp[1])?;
    if masks[0].masked().is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let idx: Vec<Vec<usize>> = masks.iter().map(|m| m.masked().to_vec()).collect();
    let p = tape.gather_tokens(pixels, &idx)?;
    let t = tape.gather_tokens(target, &idx)?;
    tape.mse(p, t)
}
