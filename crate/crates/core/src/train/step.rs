use super::config::{LossConfig, TrainConfig};
use crate::augment::{make_scaled_pair, stack, Dataset};
use crate::losses::{
    branch_reconstruction, cross_consistency_loss, cross_prediction_contrastive,
    cross_prediction_loss, positive_only_distance, total_loss, LossReport, LossTerms,
};
use crate::numerics::{Element, Streams, Tensor, Var};
use crate::vit::{patchify, BoundModel, MaskSpec};
use crate::{par, Error, Result};

/// One scale branch of a batch.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    /// `[B, H, W, C]`
    pub images: Tensor<T>,
    /// Patchified `images`, `[B, |S|, n*n*C]`.
    pub targets: Tensor<T>,
    pub masks: Vec<MaskSpec>,
    pub gsd: Vec<f64>,
    pub ratios: Vec<f64>,
}

/// The high-ratio branch and, for multi-scale runs, the low-ratio branch.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub high: Branch<T>,
    pub low: Option<Branch<T>>,
}

const HIGH: u64 = 0;
const LOW: u64 = 1;

/// Zero mean, unit variance per patch (`ε = 1e-6` under the root).
pub fn standardise_patches<T: Element>(patches: &Tensor<T>) -> Tensor<T> {
    let pd = *patches.shape().last().expect("rank-3 patches");
    let data = patches
        .data()
        .chunks(pd)
        .flat_map(|p| {
            let n = p.len() as f64;
            let mean = p.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = p.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            p.iter().map(move |v| T::of((v.f64() - mean) * inv))
        })
        .collect();
    Tensor::new(patches.shape().to_vec(), data).expect("same shape")
}

/// Augment and mask the images `idx` of `data` for optimizer step `step`.
/// Item `i` draws its ratios and crops from `("scale", step, i)` and its
/// masks from `("mask", step, i, branch)`, whatever the loss flags are.
pub fn assemble_batch<T: Element>(
    data: &Dataset,
    idx: &[usize],
    step: u64,
    cfg: &TrainConfig,
    streams: &Streams,
) -> Result<PairBatch<T>> {
    if idx.is_empty() {
        return Err(Error::EmptyAxis("batch"));
    }
    let scale = cfg.scale_config();
    let model = &cfg.model;
    let s = model.num_patches();
    let pairs = par::map_indexed(idx.len(), |i| {
        let mut r = streams.stream("scale", &[step, i as u64]);
        let img: Tensor<T> = data.images[idx[i]].cast();
        make_scaled_pair(&img, data.gsd[idx[i]], &scale, &mut r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mask = |i: usize, branch: u64| {
        let b = if cfg.shared_mask { HIGH } else { branch };
        let mut r = streams.stream("mask", &[step, i as u64, b]);
        MaskSpec::sample(s, cfg.mask_ratio, &mut r)
    };
    let branch = |views: Vec<Tensor<T>>, gsd: Vec<f64>, ratios: Vec<f64>, which: u64| {
        let images = stack(&views)?;
        let mut targets = patchify(&images, model.encoder.patch_size)?.patches;
        if cfg.losses.norm_pix {
            targets = standardise_patches(&targets);
        }
        let masks = (0..views.len())
            .map(|i| mask(i, which))
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(Branch {
            images,
            targets,
            masks,
            gsd,
            ratios,
        })
    };
    let high = branch(
        pairs.iter().map(|p| p.p_h.clone()).collect(),
        pairs.iter().map(|p| p.g_h).collect(),
        pairs.iter().map(|p| p.r_h).collect(),
        HIGH,
    )?;
    let low = if cfg.losses.multi_scale {
        Some(branch(
            pairs.iter().map(|p| p.p_l.clone()).collect(),
            pairs.iter().map(|p| p.g_l).collect(),
            pairs.iter().map(|p| p.r_l).collect(),
            LOW,
        )?)
    } else {
        None
    };
    Ok(PairBatch { high, low })
}

struct BranchOut {
    pooled: Var,
    tokens: Option<Var>,
    recon: Option<Var>,
}

fn run_branch<T: Element>(
    model: &BoundModel<'_, T>,
    b: &Branch<T>,
    losses: &LossConfig,
    need_decoder: bool,
) -> Result<BranchOut> {
    let tape = model.tape();
    let enc = model.encode(&b.images, &b.masks, Some(&b.gsd))?;
    if !need_decoder {
        return Ok(BranchOut {
            pooled: enc.pooled,
            tokens: None,
            recon: None,
        });
    }
    let dec = model.decode(&enc, &b.masks, Some(&b.gsd))?;
    let recon = if losses.reconstruction {
        Some(branch_reconstruction(
            tape,
            dec.pixels,
            &b.targets,
            &b.masks,
            losses.masked_only,
        )?)
    } else {
        None
    };
    Ok(BranchOut {
        pooled: enc.pooled,
        tokens: Some(dec.patch_tokens),
        recon,
    })
}

/// Total loss of one batch with both branches read from the same bound
/// parameters.
pub fn batch_loss<T: Element>(
    model: &BoundModel<'_, T>,
    batch: &PairBatch<T>,
    losses: &LossConfig,
) -> Result<(Var, LossReport)> {
    let l = losses.effective();
    l.validate()?;
    let tape = model.tape();
    let need_decoder = l.reconstruction || l.cross_pred;
    let high = run_branch(model, &batch.high, &l, need_decoder)?;
    let low = match &batch.low {
        Some(b) => Some(run_branch(model, b, &l, need_decoder)?),
        None if l.multi_scale => {
            return Err(Error::Consistency(
                "multi-scale loss without a low branch".into(),
            ))
        }
        None => None,
    };
    let mut terms = LossTerms::default();
    if let Some(low) = &low {
        if l.cross_consis {
            let z_l = model.project(low.pooled)?;
            let z_h = model.project(high.pooled)?;
            terms.cc = Some(if l.negatives_encoder {
                cross_consistency_loss(tape, z_l, z_h, l.tau, l.candidates)?
            } else {
                positive_only_distance(tape, z_l, z_h)?
            });
        }
        if l.cross_pred {
            let (f_dl, f_dh) = (low.tokens.expect("decoded"), high.tokens.expect("decoded"));
            let predict = |x| model.predict(x);
            let one = |src, dst| {
                if l.negatives_decoder {
                    cross_prediction_contrastive(tape, src, dst, predict, l.stop_grad_target, l.tau)
                } else {
                    cross_prediction_loss(tape, src, dst, predict, l.stop_grad_target)
                }
            };
            let forward = one(f_dl, f_dh)?;
            terms.cp = Some(if l.symmetric_pred {
                let back = one(f_dh, f_dl)?;
                let s = tape.add(forward, back)?;
                tape.scale(s, T::of(0.5))
            } else {
                forward
            });
        }
    }
    if l.reconstruction {
        let mut re = high.recon.expect("reconstruction enabled");
        if let Some(low) = &low {
            re = tape.add(re, low.recon.expect("reconstruction enabled"))?;
        }
        terms.re = Some(re);
    }
    total_loss(tape, terms, l.weights)
}
