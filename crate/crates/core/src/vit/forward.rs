use super::config::Pooling;
use super::mask::{check_masks, visible_patches, MaskSpec};
use super::params::{BlockIds, BoundModel, LinearIds, MlpIds, NormIds};
use super::posenc::{positional_encoding, PositionalMode};
use crate::numerics::{multi_head_attention, AttentionVars, Element, Tensor, Var};
use crate::{Error, Result};

/// Encoder result for one branch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, k(+1), D]`, class token first when configured.
    pub tokens: Var,
    /// `[B, D]` per the configured pooling.
    pub pooled: Var,
}

/// Decoder result for one branch.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// Final block output `[B, |S|(+1), D_dec]`.
    pub tokens: Var,
    /// Patch-position tokens only, `[B, |S|, D_dec]`.
    pub patch_tokens: Var,
    /// Pixel predictions per patch, `[B, |S|, n*n*C]`.
    pub pixels: Var,
}

impl<'a, T: Element> BoundModel<'a, T> {
    fn lin(&self, x: Var, ids: LinearIds) -> Result<Var> {
        self.tape.linear(x, self.var(ids.w), Some(self.var(ids.b)))
    }

    fn norm(&self, x: Var, ids: NormIds) -> Result<Var> {
        let eps = self.config().ln_eps;
        self.tape
            .layer_norm(x, self.var(ids.gamma), self.var(ids.beta), eps)
    }

    fn mlp(&self, x: Var, ids: MlpIds) -> Result<Var> {
        let h = self.lin(x, ids.fc1)?;
        self.lin(self.tape.gelu(h), ids.fc2)
    }

    fn block(&self, x: Var, ids: &BlockIds, heads: usize) -> Result<Var> {
        let attn = AttentionVars {
            wq: self.var(ids.q.w),
            bq: self.var(ids.q.b),
            wk: self.var(ids.k.w),
            bk: self.var(ids.k.b),
            wv: self.var(ids.v.w),
            bv: self.var(ids.v.b),
            wo: self.var(ids.o.w),
            bo: self.var(ids.o.b),
        };
        let h = self.norm(x, ids.ln1)?;
        let h = multi_head_attention(self.tape, h, &attn, heads)?;
        let x = self.tape.add(x, h)?;
        let h = self.norm(x, ids.ln2)?;
        let h = self.mlp(h, ids.mlp)?;
        self.tape.add(x, h)
    }

    /// Constant `[B, k, d]` of positional rows `positions[b]`, one table per
    /// item in gsd mode.
    fn positions(
        &self,
        d: usize,
        mode: PositionalMode,
        gsd: Option<&[f64]>,
        positions: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = self.config();
        let grid = cfg.grid();
        let b = positions.len();
        let k = positions.first().map_or(0, Vec::len);
        if let Some(g) = gsd {
            if g.len() != b {
                return Err(Error::Consistency(format!(
                    "{} GSDs for a batch of {b}",
                    g.len()
                )));
            }
        }
        let shared = match mode {
            PositionalMode::Standard => Some(positional_encoding::<T>(
                grid,
                d,
                mode,
                None,
                cfg.reference_gsd,
            )?),
            PositionalMode::Gsd => None,
        };
        let mut out = Vec::with_capacity(b * k * d);
        for (bi, pos) in positions.iter().enumerate() {
            let table = match &shared {
                Some(t) => t.clone(),
                None => {
                    let g = gsd.map(|g| g[bi]);
                    positional_encoding::<T>(grid, d, mode, g, cfg.reference_gsd)?
                }
            };
            for &p in pos {
                out.extend_from_slice(&table.data()[p * d..(p + 1) * d]);
            }
        }
        Ok(self.tape.constant(Tensor::new(vec![b, k, d], out)?))
    }

    /// Embed the visible patches of `images[B,H,W,C]`, add positions, prepend
    /// the class token and run the encoder stack. Masked pixels are never read.
    /// `gsd` holds one ground sample distance per image and is only consulted
    /// in gsd positional mode.
    pub fn encode(
        &self,
        images: &Tensor<T>,
        masks: &[MaskSpec],
        gsd: Option<&[f64]>,
    ) -> Result<Encoded> {
        let cfg = self.config();
        let e = &cfg.encoder;
        let ids = &self.layout().encoder;
        let sh = images.shape();
        if sh.len() != 4 || sh[1] != e.image_size || sh[2] != e.image_size || sh[3] != e.channels {
            return Err(Error::shape(
                "encode",
                sh,
                &[0, e.image_size, e.image_size, e.channels],
            ));
        }
        let mut raw = visible_patches(images, e.patch_size, masks)?;
        if e.pixel_mean != 0.0 || e.pixel_std != 1.0 {
            let (mu, sd) = (T::of(e.pixel_mean), T::of(e.pixel_std));
            raw = raw.map(|x| (x - mu) / sd);
        }
        let patches = self.tape.constant(raw);
        let x = self.lin(patches, ids.patch_embed)?;
        let vis: Vec<Vec<usize>> = masks.iter().map(|m| m.visible().to_vec()).collect();
        let pos = self.positions(e.width, e.positional_mode, gsd, &vis)?;
        let mut x = self.tape.add(x, pos)?;
        if let Some(cls) = ids.cls_token {
            let c = self.tape.reshape(self.var(cls), &[1, e.width])?;
            let c = self.tape.expand_batch(c, masks.len());
            x = self.tape.concat_tokens(c, x)?;
        }
        for b in &ids.blocks {
            x = self.block(x, b, e.heads)?;
        }
        if !ids.blocks.is_empty() {
            x = self.norm(x, ids.norm)?;
        }
        let pooled = match e.pooling {
            Pooling::ClassToken => {
                let c = self.tape.slice_tokens(x, 0, 1)?;
                self.tape.reshape(c, &[masks.len(), e.width])?
            }
            Pooling::Mean => {
                let k = masks[0].visible().len();
                let start = usize::from(e.use_cls_token);
                let p = self.tape.slice_tokens(x, start, k)?;
                self.tape.mean_tokens(p)?
            }
        };
        Ok(Encoded { tokens: x, pooled })
    }

    /// Project encoder tokens to decoder width, put mask tokens back at the
    /// masked positions, add decoder positions and run the decoder stack.
    pub fn decode(
        &self,
        encoded: &Encoded,
        masks: &[MaskSpec],
        gsd: Option<&[f64]>,
    ) -> Result<Decoded> {
        let cfg = self.config();
        let (e, d) = (&cfg.encoder, &cfg.decoder);
        let ids = &self.layout().decoder;
        let s = cfg.num_patches();
        let k = check_masks(masks, s)?;
        let cls = usize::from(e.use_cls_token);
        let sh = self.tape.shape(encoded.tokens);
        if sh.len() != 3 || sh[0] != masks.len() || sh[1] != k + cls {
            return Err(Error::Consistency(format!(
                "encoder tokens {sh:?} do not match masks keeping {k} patches"
            )));
        }
        let embedded = self.lin(encoded.tokens, ids.embed)?;
        let vis = self.tape.slice_tokens(embedded, cls, k)?;
        let positions: Vec<Vec<usize>> = masks.iter().map(|m| m.visible().to_vec()).collect();
        let full = self
            .tape
            .scatter_tokens(vis, self.var(ids.mask_token), &positions, s)?;
        let all: Vec<Vec<usize>> = vec![(0..s).collect(); masks.len()];
        let pos = self.positions(d.width, d.positional_mode, gsd, &all)?;
        let mut x = self.tape.add(full, pos)?;
        if cls == 1 {
            let c = self.tape.slice_tokens(embedded, 0, 1)?;
            x = self.tape.concat_tokens(c, x)?;
        }
        for b in &ids.blocks {
            x = self.block(x, b, d.heads)?;
        }
        let patch_tokens = if cls == 1 {
            self.tape.slice_tokens(x, 1, s)?
        } else {
            x
        };
        let normed = self.norm(patch_tokens, ids.norm)?;
        let pixels = self.lin(normed, ids.pixel_head)?;
        Ok(Decoded {
            tokens: x,
            patch_tokens,
            pixels,
        })
    }

    /// Contrastive projection `g_f` of pooled encoder features.
    pub fn project(&self, pooled: Var) -> Result<Var> {
        self.mlp(pooled, self.layout().projector)
    }

    /// Cross-scale predictor `g_p` applied token-wise.
    pub fn predict(&self, tokens: Var) -> Result<Var> {
        self.mlp(tokens, self.layout().predictor)
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::ModelConfig;
    use super::super::params::ModelParams;
    use super::super::patch::{patchify, unpatchify, PatchSequence};
    use super::*;
    use crate::numerics::{Streams, Tape};
    use rand::Rng;

    fn images(seed: u64, b: usize, size: usize) -> Tensor<f64> {
        let mut r = Streams::new(seed).stream("img", &[]);
        let data = (0..b * size * size * 3)
            .map(|_| r.random::<f64>())
            .collect();
        Tensor::new(vec![b, size, size, 3], data).unwrap()
    }

    fn masks(seed: u64, b: usize, s: usize, m: f64) -> Vec<MaskSpec> {
        let st = Streams::new(seed);
        (0..b)
            .map(|i| MaskSpec::sample(s, m, &mut st.stream("mask", &[i as u64])).unwrap())
            .collect()
    }

    fn toy(depth: usize) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.depth = depth;
        c
    }

    #[test]
    fn encoder_shape_and_finiteness() {
        let cfg = toy(2);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let tape = Tape::new();
        let m = p.bind(&tape);
        let ms = masks(1, 3, 16, 0.75);
        let out = m.encode(&images(2, 3, 32), &ms, None).unwrap();
        let v = tape.value(out.tokens);
        assert_eq!(v.shape(), &[3, 5, 64]);
        assert!(v.is_finite());
        assert_eq!(tape.shape(out.pooled), vec![3, 64]);
    }

    #[test]
    fn masked_pixels_do_not_reach_the_encoder() {
        let cfg = toy(2);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let a = images(3, 2, 32);
        let ms = masks(4, 2, 16, 0.5);
        let mut seq = patchify(&a, 8).unwrap();
        let mut data = seq.patches.to_vec();
        let pd = seq.patch_dim();
        for (bi, m) in ms.iter().enumerate() {
            for &i in m.masked() {
                for v in &mut data[(bi * 16 + i) * pd..(bi * 16 + i + 1) * pd] {
                    *v = 100.0 - *v * 7.0;
                }
            }
        }
        seq = PatchSequence {
            patches: Tensor::new(seq.patches.shape().to_vec(), data).unwrap(),
            ..seq
        };
        let b = unpatchify(&seq).unwrap();
        assert_ne!(a, b);
        let run = |img: &Tensor<f64>| {
            let tape = Tape::new();
            let m = p.bind(&tape);
            let out = m.encode(img, &ms, None).unwrap();
            tape.value(out.tokens)
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn empty_encoder_is_embedding_plus_position() {
        let mut cfg = toy(0);
        cfg.encoder.use_cls_token = false;
        cfg.encoder.pooling = Pooling::Mean;
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(5)).unwrap();
        let img = images(6, 1, 32);
        let ms = masks(7, 1, 16, 0.5);
        let tape = Tape::new();
        let out = p.bind(&tape).encode(&img, &ms, None).unwrap();
        let got = tape.value(out.tokens);

        let ids = &p.layout().encoder;
        let (w, bias) = (p.get(ids.patch_embed.w), p.get(ids.patch_embed.b));
        let pos =
            positional_encoding::<f64>((4, 4), 64, PositionalMode::Standard, None, 1.0).unwrap();
        let seq = patchify(&img, 8).unwrap();
        let (mu, sd) = (cfg.encoder.pixel_mean, cfg.encoder.pixel_std);
        for (j, &pi) in ms[0].visible().iter().enumerate() {
            for o in 0..64 {
                let mut acc = bias.data()[o];
                for i in 0..192 {
                    acc += (seq.patches.data()[pi * 192 + i] - mu) / sd * w.data()[i * 64 + o];
                }
                acc += pos.data()[pi * 64 + o];
                assert!((got.data()[j * 64 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_restores_full_sequence_for_any_ratio() {
        let cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let img = images(8, 2, 32);
        for m in [0.0, 0.5, 0.75] {
            let tape = Tape::new();
            let model = p.bind(&tape);
            let ms = masks(9, 2, 16, m);
            let enc = model.encode(&img, &ms, None).unwrap();
            let dec = model.decode(&enc, &ms, None).unwrap();
            assert_eq!(tape.shape(dec.tokens), vec![2, 17, 32]);
            assert_eq!(tape.shape(dec.patch_tokens), vec![2, 16, 32]);
            assert_eq!(tape.shape(dec.pixels), vec![2, 16, 192]);
        }
    }

    #[test]
    fn mask_order_does_not_matter() {
        let cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let img = images(10, 1, 32);
        let masked = [13usize, 2, 7, 0, 9, 4, 11, 15];
        let mut rev = masked;
        rev.reverse();
        let run = |idx: &[usize]| {
            let ms = vec![MaskSpec::from_masked(16, idx).unwrap()];
            let tape = Tape::new();
            let model = p.bind(&tape);
            let enc = model.encode(&img, &ms, None).unwrap();
            tape.value(model.decode(&enc, &ms, None).unwrap().pixels)
        };
        assert_eq!(run(&masked), run(&rev));
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let tape = Tape::new();
        let model = p.bind(&tape);
        let img = images(1, 1, 32);
        let enc = model.encode(&img, &masks(1, 1, 16, 0.5), None).unwrap();
        let other = masks(1, 1, 16, 0.75);
        assert!(matches!(
            model.decode(&enc, &other, None),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn mask_token_receives_gradient() {
        let cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let img = images(11, 2, 32);
        let ms = masks(12, 2, 16, 0.75);
        let tape = Tape::new();
        let model = p.bind(&tape);
        let enc = model.encode(&img, &ms, None).unwrap();
        let dec = model.decode(&enc, &ms, None).unwrap();
        let target = tape.constant(patchify(&img, 8).unwrap().patches);
        let loss = tape.mse(dec.pixels, target).unwrap();
        let g = tape.backward(loss).unwrap();
        let mt = g.get_or_zeros(model.var(p.layout().decoder.mask_token));
        assert!(mt.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gsd_mode_at_reference_matches_standard() {
        let mut cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        cfg.encoder.positional_mode = PositionalMode::Gsd;
        cfg.decoder.positional_mode = PositionalMode::Gsd;
        let q = ModelParams::from_named(
            &cfg,
            p.names()
                .iter()
                .cloned()
                .zip(p.tensors().iter().cloned())
                .collect(),
        )
        .unwrap();
        let img = images(13, 2, 32);
        let ms = masks(14, 2, 16, 0.5);
        let run = |p: &ModelParams<f64>, gsd: Option<&[f64]>| {
            let tape = Tape::new();
            let model = p.bind(&tape);
            let enc = model.encode(&img, &ms, gsd).unwrap();
            tape.value(model.decode(&enc, &ms, gsd).unwrap().pixels)
        };
        let g = [1.0, 1.0];
        assert_eq!(run(&p, None), run(&q, Some(&g)));
        assert_ne!(run(&q, Some(&[2.0, 2.0])), run(&p, None));
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f32>::init(&cfg, &Streams::new(0)).unwrap();
        let b = ModelParams::<f32>::init(&cfg, &Streams::new(99)).unwrap();
        assert_eq!(a.count(), b.count());
        let blk =
            |d: usize, r: usize| 4 * (d * d + d) + 4 * d + (d * d * r + d * r) + (d * r * d + d);
        let enc = 192 * 64 + 64 + 64 + 4 * blk(64, 4) + 128;
        let dec = 64 * 32 + 32 + 32 + 2 * blk(32, 4) + 64 + 32 * 192 + 192;
        let heads = (64 * 128 + 128 + 128 * 128 + 128) + (32 * 64 + 64 + 64 * 32 + 32);
        assert_eq!(a.count(), enc + dec + heads);
    }

    #[test]
    fn both_branches_read_the_same_tensors() {
        let cfg = toy(1);
        let p = ModelParams::<f64>::init(&cfg, &Streams::new(0)).unwrap();
        let tape = Tape::new();
        let model = p.bind(&tape);
        let img = images(1, 1, 32);
        let e1 = model.encode(&img, &masks(1, 1, 16, 0.75), None).unwrap();
        let e2 = model.encode(&img, &masks(2, 1, 16, 0.75), None).unwrap();
        assert_ne!(tape.value(e1.tokens), tape.value(e2.tokens));
        for (v, t) in model.vars().iter().zip(p.tensors()) {
            assert!(tape.value(*v).same_buffer(t));
        }
    }
}
