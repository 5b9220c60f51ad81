use ndarray::Axis;

use super::config::{ClassifierHead, ModelConfig, Pooling};
use crate::autodiff::{Graph, Matrix, Var};
use crate::dataset::ClipTensor;
use crate::error::{Error, Result};
use crate::masking::{scatter_in_graph, MaskPlan};
use crate::nn::{param, Block, LayerNorm, Linear, Mode, Segments};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::{
    patch_target_normalize, patchify, projection_rows, Grid, PatchEmbed, PosEmbed,
};

/// Visible projection rows of one clip and the grid index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenInput {
    pub rows: Matrix,
    pub idx: Vec<usize>,
}

/// Encoder output for a stack of clips.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: Var,
    pub segs: Segments,
    /// Each segment starts with a class token row.
    pub has_cls: bool,
}

#[derive(Clone, Debug)]
struct Classifier {
    cfg: ClassifierHead,
    fc: Linear,
}

/// Video masked autoencoder with an optional classification head.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub grid: Grid,
    seed: u64,
    patch_embed: PatchEmbed,
    pos: PosEmbed,
    cls_token: Option<ParamId>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: PosEmbed,
    dec_blocks: Vec<Block>,
    dec_norm: Option<LayerNorm>,
    dec_head: Linear,
    head: Option<Classifier>,
}

impl MaeModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let enc = cfg.encoder;
        let dec = cfg.decoder;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let mut init = Init { rng: &mut rng };
        let patch_embed = PatchEmbed::new(
            &mut store,
            &mut init,
            "encoder.patch_embed",
            enc.patch,
            cfg.input.channels,
        );
        let pos = PosEmbed::new(&mut store, &mut init, "encoder.pos", grid, enc.embed_dim);
        let cls = matches!(
            cfg.head,
            Some(ClassifierHead {
                pooling: Pooling::ClsToken,
                ..
            })
        );
        let cls_token =
            cls.then(|| store.add("encoder.cls_token", init.normal(1, enc.embed_dim, 0.02)));
        let blocks = (0..enc.depth)
            .map(|i| {
                let name = format!("encoder.blocks.{i}");
                Block::new(
                    &mut store,
                    &mut init,
                    &name,
                    enc.embed_dim,
                    enc.n_heads,
                    enc.mlp_ratio,
                    enc.block_drop_path(i),
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut store, &mut init, "encoder.norm", enc.embed_dim);
        let dec_embed = Linear::new(
            &mut store,
            &mut init,
            "decoder.embed",
            enc.embed_dim,
            dec.embed_dim,
            true,
        );
        let mask_token = store.add("decoder.mask_token", init.normal(1, dec.embed_dim, 0.02));
        let dec_pos = PosEmbed::new(&mut store, &mut init, "decoder.pos", grid, dec.embed_dim);
        let dec_blocks = (0..dec.depth)
            .map(|i| {
                let name = format!("decoder.blocks.{i}");
                Block::new(
                    &mut store,
                    &mut init,
                    &name,
                    dec.embed_dim,
                    dec.n_heads,
                    enc.mlp_ratio,
                    0.0,
                )
            })
            .collect();
        let dec_norm = (dec.depth > 0)
            .then(|| LayerNorm::new(&mut store, &mut init, "decoder.norm", dec.embed_dim));
        let dec_head = Linear::new(
            &mut store,
            &mut init,
            "decoder.head",
            dec.embed_dim,
            dec.output_patch_dim,
            true,
        );
        let mut model = Self {
            cfg: ModelConfig {
                head: None,
                ..cfg.clone()
            },
            store,
            grid,
            seed,
            patch_embed,
            pos,
            cls_token,
            blocks,
            norm,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_head,
            head: None,
        };
        if let Some(head) = cfg.head {
            model.attach_head(head)?;
        }
        Ok(model)
    }

    /// Adds a freshly initialized classification head.
    pub fn attach_head(&mut self, head: ClassifierHead) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::InvalidConfig(
                "model already has a classification head".into(),
            ));
        }
        if head.n_classes < 2 {
            return Err(Error::InvalidConfig(
                "classifier needs at least 2 classes".into(),
            ));
        }
        if head.pooling == Pooling::ClsToken && self.cls_token.is_none() {
            return Err(Error::InvalidConfig(
                "class-token pooling must be chosen at construction".into(),
            ));
        }
        let mut rng = seeded(derive_seed(self.seed, 0x4845_4144));
        let mut init = Init { rng: &mut rng };
        let fc = Linear::new(
            &mut self.store,
            &mut init,
            "head.fc",
            self.cfg.encoder.embed_dim,
            head.n_classes,
            true,
        );
        self.head = Some(Classifier { cfg: head, fc });
        self.cfg.head = Some(head);
        Ok(())
    }

    pub fn head(&self) -> Option<ClassifierHead> {
        self.head.as_ref().map(|h| h.cfg)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let (t, h, w, c) = clip.dims();
        let i = self.cfg.input;
        if (t, h, w, c) != (i.frames, i.height, i.width, i.channels) {
            return Err(Error::ShapeMismatch(format!(
                "clip {t}×{h}×{w}×{c}, model expects {}×{}×{}×{}",
                i.frames, i.height, i.width, i.channels
            )));
        }
        Ok(())
    }

    /// Projection rows of the visible tokens under `plan`.
    pub fn prepare(&self, clip: &ClipTensor, plan: &MaskPlan) -> Result<TokenInput> {
        self.check_clip(clip)?;
        if plan.n_tokens != self.n_tokens() {
            return Err(Error::ShapeMismatch(format!(
                "plan over {} tokens, grid has {}",
                plan.n_tokens,
                self.n_tokens()
            )));
        }
        let (rows, _) = projection_rows(clip, &self.cfg.encoder.patch)?;
        let rows = if plan.masked_idx.is_empty() {
            rows
        } else {
            rows.select(Axis(0), &plan.visible_idx)
        };
        Ok(TokenInput {
            rows,
            idx: plan.visible_idx.clone(),
        })
    }

    /// Raw pixel patches (optionally row-normalized) used as reconstruction targets.
    pub fn targets(&self, clip: &ClipTensor, normalize: bool) -> Result<Matrix> {
        self.check_clip(clip)?;
        let (p, _) = patchify(clip, &self.cfg.encoder.patch)?;
        Ok(patch_target_normalize(&p, normalize))
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        inputs: &[TokenInput],
        mode: &mut Mode<'_>,
        frozen: bool,
    ) -> Result<Encoded> {
        let width = self
            .cfg
            .encoder
            .patch
            .projection_input_dim(self.cfg.input.channels);
        let mut lengths = Vec::with_capacity(inputs.len());
        let mut views = Vec::with_capacity(inputs.len());
        let mut idx = Vec::new();
        for inp in inputs {
            if inp.rows.ncols() != width || inp.rows.nrows() != inp.idx.len() || inp.idx.is_empty()
            {
                return Err(Error::ShapeMismatch(format!(
                    "encoder input {:?} with {} indices, expected width {width}",
                    inp.rows.dim(),
                    inp.idx.len()
                )));
            }
            lengths.push(inp.rows.nrows());
            views.push(inp.rows.view());
            idx.extend_from_slice(&inp.idx);
        }
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let rows = g.constant(stacked);
        let x = self.patch_embed.forward(g, rows, frozen);
        let pos = self.pos.forward(g, &idx, frozen);
        let mut x = g.add(x, pos);
        let has_cls = self.cls_token.is_some();
        if let Some(cls) = self.cls_token {
            let cls = param(g, cls, frozen);
            let segs = Segments::from_lengths(&lengths);
            let mut parts = Vec::with_capacity(2 * segs.len());
            for &(start, len) in &segs.0 {
                parts.push(cls);
                parts.push(g.slice_rows(x, start, len));
            }
            x = g.concat_rows(&parts);
            lengths.iter_mut().for_each(|l| *l += 1);
        }
        let segs = Segments::from_lengths(&lengths);
        for block in &self.blocks {
            x = block.forward(g, x, &segs, self.cfg.encoder.dropout, mode, frozen);
        }
        let latent = self.norm.forward(g, x, frozen);
        Ok(Encoded {
            latent,
            segs,
            has_cls,
        })
    }

    /// Decoder pixel predictions for every token of every clip, stacked in
    /// clip order then grid order.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        plans: &[&MaskPlan],
        frozen: bool,
    ) -> Result<Var> {
        if plans.len() != enc.segs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} plans for {} clips",
                plans.len(),
                enc.segs.len()
            )));
        }
        let skip = usize::from(enc.has_cls);
        let h = self.dec_embed.forward(g, enc.latent, frozen);
        let mask_token = param(g, self.mask_token, frozen);
        let mut full = Vec::with_capacity(plans.len());
        for (&(start, len), plan) in enc.segs.0.iter().zip(plans) {
            if len - skip != plan.n_visible() || plan.n_tokens != self.n_tokens() {
                return Err(Error::ShapeMismatch(format!(
                    "segment of {} rows vs plan keeping {}",
                    len - skip,
                    plan.n_visible()
                )));
            }
            let vis = g.slice_rows(h, start + skip, len - skip);
            full.push(scatter_in_graph(g, vis, mask_token, plan));
        }
        let n = self.n_tokens();
        let mut x = if full.len() == 1 {
            full[0]
        } else {
            g.concat_rows(&full)
        };
        let idx: Vec<usize> = (0..plans.len()).flat_map(|_| 0..n).collect();
        let pos = self.dec_pos.forward(g, &idx, frozen);
        x = g.add(x, pos);
        let segs = Segments::uniform(plans.len(), n);
        let mut mode = Mode::eval();
        for block in &self.dec_blocks {
            x = block.forward(g, x, &segs, 0.0, &mut mode, frozen);
        }
        if let Some(norm) = &self.dec_norm {
            x = norm.forward(g, x, frozen);
        }
        Ok(self.dec_head.forward(g, x, frozen))
    }

    /// Pooled clip features, one row per clip.
    pub fn pool(&self, g: &mut Graph<'_>, enc: &Encoded) -> Var {
        let mut rows = Vec::with_capacity(enc.segs.len());
        for &(start, len) in &enc.segs.0 {
            if enc.has_cls {
                rows.push(g.slice_rows(enc.latent, start, 1));
            } else if enc.segs.len() == 1 {
                rows.push(g.mean_rows(enc.latent));
            } else {
                let seg = g.slice_rows(enc.latent, start, len);
                rows.push(g.mean_rows(seg));
            }
        }
        if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        }
    }

    pub fn classify(&self, g: &mut Graph<'_>, enc: &Encoded, frozen: bool) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no classification head".into()))?;
        let pooled = self.pool(g, enc);
        Ok(head.fc.forward(g, pooled, frozen))
    }

    /// Eval-mode latent for the visible tokens of one clip.
    pub fn encode_clip(&self, clip: &ClipTensor, plan: &MaskPlan) -> Result<Matrix> {
        let input = self.prepare(clip, plan)?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, &[input], &mut Mode::eval(), true)?;
        Ok(g.value(enc.latent).clone())
    }

    /// Eval-mode decoder output (N×P) for one clip.
    pub fn reconstruct(&self, clip: &ClipTensor, plan: &MaskPlan) -> Result<Matrix> {
        let input = self.prepare(clip, plan)?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, &[input], &mut Mode::eval(), true)?;
        let out = self.decode(&mut g, &enc, &[plan], true)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode logits over all tokens of each clip, one row per clip.
    pub fn logits(&self, clips: &[&ClipTensor]) -> Result<Matrix> {
        let full = MaskPlan::full(self.n_tokens());
        let inputs = clips
            .iter()
            .map(|c| self.prepare(c, &full))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, &inputs, &mut Mode::eval(), true)?;
        let out = self.classify(&mut g, &enc, true)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode pooled embedding of each clip (no masking), one row per clip.
    pub fn embed_clips(&self, clips: &[&ClipTensor]) -> Result<Matrix> {
        let full = MaskPlan::full(self.n_tokens());
        let inputs = clips
            .iter()
            .map(|c| self.prepare(c, &full))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, &inputs, &mut Mode::eval(), true)?;
        let pooled = self.pool(&mut g, &enc);
        Ok(g.value(pooled).clone())
    }
}

/// Exact trainable-parameter count.
pub fn count_parameters(model: &MaeModel) -> usize {
    model.store.count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::model::config::InputGeometry;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::build(
            InputGeometry {
                frames: 4,
                height: 8,
                width: 8,
                channels: 3,
            },
            4,
            2,
            true,
            16,
            2,
            2,
            8,
            1,
            2,
        )
    }

    fn clip(seed: u64, cfg: &ModelConfig) -> ClipTensor {
        let mut rng = seeded(seed);
        let i = cfg.input;
        ClipTensor::new(
            Array4::from_shape_fn((i.frames, i.height, i.width, i.channels), |_| rng.random()),
            10.0,
        )
    }

    #[test]
    fn affine_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let lin = Linear::new(&mut store, &mut Init { rng: &mut rng }, "x", 10, 5, true);
        assert_eq!(lin.parameter_count(), 55);
        assert_eq!(store.count(), 55);
    }

    #[test]
    fn default_config_count_is_stable() {
        let cfg = ModelConfig::small_default();
        let a = MaeModel::new(cfg.clone(), 1).unwrap();
        let b = MaeModel::new(cfg, 2).unwrap();
        assert_eq!(count_parameters(&a), count_parameters(&b));
        assert_eq!(a.n_tokens(), 512);
    }

    #[test]
    fn zero_depth_encoder_rejected() {
        let mut cfg = tiny();
        cfg.encoder.depth = 0;
        assert!(matches!(
            MaeModel::new(cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let cfg = tiny();
        let model = MaeModel::new(cfg.clone(), 0).unwrap();
        let plan = sample_mask(model.n_tokens(), 0.5, 3).unwrap();
        let c = clip(1, &cfg);
        let latent = model.encode_clip(&c, &plan).unwrap();
        assert_eq!(latent.dim(), (plan.n_visible(), 16));
        let out = model.reconstruct(&c, &plan).unwrap();
        assert_eq!(out.dim(), (8, 96));
        let back = crate::tokenizer::unpatchify(&out, model.grid, &cfg.encoder.patch).unwrap();
        assert_eq!(back.dims(), (4, 8, 8, 3));
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let cfg = tiny();
        let model = MaeModel::new(cfg.clone(), 0).unwrap();
        let plan = sample_mask(model.n_tokens(), 0.75, 9).unwrap();
        let c = clip(2, &cfg);
        assert_eq!(
            model.reconstruct(&c, &plan).unwrap(),
            model.reconstruct(&c, &plan).unwrap()
        );
    }

    #[test]
    fn zero_depth_decoder_is_affine() {
        let mut cfg = tiny();
        cfg.decoder.depth = 0;
        let model = MaeModel::new(cfg, 0).unwrap();
        let store = &model.store;
        let mut g = Graph::new(store);
        let mut rng = seeded(4);
        let latent = Matrix::from_shape_fn((8, 16), |_| rng.random::<f64>());
        let enc = Encoded {
            latent: g.constant(latent.clone()),
            segs: Segments::uniform(1, 8),
            has_cls: false,
        };
        let plan = MaskPlan::full(8);
        let out = model.decode(&mut g, &enc, &[&plan], true).unwrap();
        let w1 = store.get(model.dec_embed.weight);
        let b1 = store.get(model.dec_embed.bias.unwrap());
        let w2 = store.get(model.dec_head.weight);
        let b2 = store.get(model.dec_head.bias.unwrap());
        let expected = (latent.dot(w1) + b1 + model.dec_pos.table(store)).dot(w2) + b2;
        let err = (g.value(out) - &expected)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-12);
    }

    #[test]
    fn head_shape_and_mean_pool_permutation() {
        let mut cfg = tiny();
        cfg.head = Some(ClassifierHead::mean(26));
        let model = MaeModel::new(cfg.clone(), 0).unwrap();
        let c = clip(3, &cfg);
        assert_eq!(model.logits(&[&c]).unwrap().dim(), (1, 26));
        let mut g = Graph::new(&model.store);
        let mut rng = seeded(5);
        let latent = Matrix::from_shape_fn((6, 16), |_| rng.random::<f64>());
        let perm = [3, 1, 5, 0, 2, 4];
        let permuted = latent.select(Axis(0), &perm);
        let a = Encoded {
            latent: g.constant(latent),
            segs: Segments::uniform(1, 6),
            has_cls: false,
        };
        let b = Encoded {
            latent: g.constant(permuted),
            segs: Segments::uniform(1, 6),
            has_cls: false,
        };
        let la = model.classify(&mut g, &a, true).unwrap();
        let lb = model.classify(&mut g, &b, true).unwrap();
        let diff = (g.value(la) - g.value(lb)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
        let single = Encoded {
            latent: g.constant(Matrix::ones((1, 16))),
            segs: Segments::uniform(1, 1),
            has_cls: false,
        };
        let pooled = model.pool(&mut g, &single);
        assert_eq!(g.value(pooled), &Matrix::ones((1, 16)));
    }

    #[test]
    fn class_token_pooling() {
        let mut cfg = tiny();
        cfg.head = Some(ClassifierHead {
            n_classes: 3,
            pooling: Pooling::ClsToken,
        });
        let model = MaeModel::new(cfg.clone(), 0).unwrap();
        let logits = model.logits(&[&clip(1, &cfg), &clip(2, &cfg)]).unwrap();
        assert_eq!(logits.dim(), (2, 3));
    }

    #[test]
    fn batched_encoding_matches_single_clips() {
        let mut cfg = tiny();
        cfg.head = Some(ClassifierHead::mean(4));
        let model = MaeModel::new(cfg.clone(), 0).unwrap();
        let (a, b) = (clip(1, &cfg), clip(2, &cfg));
        let both = model.logits(&[&a, &b]).unwrap();
        let one = model.logits(&[&b]).unwrap();
        let diff = (&both.row(1) - &one.row(0)).mapv(f64::abs).sum();
        assert!(diff < 1e-10);
    }
}
