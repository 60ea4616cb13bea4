//! The tokenizer network: patch embedding, query encoder, quantizer
//! projections and the masked-token decoder.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ImageBatch;
use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::multistep::MaskState;
use crate::nn::{Linear, ParamStore, SizePreset, Transformer};
use crate::quantizer::{quantize, straight_through, Codebook, QuantizedLatent};
use crate::teacher::patchify;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub patch: usize,
    pub latent_tokens: usize,
    pub codebook_size: usize,
    pub token_size: usize,
    pub use_l2_norm: bool,
    /// Teacher grid length L2.
    pub grid_len: usize,
    /// Teacher vocabulary V.
    pub vocab: usize,
    pub enc_width: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_mlp: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let vq = &cfg.model.vq_model;
        let dec = &cfg.model.decoder;
        let e = cfg.encoder_size();
        let d = cfg.decoder_size();
        Self {
            image_size: cfg.image_size(),
            patch: vq.vit_enc_patch_size,
            latent_tokens: vq.num_latent_tokens,
            codebook_size: vq.codebook_size,
            token_size: vq.token_size,
            use_l2_norm: vq.use_l2_norm,
            grid_len: dec.num_proxy_codes,
            vocab: dec.codebook_size,
            enc_width: e.width,
            enc_depth: e.depth,
            enc_heads: e.heads,
            enc_mlp: e.mlp_ratio,
            dec_width: d.width,
            dec_depth: d.depth,
            dec_heads: d.heads,
            dec_mlp: d.mlp_ratio,
        }
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn with_sizes(mut self, enc: SizePreset, dec: SizePreset) -> Self {
        self.enc_width = enc.width;
        self.enc_depth = enc.depth;
        self.enc_heads = enc.heads;
        self.enc_mlp = enc.mlp_ratio;
        self.dec_width = dec.width;
        self.dec_depth = dec.depth;
        self.dec_heads = dec.heads;
        self.dec_mlp = dec.mlp_ratio;
        self
    }
}

/// Encoder output for one batch.
#[derive(Clone, Debug)]
pub struct Latents {
    /// Projected, normalised encoder features `B x K x d` (gradient path).
    pub ze: Tensor,
    pub zq: QuantizedLatent,
    /// Straight-through latent fed to the decoder.
    pub zq_st: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Quantizer,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub dims: ModelDims,
    pub encoder: ParamStore,
    pub quantizer: ParamStore,
    pub decoder: ParamStore,
    patch_embed: Linear,
    pos_patch: Tensor,
    queries: Tensor,
    enc: Transformer,
    in_proj: Linear,
    pub codebook: Codebook,
    out_proj: Linear,
    /// `(V + 1) x D`; the last row is the mask embedding.
    tok_embed: Tensor,
    pos_grid: Tensor,
    pos_latent: Tensor,
    dec: Transformer,
    head: Linear,
}

impl TokenizerModel {
    pub fn new(dims: ModelDims, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if dims.patch == 0 || !dims.image_size.is_multiple_of(dims.patch) {
            return Err(shape_err(format!(
                "image size {} not divisible by patch {}",
                dims.image_size, dims.patch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (de, dd) = (dims.enc_width, dims.dec_width);

        let mut encoder = ParamStore::new("encoder", dtype, device);
        let patch_embed = Linear::new(&mut encoder, "patch_embed", dims.patch_len(), de, true, &mut rng)?;
        let pos_patch = encoder.normal("pos_patch", &[dims.num_patches(), de], INIT_STD, &mut rng)?;
        let queries = encoder.normal("queries", &[dims.latent_tokens, de], INIT_STD, &mut rng)?;
        let enc = Transformer::new(
            &mut encoder,
            "vit",
            de,
            dims.enc_depth,
            dims.enc_heads,
            dims.enc_mlp,
            &mut rng,
        )?;

        let mut quantizer = ParamStore::new("quantizer", dtype, device);
        let in_proj = Linear::new(&mut quantizer, "in_proj", de, dims.token_size, true, &mut rng)?;
        let codebook = Codebook::new(
            &mut quantizer,
            dims.codebook_size,
            dims.token_size,
            dims.use_l2_norm,
            &mut rng,
        )?;
        let out_proj = Linear::new(&mut quantizer, "out_proj", dims.token_size, dd, true, &mut rng)?;

        let mut decoder = ParamStore::new("decoder", dtype, device);
        let tok_embed = decoder.normal("tok_embed", &[dims.vocab + 1, dd], INIT_STD, &mut rng)?;
        let pos_grid = decoder.normal("pos_grid", &[dims.grid_len, dd], INIT_STD, &mut rng)?;
        let pos_latent = decoder.normal("pos_latent", &[dims.latent_tokens, dd], INIT_STD, &mut rng)?;
        let dec = Transformer::new(
            &mut decoder,
            "vit",
            dd,
            dims.dec_depth,
            dims.dec_heads,
            dims.dec_mlp,
            &mut rng,
        )?;
        let head = Linear::new(&mut decoder, "head", dd, dims.vocab, true, &mut rng)?;

        Ok(Self {
            dims,
            encoder,
            quantizer,
            decoder,
            patch_embed,
            pos_patch,
            queries,
            enc,
            in_proj,
            codebook,
            out_proj,
            tok_embed,
            pos_grid,
            pos_latent,
            dec,
            head,
        })
    }

    pub fn from_config(cfg: &RunConfig, seed: u64) -> Result<Self> {
        Self::new(ModelDims::from_config(cfg), seed, DType::F32, &Device::Cpu)
    }

    pub fn device(&self) -> &Device {
        self.encoder.device()
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn store(&self, g: ParamGroup) -> &ParamStore {
        match g {
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::Quantizer => &self.quantizer,
            ParamGroup::Decoder => &self.decoder,
        }
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.encoder, &self.quantizer, &self.decoder]
    }

    /// Parameters of the given groups, name-ordered within each group.
    pub fn vars(&self, groups: &[ParamGroup]) -> Vec<(String, Var)> {
        groups
            .iter()
            .flat_map(|&g| self.store(g).vars().iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars(&[ParamGroup::Encoder, ParamGroup::Quantizer, ParamGroup::Decoder])
    }

    pub fn num_params(&self) -> usize {
        self.stores().iter().map(|s| s.num_params()).sum()
    }

    /// `B x L1 x D` patch embeddings plus positional embeddings.
    pub fn patch_embed(&self, images: &ImageBatch) -> Result<Tensor> {
        if images.height != self.dims.image_size || images.width != self.dims.image_size {
            return Err(shape_err(format!(
                "model expects {0}x{0} images, got {1}x{2}",
                self.dims.image_size, images.height, images.width
            )));
        }
        let patches = patchify(images, self.dims.patch)?;
        let x = Tensor::from_vec(
            patches,
            (images.batch, self.dims.num_patches(), self.dims.patch_len()),
            self.device(),
        )?
        .to_dtype(self.dtype())?;
        Ok(self.patch_embed.forward(&x)?.broadcast_add(&self.pos_patch)?)
    }

    /// Encoded query features `Z_e`, `B x K x D`.
    pub fn encode(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, l1, d) = patches.dims3()?;
        if l1 != self.dims.num_patches() || d != self.dims.enc_width {
            return Err(shape_err(format!(
                "patch sequence {l1}x{d}, expected {}x{}",
                self.dims.num_patches(),
                self.dims.enc_width
            )));
        }
        let k = self.dims.latent_tokens;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, k, d))?;
        let h = self.enc.forward(&Tensor::cat(&[patches, &q], 1)?)?;
        Ok(h.narrow(1, l1, k)?)
    }

    /// Projects `Z_e` to the code dimension and applies the codebook's
    /// normalisation.
    pub fn project(&self, ze_wide: &Tensor) -> Result<Tensor> {
        self.codebook.prepare(&self.in_proj.forward(ze_wide)?)
    }

    pub fn latents(&self, images: &ImageBatch, exec: Execution) -> Result<Latents> {
        let ze = self.project(&self.encode(&self.patch_embed(images)?)?)?;
        let zq = quantize(&ze, &self.codebook, exec)?;
        let zq_st = straight_through(&ze, &zq.data)?;
        Ok(Latents { ze, zq, zq_st })
    }

    /// Masked-token logits `B x L2 x V` for `state` given latent `zq`
    /// (`B x K x d`).
    pub fn decode_step(&self, state: &MaskState, zq: &Tensor) -> Result<Tensor> {
        let (b, k, d) = zq.dims3()?;
        if k != self.dims.latent_tokens || d != self.dims.token_size {
            return Err(shape_err(format!(
                "latent {k}x{d}, expected {}x{}",
                self.dims.latent_tokens, self.dims.token_size
            )));
        }
        if state.batch != b || state.len != self.dims.grid_len {
            return Err(shape_err(format!(
                "mask state {}x{}, expected {b}x{}",
                state.batch, state.len, self.dims.grid_len
            )));
        }
        let v = self.dims.vocab;
        let mut ids = Vec::with_capacity(b * state.len);
        for (i, &r) in state.resolved.iter().enumerate() {
            if r {
                let t = state.tokens[i];
                if t as usize >= v {
                    return Err(Error::OutOfRange {
                        index: t as usize,
                        size: v,
                    });
                }
                ids.push(t);
            } else {
                ids.push(v as u32);
            }
        }
        let idx = Tensor::from_vec(ids, b * state.len, self.device())?;
        let dd = self.dims.dec_width;
        let tok = self
            .tok_embed
            .index_select(&idx, 0)?
            .reshape((b, state.len, dd))?
            .broadcast_add(&self.pos_grid)?;
        let lat = self.out_proj.forward(zq)?.broadcast_add(&self.pos_latent)?;
        let h = self.dec.forward(&Tensor::cat(&[&tok, &lat], 1)?)?;
        self.head.forward(&h.narrow(1, 0, state.len)?)
    }

    /// Renormalises the codebook after an update.
    pub fn post_update(&self) -> Result<()> {
        self.codebook.renormalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::softmax_last;

    pub(crate) fn micro_dims() -> ModelDims {
        ModelDims {
            image_size: 8,
            patch: 4,
            latent_tokens: 3,
            codebook_size: 5,
            token_size: 4,
            use_l2_norm: true,
            grid_len: 4,
            vocab: 6,
            enc_width: 8,
            enc_depth: 2,
            enc_heads: 2,
            enc_mlp: 2,
            dec_width: 8,
            dec_depth: 2,
            dec_heads: 2,
            dec_mlp: 2,
        }
    }

    #[test]
    fn shapes_compose() {
        let m = TokenizerModel::new(micro_dims(), 0, DType::F32, &Device::Cpu).unwrap();
        let ds = synthetic_dataset(0, 0, 2, 8, Execution::Sequential);
        let p = m.patch_embed(&ds.images).unwrap();
        assert_eq!(p.dims(), &[2, 4, 8]);
        let ze = m.encode(&p).unwrap();
        assert_eq!(ze.dims(), &[2, 3, 8]);
        let lat = m.latents(&ds.images, Execution::Sequential).unwrap();
        let st = MaskState::masked(2, 4);
        let logits = m.decode_step(&st, &lat.zq_st).unwrap();
        assert_eq!(logits.dims(), &[2, 4, 6]);
        let sums: Vec<f32> = softmax_last(&logits)
            .unwrap()
            .sum(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn zero_image_embeds_to_bias_plus_position() {
        let m = TokenizerModel::new(micro_dims(), 1, DType::F32, &Device::Cpu).unwrap();
        let zero = ImageBatch::new(vec![0.0; 8 * 8 * 3], 1, 8, 8).unwrap();
        let p = m.patch_embed(&zero).unwrap().squeeze(0).unwrap();
        // Linear bias is zero-initialised, so only the positions remain.
        let diff = (p - &m.pos_patch)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn bad_resolution_and_vocab_are_errors() {
        let m = TokenizerModel::new(micro_dims(), 0, DType::F32, &Device::Cpu).unwrap();
        let ds = synthetic_dataset(0, 0, 1, 16, Execution::Sequential);
        assert!(m.patch_embed(&ds.images).is_err());
        let mut st = MaskState::masked(1, 4);
        st.resolved[0] = true;
        st.tokens[0] = 6;
        let zq = Tensor::zeros((1, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.decode_step(&st, &zq), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn decode_is_pure_and_batch_equivariant() {
        let m = TokenizerModel::new(micro_dims(), 2, DType::F32, &Device::Cpu).unwrap();
        let ds = synthetic_dataset(4, 0, 3, 8, Execution::Sequential);
        let lat = m.latents(&ds.images, Execution::Sequential).unwrap();
        let mut st = MaskState::masked(3, 4);
        st.resolved[1] = true;
        st.tokens[1] = 2;
        let a = m.decode_step(&st, &lat.zq.data).unwrap();
        let b = m.decode_step(&st, &lat.zq.data).unwrap();
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);

        let perm = [2usize, 0, 1];
        let imgs = ds.images.select(&perm);
        let lat_p = m.latents(&imgs, Execution::Sequential).unwrap();
        let mut st_p = MaskState::masked(3, 4);
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..4 {
                st_p.resolved[new * 4 + j] = st.resolved[old * 4 + j];
                st_p.tokens[new * 4 + j] = st.tokens[old * 4 + j];
            }
        }
        let c = m.decode_step(&st_p, &lat_p.zq.data).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let x: Vec<f32> = c.get(new).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = a.get(old).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }
}
