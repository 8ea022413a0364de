use super::layers::{
    block_backward, block_forward, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, BlockCache, BlockIds, LinearIds, NormCache, NormIds,
};
use super::params::{ParamId, ParameterStore, Tensor};
use super::posembed::sincos_2d;
use super::{ModelError, PatchGrid};
use crate::gaussian::{RawGaussians, ScaleClamp, RAW_DIM};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// Number of query tokens, i.e. predicted Gaussians.
    pub num_queries: usize,
    pub scale_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 inputs, 8-pixel patches, ViT-Tiny-width encoder (6 blocks),
    /// 4-block decoder, 512 Gaussians.
    pub fn desk() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            enc_dim: 192,
            enc_depth: 6,
            enc_heads: 3,
            dec_dim: 256,
            dec_depth: 4,
            dec_heads: 8,
            mlp_ratio: 4,
            num_queries: 512,
            scale_clamp: 1.0,
        }
    }

    /// Smallest preset that still has every component: 32×32 inputs with
    /// 4-pixel patches (64 tokens), two narrow blocks on each side.
    pub fn tiny() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            enc_dim: 32,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 2,
            mlp_ratio: 2,
            num_queries: 64,
            scale_clamp: 1.0,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid, ModelError> {
        PatchGrid::new(self.image_height, self.image_width, self.patch_size)
    }

    pub fn clamp(&self) -> Result<ScaleClamp, ModelError> {
        ScaleClamp::new(self.scale_clamp).map_err(|e| ModelError::Config(format!("scale_clamp: {e}")))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        self.grid()?;
        self.clamp()?;
        for (name, dim, heads) in [
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return bad(format!("{name}_dim {dim} must be divisible by {name}_heads {heads}"));
            }
        }
        if self.enc_dim % 4 != 0 {
            return bad(format!("enc_dim {} must be a multiple of 4 for sin-cos positions", self.enc_dim));
        }
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: LinearIds,
    pos_embed: ParamId,
    enc_blocks: Vec<BlockIds>,
    enc_norm: NormIds,
    dec_embed: LinearIds,
    queries: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_norm: NormIds,
    head: LinearIds,
}

/// Name of the query-token tensor.
pub const QUERY_TOKENS: &str = "decoder.query_tokens";

/// Encoder/decoder pair that maps visible patches to raw Gaussians.
#[derive(Debug, Clone)]
pub struct GmaeModel {
    config: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

/// Activations kept from [`GmaeModel::forward`] for the backward pass.
pub struct ForwardCache {
    tokens: Array2<f64>,
    enc_blocks: Vec<BlockCache>,
    enc_out: Array2<f64>,
    enc_norm: NormCache,
    latents: Array2<f64>,
    dec_blocks: Vec<BlockCache>,
    dec_norm: NormCache,
    head_in: Array2<f64>,
}

fn build(config: &ModelConfig, seed: u64) -> (ParameterStore, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterStore::new();
    let grid = config.grid().expect("validated config");
    let patch_embed = LinearIds::init(&mut p, "encoder.patch_embed", grid.token_dim(), config.enc_dim, &mut rng);
    let table = sincos_2d(config.enc_dim, grid.rows(), grid.cols());
    let pos_embed = p.insert(
        "encoder.pos_embed",
        Tensor::from_vec(&[grid.num_tokens(), config.enc_dim], table.into_raw_vec_and_offset().0),
        false,
    );
    let enc_blocks = (0..config.enc_depth)
        .map(|i| BlockIds::init(&mut p, &format!("encoder.blocks.{i}"), config.enc_dim, config.mlp_ratio, &mut rng))
        .collect();
    let enc_norm = NormIds::init(&mut p, "encoder.norm", config.enc_dim);
    let dec_embed = LinearIds::init(&mut p, "decoder.embed", config.enc_dim, config.dec_dim, &mut rng);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let q: Vec<f64> = (0..config.num_queries * config.dec_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let queries = p.insert(QUERY_TOKENS, Tensor::from_vec(&[config.num_queries, config.dec_dim], q), true);
    let dec_blocks = (0..config.dec_depth)
        .map(|i| BlockIds::init(&mut p, &format!("decoder.blocks.{i}"), config.dec_dim, config.mlp_ratio, &mut rng))
        .collect();
    let dec_norm = NormIds::init(&mut p, "decoder.norm", config.dec_dim);
    let head = LinearIds::init(&mut p, "decoder.head", config.dec_dim, RAW_DIM, &mut rng);
    let layout = Layout {
        patch_embed,
        pos_embed,
        enc_blocks,
        enc_norm,
        dec_embed,
        queries,
        dec_blocks,
        dec_norm,
        head,
    };
    (p, layout)
}

impl GmaeModel {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters; names and shapes must
    /// match what `config` implies.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Self, ModelError> {
        config.validate()?;
        let (expected, layout) = build(&config, 0);
        if expected.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, got) in expected.entries().iter().zip(params.entries()) {
            if e.name != got.name || e.tensor.shape != got.tensor.shape {
                return Err(ModelError::Shape(format!(
                    "tensor {} has shape {:?}, config expects {} with shape {:?}",
                    got.name, got.tensor.shape, e.name, e.tensor.shape
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid().expect("validated config")
    }

    pub fn clamp(&self) -> ScaleClamp {
        self.config.clamp().expect("validated config")
    }

    /// Length of the decoder token sequence for `n_visible` latents.
    pub fn decoder_sequence_len(&self, n_visible: usize) -> usize {
        n_visible + self.config.num_queries
    }

    fn check_tokens(&self, tokens: &ArrayView2<f64>, positions: &[usize]) -> Result<(), ModelError> {
        let grid = self.grid();
        if tokens.nrows() != positions.len() {
            return Err(ModelError::Shape(format!(
                "{} tokens but {} positions",
                tokens.nrows(),
                positions.len()
            )));
        }
        if tokens.ncols() != grid.token_dim() {
            return Err(ModelError::Shape(format!(
                "token width {} != patch dimension {}",
                tokens.ncols(),
                grid.token_dim()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= grid.num_tokens()) {
            return Err(ModelError::Shape(format!("position {bad} outside the patch grid")));
        }
        if positions.is_empty() {
            return Err(ModelError::Shape("no visible tokens".into()));
        }
        Ok(())
    }

    fn embed(&self, tokens: ArrayView2<f64>, positions: &[usize]) -> Array2<f64> {
        let p = &self.params;
        let mut x = linear_forward(tokens, p, self.layout.patch_embed);
        let pos = p.mat(self.layout.pos_embed);
        for (mut row, &i) in x.rows_mut().into_iter().zip(positions) {
            row += &pos.row(i);
        }
        x
    }

    /// Latents for the visible tokens; row `i` belongs to `positions[i]`.
    pub fn encode(&self, tokens: ArrayView2<f64>, positions: &[usize]) -> Result<Array2<f64>, ModelError> {
        self.check_tokens(&tokens, positions)?;
        let mut x = self.embed(tokens, positions);
        for ids in &self.layout.enc_blocks {
            x = block_forward(&x, self.config.enc_heads, &self.params, ids).0;
        }
        Ok(layer_norm_forward(x.view(), &self.params, self.layout.enc_norm).0)
    }

    /// Raw Gaussians predicted by the query tokens; latent outputs are dropped.
    pub fn decode(&self, latents: ArrayView2<f64>) -> Result<RawGaussians, ModelError> {
        if latents.ncols() != self.config.enc_dim {
            return Err(ModelError::Shape(format!(
                "latent width {} != enc_dim {}",
                latents.ncols(),
                self.config.enc_dim
            )));
        }
        let (raw, _) = self.decode_cached(latents.to_owned());
        Ok(raw)
    }

    fn decode_cached(&self, latents: Array2<f64>) -> (RawGaussians, (Vec<BlockCache>, NormCache, Array2<f64>)) {
        let p = &self.params;
        let n = latents.nrows();
        let projected = linear_forward(latents.view(), p, self.layout.dec_embed);
        let mut x = concatenate![Axis(0), projected, p.mat(self.layout.queries)];
        let mut caches = Vec::with_capacity(self.layout.dec_blocks.len());
        for ids in &self.layout.dec_blocks {
            let (y, c) = block_forward(&x, self.config.dec_heads, p, ids);
            caches.push(c);
            x = y;
        }
        let (head_in, norm) = layer_norm_forward(x.slice(s![n.., ..]), p, self.layout.dec_norm);
        let out = linear_forward(head_in.view(), p, self.layout.head);
        let raw = RawGaussians::from_flat(out.as_slice().expect("standard layout")).expect("k×14 output");
        (raw, (caches, norm, head_in))
    }

    /// Full forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward(
        &self,
        tokens: ArrayView2<f64>,
        positions: &[usize],
    ) -> Result<(RawGaussians, ForwardCache), ModelError> {
        self.check_tokens(&tokens, positions)?;
        let p = &self.params;
        let mut x = self.embed(tokens, positions);
        let mut enc_blocks = Vec::with_capacity(self.layout.enc_blocks.len());
        for ids in &self.layout.enc_blocks {
            let (y, c) = block_forward(&x, self.config.enc_heads, p, ids);
            enc_blocks.push(c);
            x = y;
        }
        let (latents, enc_norm) = layer_norm_forward(x.view(), p, self.layout.enc_norm);
        let (raw, (dec_blocks, dec_norm, head_in)) = self.decode_cached(latents.clone());
        Ok((
            raw,
            ForwardCache {
                tokens: tokens.to_owned(),
                enc_blocks,
                enc_out: x,
                enc_norm,
                latents,
                dec_blocks,
                dec_norm,
                head_in,
            },
        ))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/d(raw Gaussians)`.
    pub fn backward(&self, cache: &ForwardCache, d_raw: &[[f64; RAW_DIM]], grads: &mut ParameterStore) {
        let p = &self.params;
        let l = &self.layout;
        let k = self.config.num_queries;
        assert_eq!(d_raw.len(), k, "one gradient row per query");
        let d_out = Array2::from_shape_vec((k, RAW_DIM), d_raw.iter().flatten().copied().collect())
            .expect("k×14 gradient");
        let d_head_in = linear_backward(cache.head_in.view(), d_out.view(), p, l.head, grads);
        let d_query_rows = layer_norm_backward(d_head_in.view(), &cache.dec_norm, p, l.dec_norm, grads);

        let n = cache.latents.nrows();
        let mut dx = Array2::zeros((n + k, self.config.dec_dim));
        dx.slice_mut(s![n.., ..]).assign(&d_query_rows);
        for (ids, c) in l.dec_blocks.iter().zip(&cache.dec_blocks).rev() {
            dx = block_backward(&dx, c, self.config.dec_heads, p, ids, grads);
        }
        {
            let mut dq = grads.mat_mut(l.queries);
            dq += &dx.slice(s![n.., ..]);
        }
        let d_latents = linear_backward(cache.latents.view(), dx.slice(s![..n, ..]), p, l.dec_embed, grads);
        let mut dx = layer_norm_backward(d_latents.view(), &cache.enc_norm, p, l.enc_norm, grads);
        debug_assert_eq!(dx.dim(), cache.enc_out.dim());
        for (ids, c) in l.enc_blocks.iter().zip(&cache.enc_blocks).rev() {
            dx = block_backward(&dx, c, self.config.enc_heads, p, ids, grads);
        }
        linear_backward(cache.tokens.view(), dx.view(), p, l.patch_embed, grads);
    }
}
