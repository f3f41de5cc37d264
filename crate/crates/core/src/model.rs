//! Self-induction reconstruction model.
//!
//! `forward` runs: patch embedding, one hybrid sequence per subset, the
//! encoder on every hybrid sequence, reassembly of the induction latents,
//! the decoder (positions added again) and the reconstruction head.
//! `forward_vanilla` skips the induction step and encodes the plain token
//! sequence once.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::backbone::FeatureMap;
use crate::config::{ModelConfig, PositionalScheme};
use crate::error::{Result, SivtError};
use crate::induction::{build_hybrid_sequences, reassemble_latents, scatter_latent_grad, InductionPartition};
use crate::nn::{stack_backward, stack_forward, truncated_normal, Block, BlockCache, Linear, ParamTree};
use crate::objective::{reconstruction_loss_with_grad, LossBreakdown};
use crate::tokenizer::{patchify, sincos_2d, unpatchify, PatchGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct SivtParameters {
    pub patch_embed: Linear,
    /// Positional table. Only a trainable tensor under the learnable scheme.
    pub pos_embed: Array2<f64>,
    pub learnable_pos: bool,
    /// Induction bank, same shape as the token sequence.
    pub induction: Array2<f64>,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    /// Reconstruction head, `D → P·P·C`.
    pub head: Linear,
}

impl SivtParameters {
    pub fn init(config: &ModelConfig) -> Self {
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.num_tokens();
        let d = m.embed_dim;
        let side = config.backbone.target_size / m.patch_size;
        let patch_embed = Linear::init(config.patch_dim(), d, m.init_std, &mut rng);
        let induction = Array2::from_shape_simple_fn((l, d), || truncated_normal(&mut rng, m.init_std));
        let encoder = (0..m.encoder_depth)
            .map(|_| Block::init(d, m.mlp_ratio, m.init_std, &mut rng))
            .collect();
        let decoder = (0..m.decoder_depth)
            .map(|_| Block::init(d, m.mlp_ratio, m.init_std, &mut rng))
            .collect();
        let head = Linear::init(d, config.patch_dim(), m.init_std, &mut rng);
        Self {
            patch_embed,
            pos_embed: sincos_2d(side, side, d),
            learnable_pos: m.positional == PositionalScheme::Learnable,
            induction,
            encoder,
            decoder,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z.pos_embed.fill(0.0);
        z
    }
}

impl ParamTree for SivtParameters {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.patch_embed.named(&p("patch_embed"), out);
        if self.learnable_pos {
            out.push((p("pos_embed"), self.pos_embed.view().into_dyn()));
        }
        out.push((p("induction"), self.induction.view().into_dyn()));
        self.encoder.named(&p("encoder"), out);
        self.decoder.named(&p("decoder"), out);
        self.head.named(&p("head"), out);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let SivtParameters {
            patch_embed,
            pos_embed,
            learnable_pos,
            induction,
            encoder,
            decoder,
            head,
        } = self;
        patch_embed.named_mut(&p("patch_embed"), out);
        if *learnable_pos {
            out.push((p("pos_embed"), pos_embed.view_mut().into_dyn()));
        }
        out.push((p("induction"), induction.view_mut().into_dyn()));
        encoder.named_mut(&p("encoder"), out);
        decoder.named_mut(&p("decoder"), out);
        head.named_mut(&p("head"), out);
    }
}

/// Everything the backward pass needs from one forward pass.
struct Trace {
    patches: Array2<f64>,
    grid: PatchGrid,
    /// Encoder caches, one stack per encoded sequence.
    encoder: Vec<Vec<BlockCache>>,
    /// Substitution masks per hybrid sequence; empty for the vanilla route.
    masks: Vec<Vec<bool>>,
    latents: Array2<f64>,
    decoder: Vec<BlockCache>,
    decoded: Array2<f64>,
    recon: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SivtModel {
    pub config: ModelConfig,
    pub params: SivtParameters,
}

impl SivtModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = SivtParameters::init(&config);
        Ok(Self { config, params })
    }

    fn heads(&self) -> usize {
        self.config.model.heads
    }

    fn eps(&self) -> f64 {
        self.config.model.layer_norm_eps
    }

    fn check_feature(&self, feature: &FeatureMap) -> Result<()> {
        let t = self.config.backbone.target_size;
        let expected = (t, t, self.config.backbone.expected_channels);
        if feature.shape() != expected {
            return Err(SivtError::Shape(format!(
                "feature map {:?} does not match configured {:?}",
                feature.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Patch rows and embedded tokens (`proj(patch) + pos`).
    pub fn embed(&self, feature: &FeatureMap) -> Result<(Array2<f64>, Array2<f64>, PatchGrid)> {
        self.check_feature(feature)?;
        let (patches, grid) = patchify(feature, self.config.model.patch_size)?;
        let tokens = self.params.patch_embed.forward(&patches) + &self.params.pos_embed;
        Ok((patches, tokens, grid))
    }

    pub fn encode(&self, phi: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(stack_forward(&self.params.encoder, phi, self.heads(), self.eps(), "encoder")?.0)
    }

    /// Decoder stack over `z + pos`, then the reconstruction head.
    pub fn decode(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        if latents.dim() != self.params.pos_embed.dim() {
            return Err(SivtError::Shape(format!(
                "latents {:?} do not match positional table {:?}",
                latents.dim(),
                self.params.pos_embed.dim()
            )));
        }
        let input = latents + &self.params.pos_embed;
        let (out, _) = stack_forward(&self.params.decoder, &input, self.heads(), self.eps(), "decoder")?;
        Ok(self.params.head.forward(&out))
    }

    /// Reassembled induction latents for a given partition.
    pub fn induction_latents(&self, feature: &FeatureMap, part: &InductionPartition) -> Result<Array2<f64>> {
        Ok(self.trace(feature, Some(part))?.latents)
    }

    pub fn forward(&self, feature: &FeatureMap, part: &InductionPartition) -> Result<FeatureMap> {
        Ok(self.trace(feature, Some(part))?.recon)
    }

    pub fn forward_vanilla(&self, feature: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.trace(feature, None)?.recon)
    }

    fn trace(&self, feature: &FeatureMap, part: Option<&InductionPartition>) -> Result<Trace> {
        let (patches, tokens, grid) = self.embed(feature)?;
        let (heads, eps) = (self.heads(), self.eps());
        let (encoder, masks, latents) = match part {
            Some(part) => {
                if part.len() != grid.len() {
                    return Err(SivtError::Shape(format!(
                        "partition over {} positions, feature has {} tokens",
                        part.len(),
                        grid.len()
                    )));
                }
                let hybrids = build_hybrid_sequences(&tokens, &self.params.induction, part)?;
                let mut caches = Vec::with_capacity(hybrids.len());
                let mut outs = Vec::with_capacity(hybrids.len());
                let mut masks = Vec::with_capacity(hybrids.len());
                for phi in hybrids {
                    let (z, c) = stack_forward(&self.params.encoder, &phi.tokens, heads, eps, "encoder")?;
                    outs.push(z);
                    caches.push(c);
                    masks.push(phi.mask);
                }
                (caches, masks, reassemble_latents(&outs, part)?)
            }
            None => {
                let (z, c) = stack_forward(&self.params.encoder, &tokens, heads, eps, "encoder")?;
                (vec![c], Vec::new(), z)
            }
        };
        let dec_in = &latents + &self.params.pos_embed;
        let (decoded, decoder) = stack_forward(&self.params.decoder, &dec_in, heads, eps, "decoder")?;
        let rows = self.params.head.forward(&decoded);
        let recon = unpatchify(&rows, grid)?;
        Ok(Trace {
            patches,
            grid,
            encoder,
            masks,
            latents,
            decoder,
            decoded,
            recon,
        })
    }

    /// Reconstruction loss and its gradient with respect to every
    /// parameter. `part = None` trains the vanilla route.
    pub fn loss_and_grad(
        &self,
        feature: &FeatureMap,
        part: Option<&InductionPartition>,
    ) -> Result<(LossBreakdown, SivtParameters)> {
        let trace = self.trace(feature, part)?;
        let scoring = &self.config.scoring;
        let (loss, d_recon) =
            reconstruction_loss_with_grad(feature, &trace.recon, scoring.lambda, scoring.cosine_eps)?;
        let grads = self.backward(&trace, &FeatureMap { data: d_recon }, part);
        Ok((loss, grads))
    }

    fn backward(&self, trace: &Trace, d_recon: &FeatureMap, part: Option<&InductionPartition>) -> SivtParameters {
        let p = &self.params;
        let heads = self.heads();
        let mut g = p.zeros_like();
        let (d_rows, _) = patchify(d_recon, trace.grid.patch).expect("gradient has the feature shape");
        let d_decoded = p.head.backward(&trace.decoded, &d_rows, &mut g.head);
        let d_dec_in = stack_backward(&p.decoder, &trace.decoder, d_decoded, heads, &mut g.decoder);
        if p.learnable_pos {
            g.pos_embed += &d_dec_in;
        }
        let d_tokens = match part {
            Some(part) => {
                let mut d_tokens = Array2::zeros(d_dec_in.raw_dim());
                for ((dz, caches), mask) in scatter_latent_grad(&d_dec_in, part)
                    .into_iter()
                    .zip(&trace.encoder)
                    .zip(&trace.masks)
                {
                    let d_phi = stack_backward(&p.encoder, caches, dz, heads, &mut g.encoder);
                    for (pos, &from_bank) in mask.iter().enumerate() {
                        let target = if from_bank { &mut g.induction } else { &mut d_tokens };
                        let mut row = target.row_mut(pos);
                        row += &d_phi.row(pos);
                    }
                }
                d_tokens
            }
            None => stack_backward(&p.encoder, &trace.encoder[0], d_dec_in, heads, &mut g.encoder),
        };
        if p.learnable_pos {
            g.pos_embed += &d_tokens;
        }
        p.patch_embed.backward(&trace.patches, &d_tokens, &mut g.patch_embed);
        g
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Store every trainable tensor as `<prefix><name>`.
    pub fn write_params(&self, archive: &mut TensorArchive, prefix: &str) {
        for (name, t) in self.params.tensors() {
            archive.insert(format!("{prefix}{name}"), t.to_owned());
        }
    }

    /// Rebuild a model for `config` and fill it from an archive, rejecting
    /// missing tensors and shape mismatches.
    pub fn read_params(config: ModelConfig, archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let mut model = Self::new(config)?;
        for (name, mut t) in model.params.tensors_mut() {
            let stored = archive.tensor(&format!("{prefix}{name}"), t.shape())?;
            t.assign(stored);
        }
        Ok(model)
    }
}

/// Analytic multiply-accumulate counts for one forward pass.
///
/// Per transformer block over `L` tokens of width `D` with MLP ratio `r`:
/// `3LD²` (qkv) + `2L²D` (scores and weighted values) + `LD²` (output
/// projection) + `2rLD²` (MLP). The encoder runs `N` times under
/// self-induction and once for the vanilla route; the decoder runs once.
/// Patch embedding and head each cost `L·(P²C)·D`. Norms, softmax and
/// activations are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub patch_embed: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.encoder + self.decoder + self.head
    }
}

/// Trainable parameter count implied by a configuration.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let m = &config.model;
    let (d, l, pd) = (m.embed_dim, config.num_tokens(), config.patch_dim());
    let hidden = m.mlp_ratio * d;
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    let pos = if m.positional == PositionalScheme::Learnable { l * d } else { 0 };
    (pd * d + d) + pos + l * d + (m.encoder_depth + m.decoder_depth) * block + (d * pd + pd)
}

pub fn block_flops(tokens: u64, dim: u64, mlp_ratio: u64) -> u64 {
    let (l, d) = (tokens, dim);
    3 * l * d * d + 2 * l * l * d + l * d * d + 2 * mlp_ratio * l * d * d
}

pub fn count_flops(config: &ModelConfig, vanilla: bool) -> FlopCount {
    let m = &config.model;
    let l = config.num_tokens() as u64;
    let d = m.embed_dim as u64;
    let block = block_flops(l, d, m.mlp_ratio as u64);
    let passes = if vanilla { 1 } else { m.subsets as u64 };
    let proj = l * config.patch_dim() as u64 * d;
    FlopCount {
        patch_embed: proj,
        encoder: passes * m.encoder_depth as u64 * block,
        decoder: m.decoder_depth as u64 * block,
        head: proj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::induction::seeded_partition;
    use ndarray::{s, Array3};
    use rand_distr::{Distribution, Normal};

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.backbone.target_size = 4;
        c.backbone.expected_channels = 3;
        c.backbone.stage_channels = vec![1, 1, 1];
        c.model.embed_dim = 8;
        c.model.heads = 2;
        c.model.subsets = 2;
        c.model.mlp_ratio = 2;
        c.model.init_std = 0.3;
        c
    }

    fn random_feature(c: &ModelConfig, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let t = c.backbone.target_size;
        FeatureMap {
            data: Array3::from_shape_simple_fn((t, t, c.backbone.expected_channels), || n.sample(&mut rng)),
        }
    }

    #[test]
    fn output_shape_preserved_both_routes() {
        let c = tiny_config();
        let model = SivtModel::new(c.clone()).unwrap();
        let f = random_feature(&c, 1);
        let part = seeded_partition(4, 2, 0).unwrap();
        assert_eq!(model.forward(&f, &part).unwrap().shape(), f.shape());
        assert_eq!(model.forward_vanilla(&f).unwrap().shape(), f.shape());
        let wrong = FeatureMap::zeros(4, 4, 5);
        assert!(matches!(model.forward_vanilla(&wrong), Err(SivtError::Shape(_))));
    }

    #[test]
    fn empty_encoder_is_identity() {
        let mut c = tiny_config();
        c.model.encoder_depth = 0;
        let model = SivtModel::new(c.clone()).unwrap();
        let x = random_feature(&c, 2).data.into_shape_with_order((4, 12)).unwrap();
        let x = x.slice(s![.., ..8]).to_owned();
        assert_eq!(model.encode(&x).unwrap(), x);
    }

    #[test]
    fn empty_decoder_with_identity_head_adds_positions() {
        let mut c = tiny_config();
        c.model.decoder_depth = 0;
        c.backbone.target_size = 2;
        c.model.patch_size = 1;
        c.model.subsets = 1;
        c.backbone.expected_channels = 8;
        c.backbone.stage_channels = vec![8];
        c.backbone.layers = vec![0];
        let mut model = SivtModel::new(c).unwrap();
        model.params.head.weight = Array2::eye(8);
        model.params.head.bias.fill(0.0);
        let z = Array2::from_shape_fn((4, 8), |(i, j)| (i * 8 + j) as f64);
        assert_eq!(model.decode(&z).unwrap(), &z + &model.params.pos_embed);
    }

    #[test]
    fn decoder_mixes_positions() {
        let c = tiny_config();
        let model = SivtModel::new(c).unwrap();
        let z = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let base = model.decode(&z).unwrap();
        assert_eq!(base, model.decode(&z).unwrap());
        let mut z2 = z.clone();
        z2[[0, 0]] += 0.5;
        let moved = model.decode(&z2).unwrap();
        for row in 0..4 {
            assert_ne!(base.row(row), moved.row(row));
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let c = tiny_config();
        let model = SivtModel::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_simple_fn((6, 8), || n.sample(&mut rng));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Array2::from_shape_fn((6, 8), |(i, j)| x[[perm[i], j]]);
        let y = model.encode(&x).unwrap();
        let yp = model.encode(&xp).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                assert!((yp[[i, j]] - y[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_formula_matches_tensors() {
        for scheme in [PositionalScheme::FixedSinusoidal, PositionalScheme::Learnable] {
            let mut c = ModelConfig::toy();
            c.model.positional = scheme;
            let model = SivtModel::new(c.clone()).unwrap();
            let from_shapes: usize = model.params.tensors().iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
            assert_eq!(from_shapes, count_parameters(&c));
        }
    }

    #[test]
    fn flops_scale_with_subsets_and_tokens() {
        let mut c = ModelConfig::default();
        let base = count_flops(&c, false);
        c.model.subsets = 8;
        let doubled = count_flops(&c, false);
        assert_eq!(doubled.encoder, 2 * base.encoder);
        assert!(doubled.total() > base.total());
        let l = 256;
        let attn = |l: u64| 2 * l * l * 240;
        assert_eq!(attn(l / 4) * 16, attn(l));
        assert_eq!(count_flops(&c, true).encoder, base.encoder / 4);
    }

    #[test]
    fn default_parameter_count_near_reported_size() {
        let c = ModelConfig::default();
        let model = SivtModel::new(c).unwrap();
        let n = model.num_parameters();
        assert_eq!(n, count_parameters(&model.config));
        // Reported size of the reference model is 14.59 M.
        assert!((13_000_000..16_000_000).contains(&n), "{n}");
    }
}
