//! Image feature extractor: backbone, per-patch fully connected reshape onto a
//! square grid, a 2D convolution to the decoder width, and three layer
//! normalizations.

mod cnn;

use std::path::Path;

use platter_tape::nn::{normal, xavier, EncoderBlock, LayerNorm, Linear, LAYER_NORM_EPS};
use platter_tape::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::cnn::{CnnBackbone, CnnKind, Conv2d};
use crate::checkpoint::Container;
use crate::corpus::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Vit,
    Resnet18,
    Resnet50,
    Resnet101,
    Inceptionv3,
}

impl Backbone {
    fn cnn_kind(self) -> Option<CnnKind> {
        match self {
            Backbone::Vit => None,
            Backbone::Resnet18 => Some(CnnKind::Resnet18),
            Backbone::Resnet50 => Some(CnnKind::Resnet50),
            Backbone::Resnet101 => Some(CnnKind::Resnet101),
            Backbone::Inceptionv3 => Some(CnnKind::InceptionV3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    /// Patch side (ViT only).
    pub patch_size: usize,
    /// Token width for ViT, channel width for the CNN backbones.
    pub embed_dim: usize,
    /// Number of transformer blocks (ViT only).
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub image_side: usize,
    /// Width of each output vector; must match the decoder context width.
    pub output_dim: usize,
    /// Kernel side of the projection convolution (odd).
    pub conv_kernel: usize,
    /// Grid side after the reshape (ViT only). Defaults to one cell per patch;
    /// a different value adds a learned token-mixing map.
    #[serde(default)]
    pub grid_side: Option<usize>,
}

impl Default for EncoderConfig {
    /// ViT-Base/16 at 224 pixels with a 512-wide output.
    fn default() -> Self {
        Self {
            backbone: Backbone::Vit,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_hidden: 3072,
            image_side: 224,
            output_dim: 512,
            conv_kernel: 3,
            grid_side: None,
        }
    }
}

impl EncoderConfig {
    /// Small ViT for 64-pixel synthetic images: 16 patches of side 16.
    pub fn toy() -> Self {
        Self {
            backbone: Backbone::Vit,
            patch_size: 16,
            embed_dim: 32,
            depth: 1,
            heads: 2,
            mlp_hidden: 64,
            image_side: 64,
            output_dim: 32,
            conv_kernel: 3,
            grid_side: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_side == 0 || self.embed_dim == 0 || self.output_dim == 0 {
            return bad("image_side, embed_dim and output_dim must be positive".into());
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        match self.backbone {
            Backbone::Vit => {
                if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "image_side {} is not divisible by patch_size {}",
                        self.image_side, self.patch_size
                    ));
                }
                if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
                    return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
                }
                if self.depth > 0 && self.mlp_hidden == 0 {
                    return bad("mlp_hidden must be positive".into());
                }
                if self.grid_side == Some(0) {
                    return bad("grid_side must be positive".into());
                }
            }
            _ => {
                if self.grid_side.is_some() {
                    return bad("grid_side applies to the vit backbone only".into());
                }
            }
        }
        Ok(())
    }

    /// Patches per side (ViT) or final feature-map side (CNN).
    pub fn backbone_side(&self) -> usize {
        match self.backbone.cnn_kind() {
            None => self.image_side / self.patch_size,
            Some(kind) => CnnBackbone::out_side(kind, self.image_side),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid_side.unwrap_or_else(|| self.backbone_side())
    }

    /// Output sequence length L.
    pub fn sequence_length(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// `L x output_dim` image embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence(pub Matrix);

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Inputs to each of the three trailing normalizations, standardized per row
/// (before gamma and beta are applied).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    pub normalized: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
enum BackboneNet {
    Vit {
        patch_embed: Linear,
        positions: ParamId,
        blocks: Vec<EncoderBlock>,
        norm: LayerNorm,
        reshape: Linear,
        mix: Option<ParamId>,
    },
    Cnn(CnnBackbone),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    config: EncoderConfig,
    store: ParamStore,
    net: BackboneNet,
    conv: Conv2d,
    norms: [LayerNorm; 3],
}

/// Deterministic initialization for a fixed `(config, seed)`.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<VisionEncoder> {
    VisionEncoder::new(config.clone(), seed)
}

pub fn extract_image_embeddings(image: &ImageTensor, encoder: &VisionEncoder) -> Result<EmbeddingSequence> {
    encoder.extract(image)
}

fn check_finite(g: &Graph, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: format!("encoder.{layer}"),
        })
    }
}

fn standardize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.cols() as f64;
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

impl VisionEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match config.backbone.cnn_kind() {
            None => {
                let p = config.patch_size;
                let patches = config.backbone_side().pow(2);
                let patch_embed = Linear::new(&mut store, "backbone.patch_embed", p * p * 3, config.embed_dim, &mut rng);
                let positions = store.add("backbone.positions", normal(patches, config.embed_dim, 0.02, &mut rng));
                let blocks = (0..config.depth)
                    .map(|i| {
                        EncoderBlock::new(
                            &mut store,
                            &format!("backbone.block{i}"),
                            config.embed_dim,
                            config.heads,
                            config.mlp_hidden,
                            &mut rng,
                        )
                    })
                    .collect();
                let norm = LayerNorm::new(&mut store, "backbone.norm", config.embed_dim);
                let reshape = Linear::new(&mut store, "reshape.fc", config.embed_dim, config.output_dim, &mut rng);
                let cells = config.sequence_length();
                let mix = (cells != patches).then(|| store.add("reshape.mix", xavier(cells, patches, &mut rng)));
                BackboneNet::Vit {
                    patch_embed,
                    positions,
                    blocks,
                    norm,
                    reshape,
                    mix,
                }
            }
            Some(kind) => BackboneNet::Cnn(CnnBackbone::new(&mut store, kind, config.embed_dim, &mut rng)),
        };
        let conv_in = match net {
            BackboneNet::Vit { .. } => config.output_dim,
            BackboneNet::Cnn(_) => config.embed_dim,
        };
        let conv = Conv2d::new(&mut store, "conv", conv_in, config.output_dim, config.conv_kernel, 1, &mut rng);
        let norms = [0, 1, 2].map(|i| LayerNorm::new(&mut store, &format!("norm{i}"), config.output_dim));
        Ok(Self {
            config,
            store,
            net,
            conv,
            norms,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn conv_weight(&self) -> ParamId {
        self.conv.proj.weight
    }

    pub fn norm_gammas(&self) -> [ParamId; 3] {
        [self.norms[0].gamma, self.norms[1].gamma, self.norms[2].gamma]
    }

    fn image_input(&self, g: &mut Graph, image: &ImageTensor) -> Result<Var> {
        let side = self.config.image_side;
        if image.height != side || image.width != side || image.channels != 3 {
            return Err(Error::argument(format!(
                "image is {}x{}x{}, encoder expects {side}x{side}x3",
                image.height, image.width, image.channels
            )));
        }
        Ok(g.input(Matrix::from_vec(side * side, 3, image.values.clone())))
    }

    /// Records the forward pass into `g`; returns the `L x output_dim` output
    /// and the inputs of the three final normalizations.
    pub fn forward_traced(&self, g: &mut Graph, image: &ImageTensor) -> Result<(Var, [Var; 3])> {
        let s = &self.store;
        let x = self.image_input(g, image)?;
        let side = self.config.image_side;
        let (grid_in, h) = match &self.net {
            BackboneNet::Vit {
                patch_embed,
                positions,
                blocks,
                norm,
                reshape,
                mix,
            } => {
                let p = self.config.patch_size;
                let patches = g.im2col(x, side, side, p, p, 0);
                let tokens = patch_embed.forward(g, s, patches);
                let pos = g.param(s, *positions);
                let mut t = g.add(tokens, pos);
                for b in blocks {
                    t = b.forward(g, s, t, None);
                }
                let t = norm.forward(g, s, t);
                check_finite(g, t, "backbone")?;
                let mut r = reshape.forward(g, s, t);
                if let Some(m) = mix {
                    let m = g.param(s, *m);
                    r = g.seq_mix(m, r);
                }
                check_finite(g, r, "reshape")?;
                (r, self.config.grid())
            }
            BackboneNet::Cnn(net) => {
                let (y, h, _) = net.forward(g, s, x, side);
                check_finite(g, y, "backbone")?;
                (y, h)
            }
        };
        let (mut y, _, _) = self.conv.forward(g, s, grid_in, h, h);
        check_finite(g, y, "conv")?;
        let mut inputs = [y; 3];
        for (i, norm) in self.norms.iter().enumerate() {
            inputs[i] = y;
            y = norm.forward(g, s, y);
            check_finite(g, y, &format!("norm{i}"))?;
        }
        Ok((y, inputs))
    }

    pub fn forward(&self, g: &mut Graph, image: &ImageTensor) -> Result<Var> {
        Ok(self.forward_traced(g, image)?.0)
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<EmbeddingSequence> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, image)?;
        Ok(EmbeddingSequence(g.value(y).clone()))
    }

    pub fn extract_traced(&self, image: &ImageTensor) -> Result<(EmbeddingSequence, EncoderTrace)> {
        let mut g = Graph::new();
        let (y, inputs) = self.forward_traced(&mut g, image)?;
        let normalized = inputs.iter().map(|&v| standardize_rows(g.value(v))).collect();
        Ok((EmbeddingSequence(g.value(y).clone()), EncoderTrace { normalized }))
    }

    pub fn save_into(&self, container: &mut Container, prefix: &str) {
        container.push_store(prefix, &self.store);
    }

    pub fn load_from(&mut self, container: &Container, prefix: &str) -> Result<()> {
        container.load_store(prefix, &mut self.store)
    }

    /// Loads backbone weights (parameters named `backbone.*`) from a checkpoint
    /// file whose tensors sit under the `encoder` prefix.
    pub fn load_pretrained_backbone(&mut self, path: &Path) -> Result<()> {
        let c = Container::load(path)?;
        c.load_store_where("encoder", &mut self.store, |n| n.starts_with("backbone."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageTensor;
    use rand::Rng;

    fn image(side: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor {
            height: side,
            width: side,
            channels: 3,
            values: (0..side * side * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    #[test]
    fn rejects_indivisible_side() {
        let cfg = EncoderConfig {
            image_side: 225,
            ..EncoderConfig::default()
        };
        assert_eq!(init_encoder(&cfg, 0).unwrap_err().exit_code(), 2);
        assert_eq!(EncoderConfig::default().sequence_length(), 196);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = EncoderConfig::toy();
        assert_eq!(init_encoder(&cfg, 4).unwrap(), init_encoder(&cfg, 4).unwrap());
        assert_ne!(init_encoder(&cfg, 4).unwrap(), init_encoder(&cfg, 5).unwrap());
    }

    #[test]
    fn zero_image_gives_finite_output() {
        let enc = init_encoder(&EncoderConfig::toy(), 0).unwrap();
        let zero = ImageTensor {
            height: 64,
            width: 64,
            channels: 3,
            values: vec![0.0; 64 * 64 * 3],
        };
        let out = enc.extract(&zero).unwrap();
        assert_eq!((out.len(), out.width()), (16, 32));
        assert!(out.matrix().is_finite());
    }

    #[test]
    fn wrong_image_side_is_an_argument_error() {
        let enc = init_encoder(&EncoderConfig::toy(), 0).unwrap();
        assert_eq!(enc.extract(&image(32, 0)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn trailing_normalizations_standardize_each_vector() {
        let enc = init_encoder(&EncoderConfig::toy(), 2).unwrap();
        let (_, trace) = enc.extract_traced(&image(64, 9)).unwrap();
        assert_eq!(trace.normalized.len(), 3);
        for m in &trace.normalized {
            for r in 0..m.rows() {
                let row = m.row(r);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-4, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            backbone: Backbone::Vit,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 8,
            image_side: 4,
            output_dim: 6,
            conv_kernel: 3,
            grid_side: None,
        };
        let mut enc = init_encoder(&cfg, 1).unwrap();
        assert_eq!(cfg.sequence_length(), 1);
        // Unit gammas make the summed output constant; spread them out.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in enc.norm_gammas() {
            let m = enc.params_mut().get_mut(id);
            m.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
        let img = image(4, 3);
        let probe = |enc: &VisionEncoder| -> f64 { enc.extract(&img).unwrap().matrix().sum() };
        let mut g = Graph::new();
        let y = enc.forward(&mut g, &img).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).for_store(enc.params());
        let w = enc.conv_weight();
        let analytic = grads.get(w).clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let base = enc.params().get(w).data()[i];
            enc.params_mut().get_mut(w).data_mut()[i] = base + h;
            let up = probe(&enc);
            enc.params_mut().get_mut(w).data_mut()[i] = base - h;
            let down = probe(&enc);
            enc.params_mut().get_mut(w).data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cnn_backbones_produce_grid_sequences() {
        for (backbone, side, expected) in [
            (Backbone::Resnet18, 32, 4),
            (Backbone::Resnet50, 32, 4),
            (Backbone::Inceptionv3, 36, 25),
        ] {
            let cfg = EncoderConfig {
                backbone,
                embed_dim: 8,
                image_side: side,
                output_dim: 8,
                ..EncoderConfig::toy()
            };
            let enc = init_encoder(&cfg, 0).unwrap();
            let out = enc.extract(&image(side, 1)).unwrap();
            assert_eq!(out.len(), expected, "{backbone:?}");
            assert_eq!(out.len(), cfg.sequence_length());
            assert!(out.matrix().is_finite());
        }
    }
}
