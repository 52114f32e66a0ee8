//! End-to-end bridge from captions to images: the model set, per-variant
//! bridge targets, grid prediction and guided sampling.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{
    image_to_latent, latent_to_image, sample_latent, BackboneConfig, Control, CrossAttnAdapter, FlowBackbone,
    LatentControlNet,
};
use crate::graph::{Graph, Var};
use crate::latent::{pool_grid, upsample_grid, Image, PatchGrid, ToyEncoder};
use crate::mar::{build_inference_schedule, mar_generate, BranchPredictor};
use crate::mllm::{Mllm, MllmConfig, Routing, SegmentInput};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ENCODER: &str = "encoder";
pub const ENCODER_AUX: &str = "encoder_aux";
pub const SECOND_ENCODER: &str = "encoder2";
pub const QUERY_TOKENS: &str = "gen/query_tokens";

/// Ways of bridging the MLLM to the image backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Masked prediction of the MLLM's own encoder grid, latent ControlNet.
    ClipLatent,
    /// Learnable 2D query tokens read out in one pass, latent ControlNet.
    QueryTokens,
    /// Masked prediction of pooled raw pixels, latent ControlNet.
    RawPixelLatent,
    /// Masked prediction of an independently initialized encoder's grid.
    NonalignedEncoder,
    /// Encoder-grid prediction, backbone steered by cross-attention.
    CrossAttn,
}

pub const ALL_VARIANTS: [Variant; 5] = [
    Variant::ClipLatent,
    Variant::QueryTokens,
    Variant::RawPixelLatent,
    Variant::NonalignedEncoder,
    Variant::CrossAttn,
];

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::ClipLatent => "clip-latent",
            Variant::QueryTokens => "query-tokens",
            Variant::RawPixelLatent => "raw-pixel-latent",
            Variant::NonalignedEncoder => "nonaligned-encoder",
            Variant::CrossAttn => "cross-attn",
        }
    }

    /// Whether the branch learns from masked grid targets.
    pub fn uses_masked_targets(self) -> bool {
        self != Variant::QueryTokens
    }

    pub fn uses_controlnet(self) -> bool {
        self != Variant::CrossAttn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS.into_iter().find(|v| v.id() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Sizes shared by every model of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub grid_dim: usize,
    /// Cells of the generated grid; a perfect square dividing the encoder grid.
    pub tokens: usize,
    pub mllm: MllmConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            grid_dim: 16,
            tokens: 64,
            mllm: MllmConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    /// Side of the generated grid.
    pub fn token_side(&self) -> Result<usize> {
        let s = (self.tokens as f64).sqrt().round() as usize;
        let full = self.grid_side();
        if s == 0 || s * s != self.tokens || !full.is_multiple_of(s) {
            return Err(Error::InvalidArgument(format!(
                "token count {} is not a square dividing the {full}x{full} grid",
                self.tokens
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.token_side()?;
        self.backbone.validate()?;
        let full = self.grid_side();
        let consistent = self.image_size.is_multiple_of(self.patch)
            && self.mllm.dim == self.grid_dim
            && self.mllm.grid_h == full
            && self.mllm.grid_w == full
            && self.backbone.image_size == self.image_size;
        if consistent {
            Ok(())
        } else {
            Err(Error::InvalidArgument("model sizes disagree".into()))
        }
    }
}

/// Every network of the pipeline, sharing one parameter store by namespace.
#[derive(Clone, Debug)]
pub struct Models {
    pub cfg: ModelConfig,
    pub encoder: ToyEncoder,
    pub second_encoder: ToyEncoder,
    pub mllm: Mllm,
    pub backbone: FlowBackbone,
    pub controlnet: LatentControlNet,
    pub xattn: CrossAttnAdapter,
}

impl Models {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = FlowBackbone::new(cfg.backbone.clone())?;
        let xattn = CrossAttnAdapter::new(&backbone, cfg.grid_dim);
        Ok(Self {
            encoder: ToyEncoder::new(ENCODER, cfg.image_size, cfg.patch, cfg.grid_dim),
            second_encoder: ToyEncoder::new(SECOND_ENCODER, cfg.image_size, cfg.patch, cfg.grid_dim),
            mllm: Mllm::new(cfg.mllm.clone()),
            controlnet: LatentControlNet::new(cfg.grid_dim, cfg.grid_side()),
            xattn,
            backbone,
            cfg,
        })
    }

    /// Encoder grid pooled down to the generated-grid size.
    fn pooled(&self, grid: PatchGrid) -> Result<PatchGrid> {
        let s = self.cfg.token_side()?;
        if s == self.cfg.grid_side() {
            Ok(grid)
        } else {
            pool_grid(&grid, self.cfg.grid_side() / s)
        }
    }

    /// Teacher-forcing target of the generation branch for one image.
    pub fn bridge_target(&self, store: &ParamStore, variant: Variant, image: &Image) -> Result<PatchGrid> {
        let full = match variant {
            Variant::ClipLatent | Variant::CrossAttn | Variant::QueryTokens => self.encoder.encode(image, store)?,
            Variant::NonalignedEncoder => self.second_encoder.encode(image, store)?,
            Variant::RawPixelLatent => self.pixel_grid(image)?,
        };
        self.pooled(full)
    }

    /// Image pooled to the encoder grid, mapped to `[-1, 1]` and zero-padded
    /// from 3 to `grid_dim` channels.
    pub fn pixel_grid(&self, image: &Image) -> Result<PatchGrid> {
        let side = self.cfg.grid_side();
        let p = self.cfg.patch;
        if image.height() != self.cfg.image_size || image.width() != self.cfg.image_size {
            return shape_err(format!("image {}x{}", image.height(), image.width()));
        }
        let mut t = Tensor::zeros(side * side, self.cfg.grid_dim);
        let inv = 1.0 / (p * p) as f64;
        for i in 0..side {
            for j in 0..side {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for y in 0..p {
                        for x in 0..p {
                            acc += image.get(c, i * p + y, j * p + x);
                        }
                    }
                    t.set(i * side + j, c, 2.0 * acc * inv - 1.0);
                }
            }
        }
        PatchGrid::new(side, side, t)
    }

    /// Generated-size grid brought back to the ControlNet input size.
    pub fn control_grid(&self, grid: &PatchGrid) -> Result<PatchGrid> {
        let full = self.cfg.grid_side();
        if grid.height() == full {
            return Ok(grid.clone());
        }
        if !full.is_multiple_of(grid.height()) || grid.height() != grid.width() {
            return shape_err(format!("grid {}x{} for control side {full}", grid.height(), grid.width()));
        }
        upsample_grid(grid, full / grid.height())
    }

    /// MAR decoding of a grid from a caption.
    pub fn predict_grid_mar(&self, store: &ParamStore, caption: &[usize], steps: usize, seed: u64) -> Result<PatchGrid> {
        let s = self.cfg.token_side()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedule = build_inference_schedule(&mut rng, s * s, steps)?;
        let predictor = BranchPredictor { model: &self.mllm, store };
        mar_generate(&predictor, caption, &schedule, s, s, self.cfg.grid_dim)
    }

    /// Query-token readout on the tape: one pass over `[Text, ImgG(queries)]`.
    pub fn query_readout(&self, g: &mut Graph, store: &ParamStore, caption: &[usize]) -> Result<Var> {
        let q = g.param(store, QUERY_TOKENS)?;
        let out = self.mllm.forward(
            g,
            store,
            &[SegmentInput::Text(caption.to_vec()), SegmentInput::ImgG(q)],
            Routing::Branched,
        )?;
        Ok(out.vision.expect("ImgG segment present"))
    }

    pub fn predict_grid_query(&self, store: &ParamStore, caption: &[usize]) -> Result<PatchGrid> {
        let s = self.cfg.token_side()?;
        let mut g = Graph::inference();
        let v = self.query_readout(&mut g, store, caption)?;
        PatchGrid::new(s, s, g.value(v).clone())
    }

    /// Grid the variant hands to the image side for a caption.
    pub fn predict_grid(
        &self,
        store: &ParamStore,
        variant: Variant,
        caption: &[usize],
        decode_steps: usize,
        seed: u64,
    ) -> Result<PatchGrid> {
        match variant {
            Variant::QueryTokens => self.predict_grid_query(store, caption),
            _ => self.predict_grid_mar(store, caption, decode_steps, seed),
        }
    }

    /// Samples a latent steered by `grid` (generated-size) and decodes it.
    #[allow(clippy::too_many_arguments)]
    pub fn render_grid(
        &self,
        store: &ParamStore,
        variant: Variant,
        grid: &PatchGrid,
        caption: &[usize],
        sample_steps: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Image> {
        let latent = match variant {
            Variant::CrossAttn => {
                let control = Control::CrossAttn { adapter: &self.xattn, tokens: grid.tokens() };
                sample_latent(&self.backbone, store, &control, caption, sample_steps, seed)?
            }
            _ => {
                let cg = self.control_grid(grid)?;
                let control = Control::ControlNet { cn: &self.controlnet, grid: &cg, scale };
                sample_latent(&self.backbone, store, &control, caption, sample_steps, seed)?
            }
        };
        latent_to_image(&latent, &self.backbone.cfg)
    }

    /// Caption → grid → image.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        store: &ParamStore,
        variant: Variant,
        caption: &[usize],
        decode_steps: usize,
        sample_steps: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Image> {
        let grid = self.predict_grid(store, variant, caption, decode_steps, seed)?;
        self.render_grid(store, variant, &grid, caption, sample_steps, scale, seed)
    }

    /// Image → ground-truth bridge grid → image.
    #[allow(clippy::too_many_arguments)]
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        variant: Variant,
        image: &Image,
        caption: &[usize],
        sample_steps: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Image> {
        let grid = match variant {
            Variant::QueryTokens => self.predict_grid_query(store, caption)?,
            _ => self.bridge_target(store, variant, image)?,
        };
        self.render_grid(store, variant, &grid, caption, sample_steps, scale, seed)
    }

    /// Unconditional backbone sample for a caption.
    pub fn unconditional(&self, store: &ParamStore, caption: &[usize], sample_steps: usize, seed: u64) -> Result<Image> {
        let latent = sample_latent(&self.backbone, store, &Control::None, caption, sample_steps, seed)?;
        latent_to_image(&latent, &self.backbone.cfg)
    }

    pub fn image_latent(&self, image: &Image) -> Result<Tensor> {
        image_to_latent(image, &self.backbone.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn variant_ids_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(v.id().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("vae".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn token_side_rules() {
        let mut cfg = ModelConfig::default();
        for (t, s) in [(64, 8), (16, 4), (4, 2), (1, 1)] {
            cfg.tokens = t;
            assert_eq!(cfg.token_side().unwrap(), s);
        }
        for bad in [0, 8, 9, 36] {
            cfg.tokens = bad;
            assert!(cfg.token_side().is_err(), "{bad}");
        }
    }

    #[test]
    fn pixel_grid_pools_and_pads() {
        let m = Models::new(ModelConfig::default()).unwrap();
        let img = Image::filled(32, 32, [0.25, 0.5, 1.0]);
        let g = m.pixel_grid(&img).unwrap();
        assert_eq!((g.height(), g.dim()), (8, 16));
        assert_eq!(&g.cell(10)[..4], &[-0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn coarse_targets_are_pooled_then_upsampled_for_control() {
        let cfg = ModelConfig { tokens: 16, ..ModelConfig::default() };
        let m = Models::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.encoder.init(&mut store, &mut rng, true);
        let img = generate_synthetic_dataset(0, 1).unwrap().samples[0].image.clone();
        let t = m.bridge_target(&store, Variant::ClipLatent, &img).unwrap();
        assert_eq!((t.height(), t.width()), (4, 4));
        let full = m.encoder.encode(&img, &store).unwrap();
        assert!(t.bit_eq(&pool_grid(&full, 2).unwrap()));
        let c = m.control_grid(&t).unwrap();
        assert_eq!((c.height(), c.width()), (8, 8));
        assert_eq!(c.cell(9), t.cell(0));
    }
}
