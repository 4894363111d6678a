//! Residual encoder, feature pyramid and the fusing top-down decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionStage};
use crate::nn::{Conv2d, ConvBn, ParamStore, Session};
use crate::tensor::Var;

pub const STEM_WIDTH: usize = 16;
pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Channel width of every pyramid level after the lateral projections.
pub const PYRAMID_WIDTH: usize = 32;
/// Down-scaling of P1..P4 relative to the input image.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const NUM_LEVELS: usize = 4;

/// Input extents must be multiples of the coarsest stride.
pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    let s = LEVEL_STRIDES[NUM_LEVELS - 1];
    if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
        return Err(Error::Config(format!(
            "input {height}x{width} is not a positive multiple of {s}"
        )));
    }
    Ok(())
}

/// The four pyramid maps P1..P4 (finest first).
pub struct FeaturePyramid<'t> {
    pub levels: [Var<'t>; NUM_LEVELS],
    pub strides: [usize; NUM_LEVELS],
    /// Stride-2 stem features, consumed by the decoder's last refinement.
    pub fine: Var<'t>,
    pub input_size: (usize, usize),
}

impl<'t> FeaturePyramid<'t> {
    pub fn level(&self, i: usize) -> Var<'t> {
        self.levels[i]
    }

    /// Spatial size of level `i` (0-based).
    pub fn level_size(&self, i: usize) -> (usize, usize) {
        let s = self.strides[i];
        (self.input_size.0 / s, self.input_size.1 / s)
    }
}

#[derive(Debug)]
struct ResBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, stride, false));
        ResBlock {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            shortcut,
        }
    }

    fn forward<'t>(&self, s: &mut Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv1.forward(s, x)?;
        let y = self.conv2.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        Ok(y.add(skip)?.relu())
    }
}

/// Encoder plus lateral/top-down pathway producing the pyramid.
#[derive(Debug)]
pub struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<ResBlock>>,
    laterals: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBn::new(store, rng, "encoder.stem", 3, STEM_WIDTH, 3, 2, true);
        let mut stages = Vec::new();
        let mut cin = STEM_WIDTH;
        for (i, &width) in STAGE_WIDTHS.iter().enumerate() {
            let blocks = (0..2)
                .map(|j| {
                    let name = format!("encoder.stage{}.block{j}", i + 1);
                    let (c, stride) = if j == 0 { (cin, 2) } else { (width, 1) };
                    ResBlock::new(store, rng, &name, c, width, stride)
                })
                .collect();
            stages.push(blocks);
            cin = width;
        }
        let laterals = STAGE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv2d::new(store, rng, &format!("fpn.lateral{}", i + 1), w, PYRAMID_WIDTH, 1, 1, true))
            .collect();
        Backbone { stem, stages, laterals }
    }

    /// Runs the encoder on `[B,3,H,W]` and builds P1..P4.
    pub fn extract_pyramid<'t>(&self, s: &mut Session<'t, '_>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let shape = image.shape();
        let [_, 3, h, w] = shape[..] else {
            return Err(Error::dim("extract_pyramid", format!("expected [B,3,H,W], got {shape:?}")));
        };
        check_input_size(h, w)?;
        let fine = self.stem.forward(s, image)?;
        let mut x = fine;
        let mut taps = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(s, x)?;
            }
            taps.push(x);
        }
        let lateral: Vec<Var<'t>> = taps
            .iter()
            .zip(&self.laterals)
            .map(|(&t, conv)| conv.forward(s, t))
            .collect::<Result<_>>()?;
        let mut levels = lateral.clone();
        for i in (0..NUM_LEVELS - 1).rev() {
            let (lh, lw) = (h / LEVEL_STRIDES[i], w / LEVEL_STRIDES[i]);
            let up = levels[i + 1].upsample_bilinear(lh, lw)?;
            levels[i] = lateral[i].add(up)?;
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            strides: LEVEL_STRIDES,
            fine,
            input_size: (h, w),
        })
    }
}

#[derive(Debug)]
struct DecoderStage {
    fuse: Option<Box<dyn FusionStage>>,
    conv: ConvBn,
}

/// Top-down decoder. Stage `i` works at the stride of P_i; its input is the
/// upsampled coarser stage plus the pyramid map, and that is where the
/// graph map Z_i is fused in.
#[derive(Debug)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    refine_proj: Conv2d,
    refine: ConvBn,
    head: Conv2d,
}

impl Decoder {
    /// `fused_levels[i]` says whether stage `i` receives a graph map.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        fusion: &dyn Fusion,
        fused_levels: [bool; NUM_LEVELS],
    ) -> Self {
        let stages = (0..NUM_LEVELS)
            .map(|i| {
                let name = format!("decoder.stage{}", i + 1);
                DecoderStage {
                    fuse: fused_levels[i]
                        .then(|| fusion.build(store, rng, &format!("{name}.fuse"), PYRAMID_WIDTH)),
                    conv: ConvBn::new(store, rng, &format!("{name}.conv"), PYRAMID_WIDTH, PYRAMID_WIDTH, 3, 1, true),
                }
            })
            .collect();
        Decoder {
            stages,
            refine_proj: Conv2d::new(store, rng, "decoder.refine.proj", PYRAMID_WIDTH, STEM_WIDTH, 1, 1, true),
            refine: ConvBn::new(store, rng, "decoder.refine.conv", STEM_WIDTH, STEM_WIDTH, 3, 1, true),
            head: Conv2d::new(store, rng, "decoder.head", STEM_WIDTH, 1, 1, 1, true),
        }
    }

    pub fn fuses(&self, level: usize) -> bool {
        self.stages[level].fuse.is_some()
    }

    /// Produces `[B,1,H,W]` logits. Levels whose `z` is `None` skip fusion.
    pub fn decode_fuse_predict<'t>(
        &self,
        s: &mut Session<'t, '_>,
        pyramid: &FeaturePyramid<'t>,
        z: &[Option<Var<'t>>; NUM_LEVELS],
    ) -> Result<Var<'t>> {
        let mut d: Option<Var<'t>> = None;
        for i in (0..NUM_LEVELS).rev() {
            let (lh, lw) = pyramid.level_size(i);
            let mut u = match d {
                None => pyramid.level(i),
                Some(prev) => prev.upsample_bilinear(lh, lw)?.add(pyramid.level(i))?,
            };
            let stage = &self.stages[i];
            if let Some(zi) = z[i] {
                let fuse = stage.fuse.as_ref().ok_or_else(|| {
                    Error::Contract(format!("decoder stage {} has no fusion operator", i + 1))
                })?;
                u = fuse.fuse(s, u, zi)?;
            }
            d = Some(stage.conv.forward(s, u)?);
        }
        let d = d.expect("at least one stage");
        let fine_shape = pyramid.fine.shape();
        let r = self
            .refine_proj
            .forward(s, d)?
            .upsample_bilinear(fine_shape[2], fine_shape[3])?
            .add(pyramid.fine)?;
        let r = self.refine.forward(s, r)?;
        let (h, w) = pyramid.input_size;
        self.head.forward(s, r)?.upsample_bilinear(h, w)
    }
}
