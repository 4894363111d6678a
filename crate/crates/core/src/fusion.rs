//! Ways of merging a graph representation into a decoder stage.

use std::fmt::Debug;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ParamStore, Session};
use crate::registry::{Named, Registry};
use crate::tensor::{concat, Var};

pub trait Fusion: Named + Send + Sync {
    /// Creates the per-stage fusion operator and registers its parameters.
    fn build(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Box<dyn FusionStage>;
}

pub trait FusionStage: Debug + Send + Sync {
    fn fuse<'t>(&self, s: &mut Session<'t, '_>, stage: Var<'t>, z: Var<'t>) -> Result<Var<'t>>;
}

fn check_match(stage: &Var<'_>, z: &Var<'_>) -> Result<()> {
    let (a, b) = (stage.shape(), z.shape());
    if a != b {
        return Err(Error::dim(
            "fusion",
            format!("decoder stage {a:?} and graph map {b:?} differ"),
        ));
    }
    Ok(())
}

/// Element-wise addition of the graph map onto the decoder stage.
pub struct AddFusion;

#[derive(Debug)]
struct AddStage;

impl Named for AddFusion {
    fn name(&self) -> &'static str {
        "add"
    }
}

impl Fusion for AddFusion {
    fn build(&self, _: &mut ParamStore, _: &mut ChaCha8Rng, _: &str, _: usize) -> Box<dyn FusionStage> {
        Box::new(AddStage)
    }
}

impl FusionStage for AddStage {
    fn fuse<'t>(&self, _: &mut Session<'t, '_>, stage: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        check_match(&stage, &z)?;
        stage.add(z)
    }
}

/// Channel concatenation followed by a 3×3 convolution back to the stage
/// width.
pub struct ConcatFusion;

#[derive(Debug)]
struct ConcatStage {
    restore: ConvBn,
}

impl Named for ConcatFusion {
    fn name(&self) -> &'static str {
        "concat"
    }
}

impl Fusion for ConcatFusion {
    fn build(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Box<dyn FusionStage> {
        Box::new(ConcatStage {
            restore: ConvBn::new(store, rng, &format!("{name}.restore"), 2 * width, width, 3, 1, true),
        })
    }
}

impl FusionStage for ConcatStage {
    fn fuse<'t>(&self, s: &mut Session<'t, '_>, stage: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        check_match(&stage, &z)?;
        let joined = concat(&[stage, z], 1)?;
        self.restore.forward(s, joined)
    }
}

pub fn builtin() -> Registry<dyn Fusion> {
    let reg: Registry<dyn Fusion> = Registry::new("fusion mode");
    reg.with(Box::new(AddFusion)).with(Box::new(ConcatFusion))
}
