//! Mapping graph features back to convolutional maps, and the graph branch's
//! own mask head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::unflatten_nodes;
use crate::nn::{BatchNorm, Conv2d, ParamStore, Session};
use crate::tensor::Var;

/// `Z = up(BN(Conv1x1(F' ⊕ P')))` for one level.
#[derive(Debug)]
pub struct GraphToCnn {
    conv: Conv2d,
    norm: BatchNorm,
}

impl GraphToCnn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, stride: usize) -> Self {
        GraphToCnn {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), width, width, 1, stride, true),
            norm: BatchNorm::new(store, &format!("{name}.bn"), width),
        }
    }

    /// `f` is `[B,N,C]` from the graph convolution, `p_prime` the map the
    /// graph was built from, `target` the decoder stage size.
    pub fn graph_to_cnn<'t>(
        &self,
        s: &mut Session<'t, '_>,
        f: Var<'t>,
        p_prime: Var<'t>,
        target: (usize, usize),
    ) -> Result<Var<'t>> {
        let ps = p_prime.shape();
        let [_, _, h, w] = ps[..] else {
            return Err(Error::dim("graph_to_cnn", format!("P' must be 4-D, got {ps:?}")));
        };
        let f_map = unflatten_nodes(f, h, w)?;
        if f_map.shape() != ps {
            return Err(Error::dim(
                "graph_to_cnn",
                format!("graph map {:?} and P' {ps:?} differ", f_map.shape()),
            ));
        }
        let y = self.conv.forward(s, f_map.add(p_prime)?)?;
        let y = self.norm.forward(s, y)?;
        y.upsample_bilinear(target.0, target.1)
    }
}

/// Branch prediction `R(X)`: the 1×1 projection of the sum of all `Z_i`
/// upsampled to the input size, squashed by a sigmoid.
///
/// Projection and bilinear resizing are both linear, so each `Z_i` is
/// projected first and resized as a single channel.
#[derive(Debug)]
pub struct HgrlHead {
    proj: Conv2d,
}

impl HgrlHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, width: usize) -> Self {
        HgrlHead {
            proj: Conv2d::new(store, rng, "hgrl.head", width, 1, 1, 1, true),
        }
    }

    pub fn predict<'t>(&self, s: &Session<'t, '_>, z: &[Var<'t>], size: (usize, usize)) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for (i, &zi) in z.iter().enumerate() {
            let y = self
                .proj
                .forward_with_bias(s, zi, i == 0)?
                .upsample_bilinear(size.0, size.1)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(y)?,
            });
        }
        let logits = acc.ok_or_else(|| Error::Contract("graph branch has no enabled level".into()))?;
        Ok(logits.sigmoid())
    }
}
