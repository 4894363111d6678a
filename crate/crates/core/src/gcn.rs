//! Two-layer graph convolution applied independently to every pyramid level.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::NUM_LEVELS;
use crate::error::{Error, Result};
use crate::graph::GridGraph;
use crate::nn::{glorot_uniform, ParamId, ParamStore, Session};
use crate::tensor::Var;

/// Axis the output softmax normalizes over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Each node's channel vector sums to one.
    #[default]
    Channel,
    /// Each channel sums to one across the nodes.
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnActivation {
    Relu,
    Softmax(SoftmaxAxis),
}

/// Computes `act(Â · X · M)` for `X: [B,N,C_in]`, `M: [C_in,C_out]`.
pub fn gcn_layer<'t>(adj: Var<'t>, x: Var<'t>, weight: Var<'t>, act: GcnActivation) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] {
        return Err(Error::dim(
            "gcn_layer",
            format!("features {xs:?} do not match weight {ws:?}"),
        ));
    }
    let mixed = adj.matmul(x.matmul(weight)?)?;
    Ok(match act {
        GcnActivation::Relu => mixed.relu(),
        GcnActivation::Softmax(SoftmaxAxis::Channel) => mixed.softmax(2)?,
        GcnActivation::Softmax(SoftmaxAxis::Node) => mixed.softmax(1)?,
    })
}

/// Weights of the two graph-convolution layers of one level.
#[derive(Clone, Debug)]
pub struct GcnParams {
    pub first: ParamId,
    pub second: ParamId,
}

impl GcnParams {
    /// Hidden width equals the input width so the output matches `P'`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        GcnParams {
            first: store.add(format!("{name}.m0"), glorot_uniform(rng, width, width)),
            second: store.add(format!("{name}.m1"), glorot_uniform(rng, width, width)),
        }
    }
}

/// Per-level node features `F_i: [B, N_i, C]`; `None` for disabled levels.
pub struct GraphRepresentation<'t> {
    pub levels: [Option<Var<'t>>; NUM_LEVELS],
}

/// `F = softmax(Â · relu(Â · X · M0) · M1)` on one level.
pub fn hgc_level<'t>(s: &Session<'t, '_>, graph: &GridGraph<'t>, params: &GcnParams, axis: SoftmaxAxis) -> Result<Var<'t>> {
    let adj = s.constant(graph.adjacency.normalized.clone());
    let hidden = gcn_layer(adj, graph.features, s.param(params.first), GcnActivation::Relu)?;
    gcn_layer(adj, hidden, s.param(params.second), GcnActivation::Softmax(axis))
}

pub fn hgc_forward<'t>(
    s: &Session<'t, '_>,
    graphs: &[Option<GridGraph<'t>>; NUM_LEVELS],
    params: &[Option<GcnParams>; NUM_LEVELS],
    axis: SoftmaxAxis,
) -> Result<GraphRepresentation<'t>> {
    let mut levels = [None; NUM_LEVELS];
    for i in 0..NUM_LEVELS {
        levels[i] = match (&graphs[i], &params[i]) {
            (Some(g), Some(p)) => Some(hgc_level(s, g, p, axis)?),
            (None, None) => None,
            _ => {
                return Err(Error::Contract(format!(
                    "graph and parameters disagree on level {}",
                    i + 1
                )))
            }
        };
    }
    Ok(GraphRepresentation { levels })
}
