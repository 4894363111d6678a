//! The full network: backbone branch plus the hierarchical graph branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Decoder, FeaturePyramid, NUM_LEVELS, PYRAMID_WIDTH};
use crate::error::{Error, Result};
use crate::fusion;
use crate::gcn::{hgc_forward, GcnParams, SoftmaxAxis};
use crate::graph::{build_graph, AdjacencyCache, DownsampleConfig, Downsampler, GridGraph};
use crate::nn::{ParamStore, Session};
use crate::tensor::{BnMode, Tape, Tensor, Var};
use crate::transform::{GraphToCnn, HgrlHead};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Registered fusion mode name (`add`, `concat`).
    pub fusion: String,
    /// Which pyramid levels feed the graph branch.
    pub levels: [bool; NUM_LEVELS],
    pub downsample: DownsampleConfig,
    pub sigma: f64,
    /// Stride of the 1×1 convolution that maps graph features back.
    pub transform_stride: usize,
    pub softmax_axis: SoftmaxAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion: "concat".into(),
            levels: [true; NUM_LEVELS],
            downsample: DownsampleConfig::new([8, 4, 2, 1]).expect("valid"),
            sigma: 1.0,
            transform_stride: 2,
            softmax_axis: SoftmaxAxis::Channel,
        }
    }
}

impl ModelConfig {
    pub fn backbone_only() -> Self {
        ModelConfig {
            levels: [false; NUM_LEVELS],
            ..Self::default()
        }
    }

    pub fn has_graph_branch(&self) -> bool {
        self.levels.iter().any(|&l| l)
    }
}

#[derive(Debug)]
struct GraphLevel {
    down: Downsampler,
    gcn: GcnParams,
    transform: GraphToCnn,
}

#[derive(Debug)]
pub struct HgrlBranch {
    levels: Vec<Option<GraphLevel>>,
    head: HgrlHead,
    cache: AdjacencyCache,
    sigma: f64,
    axis: SoftmaxAxis,
}

/// Intermediate products of the graph branch for one batch.
pub struct HgrlOutput<'t> {
    pub graphs: [Option<GridGraph<'t>>; NUM_LEVELS],
    pub z: [Option<Var<'t>>; NUM_LEVELS],
    pub branch: Var<'t>,
}

impl HgrlBranch {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for i in 0..NUM_LEVELS {
            if !cfg.levels[i] {
                levels.push(None);
                continue;
            }
            let name = format!("hgrl.level{}", i + 1);
            levels.push(Some(GraphLevel {
                down: Downsampler::new(store, rng, &name, PYRAMID_WIDTH, cfg.downsample.factor(i))?,
                gcn: GcnParams::new(store, rng, &format!("{name}.gcn"), PYRAMID_WIDTH),
                transform: GraphToCnn::new(store, rng, &format!("{name}.transform"), PYRAMID_WIDTH, cfg.transform_stride),
            }));
        }
        Ok(HgrlBranch {
            levels,
            head: HgrlHead::new(store, rng, PYRAMID_WIDTH),
            cache: AdjacencyCache::new(),
            sigma: cfg.sigma,
            axis: cfg.softmax_axis,
        })
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, '_>, pyramid: &FeaturePyramid<'t>) -> Result<HgrlOutput<'t>> {
        let mut graphs: [Option<GridGraph<'t>>; NUM_LEVELS] = Default::default();
        let mut reduced = [None; NUM_LEVELS];
        let mut gcn: [Option<GcnParams>; NUM_LEVELS] = Default::default();
        for (i, level) in self.levels.iter().enumerate() {
            if let Some(level) = level {
                let p_prime = level.down.forward(s, pyramid.level(i))?;
                graphs[i] = Some(build_graph(p_prime, self.sigma, &self.cache)?);
                reduced[i] = Some(p_prime);
                gcn[i] = Some(level.gcn.clone());
            }
        }
        let rep = hgc_forward(s, &graphs, &gcn, self.axis)?;
        let mut z = [None; NUM_LEVELS];
        let mut enabled = Vec::new();
        for (i, level) in self.levels.iter().enumerate() {
            if let (Some(level), Some(f), Some(p)) = (level, rep.levels[i], reduced[i]) {
                let zi = level.transform.graph_to_cnn(s, f, p, pyramid.level_size(i))?;
                z[i] = Some(zi);
                enabled.push(zi);
            }
        }
        let branch = self.head.predict(s, &enabled, pyramid.input_size)?;
        Ok(HgrlOutput { graphs, z, branch })
    }

    pub fn cache(&self) -> &AdjacencyCache {
        &self.cache
    }
}

/// Layer structure; parameters live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    pub hgrl: Option<HgrlBranch>,
    pub decoder: Decoder,
}

pub struct NetOutput<'t> {
    /// Final `[B,1,H,W]` logits.
    pub logits: Var<'t>,
    /// Graph branch probabilities `R(X)`, when the branch exists.
    pub branch: Option<Var<'t>>,
    pub z: [Option<Var<'t>>; NUM_LEVELS],
    pub node_counts: [usize; NUM_LEVELS],
}

impl Architecture {
    pub fn forward<'t>(&self, s: &mut Session<'t, '_>, image: Var<'t>) -> Result<NetOutput<'t>> {
        let pyramid = self.backbone.extract_pyramid(s, image)?;
        let (z, branch, node_counts) = match &self.hgrl {
            Some(h) => {
                let out = h.forward(s, &pyramid)?;
                let counts = std::array::from_fn(|i| out.graphs[i].as_ref().map_or(0, |g| g.node_count()));
                (out.z, Some(out.branch), counts)
            }
            None => ([None; NUM_LEVELS], None, [0; NUM_LEVELS]),
        };
        let logits = self.decoder.decode_fuse_predict(s, &pyramid, &z)?;
        Ok(NetOutput {
            logits,
            branch,
            z,
            node_counts,
        })
    }
}

/// A network instance: configuration, layers and parameters.
#[derive(Debug)]
pub struct HgcnNet {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore,
}

impl HgcnNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.transform_stride == 0 || config.transform_stride > 2 {
            return Err(Error::Config(format!("transform_stride must be 1 or 2, got {}", config.transform_stride)));
        }
        if !(config.sigma > 0.0 && config.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", config.sigma)));
        }
        let registry = fusion::builtin();
        let fusion = registry.get(&config.fusion)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng);
        let hgrl = if config.has_graph_branch() {
            Some(HgrlBranch::new(&mut store, &mut rng, config)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, &mut rng, fusion, config.levels);
        Ok(HgcnNet {
            config: config.clone(),
            arch: Architecture { backbone, hgrl, decoder },
            store,
        })
    }

    /// Inference with running batch-norm statistics.
    ///
    /// Returns final probabilities and, when present, branch probabilities.
    pub fn predict(&mut self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let tape = Tape::new();
        let mut s = self.store.session(&tape, BnMode::Eval, false);
        let x = s.constant(images.clone());
        let out = self.arch.forward(&mut s, x)?;
        let probs = out.logits.sigmoid().value();
        Ok(((*probs).clone(), out.branch.map(|b| (*b.value()).clone())))
    }
}
