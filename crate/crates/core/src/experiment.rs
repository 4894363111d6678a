//! Experiment protocol: training, evaluation, ablation, sweeps and the
//! robustness harness. Every entry point is deterministic given the
//! configuration, except for the wall-clock timing columns.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{LEVEL_STRIDES, NUM_LEVELS};
use crate::checkpoint::Checkpoint;
use crate::config::{LossMode, RunConfig};
use crate::data::attacks::{self, AttackSpec};
use crate::data::generate::generate_set;
use crate::data::{augment, stack, stack_images, ManipSample};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, dice_loss, Confusion, EvalReport, LossWeights, DICE_SMOOTH, THRESHOLD};
use crate::model::HgcnNet;
use crate::optim::Adam;
use crate::tensor::{BnMode, Tape};

pub const TRAIN_CSV: &str = "train.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const MANIFEST: &str = "manifest.toml";

/// Down-sampling factor sets compared by the sweep.
pub const DOWNSAMPLE_SETS: [[usize; NUM_LEVELS]; 3] = [[16, 8, 4, 2], [8, 4, 2, 1], [4, 2, 1, 1]];
pub const ALPHA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// SplitMix64 over the parts; used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_ATTACK: u64 = 3;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<ManipSample>,
    pub test: Vec<ManipSample>,
}

impl Datasets {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let params = cfg.gen_params();
        Ok(Datasets {
            train: generate_set(cfg.train_seed_base(), cfg.train_samples, &params)?,
            test: generate_set(cfg.test_seed_base(), cfg.test_samples, &params)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub f1: f64,
    pub mcc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_f1: f64,
    /// Network with the best-F1 weights.
    pub net: HgcnNet,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for the CSV, checkpoints and manifest.
    pub out: Option<PathBuf>,
    /// Explicit checkpoint to resume from; otherwise `out/last.ckpt` is used
    /// when present.
    pub resume_from: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    package_version: &'a str,
    config: &'a RunConfig,
}

/// Writes `manifest.toml` with the fully resolved configuration.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = Manifest {
        command,
        package_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Pooled confusion counts over `samples`, optionally attacked first.
pub fn evaluate_model(
    net: &mut HgcnNet,
    samples: &[ManipSample],
    attack: Option<&AttackSpec>,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut total = Confusion::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ManipSample> = chunk.iter().collect();
        let (mut images, masks) = stack(&refs)?;
        if let Some(spec) = attack {
            let attacked = chunk
                .iter()
                .map(|s| attacks::apply_attack(&s.image, spec, mix_seed(&[STREAM_ATTACK, s.seed])))
                .collect::<Result<Vec<_>>>()?;
            images = stack_images(&attacked.iter().collect::<Vec<_>>())?;
        }
        let (probs, _) = net.predict(&images)?;
        total = total.merge(Confusion::from_prediction(&probs, &masks, THRESHOLD)?);
    }
    Ok(total.report())
}

/// Mean wall-clock inference time per image in milliseconds, over
/// `passes` timed passes after one untimed warm-up pass.
pub fn measure_inference(net: &mut HgcnNet, samples: &[ManipSample], passes: usize, batch_size: usize) -> Result<f64> {
    let batches = samples
        .chunks(batch_size.max(1))
        .map(|c| stack(&c.iter().collect::<Vec<_>>()).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    for x in &batches {
        net.predict(x)?;
    }
    let start = Instant::now();
    for _ in 0..passes {
        for x in &batches {
            net.predict(x)?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok(elapsed / (passes * samples.len()).max(1) as f64)
}

/// Nodes per graph level for a configuration, 0 for disabled levels.
pub fn node_counts(cfg: &RunConfig) -> Result<[usize; NUM_LEVELS]> {
    let ds = cfg.downsample_config()?;
    let model = cfg.model_config()?;
    Ok(std::array::from_fn(|i| {
        if model.levels[i] {
            let side = cfg.image_size / LEVEL_STRIDES[i] / ds.factor(i);
            side * side
        } else {
            0
        }
    }))
}

struct Resume {
    start_epoch: usize,
    best_f1: f64,
    adam: Adam,
    records: Vec<EpochRecord>,
    best_store: Option<crate::nn::ParamStore>,
}

fn try_resume(cfg: &RunConfig, net: &mut HgcnNet, opts: &TrainOptions) -> Result<Option<Resume>> {
    let path = match (&opts.resume_from, &opts.out) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) if dir.join(LAST_CKPT).exists() => dir.join(LAST_CKPT),
        _ => return Ok(None),
    };
    let ck = Checkpoint::load(&path, &net.store)?;
    let saved = RunConfig::from_toml_str(&ck.config_toml)?;
    // extending a run to more epochs is allowed
    let comparable = RunConfig {
        epochs: cfg.epochs,
        ..saved
    };
    if comparable != *cfg || (ck.epoch as usize) > cfg.epochs {
        return Err(Error::Config(format!(
            "{} was written with a different configuration; use a fresh output directory",
            path.display()
        )));
    }
    let adam = ck
        .adam
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let csv_path = dir.join(TRAIN_CSV);
    let mut records = if csv_path.exists() { read_records(&csv_path)? } else { Vec::new() };
    records.retain(|r| r.epoch as u64 <= ck.epoch);
    if records.len() as u64 != ck.epoch {
        return Err(Error::Checkpoint(format!(
            "{} lists {} epochs, checkpoint has {}",
            csv_path.display(),
            records.len(),
            ck.epoch
        )));
    }
    let best_path = dir.join(BEST_CKPT);
    let best_store = if best_path.exists() {
        Some(Checkpoint::load(&best_path, &net.store)?.store)
    } else {
        None
    };
    net.store = ck.store;
    Ok(Some(Resume {
        start_epoch: ck.epoch as usize,
        best_f1: ck.best_f1,
        adam,
        records,
        best_store,
    }))
}

/// Trains one network with Adam and the step-decay schedule, evaluating on
/// the test set after every epoch and keeping the best-F1 weights.
pub fn train(cfg: &RunConfig, data: &Datasets, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = HgcnNet::new(&cfg.model_config()?, cfg.seed)?;
    let weights = LossWeights::new(cfg.alpha)?;
    let config_toml = cfg.to_toml();
    let resumed = try_resume(cfg, &mut net, opts)?;
    if let Some(dir) = &opts.out {
        write_manifest(dir, "train", cfg)?;
    }
    let (start_epoch, mut best_f1, mut adam, mut records, mut best_store) = match resumed {
        Some(r) => (r.start_epoch, r.best_f1, r.adam, r.records, r.best_store),
        None => (0, f64::NEG_INFINITY, Adam::new(&net.store), Vec::new(), None),
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[STREAM_SHUFFLE, cfg.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ManipSample> = idx
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    if cfg.augment {
                        augment(s, mix_seed(&[STREAM_AUGMENT, cfg.seed, epoch as u64, i as u64]))
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let (images, masks) = stack(&batch.iter().collect::<Vec<_>>())?;
            let tape = Tape::new();
            let grads;
            let value;
            {
                let mut s = net.store.session(&tape, BnMode::Train, true);
                let x = s.constant(images);
                let out = net.arch.forward(&mut s, x)?;
                let pred = out.logits.sigmoid();
                let loss = match (cfg.loss, out.branch) {
                    (LossMode::Composite, Some(branch)) => composite_loss(branch, pred, &masks, weights)?,
                    (LossMode::Composite, None) => {
                        return Err(Error::Config("composite loss needs the graph branch".into()))
                    }
                    (LossMode::Backbone, _) => dice_loss(pred, &masks, DICE_SMOOTH)?,
                };
                value = loss.value().item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, value });
                }
                tape.backward(loss)?;
                grads = s.grads();
            }
            adam.update(&mut net.store, &grads, lr)?;
            loss_sum += value;
            batches += 1;
        }
        let report = evaluate_model(&mut net, &data.test, None, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches.max(1) as f64,
            f1: report.f1,
            mcc: report.mcc,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}/{}  lr {:.3e}  loss {:.4}  f1 {:.4}  mcc {:.4}",
                record.epoch, cfg.epochs, lr, record.loss, record.f1, record.mcc
            );
        }
        records.push(record);
        let improved = report.f1 > best_f1;
        if improved {
            best_f1 = report.f1;
            best_store = Some(net.store.clone());
        }
        if let Some(dir) = &opts.out {
            if improved {
                Checkpoint {
                    config_toml: config_toml.clone(),
                    epoch: (epoch + 1) as u64,
                    best_f1,
                    store: net.store.clone(),
                    adam: None,
                }
                .save(&dir.join(BEST_CKPT))?;
            }
            write_csv(&dir.join(TRAIN_CSV), &records)?;
            Checkpoint {
                config_toml: config_toml.clone(),
                epoch: (epoch + 1) as u64,
                best_f1,
                store: net.store.clone(),
                adam: Some(adam.clone()),
            }
            .save(&dir.join(LAST_CKPT))?;
        }
    }
    if let Some(store) = best_store {
        net.store = store;
    }
    Ok(TrainOutcome {
        records,
        best_f1,
        net,
    })
}

/// Rebuilds a network from a checkpoint and its embedded configuration.
pub fn load_model(path: &Path) -> Result<(RunConfig, HgcnNet)> {
    let cfg = RunConfig::from_toml_str(&Checkpoint::read_config(path)?)?;
    let mut net = HgcnNet::new(&cfg.model_config()?, cfg.seed)?;
    net.store = Checkpoint::load(path, &net.store)?.store;
    Ok((cfg, net))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub f1: f64,
    pub mcc: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl From<EvalReport> for EvalRow {
    fn from(r: EvalReport) -> Self {
        let c = r.confusion;
        EvalRow {
            f1: r.f1,
            mcc: r.mcc,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub fusion: String,
    pub loss: String,
    pub levels: String,
    pub f1: f64,
    pub mcc: f64,
}

/// The eight ablation variants, in table order.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |fusion: &str, loss: LossMode, levels: Vec<usize>| RunConfig {
        fusion: fusion.into(),
        loss,
        levels,
        ..base.clone()
    };
    let mut v = vec![("backbone-only".to_string(), with(&base.fusion, LossMode::Backbone, vec![]))];
    for i in 1..=NUM_LEVELS {
        v.push((format!("GR(Z{i})-A"), with("add", LossMode::Backbone, vec![i])));
    }
    v.push(("HGR-A".into(), with("add", LossMode::Backbone, vec![1, 2, 3, 4])));
    v.push(("HGR-A+LS".into(), with("add", LossMode::Composite, vec![1, 2, 3, 4])));
    v.push(("HGR-C+LS".into(), with("concat", LossMode::Composite, vec![1, 2, 3, 4])));
    v
}

fn loss_name(l: LossMode) -> &'static str {
    match l {
        LossMode::Composite => "composite",
        LossMode::Backbone => "backbone",
    }
}

fn variant_opts(opts: &TrainOptions, id: &str) -> TrainOptions {
    TrainOptions {
        out: opts.out.as_ref().map(|d| d.join("runs").join(id)),
        resume_from: None,
        verbose: opts.verbose,
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub const ABLATION_CSV: &str = "ablation.csv";

pub fn ablate(base: &RunConfig, data: &Datasets, opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    if let Some(dir) = &opts.out {
        write_manifest(dir, "ablate", base)?;
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        if opts.verbose {
            eprintln!("== variant {name}");
        }
        let outcome = train(&cfg, data, &variant_opts(opts, &sanitize(&name)))?;
        rows.push(AblationRow {
            variant: name,
            fusion: if cfg.levels.is_empty() { "-".into() } else { cfg.fusion.clone() },
            loss: loss_name(cfg.loss).into(),
            levels: cfg.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
            f1: outcome.best_f1,
            mcc: outcome.records.iter().find(|r| r.f1 == outcome.best_f1).map_or(0.0, |r| r.mcc),
        });
        if let Some(dir) = &opts.out {
            write_csv(&dir.join(ABLATION_CSV), &rows)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownsampleRow {
    pub factors: String,
    pub f1: f64,
    pub mcc: f64,
    pub ms_per_image: f64,
    pub nodes_p1: usize,
    pub nodes_p2: usize,
    pub nodes_p3: usize,
    pub nodes_p4: usize,
}

pub const DOWNSAMPLE_CSV: &str = "sweep_downsample.csv";

pub fn sweep_downsample(base: &RunConfig, data: &Datasets, opts: &TrainOptions) -> Result<Vec<DownsampleRow>> {
    if let Some(dir) = &opts.out {
        write_manifest(dir, "sweep-downsample", base)?;
    }
    let mut rows = Vec::new();
    for set in DOWNSAMPLE_SETS {
        let cfg = RunConfig {
            downsample: set.to_vec(),
            ..base.clone()
        };
        cfg.validate()?;
        let id = set.map(|s| s.to_string()).join("-");
        if opts.verbose {
            eprintln!("== factors {id}");
        }
        let mut outcome = train(&cfg, data, &variant_opts(opts, &format!("s{id}")))?;
        let report = evaluate_model(&mut outcome.net, &data.test, None, cfg.batch_size)?;
        let ms = measure_inference(&mut outcome.net, &data.test, cfg.speed_passes, cfg.batch_size)?;
        let n = node_counts(&cfg)?;
        rows.push(DownsampleRow {
            factors: id,
            f1: report.f1,
            mcc: report.mcc,
            ms_per_image: ms,
            nodes_p1: n[0],
            nodes_p2: n[1],
            nodes_p3: n[2],
            nodes_p4: n[3],
        });
        if let Some(dir) = &opts.out {
            write_csv(&dir.join(DOWNSAMPLE_CSV), &rows)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub f1: f64,
    pub mcc: f64,
}

pub const ALPHA_CSV: &str = "sweep_alpha.csv";

pub fn sweep_alpha(base: &RunConfig, data: &Datasets, opts: &TrainOptions) -> Result<Vec<AlphaRow>> {
    if let Some(dir) = &opts.out {
        write_manifest(dir, "sweep-alpha", base)?;
    }
    let mut rows = Vec::new();
    for alpha in ALPHA_GRID {
        let cfg = RunConfig {
            alpha,
            loss: LossMode::Composite,
            ..base.clone()
        };
        if opts.verbose {
            eprintln!("== alpha {alpha}");
        }
        let mut outcome = train(&cfg, data, &variant_opts(opts, &format!("alpha{alpha}")))?;
        let report = evaluate_model(&mut outcome.net, &data.test, None, cfg.batch_size)?;
        rows.push(AlphaRow {
            alpha,
            f1: report.f1,
            mcc: report.mcc,
        });
        if let Some(dir) = &opts.out {
            write_csv(&dir.join(ALPHA_CSV), &rows)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub strength: f64,
    pub f1: f64,
    pub mcc: f64,
}

pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const EVAL_CSV: &str = "eval.csv";

/// Clean evaluation plus one row per attack grid point.
pub fn robustness(net: &mut HgcnNet, test: &[ManipSample], batch_size: usize) -> Result<(EvalReport, Vec<RobustnessRow>)> {
    let clean = evaluate_model(net, test, None, batch_size)?;
    let mut rows = Vec::new();
    for spec in attacks::full_grid() {
        let r = evaluate_model(net, test, Some(&spec), batch_size)?;
        rows.push(RobustnessRow {
            kind: spec.kind,
            strength: spec.strength,
            f1: r.f1,
            mcc: r.mcc,
        });
    }
    Ok((clean, rows))
}
