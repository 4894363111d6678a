//! Central-difference checks of every differentiable operation and of the
//! full network. Tolerances follow the value width of the build.

use std::cell::RefCell;

use hgcn_core::gcn::{gcn_layer, GcnActivation, SoftmaxAxis};
use hgcn_core::graph::{flatten_nodes, unflatten_nodes};
use hgcn_core::loss::{composite_loss, dice_loss, LossWeights, DICE_SMOOTH};
use hgcn_core::model::{HgcnNet, ModelConfig};
use hgcn_core::graph::DownsampleConfig;
use hgcn_core::tensor::{concat, grad_check, grad_check_coords, BnMode, BnState, Real, Tensor, Var};
use hgcn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(not(feature = "f64"))]
const EPS: f64 = 1e-2;
#[cfg(not(feature = "f64"))]
const TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
const EPS: f64 = 1e-6;

#[cfg(feature = "f64")]
const TOL: f64 = 1e-6;

pub const SEEDS: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as Real)
}

/// Values bounded away from zero so ReLU-like kinks are never crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        (if rng.random_bool(0.5) { v } else { -v }) as Real
    })
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn weighted<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

fn assert_close(op: &str, seed: u64, report: hgcn_core::tensor::GradCheckReport) {
    assert!(
        report.max_rel_error < TOL,
        "{op} seed {seed}: rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error,
        report.worst_index,
        report.analytic,
        report.numeric
    );
}

/// Checks `f` at a fresh input for every seed.
fn each_seed(op: &str, make: impl Fn(&mut ChaCha8Rng) -> Tensor, f: impl for<'t> Fn(Var<'t>, u64) -> Result<Var<'t>>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = make(&mut rng);
        let report = grad_check(|v| f(v, seed), &x, EPS).unwrap();
        assert_close(op, seed, report);
    }
}

pub fn elementwise_ops() {
    let shape = [2, 3, 4];
    each_seed("add", |r| uniform(r, &shape, -1.0, 1.0), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 100);
        let other = x.tape().constant(uniform(&mut rng, &shape, -1.0, 1.0));
        weighted(x.add(other)?, s)
    });
    each_seed("sub", |r| uniform(r, &shape, -1.0, 1.0), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 100);
        let other = x.tape().constant(uniform(&mut rng, &shape, -1.0, 1.0));
        weighted(other.sub(x)?, s)
    });
    each_seed("mul", |r| uniform(r, &shape, -1.0, 1.0), |x, s| weighted(x.mul(x)?, s));
    each_seed("scale", |r| uniform(r, &shape, -1.0, 1.0), |x, s| weighted(x.scale(-1.7), s));
    each_seed("add_scalar", |r| uniform(r, &shape, -1.0, 1.0), |x, s| weighted(x.add_scalar(0.3).mul(x)?, s));
    each_seed("sum", |r| uniform(r, &shape, -1.0, 1.0), |x, _| Ok(x.mul(x)?.sum()));
    each_seed("mean", |r| uniform(r, &shape, -1.0, 1.0), |x, _| Ok(x.mul(x)?.mean()));
    each_seed("relu", |r| off_zero(r, &shape), |x, s| weighted(x.relu(), s));
    each_seed("sigmoid", |r| uniform(r, &shape, -3.0, 3.0), |x, s| weighted(x.sigmoid(), s));
}

pub fn softmax_and_shape_ops() {
    let shape = [2, 4, 5];
    for axis in [1, 2] {
        each_seed("softmax", |r| uniform(r, &shape, -2.0, 2.0), move |x, s| weighted(x.softmax(axis)?, s));
    }
    each_seed("reshape", |r| uniform(r, &shape, -1.0, 1.0), |x, s| weighted(x.reshape(&[4, 10])?.mul(x.reshape(&[4, 10])?)?, s));
    each_seed("transpose12", |r| uniform(r, &shape, -1.0, 1.0), |x, s| weighted(x.transpose12()?, s));
    each_seed("concat", |r| uniform(r, &[2, 3, 2, 2], -1.0, 1.0), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
        let other = x.tape().constant(uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0));
        weighted(concat(&[other, x.mul(x)?], 1)?, s)
    });
    each_seed("flatten/unflatten", |r| uniform(r, &[2, 3, 2, 3], -1.0, 1.0), |x, s| {
        let f = flatten_nodes(x)?;
        weighted(unflatten_nodes(f.mul(f)?, 2, 3)?, s)
    });
}

pub fn matmul_variants() {
    // [m,k]·[k,n], [b,m,k]·[k,n], [m,k]·[b,k,n]; grads to both operands
    let cases: [(&[usize], &[usize]); 3] = [(&[3, 4], &[4, 2]), (&[2, 3, 4], &[4, 2]), (&[3, 4], &[2, 4, 2])];
    for (ls, rs) in cases {
        each_seed("matmul lhs", |r| uniform(r, ls, -1.0, 1.0), move |x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 11);
            let other = x.tape().constant(uniform(&mut rng, rs, -1.0, 1.0));
            weighted(x.matmul(other)?, s)
        });
        each_seed("matmul rhs", |r| uniform(r, rs, -1.0, 1.0), move |x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 12);
            let other = x.tape().constant(uniform(&mut rng, ls, -1.0, 1.0));
            weighted(other.matmul(x)?, s)
        });
    }
}

pub fn upsample_and_batch_norm() {
    each_seed("upsample", |r| uniform(r, &[2, 2, 3, 3], -1.0, 1.0), |x, s| weighted(x.upsample_bilinear(7, 5)?, s));
    each_seed("batch_norm input", |r| uniform(r, &[4, 3, 3, 3], -1.0, 1.0), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 3);
        let t = x.tape();
        let g = t.constant(uniform(&mut rng, &[3], 0.5, 1.5));
        let b = t.constant(uniform(&mut rng, &[3], -0.5, 0.5));
        weighted(x.batch_norm(g, b, &mut BnState::new(3), BnMode::Train)?, s)
    });
    each_seed("batch_norm scale", |r| uniform(r, &[3], 0.5, 1.5), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 4);
        let t = x.tape();
        let input = t.constant(uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
        let b = t.constant(uniform(&mut rng, &[3], -0.5, 0.5));
        weighted(input.batch_norm(x, b, &mut BnState::new(3), BnMode::Train)?, s)
    });
    each_seed("batch_norm shift", |r| uniform(r, &[3], -0.5, 0.5), |x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 5);
        let t = x.tape();
        let input = t.constant(uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
        let g = t.constant(uniform(&mut rng, &[3], 0.5, 1.5));
        weighted(input.batch_norm(g, x, &mut BnState::new(3), BnMode::Train)?, s)
    });
    each_seed("batch_norm eval", |r| uniform(r, &[2, 3, 2, 2], -1.0, 1.0), |x, s| {
        let t = x.tape();
        let mut state = BnState::new(3);
        state.mean = vec![0.1, -0.2, 0.3];
        state.var = vec![0.5, 1.5, 2.0];
        weighted(x.batch_norm(t.constant(Tensor::ones(&[3])), t.constant(Tensor::zeros(&[3])), &mut state, BnMode::Eval)?, s)
    });
}

pub fn conv2d_all_operands() {
    for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
        let pad = k / 2;
        let xs = [2, 3, 6, 6];
        let ws = [4, 3, k, k];
        each_seed("conv2d input", |r| uniform(r, &xs, -1.0, 1.0), move |x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 21);
            let w = x.tape().constant(uniform(&mut rng, &ws, -0.5, 0.5));
            weighted(x.conv2d(w, None, stride, pad)?, s)
        });
        each_seed("conv2d weight", |r| uniform(r, &ws, -0.5, 0.5), move |w, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 22);
            let x = w.tape().constant(uniform(&mut rng, &xs, -1.0, 1.0));
            weighted(x.conv2d(w, None, stride, pad)?, s)
        });
        each_seed("conv2d bias", |r| uniform(r, &[4], -0.5, 0.5), move |b, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 23);
            let t = b.tape();
            let x = t.constant(uniform(&mut rng, &xs, -1.0, 1.0));
            let w = t.constant(uniform(&mut rng, &ws, -0.5, 0.5));
            weighted(x.conv2d(w, Some(b), stride, pad)?, s)
        });
    }
}

pub fn graph_convolution() {
    let adj = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 31);
        let a = uniform(&mut rng, &[5, 5], 0.0, 1.0);
        Tensor::from_fn(&[5, 5], |i| (a.data()[i] + a.data()[(i % 5) * 5 + i / 5]) / 2.0)
    };
    // relu layer: features kept away from kinks is not enough after mixing,
    // so the softmax layer carries the feature-side check
    for axis in [SoftmaxAxis::Channel, SoftmaxAxis::Node] {
        each_seed("gcn features", |r| uniform(r, &[2, 5, 4], -1.0, 1.0), move |x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 32);
            let t = x.tape();
            let m = t.constant(uniform(&mut rng, &[4, 3], -1.0, 1.0));
            weighted(gcn_layer(t.constant(adj(s)), x, m, GcnActivation::Softmax(axis))?, s)
        });
        each_seed("gcn weight", |r| uniform(r, &[4, 3], -1.0, 1.0), move |m, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 33);
            let t = m.tape();
            let x = t.constant(uniform(&mut rng, &[2, 5, 4], -1.0, 1.0));
            weighted(gcn_layer(t.constant(adj(s)), x, m, GcnActivation::Softmax(axis))?, s)
        });
    }
    // relu layer with identity mixing and inputs whose products stay off zero
    each_seed("gcn relu", |r| off_zero(r, &[1, 3, 1]), |x, s| {
        let t = x.tape();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let m = t.constant(Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
        weighted(gcn_layer(t.constant(eye), x, m, GcnActivation::Relu)?, s)
    });
}

pub fn losses() {
    let gt = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 41);
        Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
    };
    each_seed("dice", |r| uniform(r, &[2, 1, 4, 4], 0.05, 0.95), |p, s| dice_loss(p, &gt(s), DICE_SMOOTH));
    each_seed("composite branch", |r| uniform(r, &[2, 1, 4, 4], 0.05, 0.95), |p, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 42);
        let fin = p.tape().constant(uniform(&mut rng, &[2, 1, 4, 4], 0.05, 0.95));
        composite_loss(p, fin, &gt(s), LossWeights::new(0.3)?)
    });
    each_seed("composite final", |r| uniform(r, &[2, 1, 4, 4], 0.05, 0.95), |p, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 43);
        let branch = p.tape().constant(uniform(&mut rng, &[2, 1, 4, 4], 0.05, 0.95));
        composite_loss(branch, p, &gt(s), LossWeights::new(0.3)?)
    });
}

fn small_model() -> ModelConfig {
    ModelConfig {
        downsample: DownsampleConfig::new([2, 2, 1, 1]).unwrap(),
        ..ModelConfig::default()
    }
}

fn network_loss<'t>(net: &RefCell<HgcnNet>, image: Var<'t>, gt: &Tensor, bind: Option<(&str, Var<'t>)>) -> Result<Var<'t>> {
    let mut guard = net.borrow_mut();
    let net = &mut *guard;
    let id = bind.map(|(name, _)| net.store.find(name).expect("parameter exists"));
    let mut s = net.store.session(image.tape(), BnMode::Train, false);
    if let (Some(id), Some((_, v))) = (id, bind) {
        s.bind(id, v);
    }
    let out = net.arch.forward(&mut s, image)?;
    composite_loss(out.branch.expect("graph branch"), out.logits.sigmoid(), gt, LossWeights::new(0.5)?)
}

const PROBED: [&str; 8] = [
    "encoder.stem.conv.weight",
    "hgrl.level1.down0.conv.weight",
    "hgrl.level2.gcn.m0",
    "hgrl.level3.gcn.m1",
    "hgrl.level1.transform.conv.weight",
    "decoder.stage1.fuse.restore.conv.weight",
    "decoder.stage2.conv.bn.scale",
    "hgrl.head.bias",
];

pub fn full_network() {
    for seed in 0..SEEDS {
        let net = RefCell::new(HgcnNet::new(&small_model(), seed).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        // the coarsest transform normalizes 1×1 maps over the batch; with two
        // images its output is nearly a sign function, so use four
        let image = uniform(&mut rng, &[4, 3, 64, 64], 0.0, 1.0);
        let gt = Tensor::from_fn(&[4, 1, 64, 64], |i| if (i / 64) % 64 < 24 && i % 64 < 40 { 1.0 } else { 0.0 });

        let coords: Vec<usize> = (0..8).map(|_| rng.random_range(0..image.numel())).collect();
        let report = grad_check_coords(|x| network_loss(&net, x, &gt, None), &image, EPS, &coords).unwrap();
        assert_close("network image", seed, report);

        for name in PROBED {
            let value = {
                let n = net.borrow();
                n.store.get(n.store.find(name).unwrap_or_else(|| panic!("{name}"))).clone()
            };
            let coords: Vec<usize> = (0..2).map(|_| rng.random_range(0..value.numel())).collect();
            let report =
                grad_check_coords(|p| network_loss(&net, p.tape().constant(image.clone()), &gt, Some((name, p))), &value, EPS, &coords)
                    .unwrap();
            assert_close(name, seed, report);
        }
    }
}
