//! Central finite-difference checks of every graph operation and loss in f64.
//! Each check returns the worst norm-wise relative error over its instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cotrain_core::losses::{
    div_loss, entropy_map, jsd_agreement, kl_divergence, masked_cross_entropy, mean_entropy, soft_cross_entropy,
    sup_loss, DivTerm, LabelMap,
};
use cotrain_core::segnet::{SegModel, SegModelConfig};
use cotrain_core::tensor::{Graph, Tensor, Var};

const H: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 20;
const MAX_COORDS: usize = 24;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Scalar objective `sum(out * weights)` with fixed random weights, so every
/// output element contributes to the checked gradient.
fn objective(g: &mut Graph<f64>, out: Var, weights: &[f64]) -> Var {
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights.to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(build: &Build, inputs: &[Tensor<f64>], weights: &Option<Vec<f64>>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = match weights {
        Some(w) => objective(&mut g, out, w),
        None => out,
    };
    g.value(s).item()
}

/// Returns the worst norm-wise relative error over the inputs of one instance.
fn check_instance(build: &Build, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    check_partial(build, inputs, &[], rng)
}

/// Like [`check_instance`], but inputs listed in `frozen` must receive no
/// gradient at all and are skipped by the finite-difference comparison.
fn check_partial(build: &Build, inputs: Vec<Tensor<f64>>, frozen: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = if g.value(out).numel() == 1 {
        None
    } else {
        Some((0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
    };
    let s = match &weights {
        Some(w) => objective(&mut g, out, w),
        None => out,
    };
    g.backward(s).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        if frozen.contains(&k) {
            if g.grad(*v).unwrap_or(&[]).iter().any(|&x| x != 0.0) {
                return f64::INFINITY;
            }
            continue;
        }
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &i in &coords {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(build, &plus, &weights) - eval(build, &minus, &weights)) / (2.0 * H);
            diff += (numeric - analytic[i]).powi(2);
            scale = scale.max(numeric.abs()).max(analytic[i].abs());
        }
        let norm = diff.sqrt() / (coords.len() as f64).sqrt();
        let rel = if scale < 1e-12 { norm } else { norm / scale };
        worst = worst.max(rel);
    }
    worst
}

fn run(name: &str, build: &Build, make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>) -> f64 {
    run_frozen(name, build, &[], make)
}

fn run_frozen(name: &str, build: &Build, frozen: &[usize], mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 ^ i.wrapping_mul(7919) ^ name.len() as u64);
        let inputs = make(&mut rng);
        worst = worst.max(check_partial(build, inputs, frozen, &mut rng));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.01..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values, so max-pool windows have a unique winner.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn nchw(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=max_c), rng.random_range(2..=max_hw), rng.random_range(2..=max_hw)]
}

/// Random probability maps, strictly inside the simplex.
fn probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    let d = t.data_mut();
    for b in 0..n {
        for p in 0..h * w {
            let s: f64 = (0..c).map(|k| d[(b * c + k) * h * w + p]).sum();
            (0..c).for_each(|k| d[(b * c + k) * h * w + p] /= s);
        }
    }
    t
}

pub fn conv2d_same_small() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run(
        "conv2d_same_small",
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap(),
        |rng| {
            let [n, ci, h, w] = nchw(rng, 3, 6);
            let co = rng.random_range(1..=3);
            vec![
                rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0),
                rand_tensor(rng, &[co, ci, 3, 3], -1.0, 1.0),
                rand_tensor(rng, &[co], -1.0, 1.0),
            ]
        },
    ));
    worst
}

pub fn conv2d_same_large_planes() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run(
        "conv2d_same_large",
        &|g, v| g.conv2d(v[0], v[1], None, 1, 1).unwrap(),
        |rng| {
            let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=5));
            vec![rand_tensor(rng, &[1, ci, 32, 34], -1.0, 1.0), rand_tensor(rng, &[co, ci, 3, 3], -1.0, 1.0)]
        },
    ));
    worst
}

pub fn conv2d_strided_and_unpadded() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run(
        "conv2d_strided",
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 0, 2).unwrap(),
        |rng| {
            let [n, ci, _, _] = nchw(rng, 2, 2);
            let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
            let co = rng.random_range(1..=3);
            vec![
                rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0),
                rand_tensor(rng, &[co, ci, 3, 3], -1.0, 1.0),
                rand_tensor(rng, &[co], -1.0, 1.0),
            ]
        },
    ));
    worst
}

pub fn conv2d_pointwise() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run(
        "conv2d_pointwise",
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 0, 1).unwrap(),
        |rng| {
            let [n, ci, h, w] = nchw(rng, 4, 5);
            let co = rng.random_range(1..=4);
            vec![
                rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0),
                rand_tensor(rng, &[co, ci, 1, 1], -1.0, 1.0),
                rand_tensor(rng, &[co], -1.0, 1.0),
            ]
        },
    ));
    worst
}

pub fn relu() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run("relu", &|g, v| g.relu(v[0]), |rng| {
        let s = nchw(rng, 3, 5);
        vec![away_from_zero(rng, &s)]
    }));
    worst
}

pub fn elementwise_binary() -> f64 {
    let mut worst = 0.0f64;
    let shape_pair = |rng: &mut ChaCha8Rng| {
        let s = nchw(rng, 3, 5);
        vec![rand_tensor(rng, &s, -2.0, 2.0), rand_tensor(rng, &s, -2.0, 2.0)]
    };
    worst = worst.max(run("add", &|g, v| g.add(v[0], v[1]).unwrap(), shape_pair));
    worst = worst.max(run("sub", &|g, v| g.sub(v[0], v[1]).unwrap(), shape_pair));
    worst = worst.max(run("mul", &|g, v| g.mul(v[0], v[1]).unwrap(), shape_pair));
    worst = worst.max(run("mul_self", &|g, v| g.mul(v[0], v[0]).unwrap(), |rng| {
        let s = nchw(rng, 3, 5);
        vec![rand_tensor(rng, &s, -2.0, 2.0)]
    }));
    worst
}

pub fn elementwise_unary() -> f64 {
    let mut worst = 0.0f64;
    let one = |rng: &mut ChaCha8Rng| {
        let s = nchw(rng, 3, 5);
        vec![rand_tensor(rng, &s, -2.0, 2.0)]
    };
    worst = worst.max(run("scale", &|g, v| g.scale(v[0], -1.7), one));
    worst = worst.max(run("exp", &|g, v| g.exp(v[0]), one));
    worst = worst.max(run("neg", &|g, v| g.neg(v[0]), one));
    worst = worst.max(run("log", &|g, v| g.log(v[0]), |rng| {
        let s = nchw(rng, 3, 5);
        vec![rand_tensor(rng, &s, 0.1, 3.0)]
    }));
    worst = worst.max(run("clamp", &|g, v| g.clamp(v[0], -0.5, 0.5), |rng| {
        let s = nchw(rng, 3, 5);
        // nothing within 0.01 of a clamp edge
        vec![Tensor::from_fn(&s, |_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            if (x.abs() - 0.5).abs() < 0.01 {
                x * 0.5
            } else {
                x
            }
        })]
    }));
    worst
}

pub fn reductions() -> f64 {
    let mut worst = 0.0f64;
    let one = |rng: &mut ChaCha8Rng| {
        let s = nchw(rng, 4, 5);
        vec![rand_tensor(rng, &s, -2.0, 2.0)]
    };
    worst = worst.max(run("sum", &|g, v| g.sum(v[0]), one));
    worst = worst.max(run("mean", &|g, v| g.mean(v[0]), one));
    worst = worst.max(run("channel_sum", &|g, v| g.channel_sum(v[0]).unwrap(), one));
    worst
}

pub fn resampling() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run("max_pool2d", &|g, v| g.max_pool2d(v[0]).unwrap(), |rng| {
        let [n, c, h, w] = nchw(rng, 3, 4);
        vec![distinct(rng, &[n, c, 2 * h, 2 * w])]
    }));
    worst = worst.max(run("upsample2x", &|g, v| g.upsample2x(v[0]).unwrap(), |rng| {
        let s = nchw(rng, 3, 4);
        vec![rand_tensor(rng, &s, -1.0, 1.0)]
    }));
    worst = worst.max(run("concat", &|g, v| g.concat(v[0], v[1]).unwrap(), |rng| {
        let [n, c, h, w] = nchw(rng, 3, 4);
        let c2 = rng.random_range(1..=3);
        vec![rand_tensor(rng, &[n, c, h, w], -1.0, 1.0), rand_tensor(rng, &[n, c2, h, w], -1.0, 1.0)]
    }));
    worst
}

pub fn dropout_with_fixed_mask() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run(
        "dropout",
        &|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            g.dropout(v[0], 0.3, true, &mut r).unwrap()
        },
        |rng| {
            let s = nchw(rng, 3, 5);
            vec![rand_tensor(rng, &s, -1.0, 1.0)]
        },
    ));
    worst
}

pub fn softmax_channel() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run("softmax_channel", &|g, v| g.softmax_channel(v[0]).unwrap(), |rng| {
        let [n, _, h, w] = nchw(rng, 1, 4);
        let c = rng.random_range(2..=5);
        vec![rand_tensor(rng, &[n, c, h, w], -3.0, 3.0)]
    }));
    worst
}

pub fn detach_blocks_gradient() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run_frozen(
        "detach",
        &|g, v| {
            let d = g.detach(v[0]);
            g.mul(d, v[1]).unwrap()
        },
        &[0],
        |rng| {
            let s = nchw(rng, 2, 4);
            vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)]
        },
    ));
    worst
}

fn classes(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> LabelMap<f64> {
    let cls: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..c as u8)).collect();
    LabelMap::one_hot(&cls, n, c, h, w).unwrap()
}

fn prob_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    let [n, _, h, w] = nchw(rng, 1, 4);
    [n, rng.random_range(2..=4), h, w]
}

pub fn supervised_loss() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let s = prob_shape(&mut rng);
        let y = classes(&mut rng, s[0], s[1], s[2], s[3]);
        let p = probs(&mut rng, &s);
        let build = move |g: &mut Graph<f64>, v: &[Var]| sup_loss(g, v[0], &y).unwrap();
        worst = worst.max(check_instance(&build, vec![p], &mut rng));

        let logits = rand_tensor(&mut rng, &s, -3.0, 3.0);
        let y = classes(&mut rng, s[0], s[1], s[2], s[3]);
        let through_softmax = move |g: &mut Graph<f64>, v: &[Var]| {
            let p = g.softmax_channel(v[0]).unwrap();
            sup_loss(g, p, &y).unwrap()
        };
        worst = worst.max(check_instance(&through_softmax, vec![logits], &mut rng));
    }
    worst
}

pub fn masked_cross_entropy_loss() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run_frozen(
        "masked_cross_entropy",
        &|g, v| {
            let w = g.detach(v[1]);
            masked_cross_entropy(g, v[0], w, 7.0).unwrap()
        },
        &[1],
        |rng| {
            let s = prob_shape(rng);
            vec![probs(rng, &s), rand_tensor(rng, &s, 0.0, 1.0)]
        },
    ));
    worst
}

pub fn entropy_terms() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run("entropy_map", &|g, v| entropy_map(g, v[0]).unwrap(), |rng| {
        let s = prob_shape(rng);
        vec![probs(rng, &s)]
    }));
    worst = worst.max(run("mean_entropy", &|g, v| mean_entropy(g, v[0]).unwrap(), |rng| {
        let s = prob_shape(rng);
        vec![probs(rng, &s)]
    }));
    worst
}

pub fn agreement_loss() -> f64 {
    let mut worst = 0.0f64;
    for k in 2..=4 {
        worst = worst.max(run(
            &format!("jsd_agreement_k{k}"),
            &|g, v| jsd_agreement(g, v).unwrap(),
            |rng| {
                let s = prob_shape(rng);
                (0..k).map(|_| probs(rng, &s)).collect()
            },
        ));
    }
    worst = worst.max(run(
        "jsd_agreement_softmax",
        &|g, v| {
            let ps: Vec<Var> = v.iter().map(|&x| g.softmax_channel(x).unwrap()).collect();
            jsd_agreement(g, &ps).unwrap()
        },
        |rng| {
            let s = prob_shape(rng);
            (0..3).map(|_| rand_tensor(rng, &s, -3.0, 3.0)).collect()
        },
    ));
    worst
}

pub fn cross_entropy_and_kl() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run("soft_cross_entropy", &|g, v| soft_cross_entropy(g, v[0], v[1]).unwrap(), |rng| {
        let s = prob_shape(rng);
        vec![probs(rng, &s), probs(rng, &s)]
    }));
    worst = worst.max(run("kl_divergence", &|g, v| kl_divergence(g, v[0], v[1]).unwrap(), |rng| {
        let s = prob_shape(rng);
        vec![probs(rng, &s), probs(rng, &s)]
    }));
    worst
}

pub fn diversity_loss() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(run_frozen(
        "div_loss",
        &|g, v| {
            let terms = [
                DivTerm { clean_target: v[0], peer_on_adversarial: Some(v[1]) },
                DivTerm { clean_target: v[2], peer_on_adversarial: Some(v[3]) },
            ];
            div_loss(g, &terms).unwrap()
        },
        &[0, 2],
        |rng| {
            let s = prob_shape(rng);
            (0..4).map(|_| probs(rng, &s)).collect()
        },
    ));
    worst
}

pub fn whole_network_input_gradient() -> f64 {
    let mut worst = 0.0f64;
    let cfg = SegModelConfig { base_width: 2, depth: 1, num_classes: 3, dropout_rate: 0.0, ..Default::default() };
    let model = SegModel::<f64>::init(cfg, 3).unwrap();
    worst = worst.max(run(
        "segnet_forward",
        &move |g, v| {
            let b = model.bind(g, false);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            b.forward(g, v[0], false, &mut r).unwrap()
        },
        |rng| vec![rand_tensor(rng, &[1, 1, 4, 6], 0.0, 1.0)],
    ));
    worst
}

/// Every check, as `(name, check)`.
pub type Check = fn() -> f64;

pub const ALL: &[(&str, Check)] = &[
    ("conv2d_same_small", conv2d_same_small),
    ("conv2d_same_large_planes", conv2d_same_large_planes),
    ("conv2d_strided_and_unpadded", conv2d_strided_and_unpadded),
    ("conv2d_pointwise", conv2d_pointwise),
    ("relu", relu),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions", reductions),
    ("resampling", resampling),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("softmax_channel", softmax_channel),
    ("detach_blocks_gradient", detach_blocks_gradient),
    ("supervised_loss", supervised_loss),
    ("masked_cross_entropy_loss", masked_cross_entropy_loss),
    ("entropy_terms", entropy_terms),
    ("agreement_loss", agreement_loss),
    ("cross_entropy_and_kl", cross_entropy_and_kl),
    ("diversity_loss", diversity_loss),
    ("whole_network_input_gradient", whole_network_input_gradient),
];
