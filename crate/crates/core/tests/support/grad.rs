//! Analytic gradients against central finite differences.
//!
//! Each check panics on failure; `SUITE` lists them for the test targets.

use psvae_core::losses::{decoder_loss, encoder_loss, EncoderStageVars, KlMode, LossConfig};
use psvae_core::model::{ArchDescriptor, ModelParams, ParamSet};
use psvae_core::rng::StreamRng;
use psvae_core::tensor::Padding;
use psvae_core::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};

const H: f64 = 1e-4;
const TOL64: f64 = 1e-5;
const TOL32: f64 = 1e-3;
const POINTS: u64 = 10;

/// `|a - n| / max(|a|, |n|)` over whole tensors, with a floor so that
/// vanishing gradients compare absolutely.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let an: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / an.max(nn).max(1e-8)
}

type Build<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Var + 'a;

fn value<T: Real>(inputs: &[Tensor<T>], build: &Build<'_, T>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item().to_f64_lossy()
}

fn analytic<T: Real>(inputs: &[Tensor<T>], build: &Build<'_, T>) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    vars.iter()
        .map(|&v| grads.get(v).unwrap().data().iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

fn numeric(inputs: &[Tensor<f64>], build: &Build<'_, f64>) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].len())
                .map(|j| {
                    let x = inputs[i].data()[j];
                    work[i].data_mut()[j] = x + H;
                    let up = value(&work, build);
                    work[i].data_mut()[j] = x - H;
                    let down = value(&work, build);
                    work[i].data_mut()[j] = x;
                    (up - down) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

fn check(name: &str, inputs: &[Tensor<f64>], build: &Build<'_, f64>) {
    let a = analytic(inputs, build);
    let n = numeric(inputs, build);
    for (i, (ai, ni)) in a.iter().zip(&n).enumerate() {
        let e = rel_err(ai, ni);
        assert!(e < TOL64, "{name}: input {i} relative error {e:.3e}");
    }
}

/// Runs `check` at several random points; `make` draws the inputs.
fn check_points(name: &str, make: impl Fn(&mut StreamRng) -> Vec<Tensor<f64>>, build: &Build<'_, f64>) {
    for p in 0..POINTS {
        let mut rng = StreamRng::seed_from_u64(p);
        check(&format!("{name} #{p}"), &make(&mut rng), build);
    }
}

fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Reduces any node to a scalar through a fixed random projection, so
/// every output element contributes with a distinct weight.
fn project(g: &mut Graph<f64>, x: Var) -> Var {
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7391).sin() + 1.3) * 0.5).collect();
    let w = g.constant(Tensor::new(&shape, w).unwrap());
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

pub fn conv2d_same_and_valid() {
    for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        check_points(
            &format!("conv2d s{stride} {pad:?}"),
            |r| vec![randn(&[2, 5, 6, 3], r), randn(&[3, 3, 3, 4], r)],
            &|g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
                project(g, y)
            },
        );
    }
}

pub fn conv2d_transpose() {
    for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        check_points(
            &format!("conv2d_transpose s{stride} {pad:?}"),
            |r| vec![randn(&[2, 4, 3, 4], r), randn(&[3, 3, 2, 4], r)],
            &|g, v| {
                let y = g.conv2d_transpose(v[0], v[1], stride, pad).unwrap();
                project(g, y)
            },
        );
    }
}

pub fn dense_matmul_bias() {
    check_points("matmul", |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)], &|g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y)
    });
    check_points("dense", |r| vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)], &|g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        project(g, y)
    });
    check_points("bias_add nhwc", |r| vec![randn(&[2, 3, 3, 4], r), randn(&[4], r)], &|g, v| {
        let y = g.bias_add(v[0], v[1]).unwrap();
        project(g, y)
    });
    check_points("transpose", |r| vec![randn(&[3, 5], r)], &|g, v| {
        let y = g.transpose(v[0]).unwrap();
        project(g, y)
    });
}

pub fn pointwise() {
    let one = |r: &mut StreamRng| vec![randn(&[4, 6], r)];
    check_points("relu", one, &|g, v| {
        let y = g.relu(v[0]);
        project(g, y)
    });
    check_points("sigmoid", one, &|g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y)
    });
    check_points("exp", one, &|g, v| {
        let y = g.exp(v[0]);
        project(g, y)
    });
    check_points("log", |r| vec![randn(&[4, 6], r).map(|x| x.abs() + 0.5)], &|g, v| {
        let y = g.log(v[0]);
        project(g, y)
    });
    check_points("square", one, &|g, v| {
        let y = g.square(v[0]);
        project(g, y)
    });
    check_points("scale", one, &|g, v| {
        let y = g.scale(v[0], -2.5);
        project(g, y)
    });
    check_points("sum_squares", one, &|g, v| g.sum_squares(v[0]));
}

pub fn binary_elementwise() {
    let two = |r: &mut StreamRng| vec![randn(&[3, 4], r), randn(&[3, 4], r)];
    check_points("add", two, &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y)
    });
    check_points("sub", two, &|g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y)
    });
    check_points("mul", two, &|g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y)
    });
}

pub fn softmax_family() {
    let one = |r: &mut StreamRng| vec![randn(&[3, 5], r)];
    check_points("softmax", one, &|g, v| {
        let y = g.softmax(v[0]).unwrap();
        project(g, y)
    });
    check_points("log_softmax", one, &|g, v| {
        let y = g.log_softmax(v[0]).unwrap();
        project(g, y)
    });
    check_points("l2_normalize_rows", one, &|g, v| {
        let y = g.l2_normalize_rows(v[0]).unwrap();
        project(g, y)
    });
}

pub fn shape_ops() {
    check_points("upsample2x", |r| vec![randn(&[2, 2, 3, 2], r)], &|g, v| {
        let y = g.upsample2x(v[0]).unwrap();
        project(g, y)
    });
    check_points("reshape", |r| vec![randn(&[2, 6], r)], &|g, v| {
        let y = g.reshape(v[0], &[3, 2, 2]).unwrap();
        project(g, y)
    });
    check_points("gather_rows", |r| vec![randn(&[4, 3], r)], &|g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
        project(g, y)
    });
}

pub fn mixture_kl() {
    check_points(
        "gmm_gaussian_kl",
        |r| vec![randn(&[3, 4], r), randn(&[3, 4], r).map(|x| 0.5 * x), randn(&[2, 4], r), randn(&[2, 4], r).map(|x| 0.3 * x)],
        &|g, v| {
            let y = g.gmm_gaussian_kl(v[0], v[1], v[2], v[3]).unwrap();
            project(g, y)
        },
    );
}

fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor { enc: [2, 3, 2, 3, 2], hidden: 5, dec: [3, 2, 2, 3, 2], ..ArchDescriptor::srgb(4) }
}

/// Zero-initialised biases put dead channels exactly on a ReLU kink, where
/// a difference quotient is meaningless; give them random values.
fn jitter<T: Real>(leaves: &mut [Tensor<T>], rng: &mut StreamRng) {
    for t in leaves.iter_mut().filter(|t| t.data().iter().all(|v| *v == T::zero())) {
        *t = Tensor::<T>::randn(t.shape(), rng).map(|v| v * T::from_f64(0.1));
    }
}

/// Flattens a model into the leaf list `[encoder.., prior_mu, prior_log_sigma, dummy..]`.
fn stage1_leaves<T: Real>(m: &ModelParams<T>) -> Vec<Tensor<T>> {
    let mut v: Vec<Tensor<T>> = m.encoder.tensors().into_iter().cloned().collect();
    v.push(m.prior.mu.clone());
    v.push(m.prior.log_sigma.clone());
    v.extend(m.dummy.as_ref().unwrap().tensors().into_iter().cloned());
    v
}

fn stage1_build<'a, T: Real>(
    arch: &'a ArchDescriptor,
    weights: &'a Tensor<T>,
    x: &'a Tensor<T>,
    eps: &'a Tensor<T>,
    cfg: &'a LossConfig,
    n_enc: usize,
) -> impl Fn(&mut Graph<T>, &[Var]) -> Var + 'a {
    move |g, v| {
        let vars = EncoderStageVars { encoder: &v[..n_enc], prior_mu: v[n_enc], prior_log_sigma: v[n_enc + 1], dummy: &v[n_enc + 2..] };
        let input = g.constant(x.clone());
        let target = g.constant(x.map(|p| p * T::from_f64(0.9) + T::from_f64(0.05)));
        let e = g.constant(eps.clone());
        encoder_loss(g, arch, &vars, weights, input, target, e, cfg).unwrap().total
    }
}

pub fn encoder_loss_end_to_end() {
    let arch = tiny_arch();
    for (p, kl_mode) in [(0, KlMode::Soft), (1, KlMode::Soft), (2, KlMode::Hard)] {
        let mut rng = StreamRng::seed_from_u64(100 + p);
        let m = ModelParams::<f64>::build(&arch, 3, 2, 0, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 4, 4, 3], 1.0, &mut rng).map(|v: f64| 0.5 + 0.5 * v);
        let eps = randn(&[2, 2], &mut rng);
        let cfg = LossConfig { lambda_reg: 1e-2, kl_mode, ..LossConfig::default() };
        let n_enc = m.encoder.tensors().len();
        let mut leaves = stage1_leaves(&m);
        jitter(&mut leaves, &mut rng);
        let build = stage1_build(&arch, &m.prior.weights, &x, &eps, &cfg, n_enc);
        check(&format!("encoder_loss 64-bit #{p}"), &leaves, &build);

        // 32-bit analytic gradient against the 64-bit difference quotient.
        let leaves32: Vec<Tensor<f32>> = leaves.iter().map(|t| t.cast()).collect();
        let (w32, x32, e32) = (m.prior.weights.cast::<f32>(), x.cast::<f32>(), eps.cast::<f32>());
        let build32 = stage1_build(&arch, &w32, &x32, &e32, &cfg, n_enc);
        let a32 = analytic(&leaves32, &build32);
        let n64 = numeric(&leaves, &build);
        for (i, (a, n)) in a32.iter().zip(&n64).enumerate() {
            let e = rel_err(a, n);
            assert!(e < TOL32, "encoder_loss 32-bit #{p}: leaf {i} relative error {e:.3e}");
        }
    }
}

pub fn decoder_loss_end_to_end() {
    let arch = tiny_arch();
    let mut rng = StreamRng::seed_from_u64(7);
    let m = ModelParams::<f64>::build(&arch, 3, 2, 3, &mut rng).unwrap();
    let z = randn(&[5, 2], &mut rng);
    let target = Tensor::uniform(&[5, 4, 4, 3], 0.5, &mut rng).map(|v: f64| v + 0.5);
    let routes = [2, 0, 2, 2, 0];
    let mut leaves: Vec<Tensor<f64>> = m.decoders.iter().flat_map(|d| d.tensors().into_iter().cloned()).collect();
    jitter(&mut leaves, &mut rng);
    let per = m.decoders[0].tensors().len();
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let decs: Vec<Vec<Var>> = v.chunks(per).map(<[Var]>::to_vec).collect();
        decoder_loss(g, &arch, &decs, &z, &routes, &target, 1e-2).unwrap().total
    };
    check("decoder_loss", &leaves, &build);
    let a = analytic(&leaves, &build);
    assert!(a[per..2 * per].iter().flatten().all(|&x| x == 0.0), "unrouted decoder has a gradient");
}

pub fn conv_adjoint_identity() {
    let mut rng = StreamRng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(1..3);
        let (ci, co) = (rng.random_range(1..5), rng.random_range(1..5));
        let stride = rng.random_range(1..3);
        let pad = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        // Extents that the transpose maps back exactly; stride 2 otherwise
        // leaves the input size ambiguous.
        let mut extent = || {
            let m = rng.random_range(2..5);
            match pad {
                Padding::Same => stride * m,
                Padding::Valid => 3 + stride * (m - 1),
            }
        };
        let (h, w) = (extent(), extent());
        let x = randn(&[n, h, w, ci], &mut rng);
        let k = randn(&[3, 3, ci, co], &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let probe = randn(g.value(y).shape(), &mut rng);
        let pv = g.constant(probe.clone());
        let back = g.conv2d_transpose(pv, kv, stride, pad).unwrap();
        assert_eq!(g.value(back).shape(), x.shape());
        let lhs = g.value(y).dot(&probe).unwrap();
        let rhs = x.dot(g.value(back)).unwrap();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

pub const SUITE: &[(&str, fn())] = &[
    ("conv2d_same_and_valid", conv2d_same_and_valid),
    ("conv2d_transpose", conv2d_transpose),
    ("dense_matmul_bias", dense_matmul_bias),
    ("pointwise", pointwise),
    ("binary_elementwise", binary_elementwise),
    ("softmax_family", softmax_family),
    ("shape_ops", shape_ops),
    ("mixture_kl", mixture_kl),
    ("encoder_loss_end_to_end", encoder_loss_end_to_end),
    ("decoder_loss_end_to_end", decoder_loss_end_to_end),
];
