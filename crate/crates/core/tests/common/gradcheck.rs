//! Central finite-difference checks for every layer, both losses and a whole small model.
//!
//! The scalar under test is `L = sum(r * y)` for a fixed random `r`, evaluated in `f64`.
//! A check reports, over all gradient tensors, `max |analytic - numeric| / max(|numeric|_inf,
//! |analytic|_inf)`.

use super::tiny_arch;
use cofor_core::model::{Head, MiniXception, Targets};
use cofor_core::nn::{
    sigmoid_xent, softmax_xent, Graph, NodeId, Padding, ParamStore, Scalar, SparseBatch, Tensor,
};
use cofor_core::{feature_tensor, PairSubset, PixelImage, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Precision {
    pub eps: f64,
    pub tolerance: f64,
}

pub const F64: Precision = Precision {
    eps: 1e-6,
    tolerance: 1e-5,
};

pub const F32: Precision = Precision {
    eps: 1e-2,
    tolerance: 1e-3,
};

fn uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

/// Values bounded away from zero so a perturbation of `eps` never crosses the ReLU kink.
fn away_from_zero<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        T::from_f64_lossy(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Distinct values 0.05 apart in random order, so pooling windows never tie.
fn spaced<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals.into_iter().map(T::from_f64_lossy).collect()).unwrap()
}

fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn dot<T: Scalar>(r: &[f64], y: &Tensor<T>) -> f64 {
    r.iter().zip(y.data()).map(|(a, b)| a * b.as_f64()).sum()
}

/// Worst normalised discrepancy over a list of (analytic, numeric) gradient pairs.
pub fn discrepancy(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in pairs {
        assert_eq!(a.len(), n.len(), "gradient length mismatch");
        let scale = a
            .iter()
            .chain(n)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let err = a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

fn perturbed<T: Scalar>(t: &Tensor<T>, k: usize, delta: f64) -> Tensor<T> {
    let mut out = t.clone();
    let v = out.data()[k].as_f64() + delta;
    out.data_mut()[k] = T::from_f64_lossy(v);
    out
}

/// Effective step after rounding to `T`, so the quotient uses the perturbation actually applied.
fn applied_step<T: Scalar>(t: &Tensor<T>, k: usize, eps: f64) -> (Tensor<T>, Tensor<T>, f64) {
    let plus = perturbed(t, k, eps);
    let minus = perturbed(t, k, -eps);
    let h = plus.data()[k].as_f64() - minus.data()[k].as_f64();
    (plus, minus, h)
}

/// Checks a graph built from `inputs` (registered as dense input nodes) against finite
/// differences in every parameter and every input element.
pub fn check_graph<T: Scalar>(
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    build: impl Fn(&mut Graph<'_, T>, &[NodeId]) -> Result<NodeId>,
    eps: f64,
    seed: u64,
) -> f64 {
    let run = |store: &ParamStore<T>, xs: &[Tensor<T>]| -> Tensor<T> {
        let mut g = Graph::new(store);
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &ids).expect("forward");
        g.value(out).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = run(params, inputs).shape().to_vec();
    let r: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new(params);
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &ids).expect("forward");
    let upstream = Tensor::new(&shape, r.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap();
    let grads = g.backward(out, &upstream).expect("backward");

    let mut pairs = Vec::new();
    for (p, analytic) in grads.params.iter().enumerate() {
        let w = &params.params()[p].weights;
        let numeric: Vec<f64> = (0..w.len())
            .map(|k| {
                let (plus, minus, h) = applied_step(w, k, eps);
                let mut sp = params.clone();
                sp.params_mut()[p].weights = plus;
                let mut sm = params.clone();
                sm.params_mut()[p].weights = minus;
                (dot(&r, &run(&sp, inputs)) - dot(&r, &run(&sm, inputs))) / h
            })
            .collect();
        pairs.push((as_f64(analytic), numeric));
    }
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.input(*id).map(as_f64).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric: Vec<f64> = (0..inputs[i].len())
            .map(|k| {
                let (plus, minus, h) = applied_step(&inputs[i], k, eps);
                let mut xp = inputs.to_vec();
                xp[i] = plus;
                let mut xm = inputs.to_vec();
                xm[i] = minus;
                (dot(&r, &run(params, &xp)) - dot(&r, &run(params, &xm))) / h
            })
            .collect();
        pairs.push((analytic, numeric));
    }
    discrepancy(&pairs)
}

/// Checks `f(x) -> (loss, dloss/dx)` against finite differences of the loss.
pub fn check_loss<T: Scalar>(x: &Tensor<T>, f: impl Fn(&Tensor<T>) -> (f64, Tensor<T>), eps: f64) -> f64 {
    let (_, analytic) = f(x);
    let numeric: Vec<f64> = (0..x.len())
        .map(|k| {
            let (plus, minus, h) = applied_step(x, k, eps);
            (f(&plus).0 - f(&minus).0) / h
        })
        .collect();
    discrepancy(&[(as_f64(&analytic), numeric)])
}

fn store_with<T: Scalar>(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamStore<T> {
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        s.push(format!("p{i}"), uniform(shape, rng));
    }
    s
}

pub fn conv2d<T: Scalar>(eps: f64, stride: usize, padding: Padding) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10 + stride as u64);
    let params = store_with::<T>(&mut rng, &[&[3, 3, 3, 4], &[4]]);
    let x = uniform::<T>(&[2, 6, 7, 3], &mut rng);
    check_graph(&params, &[x], |g, ids| g.conv2d(ids[0], pid(0), Some(pid(1)), stride, padding), eps, 1)
}

pub fn pointwise<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = store_with::<T>(&mut rng, &[&[1, 1, 5, 3], &[3]]);
    let x = uniform::<T>(&[2, 4, 4, 5], &mut rng);
    check_graph(&params, &[x], |g, ids| g.conv2d(ids[0], pid(0), Some(pid(1)), 1, Padding::Same), eps, 2)
}

pub fn sparse_conv2d<T: Scalar>(eps: f64, stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12 + stride as u64);
    let params = store_with::<T>(&mut rng, &[&[3, 3, 2, 3], &[3]]);
    let dense = Tensor::<T>::from_fn(&[2, 7, 6, 2], |_| {
        if rng.gen_bool(0.3) {
            T::from_f64_lossy(rng.gen_range(0.0..1.0))
        } else {
            T::zero()
        }
    });
    let input = SparseBatch::from_dense(&dense).unwrap();
    check_graph(
        &params,
        &[],
        |g, _| g.sparse_conv2d(input.clone(), pid(0), Some(pid(1)), stride, Padding::Same),
        eps,
        3,
    )
}

pub fn depthwise<T: Scalar>(eps: f64, stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14 + stride as u64);
    let params = store_with::<T>(&mut rng, &[&[3, 3, 4]]);
    let x = uniform::<T>(&[2, 7, 6, 4], &mut rng);
    check_graph(&params, &[x], |g, ids| g.depthwise(ids[0], pid(0), stride, Padding::Same), eps, 4)
}

pub fn separable<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let params = store_with::<T>(&mut rng, &[&[3, 3, 3], &[1, 1, 3, 5], &[5]]);
    let x = uniform::<T>(&[2, 5, 5, 3], &mut rng);
    check_graph(&params, &[x], |g, ids| g.separable_conv2d(ids[0], pid(0), pid(1), Some(pid(2))), eps, 5)
}

pub fn relu<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = away_from_zero::<T>(&[2, 4, 3, 5], &mut rng);
    check_graph(&ParamStore::new(), &[x], |g, ids| Ok(g.relu(ids[0])), eps, 6)
}

pub fn maxpool<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = spaced::<T>(&[2, 7, 6, 3], &mut rng);
    check_graph(&ParamStore::new(), &[x], |g, ids| g.maxpool(ids[0], 3, 2), eps, 7)
}

pub fn global_avg_pool<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = uniform::<T>(&[3, 4, 5, 6], &mut rng);
    check_graph(&ParamStore::new(), &[x], |g, ids| g.global_avg_pool(ids[0]), eps, 8)
}

pub fn dense<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let params = store_with::<T>(&mut rng, &[&[7, 4], &[4]]);
    let x = uniform::<T>(&[3, 7], &mut rng);
    check_graph(&params, &[x], |g, ids| g.dense(ids[0], pid(0), Some(pid(1))), eps, 9)
}

/// Residual junction with the same input feeding both branches.
pub fn residual_add<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = store_with::<T>(&mut rng, &[&[1, 1, 3, 3], &[3]]);
    let x = uniform::<T>(&[2, 4, 4, 3], &mut rng);
    check_graph(
        &params,
        &[x],
        |g, ids| {
            let branch = g.conv2d(ids[0], pid(0), Some(pid(1)), 1, Padding::Same)?;
            g.add(branch, ids[0])
        },
        eps,
        10,
    )
}

pub fn sigmoid_loss<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let z = Tensor::<T>::from_fn(&[6, 1], |_| T::from_f64_lossy(rng.gen_range(-3.0..3.0)));
    let labels = [true, false, true, true, false, false];
    check_loss(&z, |x| sigmoid_xent(x, &labels).unwrap(), eps)
}

pub fn softmax_loss<T: Scalar>(eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let z = Tensor::<T>::from_fn(&[4, 6], |_| T::from_f64_lossy(rng.gen_range(-3.0..3.0)));
    let labels = [0, 5, 2, 2];
    check_loss(&z, |x| softmax_xent(x, &labels).unwrap(), eps)
}

fn pid(i: usize) -> cofor_core::nn::ParamId {
    cofor_core::nn::ParamId(i)
}

/// Every parameter of a small end-to-end network, from co-occurrence input to loss, in f64.
pub fn whole_model(head: Head) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let feats: Vec<_> = (0..3)
        .map(|_| {
            let data = (0..24 * 20 * 3).map(|_| rng.gen()).collect();
            feature_tensor(&PixelImage::new(24, 20, 3, data).unwrap(), &PairSubset::hv())
        })
        .collect();
    let refs: Vec<_> = feats.iter().collect();
    let mut model = MiniXception::<f64>::build(tiny_arch(6, head), 5).unwrap();
    // Non-zero biases so no ReLU sits exactly at its kink.
    for p in model.params_mut().params_mut() {
        if p.name.ends_with("bias") {
            let n = p.weights.len();
            p.weights = Tensor::from_fn(&[n], |_| rng.gen_range(-0.1..0.1));
        }
    }
    let bin = [true, false, true];
    let cls = [0usize, 2, 1];
    let targets = || match head {
        Head::Detection => Targets::Binary(&bin),
        Head::Attribution(_) => Targets::Classes(&cls),
    };
    let analytic = model.loss_and_grads(&refs, targets()).unwrap().grads;
    let eps = F64.eps;
    let mut pairs = Vec::new();
    for (p, a) in analytic.iter().enumerate() {
        let w = model.params().params()[p].weights.clone();
        let numeric = (0..w.len())
            .map(|k| {
                let (plus, minus, h) = applied_step(&w, k, eps);
                let mut m = model.clone();
                m.params_mut().params_mut()[p].weights = plus;
                let lp = m.loss_and_grads(&refs, targets()).unwrap().loss;
                m.params_mut().params_mut()[p].weights = minus;
                let lm = m.loss_and_grads(&refs, targets()).unwrap().loss;
                (lp - lm) / h
            })
            .collect();
        pairs.push((as_f64(a), numeric));
    }
    discrepancy(&pairs)
}

/// Every layer and loss check at one precision, labelled.
pub fn layer_suite<T: Scalar>(eps: f64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d stride 1 same", conv2d::<T>(eps, 1, Padding::Same)),
        ("conv2d stride 2 same", conv2d::<T>(eps, 2, Padding::Same)),
        ("conv2d stride 1 valid", conv2d::<T>(eps, 1, Padding::Valid)),
        ("conv2d 1x1", pointwise::<T>(eps)),
        ("sparse conv2d stride 1", sparse_conv2d::<T>(eps, 1)),
        ("sparse conv2d stride 2", sparse_conv2d::<T>(eps, 2)),
        ("depthwise stride 1", depthwise::<T>(eps, 1)),
        ("depthwise stride 2", depthwise::<T>(eps, 2)),
        ("separable conv2d", separable::<T>(eps)),
        ("relu", relu::<T>(eps)),
        ("maxpool 3/2", maxpool::<T>(eps)),
        ("global average pool", global_avg_pool::<T>(eps)),
        ("dense", dense::<T>(eps)),
        ("residual add", residual_add::<T>(eps)),
        ("sigmoid cross-entropy", sigmoid_loss::<T>(eps)),
        ("softmax cross-entropy", softmax_loss::<T>(eps)),
    ]
}
