//! Finite-difference checks of every backward pass.

use careseg::hierarchy::{LabelSchema, MVO};
use careseg::loss::CascadeLossConfig;
use careseg::net::conv::{conv3d_backward, conv3d_forward};
use careseg::net::layers::*;
use careseg::net::{accumulate_gradients, record_sample, CascadeModel, NetConfig, StageModel, Tensor5};
use careseg::volume::{Geometry, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rand_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn dot(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-8)
}

/// Central difference of `f` along coordinate `i` of `x`.
fn central(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

pub fn conv_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(cin, cout, ks) in &[(3, 2, 3), (2, 9, 3), (4, 3, 1)] {
        let x = rand_tensor([2, cin, 4, 3, 5], &mut rng);
        let w: Vec<f64> = (0..cout * cin * ks * ks * ks).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random::<f64>() - 0.5).collect();
        let seed = rand_tensor([2, cout, 4, 3, 5], &mut rng);
        let g = conv3d_backward(&x, &w, &seed, ks, true).map_err(|e| e.to_string())?;
        let gx = g.input.as_ref().expect("input gradient requested");
        let loss = |x: &Tensor5<f64>, w: &[f64], b: &[f64]| dot(&conv3d_forward(x, w, b, cout, ks).unwrap(), &seed);
        let mut xd = x.data().to_vec();
        for _ in 0..10 {
            let i = rng.random_range(0..xd.len());
            let fd = central(&mut xd, i, 1e-6, |v| {
                loss(&Tensor5::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b)
            });
            ensure!(rel(fd, gx.data()[i]) < 1e-4, "conv input {i}: {fd} vs {}", gx.data()[i]);
        }
        let mut wd = w.clone();
        for _ in 0..10 {
            let i = rng.random_range(0..wd.len());
            let fd = central(&mut wd, i, 1e-6, |v| loss(&x, v, &b));
            ensure!(rel(fd, g.weight[i]) < 1e-4, "conv weight {i}: {fd} vs {}", g.weight[i]);
        }
        let mut bd = b.clone();
        for i in 0..cout {
            let fd = central(&mut bd, i, 1e-6, |v| loss(&x, &w, v));
            ensure!(rel(fd, g.bias[i]) < 1e-4, "conv bias {i}: {fd} vs {}", g.bias[i]);
        }
    }
    Ok(())
}

pub fn f32_conv_backward_agrees_with_f64() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (cin, cout) = (5, 11);
    let x = rand_tensor([1, cin, 9, 7, 6], &mut rng);
    let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.random::<f64>() - 0.5).collect();
    let seed = rand_tensor([1, cout, 9, 7, 6], &mut rng);
    let g64 = conv3d_backward(&x, &w, &seed, 3, true).map_err(|e| e.to_string())?;
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let g32 = conv3d_backward(&x.cast::<f32>(), &w32, &seed.cast::<f32>(), 3, true).map_err(|e| e.to_string())?;
    for (a, b) in g64.weight.iter().zip(&g32.weight) {
        ensure!((a - *b as f64).abs() < 1e-3 * a.abs().max(1.0), "f32 weight gradient {b} vs {a}");
    }
    for (a, b) in g64.input.unwrap().data().iter().zip(g32.input.unwrap().data()) {
        ensure!((a - *b as f64).abs() < 1e-4 * a.abs().max(1.0), "f32 input gradient {b} vs {a}");
    }
    Ok(())
}

pub fn pointwise_and_pooling_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1, 2, 4, 4, 2];
    // keep inputs away from the kink at 0
    let x = Tensor5::from_fn(shape, |_| {
        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
        if v.abs() < 0.05 { 0.5 } else { v }
    });
    let seed = rand_tensor(shape, &mut rng);
    let mut g = seed.clone();
    leaky_relu_backward(&x, &mut g);
    let mut xd = x.data().to_vec();
    for i in 0..xd.len() {
        let fd = central(&mut xd, i, 1e-6, |v| dot(&leaky_relu(&Tensor5::from_vec(shape, v.to_vec()).unwrap()), &seed));
        ensure!(rel(fd, g.data()[i]) < 1e-4, "leaky relu {i}: {fd} vs {}", g.data()[i]);
    }

    let mask = dropout_mask::<f64, _>(x.len(), 0.3, true, &mut rng);
    let mut g = seed.clone();
    apply_mask(&mut g, mask.as_deref());
    for i in 0..xd.len() {
        let fd = central(&mut xd, i, 1e-6, |v| {
            let mut y = Tensor5::from_vec(shape, v.to_vec()).unwrap();
            apply_mask(&mut y, mask.as_deref());
            dot(&y, &seed)
        });
        ensure!((fd - g.data()[i]).abs() < 1e-6, "dropout {i}: {fd} vs {}", g.data()[i]);
    }

    let pseed = rand_tensor([1, 2, 2, 2, 1], &mut rng);
    let (_, arg) = maxpool3d(&x).map_err(|e| e.to_string())?;
    let g = maxpool3d_backward(shape, &arg, &pseed);
    for i in 0..xd.len() {
        let fd = central(&mut xd, i, 1e-7, |v| {
            dot(&maxpool3d(&Tensor5::from_vec(shape, v.to_vec()).unwrap()).unwrap().0, &pseed)
        });
        ensure!((fd - g.data()[i]).abs() < 1e-6, "maxpool {i}: {fd} vs {}", g.data()[i]);
    }

    let useed = rand_tensor([1, 2, 8, 8, 4], &mut rng);
    let g = upsample_trilinear_backward(&useed).map_err(|e| e.to_string())?;
    for i in 0..xd.len() {
        let fd = central(&mut xd, i, 1e-6, |v| {
            dot(&upsample_trilinear(&Tensor5::from_vec(shape, v.to_vec()).unwrap()), &useed)
        });
        ensure!(rel(fd, g.data()[i]) < 1e-4, "upsample {i}: {fd} vs {}", g.data()[i]);
    }
    Ok(())
}

pub fn stage_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = NetConfig {
        levels: 3,
        base_filters: 3,
        dropout: 0.2,
    };
    let model = StageModel::<f64>::init(cfg.stage(2), &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor([1, 4, 8, 4, 4], &mut rng);
    let seed = rand_tensor([1, 4, 8, 4, 4], &mut rng);
    // dropout on: replay the same masks by reseeding
    let run = |m: &StageModel<f64>, x: &Tensor5<f64>| {
        m.forward_traced(x, true, &mut ChaCha8Rng::seed_from_u64(77)).unwrap()
    };
    let (_, trace) = run(&model, &x);
    let mut grads = StageModel::zeros(model.config).unwrap();
    let gx = model
        .backward(&trace, &seed, &mut grads, true)
        .map_err(|e| e.to_string())?
        .expect("input gradient requested");

    let mut xd = x.data().to_vec();
    for _ in 0..8 {
        let i = rng.random_range(0..xd.len());
        let fd = central(&mut xd, i, 1e-6, |v| dot(&run(&model, &Tensor5::from_vec(x.shape(), v.to_vec()).unwrap()).0, &seed));
        ensure!(rel(fd, gx.data()[i]) < 1e-4, "stage input {i}: {fd} vs {}", gx.data()[i]);
    }
    for li in 0..model.convs.len() {
        let n = model.convs[li].weight.len();
        let i = rng.random_range(0..n);
        let mut m = model.clone();
        let fd = central(&mut model.convs[li].weight.clone(), i, 1e-6, |v| {
            m.convs[li].weight.copy_from_slice(v);
            dot(&run(&m, &x).0, &seed)
        });
        let an = grads.convs[li].weight[i];
        ensure!(rel(fd, an) < 1e-4, "{} weight {i}: {fd} vs {an}", model.convs[li].name);
        let mut m = model.clone();
        let fd = central(&mut model.convs[li].bias.clone(), 0, 1e-6, |v| {
            m.convs[li].bias.copy_from_slice(v);
            dot(&run(&m, &x).0, &seed)
        });
        ensure!(rel(fd, grads.convs[li].bias[0]) < 1e-4, "{} bias: {fd}", model.convs[li].name);
    }
    Ok(())
}

/// Phantom-like label volume with every class; MVO becomes MIT when
/// `with_mvo` is false.
pub fn small_labels(n: usize, with_mvo: bool) -> LabelVolume {
    let geom = Geometry::new([n, n, n], [1.0; 3]).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let data = (0..n * n * n)
        .map(|v| {
            let (i, j, k) = (v % n, (v / n) % n, v / (n * n));
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
            match r {
                r if r < 1.2 => 1,
                r if r < 2.4 && i as f64 > c && j as f64 > c => {
                    if with_mvo {
                        MVO
                    } else {
                        3
                    }
                }
                r if r < 2.4 && i as f64 > c => 3,
                r if r < 2.4 => 2,
                _ => 0,
            }
        })
        .collect();
    LabelVolume::new(geom, LabelSchema::Stage3, data).unwrap()
}

fn image_of(y: &LabelVolume) -> Tensor5<f64> {
    let [n, _, _] = y.dims();
    Tensor5::from_fn([1, 1, n, n, n], |i| {
        0.3 * y.get(i[2], i[3], i[4]) as f64 + 0.05 * ((i[2] * 7 + i[3] * 3 + i[4]) % 5) as f64
    })
}

pub fn end_to_end_cascade_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = NetConfig {
        levels: 2,
        base_filters: 3,
        dropout: 0.1,
    };
    let model = CascadeModel::<f64>::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let y = small_labels(8, true);
    let x = image_of(&y);
    let lc = CascadeLossConfig::default();
    let tape = record_sample(&model, &x, &y, &lc, false, &mut rng).map_err(|e| e.to_string())?;
    ensure!(tape.delta_mvo, "fixture lost its MVO");
    let grads = accumulate_gradients(&model, std::slice::from_ref(&tape)).map_err(|e| e.to_string())?;
    let total = |m: &CascadeModel<f64>| record_sample(m, &x, &y, &lc, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().total;
    // one weight per layer of every stage
    for s in 0..3 {
        for li in 0..model.stages[s].convs.len() {
            let i = rng.random_range(0..model.stages[s].convs[li].weight.len());
            let mut m = model.clone();
            let fd = central(&mut model.stages[s].convs[li].weight.clone(), i, 1e-5, |v| {
                m.stages[s].convs[li].weight.copy_from_slice(v);
                total(&m)
            });
            let an = grads.stages[s].convs[li].weight[i];
            ensure!(
                rel(fd, an) < 1e-3 || (fd - an).abs() < 1e-9,
                "stage {} {} weight {i}: {fd} vs {an}",
                s + 1,
                model.stages[s].convs[li].name
            );
        }
    }
    Ok(())
}

/// A batch of samples without MVO leaves every stage-3 gradient entry at
/// +0.0, bit for bit, while stages 1 and 2 receive gradient.
pub fn stage3_gating() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = NetConfig {
        levels: 2,
        base_filters: 3,
        dropout: 0.1,
    };
    let model = CascadeModel::<f64>::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let lc = CascadeLossConfig::default();
    let mut tapes = vec![];
    for n in [8, 8, 4] {
        let y = small_labels(n, false);
        tapes.push(record_sample(&model, &image_of(&y), &y, &lc, true, &mut rng).map_err(|e| e.to_string())?);
    }
    ensure!(tapes.iter().all(|t| !t.delta_mvo), "fixture contains MVO");
    let g = accumulate_gradients(&model, &tapes).map_err(|e| e.to_string())?;
    for (name, t) in g.stages[2].tensors() {
        ensure!(t.iter().all(|v| v.to_bits() == 0), "stage-3 tensor {name} received gradient");
    }
    for s in 0..2 {
        ensure!(
            g.stages[s].tensors().iter().any(|(_, t)| t.iter().any(|&v| v != 0.0)),
            "stage {} received no gradient",
            s + 1
        );
    }
    // with an MVO sample in the batch, stage 3 does learn
    let y = small_labels(8, true);
    tapes.push(record_sample(&model, &image_of(&y), &y, &lc, true, &mut rng).map_err(|e| e.to_string())?);
    let g = accumulate_gradients(&model, &tapes).map_err(|e| e.to_string())?;
    ensure!(
        g.stages[2].tensors().iter().any(|(_, t)| t.iter().any(|&v| v != 0.0)),
        "stage 3 got no gradient from an MVO sample"
    );
    Ok(())
}
