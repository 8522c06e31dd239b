//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance suite. Every check returns a description of the first
//! disagreement.

#![allow(dead_code)]

pub mod grad;

use careseg::loss::generalized_dice;
use careseg::metrics::{surface_distances, BinaryMask};
use careseg::net::conv::conv3d_forward;
use careseg::net::layers::{maxpool3d, upsample_trilinear};
use careseg::net::Tensor5;
use careseg::postprocess::{connected_components, Connectivity};
use careseg::volume::{resample_trilinear, Geometry, ProbKind, ProbVolume, ScalarVolume};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn dims_upto(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)]
}

fn even_dims(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    std::array::from_fn(|_| 2 * rng.random_range(1..=max / 2))
}

fn spacing(rng: &mut ChaCha8Rng) -> [f32; 3] {
    std::array::from_fn(|_| [0.5f32, 0.75, 1.0, 1.25, 2.0, 3.0][rng.random_range(0..6)])
}

fn vox(d: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + d[0] * (j + d[1] * k)
}

/// Mask with random density, sometimes empty or full.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let p = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][rng.random_range(0..6)];
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn conv_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = dims_upto(rng, 12);
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let ks = if rng.random_bool(0.8) { 3 } else { 1 };
    let x = Tensor5::from_fn([n, cin, d[0], d[1], d[2]], |_| rng.random_range(-1.0..1.0));
    let w: Vec<f64> = (0..cout * cin * ks * ks * ks).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = conv3d_forward(&x, &w, &b, cout, ks).map_err(|e| e.to_string())?;
    let r = (ks / 2) as isize;
    for bi in 0..n {
        for co in 0..cout {
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for dz in -r..=r {
                                for dy in -r..=r {
                                    for dx in -r..=r {
                                        let (p, q, t) = (i as isize + dx, j as isize + dy, k as isize + dz);
                                        if p < 0
                                            || q < 0
                                            || t < 0
                                            || p >= d[0] as isize
                                            || q >= d[1] as isize
                                            || t >= d[2] as isize
                                        {
                                            continue;
                                        }
                                        let wi = (((co * cin + ci) * ks + (dz + r) as usize) * ks + (dy + r) as usize)
                                            * ks
                                            + (dx + r) as usize;
                                        s += w[wi] * x.get([bi, ci, p as usize, q as usize, t as usize]);
                                    }
                                }
                            }
                        }
                        let got = y.get([bi, co, i, j, k]);
                        if (got - s).abs() > 1e-10 {
                            return Err(format!("conv {d:?} ks {ks} at {:?}: {got} vs {s}", [bi, co, i, j, k]));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn maxpool_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = even_dims(rng, 12);
    let c = rng.random_range(1..=2);
    // small integer values so ties occur
    let x = Tensor5::from_fn([1, c, d[0], d[1], d[2]], |_| rng.random_range(0..4) as f64);
    let (y, arg) = maxpool3d(&x).map_err(|e| e.to_string())?;
    let mut o = 0;
    for ch in 0..c {
        for k in 0..d[2] / 2 {
            for j in 0..d[1] / 2 {
                for i in 0..d[0] / 2 {
                    let mut best = (f64::NEG_INFINITY, usize::MAX);
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = [0, ch, 2 * i + dx, 2 * j + dy, 2 * k + dz];
                                let v = x.get(idx);
                                if v > best.0 {
                                    best = (v, x.offset(idx));
                                }
                            }
                        }
                    }
                    if y.get([0, ch, i, j, k]) != best.0 || arg[o] != best.1 {
                        return Err(format!("maxpool {d:?} at {:?}", [ch, i, j, k]));
                    }
                    o += 1;
                }
            }
        }
    }
    Ok(())
}

/// Linear taps along one axis: lower index, upper index, upper weight.
fn lin_taps(pos: f64, n: usize) -> (usize, usize, f64) {
    let p = pos.max(0.0).min((n - 1) as f64);
    let lo = p.floor() as usize;
    (lo, (lo + 1).min(n - 1), p - lo as f64)
}

fn trilinear(get: impl Fn(usize, usize, usize) -> f64, pos: [f64; 3], d: [usize; 3]) -> f64 {
    let t = [lin_taps(pos[0], d[0]), lin_taps(pos[1], d[1]), lin_taps(pos[2], d[2])];
    let mut s = 0.0;
    for c in 0..8 {
        let mut w = 1.0;
        let mut idx = [0; 3];
        for a in 0..3 {
            let (lo, hi, f) = t[a];
            if c >> a & 1 == 1 {
                w *= f;
                idx[a] = hi;
            } else {
                w *= 1.0 - f;
                idx[a] = lo;
            }
        }
        s += w * get(idx[0], idx[1], idx[2]);
    }
    s
}

pub fn upsample_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = dims_upto(rng, 6);
    let x = Tensor5::from_fn([1, 2, d[0], d[1], d[2]], |_| rng.random_range(-1.0..1.0));
    let y = upsample_trilinear(&x);
    for c in 0..2 {
        for k in 0..2 * d[2] {
            for j in 0..2 * d[1] {
                for i in 0..2 * d[0] {
                    // output centers land at (i + 0.5) / 2 - 0.5 in input voxels
                    let pos = [i, j, k].map(|v| (v as f64 + 0.5) / 2.0 - 0.5);
                    let want = trilinear(|p, q, t| x.get([0, c, p, q, t]), pos, d);
                    let got = y.get([0, c, i, j, k]);
                    if (got - want).abs() > 1e-5 {
                        return Err(format!("upsample {d:?} at {:?}: {got} vs {want}", [c, i, j, k]));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn resample_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = dims_upto(rng, 12);
    let sp = spacing(rng);
    let g = Geometry::new(d, sp).unwrap();
    let src = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(-1.0f32..1.0));
    let od = dims_upto(rng, 12);
    let osp = spacing(rng);
    let out = resample_trilinear(&src, od, osp).map_err(|e| e.to_string())?;
    for k in 0..od[2] {
        for j in 0..od[1] {
            for i in 0..od[0] {
                // grids share their first voxel center
                let pos = [0, 1, 2].map(|a| [i, j, k][a] as f64 * osp[a] as f64 / sp[a] as f64);
                let want = trilinear(|p, q, t| src.get(p, q, t) as f64, pos, d);
                let got = out.get(i, j, k) as f64;
                if (got - want).abs() > 1e-5 {
                    return Err(format!("resample {d:?}->{od:?} at {:?}: {got} vs {want}", [i, j, k]));
                }
            }
        }
    }
    Ok(())
}

fn find(p: &mut [usize], mut a: usize) -> usize {
    while p[a] != a {
        p[a] = p[p[a]];
        a = p[a];
    }
    a
}

/// Union-find labelling; ids are assigned in order of each component's
/// first voxel.
pub fn components_oracle(mask: &[bool], d: [usize; 3], in_plane: bool) -> (Vec<u32>, Vec<usize>) {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let v = vox(d, i, j, k);
                if !mask[v] {
                    continue;
                }
                let mut nbrs = vec![];
                if i + 1 < d[0] {
                    nbrs.push(vox(d, i + 1, j, k));
                }
                if j + 1 < d[1] {
                    nbrs.push(vox(d, i, j + 1, k));
                }
                if !in_plane && k + 1 < d[2] {
                    nbrs.push(vox(d, i, j, k + 1));
                }
                for u in nbrs {
                    if mask[u] {
                        let (a, b) = (find(&mut parent, v), find(&mut parent, u));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut id_of_root = std::collections::HashMap::new();
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = vec![];
    for v in 0..mask.len() {
        if mask[v] {
            let r = find(&mut parent, v);
            let id = *id_of_root.entry(r).or_insert_with(|| {
                sizes.push(0);
                sizes.len() as u32
            });
            ids[v] = id;
            sizes[id as usize - 1] += 1;
        }
    }
    (ids, sizes)
}

pub fn components_trial(rng: &mut ChaCha8Rng, in_plane: bool) -> Check {
    let d = dims_upto(rng, 12);
    let g = Geometry::new(d, [1.0; 3]).unwrap();
    let mask = random_mask(rng, g.nvox());
    let conn = if in_plane {
        Connectivity::FourInPlane
    } else {
        Connectivity::Six
    };
    let cm = connected_components(&mask, g, conn);
    let (ids, sizes) = components_oracle(&mask, d, in_plane);
    if cm.ids != ids || cm.sizes != sizes {
        return Err(format!("components {d:?} in_plane={in_plane}: {} vs {} components", cm.len(), sizes.len()));
    }
    Ok(())
}

fn boundary_oracle(mask: &[bool], d: [usize; 3]) -> Vec<[usize; 3]> {
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < d[0]
            && (j as usize) < d[1]
            && (k as usize) < d[2]
            && mask[vox(d, i as usize, j as usize, k as usize)]
    };
    let mut out = vec![];
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let (a, b, c) = (i as isize, j as isize, k as isize);
                if inside(a, b, c)
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|&(x, y, z)| !inside(a + x, b + y, c + z))
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn quantile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = 0.95 * (v.len() - 1) as f64;
    let lo = h as usize;
    if lo + 1 >= v.len() {
        return v[lo];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

/// Hausdorff, HD95 and ASSD by comparing every pair of boundary voxels.
pub fn surface_oracle(a: &[bool], b: &[bool], d: [usize; 3], sp: [f32; 3]) -> Option<[f64; 3]> {
    let (ba, bb) = (boundary_oracle(a, d), boundary_oracle(b, d));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|x| ((p[x] as f64 - q[x] as f64) * sp[x] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let (dab, dba) = (directed(&ba, &bb), directed(&bb, &ba));
    let hd = dab.iter().chain(&dba).copied().fold(0.0, f64::max);
    let assd = (dab.iter().sum::<f64>() + dba.iter().sum::<f64>()) / (dab.len() + dba.len()) as f64;
    Some([hd, quantile95(dab).max(quantile95(dba)), assd])
}

pub fn surface_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = dims_upto(rng, 12);
    let sp = spacing(rng);
    let g = Geometry::new(d, sp).unwrap();
    let (a, b) = (random_mask(rng, g.nvox()), random_mask(rng, g.nvox()));
    let got = surface_distances(&BinaryMask::new(g, a.clone()).unwrap(), &BinaryMask::new(g, b.clone()).unwrap())
        .map_err(|e| e.to_string())?
        .map(|s| [s.hd, s.hd95, s.assd]);
    let want = surface_oracle(&a, &b, d, sp);
    match (got, want) {
        (None, None) => Ok(()),
        (Some(x), Some(y)) if x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-9 * q.max(1.0)) => Ok(()),
        _ => Err(format!("surface distances {d:?} {sp:?}: {got:?} vs {want:?}")),
    }
}

/// The loss formula written out term by term, one voxel and label at a time.
pub fn dice_transcription(y: &[Vec<f64>], yhat: &[Vec<f64>], eps: f64) -> f64 {
    let k = y.len();
    let m = y[0].len();
    let mut numer = 0.0;
    let mut denom = 0.0;
    for c in 0..k {
        let mut mk = 0.0;
        for v in 0..m {
            mk += y[c][v];
        }
        let w = mk / m as f64;
        let mut s_num = 0.0;
        let mut s_den = 0.0;
        for v in 0..m {
            s_num += yhat[c][v] * y[c][v];
            s_den += yhat[c][v] * yhat[c][v] + y[c][v];
        }
        numer += w * s_num;
        denom += w * s_den;
    }
    1.0 - 2.0 * numer / (denom + eps)
}

pub fn dice_trial(rng: &mut ChaCha8Rng) -> Check {
    let d = dims_upto(rng, 6);
    let g = Geometry::new(d, [1.0; 3]).unwrap();
    let n = g.nvox();
    let k = rng.random_range(2..=5);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let y: Vec<Vec<f64>> = (0..k).map(|c| labels.iter().map(|&l| f64::from(l == c)).collect()).collect();
    // random simplex points per voxel
    let mut yhat = vec![vec![0.0; n]; k];
    for v in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..k {
            yhat[c][v] = raw[c] / s;
        }
    }
    let pack = |a: &[Vec<f64>]| a.concat();
    let yv = ProbVolume::new(g, k, ProbKind::Probs, pack(&y)).unwrap();
    let pv = ProbVolume::new(g, k, ProbKind::Probs, pack(&yhat)).unwrap();
    let eps = 1e-7;
    let got = generalized_dice(&yv, &pv, eps).map_err(|e| e.to_string())?.loss;
    let want = dice_transcription(&y, &yhat, eps);
    if (got - want).abs() > 1e-10 {
        return Err(format!("dice {d:?} K={k}: {got} vs {want}"));
    }
    let perfect = generalized_dice(&yv, &yv, eps).map_err(|e| e.to_string())?.loss;
    if perfect.abs() > 1e-6 {
        return Err(format!("perfect prediction loss {perfect}"));
    }
    Ok(())
}

/// Runs `trial` `n` times on one seeded stream.
pub fn repeat(seed: u64, n: usize, mut trial: impl FnMut(&mut ChaCha8Rng) -> Check) -> Check {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).try_for_each(|_| trial(&mut rng))
}
