//! Scalar-loop reference implementations used as oracles. They share no
//! code with the library beyond the plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use brainmerge::saliency::LayerStats;
use brainmerge::task_vectors::Fingerprint;
use brainmerge::{ActivationStats, Tensor, TaskVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Donors = BTreeMap<String, TaskVector>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform draws in [0, 1) for one tensor's drop mask.
pub fn dare_uniforms(name: &str, seed: u64, n: usize) -> Vec<f64> {
    let mut state = mix((fnv1a64(name.as_bytes()) ^ seed).wrapping_add(0x9e3779b97f4a7c15));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let z = mix(state);
        out.push((z >> 11) as f64 / (1u64 << 53) as f64);
    }
    out
}

pub fn ceil_count(n: usize, p: f64) -> usize {
    // Exact rational ceiling for densities with at most 9 decimals.
    let num = (p * 1e9).round() as u128 * n as u128;
    let k = num.div_ceil(1_000_000_000);
    (k as usize).min(n)
}

/// Indices of the `k` largest scores, ties to the lower index, via a full sort.
pub fn top_k(scores: &[f32], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; scores.len()];
    for &i in idx.iter().take(k) {
        keep[i] = true;
    }
    keep
}

pub fn ta(donors: &Donors, lambdas: &BTreeMap<String, f32>) -> BTreeMap<String, Vec<f32>> {
    let first = donors.values().next().unwrap();
    let mut out = BTreeMap::new();
    for name in first.deltas.keys() {
        let n = first.deltas[name].numel();
        let mut v = vec![0f32; n];
        for i in 0..n {
            for (d, tv) in donors {
                v[i] += lambdas[d] * tv.deltas[name].data()[i];
            }
        }
        out.insert(name.clone(), v);
    }
    out
}

fn sgn(x: f32) -> i32 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `sign(Σ w·sign(x))` in f64; a zero sum goes to the heaviest voter
/// (+ when the heaviest voters disagree), all-zero gives 0.
pub fn elect(values: &[f32], weights: &[f32]) -> i32 {
    let mut total = 0f64;
    for (&x, &w) in values.iter().zip(weights) {
        total += w as f64 * sgn(x) as f64;
    }
    if total > 0.0 {
        return 1;
    }
    if total < 0.0 {
        return -1;
    }
    let voters: Vec<(f32, i32)> = values
        .iter()
        .zip(weights)
        .filter(|(x, _)| sgn(**x) != 0)
        .map(|(x, w)| (*w, sgn(*x)))
        .collect();
    if voters.is_empty() {
        return 0;
    }
    let top = voters.iter().map(|v| v.0).fold(f32::NEG_INFINITY, f32::max);
    let signs: Vec<i32> = voters.iter().filter(|v| v.0 == top).map(|v| v.1).collect();
    if signs.iter().all(|&s| s == -1) {
        -1
    } else {
        1
    }
}

pub fn combine(values: &[f32], lambdas: &[f32], elected: i32, disjoint_mean: bool) -> f32 {
    if elected == 0 {
        return 0.0;
    }
    let mut acc = 0f32;
    let mut count = 0;
    for (&x, &l) in values.iter().zip(lambdas) {
        if sgn(x) == elected {
            acc += l * x;
            count += 1;
        }
    }
    if disjoint_mean && count > 0 {
        acc / count as f32
    } else if disjoint_mean {
        0.0
    } else {
        acc
    }
}

pub fn trim_by(values: &[f32], ranking: &[f32], p: f64) -> Vec<f32> {
    let keep = top_k(ranking, ceil_count(values.len(), p));
    values.iter().zip(keep).map(|(&x, k)| if k { x } else { 0.0 }).collect()
}

/// Per-tensor TIES: magnitude trim, magnitude vote, λ-weighted disjoint mean.
pub fn ties(
    donors: &Donors,
    lambdas: &BTreeMap<String, f32>,
    p: f64,
    disjoint_mean: bool,
) -> BTreeMap<String, Vec<f32>> {
    let trimmed: BTreeMap<&String, BTreeMap<&String, Vec<f32>>> = donors
        .iter()
        .map(|(d, tv)| {
            let t = tv
                .deltas
                .iter()
                .map(|(k, t)| {
                    let mags: Vec<f32> = t.data().iter().map(|x| x.abs()).collect();
                    (k, trim_by(t.data(), &mags, p))
                })
                .collect();
            (d, t)
        })
        .collect();
    consensus(&trimmed, lambdas, disjoint_mean, |_, _, _, x| x.abs())
}

fn consensus(
    trimmed: &BTreeMap<&String, BTreeMap<&String, Vec<f32>>>,
    lambdas: &BTreeMap<String, f32>,
    disjoint_mean: bool,
    weight: impl Fn(&str, &str, usize, f32) -> f32,
) -> BTreeMap<String, Vec<f32>> {
    let first = trimmed.values().next().unwrap();
    let lams: Vec<f32> = trimmed.keys().map(|d| lambdas[*d]).collect();
    let mut out = BTreeMap::new();
    for (name, v) in first {
        let mut merged = vec![0f32; v.len()];
        for i in 0..v.len() {
            let vals: Vec<f32> = trimmed.values().map(|t| t[*name][i]).collect();
            let ws: Vec<f32> = trimmed
                .iter()
                .map(|(d, t)| weight(d, name, i, t[*name][i]))
                .collect();
            merged[i] = combine(&vals, &lams, elect(&vals, &ws), disjoint_mean);
        }
        out.insert((*name).clone(), merged);
    }
    out
}

pub fn dare(values: &[f32], name: &str, p: f64, seed: u64) -> Vec<f32> {
    let u = dare_uniforms(name, seed, values.len());
    values
        .iter()
        .zip(u)
        .map(|(&x, u)| if u < p { x / p as f32 } else { 0.0 })
        .collect()
}

/// `½ h δ²` with `h = 2 sq_sum` (weights), `h = 2 token_count` (biases);
/// `None` marks tensors without statistics.
pub fn saliency(name: &str, t: &Tensor, stats: &ActivationStats) -> Option<Vec<f32>> {
    let (layer, kind) = name.rsplit_once('.')?;
    let ls = stats.layers.get(layer)?;
    let d = t.data();
    match (kind, t.shape()) {
        ("weight", &[rows, cols]) => {
            let mut s = vec![0f32; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let h = 2.0 * ls.sq_sum[c];
                    s[r * cols + c] = 0.5 * h * d[r * cols + c] * d[r * cols + c];
                }
            }
            Some(s)
        }
        ("bias", &[_]) => {
            let h = 2.0 * ls.token_count as f32;
            Some(d.iter().map(|&x| 0.5 * h * x * x).collect())
        }
        _ => None,
    }
}

/// Per-tensor OBM: saliency trim (magnitude for tensors without stats),
/// saliency vote (magnitude where no donor has stats), aggregation.
pub fn obm(
    donors: &Donors,
    stats: &BTreeMap<String, ActivationStats>,
    lambdas: &BTreeMap<String, f32>,
    p: f64,
    disjoint_mean: bool,
) -> BTreeMap<String, Vec<f32>> {
    let mut scores: BTreeMap<(&String, &String), Option<Vec<f32>>> = BTreeMap::new();
    let trimmed: BTreeMap<&String, BTreeMap<&String, Vec<f32>>> = donors
        .iter()
        .map(|(d, tv)| {
            let t = tv
                .deltas
                .iter()
                .map(|(k, t)| {
                    let s = saliency(k, t, &stats[d]);
                    let mags: Vec<f32> = t.data().iter().map(|x| x.abs()).collect();
                    let trimmed = trim_by(t.data(), s.as_deref().unwrap_or(&mags), p);
                    scores.insert((d, k), s);
                    (k, trimmed)
                })
                .collect();
            (d, t)
        })
        .collect();
    let all_uniform = |name: &str| {
        donors
            .keys()
            .all(|d| scores[&(d, &name.to_string())].is_none())
    };
    consensus(&trimmed, lambdas, disjoint_mean, |d, name, i, x| {
        if all_uniform(name) {
            x.abs()
        } else {
            match &scores[&(&d.to_string(), &name.to_string())] {
                Some(s) => s[i],
                None => 1.0,
            }
        }
    })
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, zero_frac: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rng.gen_bool(zero_frac) {
                0.0
            } else {
                // Coarse grid so exact ties and cancellations occur.
                let v: f32 = rng.gen_range(-8i32..=8) as f32 * 0.25;
                if rng.gen_bool(0.5) {
                    v
                } else {
                    rng.gen_range(-2.0f32..2.0)
                }
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Donors sharing one layout: `embed.weight` (no stats), and per layer
/// `<layer>.weight` / `<layer>.bias`.
pub fn random_instance(
    rng: &mut impl Rng,
    max_dim: usize,
) -> (Donors, BTreeMap<String, ActivationStats>) {
    let n_donors = rng.gen_range(2..=3);
    let n_layers = rng.gen_range(1..=2);
    let mut layout = vec![("embed.weight".to_string(), vec![rng.gen_range(1..=8), rng.gen_range(1..=8)])];
    for l in 0..n_layers {
        let rows = rng.gen_range(1..=max_dim);
        let cols = rng.gen_range(1..=max_dim);
        layout.push((format!("layers.{l}.weight"), vec![rows, cols]));
        layout.push((format!("layers.{l}.bias"), vec![rows]));
    }
    let mut donors = Donors::new();
    let mut stats = BTreeMap::new();
    for d in 0..n_donors {
        let id = format!("d{d}");
        let deltas = layout
            .iter()
            .map(|(k, s)| (k.clone(), random_tensor(rng, s.clone(), 0.2)))
            .collect();
        donors.insert(
            id.clone(),
            TaskVector {
                base_fingerprint: Fingerprint::from_hex("shared"),
                deltas,
            },
        );
        let mut st = ActivationStats::new();
        for l in 0..n_layers {
            let cols = layout
                .iter()
                .find(|(k, _)| *k == format!("layers.{l}.weight"))
                .unwrap()
                .1[1];
            let sq_sum = (0..cols)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        0.0
                    } else {
                        rng.gen_range(0.0f32..50.0)
                    }
                })
                .collect();
            st.layers.insert(
                format!("layers.{l}"),
                LayerStats { sq_sum, token_count: rng.gen_range(1..200) },
            );
        }
        stats.insert(id, st);
    }
    (donors, stats)
}

pub fn flat(tv: &TaskVector) -> BTreeMap<String, Vec<f32>> {
    tv.deltas
        .iter()
        .map(|(k, t)| (k.clone(), t.data().to_vec()))
        .collect()
}

/// Bitwise equality (so -0.0 and 0.0 differ, NaN equals itself).
pub fn bits_equal(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> bool {
    a.len() == b.len()
        && a.iter().all(|(k, v)| {
            b.get(k).is_some_and(|w| {
                v.len() == w.len() && v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        })
}
