//! Brute-force reference implementations, written without reusing any of the
//! library's numerical code.

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retroframe_core::evaluation::{char_metrics, fid, FeatureSet};
use retroframe_core::gan::{contextual_attention, PATCH_EPS};
use retroframe_core::tokenizer::quantize;
use retroframe_core::Codebook;

pub const INSTANCES: usize = 200;

pub struct Outcome {
    pub instances: usize,
    pub failures: usize,
    pub max_err: f64,
    pub first_failure: Option<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { instances: 0, failures: 0, max_err: 0.0, first_failure: None }
    }

    fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.instances += 1;
        self.max_err = self.max_err.max(err);
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }
}

// ---------------------------------------------------------------- quantize

fn nearest_oracle(z: &[f64], codes: &[Vec<f64>]) -> u32 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codes.iter().enumerate() {
        let mut dist = 0.0;
        for i in 0..z.len() {
            dist += (z[i] - c[i]) * (z[i] - c[i]);
        }
        if dist < best_d {
            best_d = dist;
            best = k;
        }
    }
    best as u32
}

pub fn quantize_vs_scan(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome::new();
    for inst in 0..INSTANCES {
        let g = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let v = rng.random_range(2..=16);
        // Half the instances use a coarse lattice so exact ties occur.
        let coarse = inst % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if coarse {
                rng.random_range(-3i32..=3) as f32 * 0.25
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let codes: Vec<Vec<f64>> = (0..v).map(|_| (0..d).map(|_| draw(&mut rng) as f64).collect()).collect();
        let lat: Vec<f32> = (0..g * g * d).map(|_| draw(&mut rng)).collect();
        let book = Codebook::from_rows(&codes).unwrap();
        let latents = Tensor::from_vec(lat.clone(), (g, g, d), &Device::Cpu).unwrap();
        let got = quantize(&latents, &book).unwrap();
        let want: Vec<u32> =
            lat.chunks(d).map(|z| nearest_oracle(&z.iter().map(|&x| x as f64).collect::<Vec<_>>(), &codes)).collect();
        let mismatches = got.indices().iter().zip(&want).filter(|(a, b)| a != b).count();
        out.record(mismatches == 0, mismatches as f64, || format!("instance {inst}: {:?} vs {want:?}", got.indices()));
    }
    out
}

// --------------------------------------------------------------------- FID

fn mean_cov_oracle(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mu[j] += r[j] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n as f64 - 1.0);
            }
        }
    }
    (mu, cov)
}

/// `Tr((S_r S_g)^{1/2})` as the sum of square roots of the eigenvalues of the
/// (non-symmetric) product, via a general real Schur decomposition.
fn fid_oracle(real: &[Vec<f64>], gen: &[Vec<f64>]) -> f64 {
    let (mr, cr) = mean_cov_oracle(real);
    let (mg, cg) = mean_cov_oracle(gen);
    let prod = &cr * &cg;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|l| l.re.max(0.0).sqrt()).sum();
    let mean_term: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    (mean_term + cr.trace() + cg.trace() - 2.0 * tr_sqrt).max(0.0)
}

fn feature_set(rows: &[Vec<f64>]) -> FeatureSet {
    let d = rows[0].len();
    FeatureSet { features: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), extractor: "oracle".into() }
}

pub fn fid_vs_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome::new();
    for inst in 0..INSTANCES {
        let d = rng.random_range(1..=5);
        let n_r = rng.random_range(d + 3..=d + 12);
        let n_g = rng.random_range(d + 3..=d + 12);
        let shift: f64 = rng.random_range(-1.0..1.0);
        let spread: f64 = rng.random_range(0.2..2.0);
        let real: Vec<Vec<f64>> = (0..n_r).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let gen: Vec<Vec<f64>> =
            (0..n_g).map(|_| (0..d).map(|_| shift + spread * rng.random_range(-1.0..1.0)).collect()).collect();
        let got = fid(&feature_set(&real), &feature_set(&gen)).unwrap();
        let want = fid_oracle(&real, &gen);
        let err = (got - want).abs();
        out.record(err <= 1e-6, err, || format!("instance {inst} (d={d}): {got} vs {want}"));
    }
    out
}

// ---------------------------------------------------- contextual attention

type Grid = Vec<Vec<Vec<f64>>>; // [c][y][x]

fn at(g: &Grid, c: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y as usize >= g[0].len() || x as usize >= g[0][0].len() {
        0.0
    } else {
        g[c][y as usize][x as usize]
    }
}

/// Patch of `g` centred on (y, x), channel-major then row then column.
fn patch(g: &Grid, y: usize, x: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut v = Vec::with_capacity(g.len() * k * k);
    for c in 0..g.len() {
        for dy in 0..k as isize {
            for dx in 0..k as isize {
                v.push(at(g, c, y as isize + dy - p, x as isize + dx - p));
            }
        }
    }
    v
}

struct CaOracle {
    similarity: Vec<Vec<f64>>,
    attention: Vec<Vec<f64>>,
    fused: Grid,
}

fn contextual_oracle(t: &Grid, s: &Grid, k: usize, scale: f64) -> CaOracle {
    let (c, ht, wt) = (t.len(), t[0].len(), t[0][0].len());
    let (hs, ws) = (s[0].len(), s[0][0].len());
    let mut similarity = vec![vec![0.0; hs * ws]; ht * wt];
    let mut attention = vec![vec![0.0; hs * ws]; ht * wt];
    let mut copied = vec![vec![0.0; c * k * k]; ht * wt];
    for ty in 0..ht {
        for tx in 0..wt {
            let tp = patch(t, ty, tx, k);
            let tn = tp.iter().map(|v| v * v).sum::<f64>().sqrt() + PATCH_EPS;
            let row = ty * wt + tx;
            for sy in 0..hs {
                for sx in 0..ws {
                    let sp = patch(s, sy, sx, k);
                    let sn = sp.iter().map(|v| v * v).sum::<f64>().sqrt() + PATCH_EPS;
                    let mut dot = 0.0;
                    for i in 0..sp.len() {
                        dot += (tp[i] / tn) * (sp[i] / sn);
                    }
                    similarity[row][sy * ws + sx] = dot;
                }
            }
            let m = similarity[row].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = similarity[row].iter().map(|v| (scale * (v - m)).exp()).sum();
            for j in 0..hs * ws {
                attention[row][j] = (scale * (similarity[row][j] - m)).exp() / z;
            }
            for sy in 0..hs {
                for sx in 0..ws {
                    let sp = patch(s, sy, sx, k);
                    let a = attention[row][sy * ws + sx];
                    for i in 0..sp.len() {
                        copied[row][i] += a * sp[i];
                    }
                }
            }
        }
    }
    // Each copied patch is laid back over its neighbourhood; overlapping
    // contributions are averaged over the k*k offsets.
    let p = (k / 2) as isize;
    let mut fused = t.clone();
    for ch in 0..c {
        for y in 0..ht as isize {
            for x in 0..wt as isize {
                let mut acc = 0.0;
                for dy in 0..k as isize {
                    for dx in 0..k as isize {
                        // The patch centred at (cy, cx) covers (y, x) at offset (dy, dx).
                        let (cy, cx) = (y - dy + p, x - dx + p);
                        if cy < 0 || cx < 0 || cy >= ht as isize || cx >= wt as isize {
                            continue;
                        }
                        let idx = ch * k * k + dy as usize * k + dx as usize;
                        acc += copied[cy as usize * wt + cx as usize][idx];
                    }
                }
                fused[ch][y as usize][x as usize] += acc / (k * k) as f64;
            }
        }
    }
    CaOracle { similarity, attention, fused }
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid {
    (0..c).map(|_| (0..h).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).collect()
}

fn to_tensor(gs: &[Grid]) -> Tensor {
    let (b, c, h, w) = (gs.len(), gs[0].len(), gs[0][0].len(), gs[0][0][0].len());
    let flat: Vec<f64> = gs.iter().flat_map(|g| g.iter().flatten().flatten().copied()).collect();
    Tensor::from_vec(flat, (b, c, h, w), &Device::Cpu).unwrap()
}

pub fn contextual_attention_vs_loops(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome::new();
    for inst in 0..INSTANCES {
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let (ht, wt) = (rng.random_range(3..=5), rng.random_range(3..=5));
        let (hs, ws) = (rng.random_range(3..=5), rng.random_range(3..=5));
        let scale = if inst % 2 == 0 { 10.0 } else { rng.random_range(0.5..20.0) };
        let ts: Vec<Grid> = (0..b).map(|_| random_grid(&mut rng, c, ht, wt)).collect();
        let ss: Vec<Grid> = (0..b).map(|_| random_grid(&mut rng, c, hs, ws)).collect();
        let got = contextual_attention(&to_tensor(&ts), &to_tensor(&ss), 3, scale).unwrap();
        let sim: Vec<Vec<Vec<f64>>> = got.similarity.to_vec3().unwrap();
        let att: Vec<Vec<Vec<f64>>> = got.attention.to_vec3().unwrap();
        let fused: Vec<f64> = got.fused.flatten_all().unwrap().to_vec1().unwrap();
        let mut err: f64 = 0.0;
        for bi in 0..b {
            let o = contextual_oracle(&ts[bi], &ss[bi], 3, scale);
            for (r1, r2) in sim[bi].iter().zip(&o.similarity) {
                for (a, e) in r1.iter().zip(r2) {
                    err = err.max((a - e).abs());
                }
            }
            for (r1, r2) in att[bi].iter().zip(&o.attention) {
                for (a, e) in r1.iter().zip(r2) {
                    err = err.max((a - e).abs());
                }
            }
            for ch in 0..c {
                for y in 0..ht {
                    for x in 0..wt {
                        err = err.max((fused[((bi * c + ch) * ht + y) * wt + x] - o.fused[ch][y][x]).abs());
                    }
                }
            }
        }
        out.record(err <= 1e-6, err, || format!("instance {inst}: max deviation {err:.3e}"));
    }
    out
}

// ------------------------------------------------------------ char metrics

pub fn char_metrics_vs_confusion(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome::new();
    for inst in 0..INSTANCES {
        let frames = rng.random_range(0..=10);
        let n_labels = rng.random_range(1..=6u32);
        let draw = |rng: &mut ChaCha8Rng| -> BTreeSet<u32> { (0..n_labels).filter(|_| rng.random_bool(0.35)).collect() };
        let gt: Vec<BTreeSet<u32>> = (0..frames).map(|_| draw(&mut rng)).collect();
        // Predictions are perturbations of the truth so every cell of the
        // confusion table is populated.
        let pred: Vec<BTreeSet<u32>> = gt
            .iter()
            .map(|g| if rng.random_bool(0.3) { g.clone() } else { draw(&mut rng) })
            .collect();

        // Per-label confusion counts.
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let mut exact = 0usize;
        for (p, g) in pred.iter().zip(&gt) {
            let mut all_agree = true;
            for label in 0..n_labels {
                match (p.contains(&label), g.contains(&label)) {
                    (true, true) => tp += 1,
                    (true, false) => {
                        fp += 1;
                        all_agree = false
                    }
                    (false, true) => {
                        fn_ += 1;
                        all_agree = false
                    }
                    (false, false) => {}
                }
            }
            exact += all_agree as usize;
        }
        let f1 = if 2 * tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let acc = if frames == 0 { 0.0 } else { exact as f64 / frames as f64 };

        let got = char_metrics(&pred, &gt).unwrap();
        let ok = got.tp == tp && got.fp == fp && got.fn_ == fn_ && got.char_f1 == f1 && got.frame_acc == acc;
        let err = (got.char_f1 - f1).abs().max((got.frame_acc - acc).abs());
        out.record(ok, err, || {
            format!("instance {inst}: got ({}, {}, {}, {}, {}) want ({tp}, {fp}, {fn_}, {f1}, {acc})", got.tp, got.fp, got.fn_, got.char_f1, got.frame_acc)
        });
    }
    out
}
