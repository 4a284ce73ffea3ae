//! Scalar-loop reference implementations used by several test targets.
#![allow(dead_code)]

use medst::autograd::Mat;
use medst::temporal_consistency::{DistanceMode, TemporalParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).to_vec()).collect()
}

fn log_softmax_at(v: &[f64], i: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut z = 0.0;
    for &x in v {
        z += (x - max).exp();
    }
    v[i] - max - z.ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        max = max.max(x);
    }
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    out
}

/// Symmetric InfoNCE with dot-product similarity, uniform over pairs.
pub fn global_oracle(images: &Mat, texts: &Mat, tau: f64) -> f64 {
    let (x, r) = (rows(images), rows(texts));
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let v2t: Vec<f64> = (0..n).map(|j| dot(&x[i], &r[j]) / tau).collect();
        let t2v: Vec<f64> = (0..n).map(|j| dot(&x[j], &r[i]) / tau).collect();
        total += log_softmax_at(&v2t, i) + log_softmax_at(&t2v, i);
    }
    -total / (2.0 * n as f64)
}

fn matvec_t(v: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.ncols()).map(|j| (0..v.len()).map(|k| v[k] * w[[k, j]]).sum()).collect()
}

/// One local direction: each query row attends over the key rows.
fn local_direction_oracle(queries: &[Vec<f64>], keys: &[Vec<f64>], wq: &Mat, wk: &Mat, tau: f64) -> f64 {
    let q = queries.len();
    let d = queries[0].len();
    let attended: Vec<Vec<f64>> = queries
        .iter()
        .map(|qi| {
            let s = softmax(&keys.iter().map(|k| dot(qi, k)).collect::<Vec<_>>());
            (0..d).map(|c| (0..keys.len()).map(|m| s[m] * keys[m][c]).sum()).collect()
        })
        .collect();
    let mut per = vec![0.0; q];
    for i in 0..q {
        let fwd: Vec<f64> = (0..q).map(|j| dot(&attended[i], &queries[j]) / tau).collect();
        let bwd: Vec<f64> = (0..q).map(|j| dot(&queries[i], &attended[j]) / tau).collect();
        per[i] = log_softmax_at(&fwd, i) + log_softmax_at(&bwd, i);
    }
    let o: Vec<Vec<f64>> = (0..q).map(|i| (0..d).map(|c| queries[i][c] * attended[i][c]).collect()).collect();
    let o_bar: Vec<f64> = (0..d).map(|c| o.iter().map(|r| r[c]).sum::<f64>() / q as f64).collect();
    let qv = matvec_t(&o_bar, wq);
    let scores: Vec<f64> = o.iter().map(|oi| dot(&qv, &matvec_t(oi, wk)) / (d as f64).sqrt()).collect();
    let w = softmax(&scores);
    -(0..q).map(|i| w[i] * per[i]).sum::<f64>() / q as f64
}

/// `(vla, tla)` for one pair; excluded rows are dropped first.
pub fn local_oracle(
    patches: &Mat,
    tokens: &Mat,
    patch_excluded: &[bool],
    token_excluded: &[bool],
    w: [&Mat; 4],
    tau: f64,
) -> (f64, f64) {
    let x: Vec<Vec<f64>> = rows(patches).into_iter().zip(patch_excluded).filter(|(_, e)| !**e).map(|(r, _)| r).collect();
    let r: Vec<Vec<f64>> = rows(tokens).into_iter().zip(token_excluded).filter(|(_, e)| !**e).map(|(r, _)| r).collect();
    (local_direction_oracle(&r, &x, w[0], w[1], tau), local_direction_oracle(&x, &r, w[2], w[3], tau))
}

fn dist(a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::SquaredEuclidean => (0..a.len()).map(|k| (a[k] - b[k]).powi(2)).sum(),
        DistanceMode::NegDot => dot(a, b),
    }
}

pub fn rmr_oracle(beta: &[f64], time_value: f64, p: &TemporalParams) -> f64 {
    let mut mu = 0.0;
    for (z, b) in beta.iter().enumerate() {
        mu += b * (z + 1) as f64;
    }
    let mut var = 0.0;
    for (z, b) in beta.iter().enumerate() {
        var += b * ((z + 1) as f64 - mu).powi(2);
    }
    let var = var.max(p.sigma_floor);
    let e = (time_value - mu).abs();
    if e <= p.delta {
        e * e / var + p.lambda_reg * var.sqrt().ln()
    } else {
        p.delta * e - p.delta * p.delta / 2.0
    }
}

/// `(fmc, rmr)` sums over all start positions for one cycle direction.
pub fn cycle_oracle(start: &Mat, via: &Mat, p: &TemporalParams) -> (f64, f64, Vec<Vec<f64>>) {
    let (s, v) = (rows(start), rows(via));
    let n = s.len();
    let (mut fmc, mut rmr) = (0.0, 0.0);
    let mut betas = Vec::new();
    for t in 0..n {
        let alpha = softmax(&v.iter().map(|r| -dist(&s[t], r, p.distance_mode)).collect::<Vec<_>>());
        fmc -= alpha[t].ln();
        let fx: Vec<f64> = (0..s[0].len()).map(|c| (0..n).map(|z| alpha[z] * v[z][c]).sum()).collect();
        let beta = softmax(&s.iter().map(|x| -dist(&fx, x, p.distance_mode)).collect::<Vec<_>>());
        rmr += rmr_oracle(&beta, (t + 1) as f64, p);
        betas.push(beta);
    }
    (fmc, rmr, betas)
}

pub mod fixtures {
    //! Seeded comparisons of the library losses against the scalar oracles.
    //! Each returns the largest absolute difference.

    use super::*;
    use medst::spatial_alignment::{global_alignment_loss, local_alignment_loss, AlignmentConfig, LocalPair, LocalWeights};
    use medst::temporal_consistency::{temporal_loss, SequenceFeatures};

    pub fn global(seed: u64) -> f64 {
        let cfg = AlignmentConfig::default();
        let mut r = rng(seed);
        let n = r.gen_range(1..7);
        let d = r.gen_range(2..9);
        let (x, t) = (random_mat(&mut r, n, d, 1.0), random_mat(&mut r, n, d, 1.0));
        let got = global_alignment_loss(&x, &t, &cfg).unwrap();
        (got - global_oracle(&x, &t, cfg.tau1)).abs()
    }

    pub fn local(seed: u64) -> f64 {
        let cfg = AlignmentConfig::default();
        let mut r = rng(1000 + seed);
        let d = r.gen_range(2..9);
        let pairs: Vec<LocalPair> = (0..r.gen_range(1..4))
            .map(|_| {
                let (m, w) = (r.gen_range(2..9), r.gen_range(2..7));
                LocalPair {
                    patches: random_mat(&mut r, m, d, 1.0),
                    tokens: random_mat(&mut r, w, d, 1.0),
                    patch_excluded: (0..m).map(|i| i >= m / 2 && r.gen_bool(0.3)).collect(),
                    token_excluded: (0..w).map(|i| i > 0 && r.gen_bool(0.3)).collect(),
                }
            })
            .collect();
        let weights = LocalWeights {
            wq: random_mat(&mut r, d, d, 0.5),
            wk: random_mat(&mut r, d, d, 0.5),
            wq_patch: random_mat(&mut r, d, d, 0.5),
            wk_patch: random_mat(&mut r, d, d, 0.5),
        };
        let got = local_alignment_loss(&pairs, &weights, &cfg).unwrap();
        let (mut vla, mut tla) = (0.0, 0.0);
        for p in &pairs {
            let w = [&weights.wq, &weights.wk, &weights.wq_patch, &weights.wk_patch];
            let (v, t) = local_oracle(&p.patches, &p.tokens, &p.patch_excluded, &p.token_excluded, w, cfg.tau2);
            vla += v / pairs.len() as f64;
            tla += t / pairs.len() as f64;
        }
        (got.vla - vla).abs().max((got.tla - tla).abs()).max((got.local - vla - tla).abs())
    }

    /// `(fmc difference, rmr difference)` over both directions of one sequence.
    pub fn temporal(seed: u64, mode: DistanceMode) -> (f64, f64) {
        let mut r = rng(2000 + seed);
        let n = r.gen_range(2..5);
        let d = r.gen_range(2..7);
        let scale = if mode == DistanceMode::NegDot { 0.6 } else { 1.0 };
        let (x, t) = (random_mat(&mut r, n, d, scale), random_mat(&mut r, n, d, scale));
        let p = TemporalParams { distance_mode: mode, ..Default::default() };
        let got = temporal_loss(&SequenceFeatures::new(x.clone(), t.clone()).unwrap(), &p).unwrap();
        let (fi, ri, _) = cycle_oracle(&x, &t, &p);
        let (ft, rt, _) = cycle_oracle(&t, &x, &p);
        let fmc = (got.fmc_i - fi).abs().max((got.fmc_t - ft).abs());
        let rmr = (got.rmr_i - ri).abs().max((got.rmr_t - rt).abs());
        (fmc, rmr.max((got.total - fi - ri - ft - rt).abs()))
    }
}
