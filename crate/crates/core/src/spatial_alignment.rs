//! Global contrastive alignment between paired image/text features, and
//! weighted local alignment between text tokens and image patches.
//!
//! The graph builders are what training differentiates; the `&Mat` wrappers
//! evaluate the same graphs on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::encoders::{Init, ParamRegistry};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub similarity: Similarity,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { tau1: 0.07, tau2: 0.1, similarity: Similarity::Dot }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::Config("tau1 and tau2 must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable `d×d` weighting matrices. `wq`/`wk` weight text tokens,
/// `wq_patch`/`wk_patch` weight image patches.
#[derive(Clone, Debug)]
pub struct AlignmentParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wq_patch: ParamId,
    pub wk_patch: ParamId,
}

impl AlignmentParams {
    pub fn declare(reg: &mut dyn ParamRegistry, d: usize) -> Result<Self> {
        let init = Init::Normal(1.0 / (d as f64).sqrt());
        Ok(Self {
            wq: reg.param("align.wq", d, d, init)?,
            wk: reg.param("align.wk", d, d, init)?,
            wq_patch: reg.param("align.wq_patch", d, d, init)?,
            wk_patch: reg.param("align.wk_patch", d, d, init)?,
        })
    }

    pub fn bind(&self, b: &Bound) -> LocalWeightVars {
        LocalWeightVars {
            wq: b.var(self.wq),
            wk: b.var(self.wk),
            wq_patch: b.var(self.wq_patch),
            wk_patch: b.var(self.wk_patch),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalWeightVars {
    pub wq: Var,
    pub wk: Var,
    pub wq_patch: Var,
    pub wk_patch: Var,
}

fn prepare(g: &mut Graph, x: Var, sim: Similarity) -> Var {
    match sim {
        Similarity::Dot => x,
        Similarity::Cosine => g.normalize_rows(x),
    }
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Symmetric InfoNCE over `N` pairs. `pair_weights[i]` scales pair `i` in each
/// direction (uniform `1/N` gives the plain mean); the two directions are averaged.
pub fn global_alignment_graph(g: &mut Graph, images: Var, texts: Var, tau1: f64, sim: Similarity, pair_weights: Option<&[f64]>) -> Var {
    let n = g.shape(images).0;
    let (x, r) = (prepare(g, images, sim), prepare(g, texts, sim));
    let logits = g.matmul_t(x, r);
    let logits = g.scale(logits, 1.0 / tau1);
    let v2t = g.log_softmax(logits);
    let v2t = g.pick_per_row(v2t, diagonal(n));
    let lt = g.transpose(logits);
    let t2v = g.log_softmax(lt);
    let t2v = g.pick_per_row(t2v, diagonal(n));
    let both = g.add(v2t, t2v);
    let w = match pair_weights {
        Some(w) => Mat::from_shape_fn((n, 1), |(i, _)| -0.5 * w[i]),
        None => Mat::from_elem((n, 1), -0.5 / n as f64),
    };
    let weighted = g.mul_const(both, w);
    g.sum_all(weighted)
}

/// One contrastive direction of local alignment. `queries` (`Q×d`) attend over
/// `keys` (`K×d`); returns the per-query weighted loss divided by `Q`.
fn local_direction(g: &mut Graph, queries: Var, keys: Var, wq: Var, wk: Var, tau2: f64) -> Var {
    let (nq, d) = g.shape(queries);
    let s = g.matmul_t(queries, keys);
    let s = g.softmax(s);
    let attended = g.matmul(s, keys);
    let a = g.matmul_t(attended, queries);
    let a = g.scale(a, 1.0 / tau2);
    let l_fwd = g.log_softmax(a);
    let l_fwd = g.pick_per_row(l_fwd, diagonal(nq));
    let b = g.matmul_t(queries, attended);
    let b = g.scale(b, 1.0 / tau2);
    let l_bwd = g.log_softmax(b);
    let l_bwd = g.pick_per_row(l_bwd, diagonal(nq));
    let per_query = g.add(l_fwd, l_bwd);
    let o = g.mul(queries, attended);
    let o_bar = g.mean_rows(o);
    let q = g.matmul(o_bar, wq);
    let k = g.matmul(o, wk);
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let w = g.softmax(scores);
    let total = g.matmul(w, per_query);
    g.scale(total, -1.0 / nq as f64)
}

/// Local losses for one pair whose padded tokens and unused patches were
/// already removed. Returns `(vla, tla)`.
pub fn local_alignment_graph(g: &mut Graph, patches: Var, tokens: Var, w: LocalWeightVars, tau2: f64, sim: Similarity) -> (Var, Var) {
    let (x, r) = (prepare(g, patches, sim), prepare(g, tokens, sim));
    let vla = local_direction(g, r, x, w.wq, w.wk, tau2);
    let tla = local_direction(g, x, r, w.wq_patch, w.wk_patch, tau2);
    (vla, tla)
}

/// Row indices kept for local alignment, or `None` when nothing survives.
pub fn valid_rows(excluded: &[bool]) -> Option<Vec<usize>> {
    let idx: Vec<usize> = excluded.iter().enumerate().filter(|(_, e)| !**e).map(|(i, _)| i).collect();
    (!idx.is_empty()).then_some(idx)
}

pub fn global_alignment_loss(images: &Mat, texts: &Mat, cfg: &AlignmentConfig) -> Result<f64> {
    if images.nrows() == 0 || images.dim() != texts.dim() {
        return Err(Error::Shape(format!("global alignment on {:?} vs {:?}", images.dim(), texts.dim())));
    }
    let mut g = Graph::new();
    let (x, r) = (g.constant(images.clone()), g.constant(texts.clone()));
    let loss = global_alignment_graph(&mut g, x, r, cfg.tau1, cfg.similarity, None);
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("global similarity".into()));
    }
    Ok(v)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Attention of one query over key rows: `(k, s)` with `s = softmax(r·Xᵀ)`.
pub fn textual_attended_visual(r: &[f64], x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = x.rows().into_iter().map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum()).collect();
    let s = softmax(&scores);
    let mut k = vec![0.0; x.ncols()];
    for (row, &sm) in x.rows().into_iter().zip(&s) {
        for (kc, v) in k.iter_mut().zip(row.iter()) {
            *kc += sm * v;
        }
    }
    (k, s)
}

/// Importance weights over the rows of `o`.
pub fn pair_weights(o: &Mat, wq: &Mat, wk: &Mat) -> Vec<f64> {
    let d = o.ncols() as f64;
    let o_bar = o.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let q = o_bar.dot(wq);
    let k = o.dot(wk);
    softmax(&k.dot(&q).mapv(|v| v / d.sqrt()).to_vec())
}

/// One image-text pair's local features with exclusion masks.
#[derive(Clone, Debug)]
pub struct LocalPair {
    pub patches: Mat,
    pub tokens: Mat,
    /// `true` for patches left out (unused lateral view).
    pub patch_excluded: Vec<bool>,
    /// `true` for padding tokens.
    pub token_excluded: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalLosses {
    pub vla: f64,
    pub tla: f64,
    pub local: f64,
}

/// Plain weight matrices for evaluating local losses outside training.
#[derive(Clone, Debug)]
pub struct LocalWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wq_patch: Mat,
    pub wk_patch: Mat,
}

/// Mean over usable pairs; pairs with no tokens or no patches are skipped.
pub fn local_alignment_loss(pairs: &[LocalPair], weights: &LocalWeights, cfg: &AlignmentConfig) -> Result<LocalLosses> {
    let mut g = Graph::new();
    let w = LocalWeightVars {
        wq: g.constant(weights.wq.clone()),
        wk: g.constant(weights.wk.clone()),
        wq_patch: g.constant(weights.wq_patch.clone()),
        wk_patch: g.constant(weights.wk_patch.clone()),
    };
    let (mut vla, mut tla, mut used) = (0.0, 0.0, 0usize);
    for (i, p) in pairs.iter().enumerate() {
        let (Some(pi), Some(ti)) = (valid_rows(&p.patch_excluded), valid_rows(&p.token_excluded)) else {
            log::warn!("local alignment: pair {i} has no usable tokens or patches, skipped");
            continue;
        };
        let x = g.constant(p.patches.select(ndarray::Axis(0), &pi));
        let r = g.constant(p.tokens.select(ndarray::Axis(0), &ti));
        let (v, t) = local_alignment_graph(&mut g, x, r, w, cfg.tau2, cfg.similarity);
        vla += g.scalar(v);
        tla += g.scalar(t);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Shape("no pair with usable tokens and patches".into()));
    }
    let (vla, tla) = (vla / used as f64, tla / used as f64);
    if !(vla.is_finite() && tla.is_finite()) {
        return Err(Error::NonFinite("local alignment".into()));
    }
    Ok(LocalLosses { vla, tla, local: vla + tla })
}
