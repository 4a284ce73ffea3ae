//! Cross-modal cycle consistency over the global features of one sequence.
//!
//! Starting from image step `t`, a soft nearest neighbour among the text
//! features is formed and mapped back onto the image features. The forward
//! distribution is trained as a classifier of `t`, and the backward
//! distribution is pulled towards `t` with a Gaussian prior on its mean and variance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, RmrSpec, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `‖a − b‖²`
    #[default]
    SquaredEuclidean,
    /// `⟨a, b⟩` used directly as the distance.
    NegDot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub delta: f64,
    pub lambda_reg: f64,
    pub sigma_floor: f64,
    pub distance_mode: DistanceMode,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self { delta: 2.0, lambda_reg: 0.001, sigma_floor: 1e-6, distance_mode: DistanceMode::SquaredEuclidean }
    }
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.sigma_floor > 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("delta > 0, sigma_floor > 0 and lambda_reg ≥ 0 required".into()));
        }
        Ok(())
    }

    pub fn rmr_spec(&self) -> RmrSpec {
        RmrSpec { delta: self.delta, lambda_reg: self.lambda_reg, sigma_floor: self.sigma_floor }
    }
}

/// Time-ordered global features of one sequence, paired row for row.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures {
    pub xg: Mat,
    pub rg: Mat,
}

impl SequenceFeatures {
    pub fn new(xg: Mat, rg: Mat) -> Result<Self> {
        if xg.dim() != rg.dim() || xg.nrows() == 0 {
            return Err(Error::Shape(format!("sequence features {:?} vs {:?}", xg.dim(), rg.dim())));
        }
        Ok(Self { xg, rg })
    }

    pub fn len(&self) -> usize {
        self.xg.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xg.nrows() == 0
    }
}

/// Negative distances between rows of `a` and rows of `b`.
fn neg_distance(g: &mut Graph, a: Var, b: Var, mode: DistanceMode) -> Var {
    let d = match mode {
        DistanceMode::SquaredEuclidean => g.sq_dist(a, b),
        DistanceMode::NegDot => g.matmul_t(a, b),
    };
    g.scale(d, -1.0)
}

/// Output of one direction of the cycle.
#[derive(Clone, Copy, Debug)]
pub struct CycleVars {
    /// Sum over positions of the forward cross-entropy, `1×1`.
    pub fmc: Var,
    /// Sum over positions of the backward regression loss, `1×1`.
    pub rmr: Var,
    /// `n×n` backward distributions, row `t` for start `t`.
    pub beta: Var,
}

/// Cycles every row of `start` through `via` and back to `start`.
pub fn cycle_graph(g: &mut Graph, start: Var, via: Var, params: &TemporalParams) -> CycleVars {
    let n = g.shape(start).0;
    let logits = neg_distance(g, start, via, params.distance_mode);
    let log_alpha = g.log_softmax(logits);
    let picked = g.pick_per_row(log_alpha, (0..n).collect());
    let fmc = g.sum_all(picked);
    let fmc = g.scale(fmc, -1.0);
    let alpha = g.exp(log_alpha);
    let fx = g.matmul(alpha, via);
    let back = neg_distance(g, fx, start, params.distance_mode);
    let beta = g.softmax(back);
    let targets = (1..=n).map(|t| t as f64).collect();
    let rmr = g.rmr(beta, targets, params.rmr_spec());
    let rmr = g.sum_all(rmr);
    CycleVars { fmc, rmr, beta }
}

/// Both directions for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct TemporalVars {
    pub image: CycleVars,
    pub text: CycleVars,
}

pub fn temporal_graph(g: &mut Graph, xg: Var, rg: Var, params: &TemporalParams) -> TemporalVars {
    TemporalVars { image: cycle_graph(g, xg, rg, params), text: cycle_graph(g, rg, xg, params) }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TemporalLosses {
    pub fmc_i: f64,
    pub rmr_i: f64,
    pub fmc_t: f64,
    pub rmr_t: f64,
    pub total: f64,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn distance(a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::SquaredEuclidean => a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum(),
        DistanceMode::NegDot => a.iter().zip(b).map(|(p, q)| p * q).sum(),
    }
}

fn distribution(x: &[f64], rows: &Mat, mode: DistanceMode) -> Vec<f64> {
    let logits: Vec<f64> = rows
        .rows()
        .into_iter()
        .map(|r| -distance(x, &r.to_vec(), mode))
        .collect();
    softmax(&logits)
}

/// `(Fx, α)`: soft nearest neighbour of `x` among the rows of `rg`.
pub fn soft_nn(x: &[f64], rg: &Mat, mode: DistanceMode) -> (Vec<f64>, Vec<f64>) {
    let alpha = distribution(x, rg, mode);
    let mut fx = vec![0.0; rg.ncols()];
    for (row, a) in rg.rows().into_iter().zip(&alpha) {
        for (f, v) in fx.iter_mut().zip(row.iter()) {
            *f += a * v;
        }
    }
    (fx, alpha)
}

pub const FMC_LOG_FLOOR: f64 = 1e-12;

/// `−ln α_t`, with `α_t` clamped below at `1e-12`.
pub fn fmc_loss(alpha: &[f64], t: usize) -> f64 {
    let a = alpha[t];
    if a < FMC_LOG_FLOOR {
        log::warn!("fmc_loss: alpha[{t}] = {a:e} clamped");
    }
    -a.max(FMC_LOG_FLOOR).ln()
}

pub fn reverse_distribution(fx: &[f64], xg: &Mat, mode: DistanceMode) -> Vec<f64> {
    distribution(fx, xg, mode)
}

/// Regression loss of `β` against the zero-based position `t`, whose time value is `t + 1`.
pub fn rmr_loss(beta: &[f64], t: usize, params: &TemporalParams) -> f64 {
    crate::autograd::rmr_row(beta, (t + 1) as f64, &params.rmr_spec()).0
}

/// Per-sequence sums for both directions, evaluated on a graph of constants.
pub fn temporal_loss(seq: &SequenceFeatures, params: &TemporalParams) -> Result<TemporalLosses> {
    if seq.len() < 2 {
        return Err(Error::Shape("temporal losses need at least two steps".into()));
    }
    let mut g = Graph::new();
    let (x, r) = (g.constant(seq.xg.clone()), g.constant(seq.rg.clone()));
    let v = temporal_graph(&mut g, x, r, params);
    let out = TemporalLosses {
        fmc_i: g.scalar(v.image.fmc),
        rmr_i: g.scalar(v.image.rmr),
        fmc_t: g.scalar(v.text.fmc),
        rmr_t: g.scalar(v.text.rmr),
        total: 0.0,
    };
    let total = out.fmc_i + out.rmr_i + out.fmc_t + out.rmr_t;
    if !total.is_finite() {
        return Err(Error::NonFinite("temporal loss".into()));
    }
    Ok(TemporalLosses { total, ..out })
}

/// Mean of [`temporal_loss`] over sequences.
pub fn temporal_loss_batch(seqs: &[SequenceFeatures], params: &TemporalParams) -> Result<TemporalLosses> {
    if seqs.is_empty() {
        return Err(Error::Shape("no sequences".into()));
    }
    let mut acc = TemporalLosses::default();
    for s in seqs {
        let l = temporal_loss(s, params)?;
        acc.fmc_i += l.fmc_i;
        acc.rmr_i += l.rmr_i;
        acc.fmc_t += l.fmc_t;
        acc.rmr_t += l.rmr_t;
        acc.total += l.total;
    }
    let n = seqs.len() as f64;
    Ok(TemporalLosses {
        fmc_i: acc.fmc_i / n,
        rmr_i: acc.rmr_i / n,
        fmc_t: acc.fmc_t / n,
        rmr_t: acc.rmr_t / n,
        total: acc.total / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Image,
    Text,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Image => "image",
            Direction::Text => "text",
        }
    }
}

/// Backward distribution for one start position.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaRow {
    pub direction: Direction,
    pub gt_index: usize,
    pub beta: Vec<f64>,
}

pub fn beta_rows(seq: &SequenceFeatures, mode: DistanceMode) -> Vec<BetaRow> {
    let mut out = Vec::with_capacity(2 * seq.len());
    for (direction, start, via) in [(Direction::Image, &seq.xg, &seq.rg), (Direction::Text, &seq.rg, &seq.xg)] {
        for (t, row) in start.rows().into_iter().enumerate() {
            let (fx, _) = soft_nn(&row.to_vec(), via, mode);
            out.push(BetaRow { direction, gt_index: t, beta: reverse_distribution(&fx, start, mode) });
        }
    }
    out
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of start positions whose backward distribution peaks at the start,
/// averaged over both directions.
pub fn cycle_back_accuracy(seq: &SequenceFeatures, mode: DistanceMode) -> f64 {
    let rows = beta_rows(seq, mode);
    let hits = rows.iter().filter(|r| argmax(&r.beta) == r.gt_index).count();
    hits as f64 / rows.len() as f64
}

/// CSV with columns `sequence,direction,gt_index,beta_0..beta_{n-1}`.
pub fn format_beta_csv(rows: &[(String, BetaRow)]) -> String {
    let width = rows.iter().map(|(_, r)| r.beta.len()).max().unwrap_or(0);
    let mut out = String::from("sequence,direction,gt_index");
    for z in 0..width {
        write!(out, ",beta_{z}").expect("string write");
    }
    out.push('\n');
    for (seq, r) in rows {
        write!(out, "{seq},{},{}", r.direction.name(), r.gt_index).expect("string write");
        for b in &r.beta {
            write!(out, ",{b:.6}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Parses [`format_beta_csv`] output back into rows.
pub fn parse_beta_csv(text: &str) -> Result<Vec<(String, BetaRow)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Eval(format!("beta csv line {}: {reason}", i + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(bad("too few fields"));
        }
        let direction = match fields[1] {
            "image" => Direction::Image,
            "text" => Direction::Text,
            _ => return Err(bad("unknown direction")),
        };
        let gt_index = fields[2].parse().map_err(|_| bad("gt_index"))?;
        let beta = fields[3..]
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>().map_err(|_| bad("beta value")))
            .collect::<Result<Vec<_>>>()?;
        out.push((fields[0].to_string(), BetaRow { direction, gt_index, beta }));
    }
    Ok(out)
}

pub fn write_beta_csv(path: &Path, rows: &[(String, BetaRow)]) -> Result<()> {
    std::fs::write(path, format_beta_csv(rows)).map_err(|e| Error::io(path, e))
}
