//! Central finite-difference verification of analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Bound;
use crate::spatial_alignment::{global_alignment_graph, local_alignment_graph, LocalWeightVars, Similarity};
use crate::temporal_consistency::{temporal_graph, TemporalParams};
use crate::trainer::{batch_forward, SequenceData, StudyData, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelector {
    Global,
    Local,
    Fmc,
    Rmr,
    Total,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] =
        [LossSelector::Global, LossSelector::Local, LossSelector::Fmc, LossSelector::Rmr, LossSelector::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossSelector::Global => "global",
            LossSelector::Local => "local",
            LossSelector::Fmc => "fmc",
            LossSelector::Rmr => "rmr",
            LossSelector::Total => "total",
        }
    }
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input name and flat index of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Floor on the denominator so entries with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of `f` with central differences of step
/// `eps` for every entry of every input.
pub fn finite_difference_check(inputs: &[(String, Mat)], f: &dyn Fn(&mut Graph, &[Var]) -> Var, eps: f64) -> GradCheckReport {
    let eval = |values: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, m)| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut values: Vec<Mat> = inputs.iter().map(|(_, m)| m.clone()).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for (k, (name, m)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], m);
        for flat in 0..m.len() {
            let idx = (flat / m.ncols(), flat % m.ncols());
            let orig = values[k][idx];
            values[k][idx] = orig + eps;
            let up = eval(&values);
            values[k][idx] = orig - eps;
            let down = eval(&values);
            values[k][idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[idx], numeric);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{flat}]");
            }
            report.checked += 1;
        }
    }
    report
}

pub const FIXTURE_D: usize = 8;
pub const FIXTURE_N: usize = 4;
pub const FIXTURE_W: usize = 4;
pub const FIXTURE_M: usize = 6;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// `n×d` image and text globals for the temporal fixtures. The text rows are
/// clustered near the last image row so the image-start cycle lands far from
/// early positions, which exercises both branches of the regression loss.
pub fn temporal_fixture(seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xg = normal(&mut rng, FIXTURE_N, FIXTURE_D, 0.1);
    for t in 0..FIXTURE_N {
        xg[[t, 0]] += 0.6 * t as f64;
    }
    let mut rg = normal(&mut rng, FIXTURE_N, FIXTURE_D, 0.1);
    for t in 0..FIXTURE_N {
        for k in 0..FIXTURE_D {
            rg[[t, k]] += xg[[FIXTURE_N - 1, k]];
        }
    }
    (xg, rg)
}

/// Inputs for one selector; the closure maps leaves to the scalar loss.
pub type Fixture = (Vec<(String, Mat)>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

pub fn fixture(selector: LossSelector, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = FIXTURE_D;
    let tp = TemporalParams::default();
    match selector {
        LossSelector::Global => (
            vec![("images".into(), normal(&mut rng, FIXTURE_N, d, 0.5)), ("texts".into(), normal(&mut rng, FIXTURE_N, d, 0.5))],
            Box::new(|g, v| global_alignment_graph(g, v[0], v[1], 0.07, Similarity::Dot, None)),
        ),
        LossSelector::Local => {
            let inputs = vec![
                ("patches".into(), normal(&mut rng, FIXTURE_M, d, 0.5)),
                ("tokens".into(), normal(&mut rng, FIXTURE_W, d, 0.5)),
                ("wq".into(), normal(&mut rng, d, d, 0.4)),
                ("wk".into(), normal(&mut rng, d, d, 0.4)),
                ("wq_patch".into(), normal(&mut rng, d, d, 0.4)),
                ("wk_patch".into(), normal(&mut rng, d, d, 0.4)),
            ];
            (
                inputs,
                Box::new(|g, v| {
                    let w = LocalWeightVars { wq: v[2], wk: v[3], wq_patch: v[4], wk_patch: v[5] };
                    let (vla, tla) = local_alignment_graph(g, v[0], v[1], w, 0.1, Similarity::Dot);
                    g.add(vla, tla)
                }),
            )
        }
        LossSelector::Fmc | LossSelector::Rmr => {
            let (xg, rg) = temporal_fixture(seed);
            let rmr = selector == LossSelector::Rmr;
            (
                vec![("xg".into(), xg), ("rg".into(), rg)],
                Box::new(move |g, v| {
                    let t = temporal_graph(g, v[0], v[1], &tp);
                    if rmr {
                        g.add(t.image.rmr, t.text.rmr)
                    } else {
                        g.add(t.image.fmc, t.text.fmc)
                    }
                }),
            )
        }
        LossSelector::Total => total_fixture(&mut rng),
    }
}

/// Small model sizes used by the combined-objective check.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: FIXTURE_D,
        proj_dim: FIXTURE_D,
        n_blocks: 1,
        n_heads: 2,
        text_blocks: 1,
        max_text_len: FIXTURE_W,
        ffn_mult: 2,
        ..Default::default()
    }
}

fn total_fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let cfg = tiny_train_config();
    let vocab = 12;
    let (model, store) = Model::init(&cfg.encoder(vocab), rng.gen()).expect("valid fixture config");
    let mut study = |i: usize, has_lateral: bool, len: usize| StudyData {
        study_id: format!("s{i}"),
        frontal: Mat::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0)),
        lateral: if has_lateral { Mat::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0)) } else { Mat::zeros((8, 8)) },
        has_lateral,
        tokens: std::iter::once(2).chain((1..len).map(|_| rng.gen_range(4..vocab))).collect(),
    };
    let seqs = vec![
        SequenceData { sequence_id: "a".into(), studies: vec![study(0, true, 4), study(1, false, 3), study(2, true, 4), study(3, true, 2)] },
        SequenceData { sequence_id: "b".into(), studies: vec![study(4, true, 3)] },
    ];
    let inputs: Vec<(String, Mat)> = store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect();
    (
        inputs,
        Box::new(move |g, v| {
            let b = Bound::from_vars(v.to_vec());
            let batch: Vec<&SequenceData> = seqs.iter().collect();
            batch_forward(g, &b, &model, &cfg, &batch).expect("finite fixture").total
        }),
    )
}

pub fn grad_check(selector: LossSelector, seed: u64, eps: f64) -> GradCheckReport {
    let (inputs, f) = fixture(selector, seed);
    finite_difference_check(&inputs, f.as_ref(), eps)
}
