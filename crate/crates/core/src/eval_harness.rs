//! Frozen-feature evaluation: a linear probe on consecutive image pairs,
//! report-pair similarity, prompt-based zero-shot classification, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::synthetic::{LabelTable, PairLabel, SentencePair, Trend, POSITIVE_SEVERITY, TREND_DEAD_BAND};
use crate::temporal_consistency::{argmax, BetaRow};
use crate::trainer::{encode_corpus, TrainingCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    TemporalCls,
    SentenceSim,
    Zeroshot,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::TemporalCls, Task::SentenceSim, Task::Zeroshot];

    pub fn name(self) -> &'static str {
        match self {
            Task::TemporalCls => "temporal_cls",
            Task::SentenceSim => "sentence_sim",
            Task::Zeroshot => "zeroshot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: Task,
    pub accuracy: f64,
    /// Spread over repeated seeds; 0 for single-run tasks.
    pub accuracy_std: f64,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub folds: usize,
    pub seed: u64,
}

/// Rank-statistic AUROC with average ranks for ties; `None` without both classes.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fold of every sample: a seeded shuffle dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k.max(1);
    }
    fold
}

/// Multi-class linear SVM on standardised features: one binary classifier per
/// pair of classes, trained with Pegasos (stochastic subgradient descent on
/// the regularised hinge loss), combined by voting.
#[derive(Clone, Debug)]
pub struct LinearSvm {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(a, b, w)`: positive decision values favour `a`; `w` ends with the bias.
    pairs: Vec<(usize, usize, Vec<f64>)>,
    n_classes: usize,
}

pub const SVM_EPOCHS: usize = 30;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Binary Pegasos on rows `idx` of `z` with labels `±1`.
fn pegasos(z: &[Vec<f64>], idx: &[usize], label: &dyn Fn(usize) -> f64, c: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = idx.len();
    let lambda = 1.0 / (c * n as f64);
    let mut w = vec![0.0; z[0].len()];
    let mut t = 0usize;
    for _ in 0..SVM_EPOCHS * n {
        t += 1;
        let i = idx[rng.gen_range(0..n)];
        let y = label(i);
        let eta = 1.0 / (lambda * t as f64);
        let hinge = y * dot(&w, &z[i]) < 1.0;
        let shrink = 1.0 - eta * lambda;
        w.iter_mut().for_each(|v| *v *= shrink);
        if hinge {
            w.iter_mut().zip(&z[i]).for_each(|(v, zi)| *v += eta * y * zi);
        }
    }
    w
}

impl LinearSvm {
    /// `c` is the soft-margin constant; the Pegasos regulariser is `1/(c·n)`.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, c: f64, seed: u64) -> Self {
        let n = x.len();
        let dim = x[0].len();
        let mean: Vec<f64> = (0..dim).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|k| {
                let var = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut svm = Self { mean, scale, pairs: Vec::new(), n_classes };
        let z: Vec<Vec<f64>> = x.iter().map(|r| svm.standardise(r)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                let idx: Vec<usize> = (0..n).filter(|&i| y[i] == a || y[i] == b).collect();
                if idx.iter().all(|&i| y[i] == a) || idx.iter().all(|&i| y[i] == b) {
                    continue;
                }
                let w = pegasos(&z, &idx, &|i| if y[i] == a { 1.0 } else { -1.0 }, c, &mut rng);
                svm.pairs.push((a, b, w));
            }
        }
        svm
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| (v - self.mean[k]) * self.scale[k]).chain([1.0]).collect()
    }

    /// Majority vote; ties go to the larger summed decision value, then the lower class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.standardise(x);
        let mut votes = vec![0usize; self.n_classes];
        let mut margin = vec![0.0; self.n_classes];
        for (a, b, w) in &self.pairs {
            let d = dot(w, &z);
            let winner = if d >= 0.0 { *a } else { *b };
            votes[winner] += 1;
            margin[*a] += d;
            margin[*b] -= d;
        }
        let mut best = 0;
        for k in 1..self.n_classes {
            if (votes[k], margin[k]) > (votes[best], margin[best]) {
                best = k;
            }
        }
        best
    }
}

pub const PROBE_SEEDS: [u64; 3] = [0, 1, 2];

/// k-fold accuracy of a linear SVM, repeated over `seeds`; folds whose
/// training split lacks a class present in the data are skipped.
pub fn linear_probe(x: &[Vec<f64>], y: &[usize], class_names: &[&str], folds: usize, seeds: &[u64]) -> Result<ProbeResult> {
    let n_classes = class_names.len();
    if x.len() < folds * n_classes || folds < 2 {
        return Err(Error::Eval(format!("{} samples cannot fill {folds} folds over {n_classes} classes", x.len())));
    }
    let present: Vec<bool> = (0..n_classes).map(|c| y.contains(&c)).collect();
    let mut seed_acc = Vec::new();
    let mut class_hits = vec![0usize; n_classes];
    let mut class_total = vec![0usize; n_classes];
    for &seed in seeds {
        let fold = fold_assignment(x.len(), folds, seed);
        let mut fold_acc = Vec::new();
        for f in 0..folds {
            let train: Vec<usize> = (0..x.len()).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..x.len()).filter(|&i| fold[i] == f).collect();
            let has_all = (0..n_classes).all(|c| !present[c] || train.iter().any(|&i| y[i] == c));
            if !has_all || test.is_empty() {
                log::warn!("linear probe: fold {f} (seed {seed}) misses a class in training, skipped");
                continue;
            }
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let svm = LinearSvm::fit(&tx, &ty, n_classes, 1.0, seed.wrapping_mul(1000) + f as u64);
            let mut hits = 0;
            for &i in &test {
                let ok = svm.predict(&x[i]) == y[i];
                hits += usize::from(ok);
                class_hits[y[i]] += usize::from(ok);
                class_total[y[i]] += 1;
            }
            fold_acc.push(hits as f64 / test.len() as f64);
        }
        if fold_acc.is_empty() {
            return Err(Error::Eval("every fold was skipped".into()));
        }
        seed_acc.push(fold_acc.iter().sum::<f64>() / fold_acc.len() as f64);
    }
    let (accuracy, accuracy_std) = mean_std(&seed_acc);
    let per_class = (0..n_classes)
        .filter(|&c| class_total[c] > 0)
        .map(|c| (class_names[c].to_string(), class_hits[c] as f64 / class_total[c] as f64))
        .collect();
    Ok(ProbeResult {
        task: Task::TemporalCls,
        accuracy,
        accuracy_std,
        auroc: None,
        f1: None,
        per_class,
        folds,
        seed: seeds.first().copied().unwrap_or(0),
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Consecutive-pair features (prior image global, current image global) and trend classes.
pub fn temporal_pairs(
    model: &Model,
    store: &ParamStore,
    corpus: &TrainingCorpus,
    labels: &LabelTable,
    use_lateral: bool,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let encoded = encode_corpus(model, store, corpus, use_lateral)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for seq in &encoded {
        for t in 1..seq.images.len() {
            let delta = labels.severity(&seq.study_ids[t])? - labels.severity(&seq.study_ids[t - 1])?;
            x.push(seq.images[t - 1].x_g.iter().chain(&seq.images[t].x_g).copied().collect());
            y.push(Trend::from_delta(delta, TREND_DEAD_BAND).index());
        }
    }
    Ok((x, y))
}

pub fn trend_class_names() -> Vec<&'static str> {
    Trend::ALL.iter().map(|t| t.name()).collect()
}

pub fn temporal_probe(
    model: &Model,
    store: &ParamStore,
    corpus: &TrainingCorpus,
    labels: &LabelTable,
    folds: usize,
    use_lateral: bool,
) -> Result<ProbeResult> {
    let (x, y) = temporal_pairs(model, store, corpus, labels, use_lateral)?;
    linear_probe(&x, &y, &trend_class_names(), folds, &PROBE_SEEDS)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn threshold_accuracy(scores: &[f64], positive: &[bool], idx: &[usize], th: f64) -> f64 {
    let hits = idx.iter().filter(|&&i| (scores[i] >= th) == positive[i]).count();
    hits as f64 / idx.len().max(1) as f64
}

/// Threshold maximising accuracy on `idx`; candidates are midpoints between
/// consecutive distinct scores plus both extremes.
fn best_threshold(scores: &[f64], positive: &[bool], idx: &[usize]) -> f64 {
    let mut s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, -1.0);
    for th in candidates {
        let acc = threshold_accuracy(scores, positive, idx, th);
        if acc > best.1 {
            best = (th, acc);
        }
    }
    best.0
}

/// Accuracy from the cross-validated threshold (the training-split optimum
/// with the best validation accuracy, applied to all samples) and AUROC.
pub fn threshold_eval(scores: &[f64], positive: &[bool], folds: usize, seed: u64) -> Result<ProbeResult> {
    if scores.len() < 10 {
        return Err(Error::Eval("at least 10 labelled pairs required".into()));
    }
    let fold = fold_assignment(scores.len(), folds, seed);
    let mut chosen = (f64::NEG_INFINITY, -1.0);
    for f in 0..folds {
        let train: Vec<usize> = (0..scores.len()).filter(|&i| fold[i] != f).collect();
        let val: Vec<usize> = (0..scores.len()).filter(|&i| fold[i] == f).collect();
        if val.is_empty() {
            continue;
        }
        let th = best_threshold(scores, positive, &train);
        let acc = threshold_accuracy(scores, positive, &val, th);
        if acc > chosen.1 {
            chosen = (th, acc);
        }
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    let mut per_class = BTreeMap::new();
    for (name, want) in [("paraphrase", true), ("contradiction", false)] {
        let idx: Vec<usize> = all.iter().copied().filter(|&i| positive[i] == want).collect();
        if !idx.is_empty() {
            per_class.insert(name.to_string(), threshold_accuracy(scores, positive, &idx, chosen.0));
        }
    }
    Ok(ProbeResult {
        task: Task::SentenceSim,
        accuracy: threshold_accuracy(scores, positive, &all, chosen.0),
        accuracy_std: 0.0,
        auroc: auroc(scores, positive),
        f1: None,
        per_class,
        folds,
        seed,
    })
}

pub const SENTENCE_FOLDS: usize = 10;

fn text_globals(model: &Model, store: &ParamStore, vocab: &Vocabulary, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    let w = model.config().max_text_len;
    let tokens: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t, w)).collect();
    let refs: Vec<&[usize]> = tokens.iter().map(|t| t.as_slice()).collect();
    Ok(model.encoders.encode_texts(store, &refs)?.into_iter().map(|e| e.r_g).collect())
}

pub fn sentence_similarity_eval(model: &Model, store: &ParamStore, vocab: &Vocabulary, pairs: &[SentencePair], seed: u64) -> Result<ProbeResult> {
    let a: Vec<&str> = pairs.iter().map(|p| p.a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.b.as_str()).collect();
    let (ga, gb) = (text_globals(model, store, vocab, &a)?, text_globals(model, store, vocab, &b)?);
    let scores: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| cosine(x, y)).collect();
    let positive: Vec<bool> = pairs.iter().map(|p| p.label == PairLabel::Paraphrase).collect();
    threshold_eval(&scores, &positive, SENTENCE_FOLDS, seed)
}

/// Mean of the rows.
pub fn mean_embedding(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b / rows.len() as f64);
    }
    m
}

/// Binary zero-shot scores: `(predicted positive, score = sim_pos − sim_neg)`.
pub fn zeroshot_predict(images: &[Vec<f64>], pos: &[f64], neg: &[f64]) -> Vec<(bool, f64)> {
    images
        .iter()
        .map(|x| {
            let (sp, sn) = (cosine(x, pos), cosine(x, neg));
            (sp > sn, sp - sn)
        })
        .collect()
}

pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let false_neg = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len().max(1) as f64;
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + false_neg) };
    (acc, f1)
}

/// Every study is positive when its severity reaches the finding threshold.
pub fn zeroshot_eval(
    model: &Model,
    store: &ParamStore,
    corpus: &TrainingCorpus,
    labels: &LabelTable,
    pos_prompts: &[String],
    neg_prompts: &[String],
    use_lateral: bool,
) -> Result<ProbeResult> {
    if pos_prompts.is_empty() || neg_prompts.is_empty() {
        return Err(Error::Eval("both prompt lists must be nonempty".into()));
    }
    let pos = mean_embedding(&text_globals(model, store, &corpus.vocab, &to_refs(pos_prompts))?);
    let neg = mean_embedding(&text_globals(model, store, &corpus.vocab, &to_refs(neg_prompts))?);
    let encoded = encode_corpus(model, store, corpus, use_lateral)?;
    let mut images = Vec::new();
    let mut truth = Vec::new();
    for seq in &encoded {
        for (id, img) in seq.study_ids.iter().zip(&seq.images) {
            images.push(img.x_g.clone());
            truth.push(labels.severity(id)? >= POSITIVE_SEVERITY);
        }
    }
    let out = zeroshot_predict(&images, &pos, &neg);
    let pred: Vec<bool> = out.iter().map(|o| o.0).collect();
    let scores: Vec<f64> = out.iter().map(|o| o.1).collect();
    let (accuracy, f1) = binary_metrics(&pred, &truth);
    let mut per_class = BTreeMap::new();
    for (name, want) in [("positive", true), ("negative", false)] {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == want).collect();
        if !idx.is_empty() {
            per_class.insert(name.to_string(), idx.iter().filter(|&&i| pred[i] == want).count() as f64 / idx.len() as f64);
        }
    }
    Ok(ProbeResult { task: Task::Zeroshot, accuracy, accuracy_std: 0.0, auroc: auroc(&scores, &truth), f1: Some(f1), per_class, folds: 0, seed: 0 })
}

fn to_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Argmax counts of the backward distributions, one row per `(gt_index, bin)`.
pub fn beta_histogram(rows: &[BetaRow]) -> Vec<(usize, usize, usize)> {
    let n = rows.iter().map(|r| r.beta.len()).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; n]; n];
    for r in rows {
        if r.gt_index < n {
            counts[r.gt_index][argmax(&r.beta)] += 1;
        }
    }
    let mut out = Vec::new();
    for (gt, row) in counts.iter().enumerate() {
        for (bin, &c) in row.iter().enumerate() {
            out.push((gt, bin, c));
        }
    }
    out
}

/// Writes `<task>.csv` for every task, `per_class.csv`, `summary.txt` and
/// `beta_histogram.csv` into `out_dir`.
pub fn emit_report(results: &[ProbeResult], beta: &[BetaRow], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, body: &str| {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let mut sorted: Vec<&ProbeResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.task.cmp(&b.task).then(a.seed.cmp(&b.seed)).then(a.folds.cmp(&b.folds)));
    for task in Task::ALL {
        let mut csv = String::from("seed,folds,accuracy,accuracy_std,auroc,f1\n");
        for r in sorted.iter().filter(|r| r.task == task) {
            let _ = writeln!(csv, "{},{},{:.6},{:.6},{},{}", r.seed, r.folds, r.accuracy, r.accuracy_std, opt(r.auroc), opt(r.f1));
        }
        write(&format!("{}.csv", task.name()), &csv)?;
    }
    let mut per_class = String::from("task,seed,class,accuracy\n");
    let mut summary = format!("{:<14} {:>6} {:>5} {:>10} {:>8} {:>8}\n", "task", "seed", "folds", "accuracy", "auroc", "f1");
    for r in &sorted {
        for (c, a) in &r.per_class {
            let _ = writeln!(per_class, "{},{},{c},{a:.6}", r.task.name(), r.seed);
        }
        let acc = if r.accuracy_std > 0.0 { format!("{:.4}±{:.4}", r.accuracy, r.accuracy_std) } else { format!("{:.4}", r.accuracy) };
        let dash = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(summary, "{:<14} {:>6} {:>5} {:>10} {:>8} {:>8}", r.task.name(), r.seed, r.folds, acc, dash(r.auroc), dash(r.f1));
    }
    write("per_class.csv", &per_class)?;
    write("summary.txt", &summary)?;
    let mut hist = String::from("gt_index,bin,count\n");
    for (gt, bin, c) in beta_histogram(beta) {
        let _ = writeln!(hist, "{gt},{bin},{c}");
    }
    write("beta_histogram.csv", &hist)
}
