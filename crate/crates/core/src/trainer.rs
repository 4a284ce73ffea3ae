//! Batching, the combined objective, AdamW with warmup and cosine decay,
//! metrics logging and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{build_sequences, ingest_manifest, load_pair, Vocabulary};
use crate::encoders::{EncoderConfig, ImageEncoding, TextEncoding};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::spatial_alignment::{global_alignment_graph, local_alignment_graph, AlignmentConfig, Similarity};
use crate::synthetic::{layout, SyntheticStudy};
use crate::temporal_consistency::{argmax, cycle_back_accuracy, temporal_graph, DistanceMode, SequenceFeatures, TemporalParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_sequences: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub delta: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    pub init_lr: f64,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub sigma_floor: f64,
    pub similarity: Similarity,
    pub distance_mode: DistanceMode,
    /// Feed lateral views to the encoder; when false every lateral is blank and excluded.
    pub use_lateral: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seq_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub text_blocks: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            lr: 4e-5,
            weight_decay: 0.05,
            warmup_epochs: 1,
            epochs: 10,
            batch_sequences: 8,
            lambda1: 1.0,
            lambda2: 1.0,
            tau1: 0.07,
            tau2: 0.1,
            delta: 2.0,
            lambda_reg: 0.001,
            seed: 0,
            init_lr: 1e-8,
            max_steps: 0,
            sigma_floor: 1e-6,
            similarity: Similarity::Dot,
            distance_mode: DistanceMode::SquaredEuclidean,
            use_lateral: true,
            grad_clip: 0.0,
            checkpoint_every: 0,
            seq_len: 4,
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            embed_dim: enc.embed_dim,
            proj_dim: enc.proj_dim,
            n_blocks: enc.n_blocks,
            n_heads: enc.n_heads,
            text_blocks: enc.text_blocks,
            max_text_len: enc.max_text_len,
            ffn_mult: enc.ffn_mult,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.init_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and init_lr must be positive, weight_decay non-negative".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("lambda1, lambda2 and grad_clip must be non-negative".into()));
        }
        if self.batch_sequences == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_sequences ≥ 1 and seq_len ≥ 2 required".into()));
        }
        self.alignment().validate()?;
        self.temporal().validate()?;
        self.encoder(30).validate()
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            proj_dim: self.proj_dim,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            vocab_size,
            max_text_len: self.max_text_len,
            text_blocks: self.text_blocks,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig { tau1: self.tau1, tau2: self.tau2, similarity: self.similarity }
    }

    pub fn temporal(&self) -> TemporalParams {
        TemporalParams {
            delta: self.delta,
            lambda_reg: self.lambda_reg,
            sigma_floor: self.sigma_floor,
            distance_mode: self.distance_mode,
        }
    }
}

/// Decoded pixels and tokens of one study.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub study_id: String,
    pub frontal: Mat,
    pub lateral: Mat,
    pub has_lateral: bool,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SequenceData {
    pub sequence_id: String,
    pub studies: Vec<StudyData>,
}

/// Every sequence of a corpus, loaded into memory.
#[derive(Clone, Debug)]
pub struct TrainingCorpus {
    pub sequences: Vec<SequenceData>,
    pub vocab: Vocabulary,
}

impl TrainingCorpus {
    /// Reads `manifest.txt` and `vocab.txt` from a corpus directory.
    pub fn load(dir: &Path, image_size: usize, max_text_len: usize, seq_len: usize) -> Result<Self> {
        let records = ingest_manifest(&dir.join(layout::MANIFEST))?;
        let vocab = Vocabulary::load(&dir.join(layout::VOCAB))?;
        let mut sequences = Vec::new();
        for seq in build_sequences(&records, seq_len) {
            let studies = seq
                .entries
                .iter()
                .map(|r| {
                    let p = load_pair(r, dir, image_size, &vocab, max_text_len)?;
                    Ok(StudyData {
                        study_id: r.study_id.clone(),
                        frontal: p.frontal,
                        lateral: p.lateral,
                        has_lateral: p.has_lateral,
                        tokens: p.tokens,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(SequenceData { sequence_id: seq.sequence_id, studies });
        }
        if sequences.is_empty() {
            return Err(Error::Config(format!("corpus {} is empty", dir.display())));
        }
        Ok(Self { sequences, vocab })
    }

    /// Same result as writing the studies to disk and calling [`TrainingCorpus::load`].
    pub fn from_studies(studies: &[SyntheticStudy], vocab: Vocabulary, max_text_len: usize, seq_len: usize) -> Self {
        let records: Vec<_> = studies.iter().map(|s| s.record.clone()).collect();
        let by_id: std::collections::HashMap<&str, &SyntheticStudy> =
            studies.iter().map(|s| (s.record.study_id.as_str(), s)).collect();
        let sequences = build_sequences(&records, seq_len)
            .into_iter()
            .map(|seq| SequenceData {
                studies: seq
                    .entries
                    .iter()
                    .map(|r| {
                        let s = by_id[r.study_id.as_str()];
                        StudyData {
                            study_id: r.study_id.clone(),
                            frontal: s.frontal.clone(),
                            lateral: s.lateral.clone().unwrap_or_else(|| Mat::zeros(s.frontal.raw_dim())),
                            has_lateral: s.lateral.is_some(),
                            tokens: vocab.encode(&s.report, max_text_len),
                        }
                    })
                    .collect(),
                sequence_id: seq.sequence_id,
            })
            .collect();
        Self { sequences, vocab }
    }

    pub fn n_studies(&self) -> usize {
        self.sequences.iter().map(|s| s.studies.len()).sum()
    }
}

/// Shuffles all sequence indices and cuts them into batches; the last batch may be short.
pub fn compose_batches(n_sequences: usize, batch_sequences: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_sequences).collect();
    order.shuffle(rng);
    order.chunks(batch_sequences.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub global: f64,
    pub vla: f64,
    pub tla: f64,
    pub fmc_i: f64,
    pub rmr_i: f64,
    pub fmc_t: f64,
    pub rmr_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total` recomputed from the components.
    pub fn recombined(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.global + lambda1 * (self.vla + self.tla) + lambda2 * (self.fmc_i + self.rmr_i + self.fmc_t + self.rmr_t)
    }
}

pub struct ForwardOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Positions whose backward distribution peaked at the start, and positions examined.
    pub cycle_hits: usize,
    pub cycle_positions: usize,
}

/// Blank lateral used when laterals are switched off.
fn lateral_for<'a>(s: &'a StudyData, use_lateral: bool, blank: &'a Mat) -> (&'a Mat, bool) {
    if use_lateral && s.has_lateral {
        (&s.lateral, true)
    } else {
        (blank, false)
    }
}

/// Builds the combined objective for one batch of sequences.
pub fn batch_forward(g: &mut Graph, b: &Bound, model: &Model, cfg: &TrainConfig, batch: &[&SequenceData]) -> Result<ForwardOutput> {
    let enc = model.config();
    let blank = Mat::zeros((enc.image_size, enc.image_size));
    let mut frontal = Vec::new();
    let mut lateral = Vec::new();
    let mut lateral_used = Vec::new();
    let mut tokens: Vec<&[usize]> = Vec::new();
    let mut weights = Vec::new();
    let mut seq_rows = Vec::new();
    let n_seq = batch.len() as f64;
    for seq in batch {
        let start = frontal.len();
        for s in &seq.studies {
            frontal.push(&s.frontal);
            let (l, used) = lateral_for(s, cfg.use_lateral, &blank);
            lateral.push(l);
            lateral_used.push(used);
            tokens.push(&s.tokens);
            weights.push(1.0 / (n_seq * seq.studies.len() as f64));
        }
        seq_rows.push((start, frontal.len()));
    }
    if frontal.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let img = model.encoders.image.forward(g, b, enc, &frontal, &lateral)?;
    let txt = model.encoders.text.forward(g, b, enc, &tokens)?;

    let global = global_alignment_graph(g, img.globals, txt.globals, cfg.tau1, cfg.similarity, Some(&weights));

    let np = enc.n_patches();
    let w_len = enc.max_text_len;
    let local_w = model.align.bind(b);
    let mut vla_terms = Vec::new();
    let mut tla_terms = Vec::new();
    for (p, &wt) in weights.iter().enumerate() {
        let base = p * 2 * np;
        let n_patch = if lateral_used[p] { 2 * np } else { np };
        let patches = g.gather_rows(img.patches, (base..base + n_patch).collect());
        let toks = g.gather_rows(txt.tokens, (p * w_len..p * w_len + tokens[p].len()).collect());
        let (vla, tla) = local_alignment_graph(g, patches, toks, local_w, cfg.tau2, cfg.similarity);
        vla_terms.push(g.scale(vla, wt));
        tla_terms.push(g.scale(tla, wt));
    }
    let vla = sum_vars(g, &vla_terms);
    let tla = sum_vars(g, &tla_terms);

    let params = cfg.temporal();
    let mut temporal = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let (mut hits, mut positions) = (0, 0);
    for &(start, end) in &seq_rows {
        if end - start < 2 {
            continue;
        }
        let rows: Vec<usize> = (start..end).collect();
        let xg = g.gather_rows(img.globals, rows.clone());
        let rg = g.gather_rows(txt.globals, rows);
        let t = temporal_graph(g, xg, rg, &params);
        temporal[0].push(t.image.fmc);
        temporal[1].push(t.image.rmr);
        temporal[2].push(t.text.fmc);
        temporal[3].push(t.text.rmr);
        for beta in [t.image.beta, t.text.beta] {
            for (i, row) in g.value(beta).rows().into_iter().enumerate() {
                hits += usize::from(argmax(&row.to_vec()) == i);
                positions += 1;
            }
        }
    }
    let n_temporal = temporal[0].len();
    let [fmc_i, rmr_i, fmc_t, rmr_t] = temporal.map(|terms| {
        let s = sum_vars(g, &terms);
        if n_temporal > 0 {
            g.scale(s, 1.0 / n_temporal as f64)
        } else {
            s
        }
    });

    let local = g.add(vla, tla);
    let local = g.scale(local, cfg.lambda1);
    let tmp = sum_vars(g, &[fmc_i, rmr_i, fmc_t, rmr_t]);
    let tmp = g.scale(tmp, cfg.lambda2);
    let total = sum_vars(g, &[global, local, tmp]);

    let breakdown = LossBreakdown {
        step: 0,
        global: g.scalar(global),
        vla: g.scalar(vla),
        tla: g.scalar(tla),
        fmc_i: g.scalar(fmc_i),
        rmr_i: g.scalar(rmr_i),
        fmc_t: g.scalar(fmc_t),
        rmr_t: g.scalar(rmr_t),
        total: g.scalar(total),
    };
    for (name, v) in [
        ("global", breakdown.global),
        ("vla", breakdown.vla),
        ("tla", breakdown.tla),
        ("fmc_i", breakdown.fmc_i),
        ("rmr_i", breakdown.rmr_i),
        ("fmc_t", breakdown.fmc_t),
        ("rmr_t", breakdown.rmr_t),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    Ok(ForwardOutput { total, breakdown, cycle_hits: hits, cycle_positions: positions })
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    match vars.split_first() {
        None => g.constant(Mat::zeros((1, 1))),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| g.add(acc, v)),
    }
}

/// Evaluates the objective on one batch without updating anything.
pub fn total_loss(batch: &[&SequenceData], model: &Model, store: &ParamStore, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    Ok(batch_forward(&mut g, &b, model, cfg, batch)?.breakdown)
}

/// Learning rate at optimizer step `step` (0-based): linear warmup from
/// `init_lr`, then cosine decay to zero at `total_steps`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return cfg.init_lr + (cfg.lr - cfg.init_lr) * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    /// Matrices are decayed; row vectors (biases, norm scales, CLS) are not.
    pub fn new(store: &ParamStore) -> Self {
        let ids: Vec<_> = store.ids().collect();
        Self {
            m: ids.iter().map(|&i| Mat::zeros(store.get(i).raw_dim())).collect(),
            v: ids.iter().map(|&i| Mat::zeros(store.get(i).raw_dim())).collect(),
            decay: ids.iter().map(|&i| store.get(i).nrows() > 1 && store.get(i).ncols() > 1).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let decay = if self.decay[k] { weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads[k])
                .for_each(|p, m, v, &gr| {
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub loss: LossBreakdown,
    pub lr: f64,
    /// `None` when the batch had no multi-study sequence.
    pub cycle_back_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,global,vla,tla,fmc_i,rmr_i,fmc_t,rmr_t,total,lr,cycle_back_acc";

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},",
            l.step, l.global, l.vla, l.tla, l.fmc_i, l.rmr_i, l.fmc_t, l.rmr_t, l.total, r.lr
        );
        if let Some(a) = r.cycle_back_acc {
            let _ = write!(out, "{a}");
        }
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub metrics: Vec<MetricsRow>,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Runs the configured number of epochs (or `max_steps`). When `out_dir` is
/// given, writes `model.ckpt`, `metrics.csv` and any periodic checkpoints there.
/// On a non-finite loss the last good parameters are still saved before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    corpus: &TrainingCorpus,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.sequences.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (model, mut store) = Model::init(&cfg.encoder(corpus.vocab.len()), cfg.seed)?;
    let mut opt = AdamW::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let per_epoch = corpus.sequences.len().div_ceil(cfg.batch_sequences);
    let mut total_steps = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let warmup = (per_epoch * cfg.warmup_epochs).min(total_steps);
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    let finish = |model: &Model, store: &ParamStore, metrics: &[MetricsRow], step: usize| -> Result<()> {
        if let Some(d) = out_dir {
            model.save(store, step as u64, &d.join(FINAL_CHECKPOINT))?;
            let p = d.join(METRICS_FILE);
            fs::write(&p, format_metrics(metrics)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };

    'outer: for _epoch in 0..cfg.epochs {
        for batch_idx in compose_batches(corpus.sequences.len(), cfg.batch_sequences, &mut rng) {
            if step >= total_steps {
                break 'outer;
            }
            let batch: Vec<&SequenceData> = batch_idx.iter().map(|&i| &corpus.sequences[i]).collect();
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let out = match batch_forward(&mut g, &bound, &model, cfg, &batch) {
                Ok(o) => o,
                Err(e) => {
                    finish(&model, &store, &metrics, step)?;
                    return Err(Error::NonFinite(format!("step {step}: {e}")));
                }
            };
            let lr = learning_rate(cfg, step, warmup, total_steps);
            let grads = g.backward(out.total);
            let mut grads = store.collect_grads(&bound, &grads);
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                finish(&model, &store, &metrics, step)?;
                return Err(Error::NonFinite(format!("step {step}: gradient")));
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
            }
            opt.step(&mut store, &grads, lr, cfg.weight_decay);
            step += 1;
            let row = MetricsRow {
                loss: LossBreakdown { step: step as u64, ..out.breakdown },
                lr,
                cycle_back_acc: (out.cycle_positions > 0).then(|| out.cycle_hits as f64 / out.cycle_positions as f64),
            };
            on_step(&row);
            metrics.push(row);
            if let Some(d) = out_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    model.save(&store, step as u64, &d.join(format!("ckpt_{step:06}.ckpt")))?;
                }
            }
        }
    }
    finish(&model, &store, &metrics, step)?;
    Ok(TrainOutcome { model, store, metrics })
}

/// Encoded features of every study, grouped as in the corpus.
pub struct EncodedSequence {
    pub sequence_id: String,
    pub study_ids: Vec<String>,
    pub images: Vec<ImageEncoding>,
    pub texts: Vec<TextEncoding>,
}

impl EncodedSequence {
    pub fn features(&self) -> Result<SequenceFeatures> {
        let d = self.images[0].x_g.len();
        let n = self.images.len();
        let xg = Mat::from_shape_fn((n, d), |(t, k)| self.images[t].x_g[k]);
        let rg = Mat::from_shape_fn((n, d), |(t, k)| self.texts[t].r_g[k]);
        SequenceFeatures::new(xg, rg)
    }
}

const ENCODE_CHUNK: usize = 32;

/// Runs both encoders over the corpus with frozen parameters.
pub fn encode_corpus(model: &Model, store: &ParamStore, corpus: &TrainingCorpus, use_lateral: bool) -> Result<Vec<EncodedSequence>> {
    let enc = &model.encoders;
    let blank = Mat::zeros((enc.config.image_size, enc.config.image_size));
    let studies: Vec<&StudyData> = corpus.sequences.iter().flat_map(|s| &s.studies).collect();
    let mut images = Vec::with_capacity(studies.len());
    let mut texts = Vec::with_capacity(studies.len());
    for chunk in studies.chunks(ENCODE_CHUNK) {
        let f: Vec<&Mat> = chunk.iter().map(|s| &s.frontal).collect();
        let l: Vec<&Mat> = chunk.iter().map(|s| lateral_for(s, use_lateral, &blank).0).collect();
        let t: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        images.extend(enc.encode_images(store, &f, &l)?);
        texts.extend(enc.encode_texts(store, &t)?);
    }
    let mut images = images.into_iter();
    let mut texts = texts.into_iter();
    Ok(corpus
        .sequences
        .iter()
        .map(|s| EncodedSequence {
            sequence_id: s.sequence_id.clone(),
            study_ids: s.studies.iter().map(|st| st.study_id.clone()).collect(),
            images: images.by_ref().take(s.studies.len()).collect(),
            texts: texts.by_ref().take(s.studies.len()).collect(),
        })
        .collect())
}

/// Mean cycle-back accuracy over every multi-study sequence.
pub fn corpus_cycle_back(encoded: &[EncodedSequence], mode: DistanceMode) -> Result<f64> {
    let mut acc = Vec::new();
    for s in encoded.iter().filter(|s| s.images.len() >= 2) {
        acc.push(cycle_back_accuracy(&s.features()?, mode));
    }
    if acc.is_empty() {
        return Err(Error::Eval("no multi-study sequences".into()));
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}
