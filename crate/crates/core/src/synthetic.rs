//! Seeded generator for a multi-view, temporally coherent image/report corpus
//! with known latent disease progression.
//!
//! Each study renders one scalar finding. The frontal view shows the finding
//! as a blob whose intensity and area scale with severity at a fixed planar
//! position; the lateral view shows the same severity with the blob placed by
//! a depth coordinate that the frontal view never sees. Every view carries its
//! own small acquisition jitter on apparent severity, so the two views hold
//! partially independent evidence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{SequenceRecord, StudyRecord, Vocabulary};
use crate::error::{Error, Result};

/// Dead-band on the severity delta separating `Stable` from a real change.
pub const TREND_DEAD_BAND: f64 = 0.05;

pub const BUCKET_WORDS: [&str; 6] = ["clear", "minimal", "mild", "moderate", "marked", "severe"];
pub const BASELINE_WORD: &str = "baseline";
pub const IMPROVING_WORDS: [&str; 3] = ["improving", "better", "decreased"];
pub const STABLE_WORDS: [&str; 3] = ["stable", "unchanged", "similar"];
pub const WORSENING_WORDS: [&str; 3] = ["worsening", "worse", "increased"];
const EXTRA_WORDS: [&str; 8] = ["no", "evidence", "of", "opacity", "consistent", "with", "present", "absent"];

/// Severity at or above which a study counts as finding-positive.
pub const POSITIVE_SEVERITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Trend {
    Improving,
    Stable,
    Worsening,
}

impl Trend {
    pub const ALL: [Trend; 3] = [Trend::Improving, Trend::Stable, Trend::Worsening];

    /// Classifies a severity change with the dead-band rule.
    pub fn from_delta(delta: f64, dead_band: f64) -> Trend {
        if delta > dead_band {
            Trend::Worsening
        } else if delta < -dead_band {
            Trend::Improving
        } else {
            Trend::Stable
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Trend::Improving => "improving",
            Trend::Stable => "stable",
            Trend::Worsening => "worsening",
        }
    }

    pub fn parse(s: &str) -> Option<Trend> {
        match s {
            "improving" => Some(Trend::Improving),
            "stable" => Some(Trend::Stable),
            "worsening" => Some(Trend::Worsening),
            _ => None,
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Trend::Improving => &IMPROVING_WORDS,
            Trend::Stable => &STABLE_WORDS,
            Trend::Worsening => &WORSENING_WORDS,
        }
    }

    /// Maps a report word back to the trend it names.
    pub fn from_word(word: &str) -> Option<Trend> {
        Trend::ALL.into_iter().find(|t| t.words().contains(&word))
    }
}

/// Hidden state of one study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentState {
    pub severity: f64,
    pub depth: f64,
    /// Change relative to the previous study; `None` for a patient's first study.
    pub trend: Option<Trend>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_patients: usize,
    pub seq_len: usize,
    pub image_size: usize,
    pub seed: u64,
    pub singleton_fraction: f64,
    /// Share of multi-study patients whose severity stays within the dead-band.
    pub stable_fraction: f64,
    /// Share of studies that come with a lateral view.
    pub lateral_fraction: f64,
    /// Standard deviation of the per-view jitter on apparent severity.
    pub view_noise: f64,
    pub pixel_noise: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            seq_len: 4,
            image_size: 32,
            seed: 0,
            singleton_fraction: 0.2,
            stable_fraction: 0.05,
            lateral_fraction: 1.0,
            view_noise: 0.04,
            pixel_noise: 0.02,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_patients == 0 || self.seq_len < 2 || self.image_size < 4 {
            return Err(Error::Config("n_patients ≥ 1, seq_len ≥ 2, image_size ≥ 4 required".into()));
        }
        if !frac(self.singleton_fraction) || !frac(self.stable_fraction) || !frac(self.lateral_fraction) {
            return Err(Error::Config("fractions must lie in [0,1]".into()));
        }
        if self.view_noise < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_singletons(&self) -> usize {
        (self.n_patients as f64 * self.singleton_fraction).round() as usize
    }

    pub fn n_studies(&self) -> usize {
        let s = self.n_singletons();
        s + (self.n_patients - s) * self.seq_len
    }
}

pub fn default_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec!["finding", "trend"];
    words.extend(BUCKET_WORDS);
    words.push(BASELINE_WORD);
    words.extend(IMPROVING_WORDS);
    words.extend(STABLE_WORDS);
    words.extend(WORSENING_WORDS);
    words.extend(EXTRA_WORDS);
    Vocabulary::new(&words)
}

pub fn bucket_word(severity: f64) -> &'static str {
    let i = ((severity * BUCKET_WORDS.len() as f64).floor() as usize).min(BUCKET_WORDS.len() - 1);
    BUCKET_WORDS[i]
}

/// Report body; the tokenizer adds `[CLS]` and `[SEP]`.
pub fn report_text(severity: f64, trend_word: &str) -> String {
    format!("finding {} trend {}", bucket_word(severity), trend_word)
}

/// Generated study plus its latent state.
#[derive(Clone, Debug)]
pub struct SyntheticStudy {
    pub record: StudyRecord,
    pub state: LatentState,
    pub report: String,
    pub frontal: Mat,
    pub lateral: Option<Mat>,
}

fn gaussian_blob(img: &mut Mat, cx: f64, cy: f64, radius: f64, amp: f64) {
    let two_r2 = 2.0 * radius * radius;
    for ((r, c), v) in img.indexed_iter_mut() {
        let d2 = (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2);
        *v += amp * (-d2 / two_r2).exp();
    }
}

fn finish(mut img: Mat, pixel_noise: f64, rng: &mut ChaCha8Rng) -> Mat {
    if pixel_noise > 0.0 {
        let n = Normal::new(0.0, pixel_noise).expect("valid std");
        img.mapv_inplace(|v| v + n.sample(rng));
    }
    // 8-bit quantisation so in-memory and on-disk images agree exactly
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn blob_geometry(size: f64, apparent: f64) -> (f64, f64) {
    let radius = size * (0.05 + 0.10 * apparent);
    let amp = 0.15 + 0.6 * apparent;
    (radius, amp)
}

/// Frontal projection: background plus a blob at a fixed planar position.
/// Depends only on `apparent_severity` and the noise stream, never on depth.
pub fn render_frontal(size: usize, apparent_severity: f64, pixel_noise: f64, rng: &mut ChaCha8Rng) -> Mat {
    let s = size as f64;
    let mut img = Mat::from_shape_fn((size, size), |(r, c)| {
        let x = (c as f64 + 0.5) / s - 0.5;
        let y = (r as f64 + 0.5) / s - 0.5;
        0.25 + 0.15 * (1.0 - 4.0 * (x * x + 0.5 * y * y)).max(0.0)
    });
    let (radius, amp) = blob_geometry(s, apparent_severity.clamp(0.0, 1.0));
    gaussian_blob(&mut img, 0.35 * s, 0.5 * s, radius, amp);
    finish(img, pixel_noise, rng)
}

/// Lateral projection: the blob's horizontal position encodes depth.
pub fn render_lateral(
    size: usize,
    apparent_severity: f64,
    depth: f64,
    pixel_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Mat {
    let s = size as f64;
    let mut img = Mat::from_shape_fn((size, size), |(r, c)| {
        let x = (c as f64 + 0.5) / s - 0.5;
        let y = (r as f64 + 0.5) / s - 0.5;
        0.2 + 0.2 * (1.0 - 3.0 * (0.6 * x * x + y * y)).max(0.0)
    });
    let (radius, amp) = blob_geometry(s, apparent_severity.clamp(0.0, 1.0));
    gaussian_blob(&mut img, s * (0.2 + 0.6 * depth.clamp(0.0, 1.0)), 0.5 * s, radius, amp);
    finish(img, pixel_noise, rng)
}

fn sample_trajectory(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.seq_len;
    let u: f64 = rng.gen();
    let stable = u < spec.stable_fraction;
    if stable {
        let start: f64 = rng.gen_range(0.1..0.9);
        let mut s = vec![start];
        for _ in 1..n {
            let prev = *s.last().expect("nonempty");
            s.push((prev + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
        }
        return s;
    }
    let worsening = rng.gen_bool(0.5);
    // steps must keep the whole run inside [0.02, 0.98]
    let max_step = (0.96 / (n - 1) as f64).min(0.25);
    let min_step = (0.17f64).min(max_step);
    let deltas: Vec<f64> = (1..n)
        .map(|_| if max_step > min_step { rng.gen_range(min_step..max_step) } else { min_step })
        .collect();
    let total: f64 = deltas.iter().sum();
    let start = rng.gen_range(0.02..=(0.98 - total).max(0.02));
    let mut s = vec![start];
    for d in deltas {
        s.push(s.last().expect("nonempty") + d);
    }
    if !worsening {
        s.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    s
}

fn order_key(day: i64, minute: i64) -> String {
    let base = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");
    let d = base + Duration::days(day);
    format!("{}T{:02}{:02}", d.format("%Y%m%d"), minute / 60, minute % 60)
}

/// Generates all studies in memory. Patient `i` draws from its own ChaCha
/// stream, so the result is independent of generation order.
pub fn generate_studies(spec: &GenSpec) -> Result<Vec<SyntheticStudy>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.n_patients).collect();
    order.shuffle(&mut master);
    let singletons: Vec<bool> = {
        let mut flags = vec![false; spec.n_patients];
        for &p in &order[..spec.n_singletons()] {
            flags[p] = true;
        }
        flags
    };
    let view_noise = Normal::new(0.0, spec.view_noise.max(0.0)).expect("valid std");

    let mut out = Vec::with_capacity(spec.n_studies());
    for (p, &singleton) in singletons.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(p as u64 + 1);
        let severities = if singleton { vec![rng.gen_range(0.0..1.0)] } else { sample_trajectory(spec, &mut rng) };
        let mut depth: f64 = rng.gen_range(0.1..0.9);
        let mut day: i64 = rng.gen_range(0..365);
        let patient_id = format!("p{p:04}");
        for (t, &severity) in severities.iter().enumerate() {
            if t > 0 {
                depth = (depth + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                day += rng.gen_range(7..120);
            }
            let minute = rng.gen_range(0..24 * 60);
            let trend = (t > 0).then(|| Trend::from_delta(severity - severities[t - 1], TREND_DEAD_BAND));
            let trend_word = match trend {
                None => BASELINE_WORD,
                Some(tr) => tr.words()[rng.gen_range(0..tr.words().len())],
            };
            let has_lateral = rng.gen::<f64>() < spec.lateral_fraction;
            let f_app = severity + view_noise.sample(&mut rng);
            let l_app = severity + view_noise.sample(&mut rng);
            let frontal = render_frontal(spec.image_size, f_app, spec.pixel_noise, &mut rng);
            let lateral = has_lateral.then(|| render_lateral(spec.image_size, l_app, depth, spec.pixel_noise, &mut rng));
            let study_id = format!("{patient_id}_t{t}");
            let record = StudyRecord {
                patient_id: patient_id.clone(),
                study_id: study_id.clone(),
                order_key: order_key(day, minute),
                frontal_path: PathBuf::from(format!("images/{study_id}_f.pgm")),
                lateral_path: has_lateral.then(|| PathBuf::from(format!("images/{study_id}_l.pgm"))),
                report_path: PathBuf::from(format!("reports/{study_id}.txt")),
            };
            out.push(SyntheticStudy {
                record,
                state: LatentState { severity, depth, trend },
                report: report_text(severity, trend_word),
                frontal,
                lateral,
            });
        }
    }
    Ok(out)
}

fn to_gray(m: &Mat) -> image::GrayImage {
    image::GrayImage::from_fn(m.ncols() as u32, m.nrows() as u32, |c, r| {
        image::Luma([(m[[r as usize, c as usize]] * 255.0).round() as u8])
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// File names inside a generated corpus directory.
pub mod layout {
    pub const MANIFEST: &str = "manifest.txt";
    pub const LABELS: &str = "labels.txt";
    pub const VOCAB: &str = "vocab.txt";
    pub const SENTENCE_PAIRS: &str = "sentence_pairs.txt";
    pub const PROMPTS: &str = "prompts.txt";
}

/// Writes the corpus: `manifest.txt`, `labels.txt`, `vocab.txt`,
/// `images/*.pgm`, `reports/*.txt`, plus `sentence_pairs.txt` and
/// `prompts.txt` for the evaluation probes.
pub fn generate_corpus(spec: &GenSpec, out_dir: &Path) -> Result<Vec<SyntheticStudy>> {
    let studies = generate_studies(spec)?;
    for sub in ["images", "reports"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    let mut labels = String::new();
    for s in &studies {
        let _ = writeln!(manifest, "{}", s.record.to_manifest_line());
        let trend = s.state.trend.map(Trend::name).unwrap_or("none");
        let _ = writeln!(labels, "{}|{:.6}|{}", s.record.study_id, s.state.severity, trend);
        let fpath = out_dir.join(&s.record.frontal_path);
        to_gray(&s.frontal)
            .save(&fpath)
            .map_err(|e| Error::Image { path: fpath.clone(), reason: e.to_string() })?;
        if let (Some(l), Some(lp)) = (&s.lateral, &s.record.lateral_path) {
            let lpath = out_dir.join(lp);
            to_gray(l).save(&lpath).map_err(|e| Error::Image { path: lpath.clone(), reason: e.to_string() })?;
        }
        write_file(&out_dir.join(&s.record.report_path), &s.report)?;
    }
    write_file(&out_dir.join(layout::MANIFEST), &manifest)?;
    write_file(&out_dir.join(layout::LABELS), &labels)?;
    write_file(&out_dir.join(layout::VOCAB), &default_vocabulary().to_text())?;
    write_file(&out_dir.join(layout::SENTENCE_PAIRS), &format_sentence_pairs(&sentence_pairs(&studies, spec.seed)))?;
    write_file(&out_dir.join(layout::PROMPTS), &default_prompts())?;
    Ok(studies)
}

/// Per-study severity and trend, as recorded in `labels.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    entries: BTreeMap<String, (f64, Option<Trend>)>,
}

impl LabelTable {
    pub fn insert(&mut self, study_id: &str, severity: f64, trend: Option<Trend>) {
        self.entries.insert(study_id.to_string(), (severity, trend));
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = LabelTable::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::Labels { line: i + 1, reason };
            let f: Vec<&str> = line.split('|').collect();
            if f.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", f.len())));
            }
            let severity: f64 = f[1].trim().parse().map_err(|_| err(format!("bad severity {:?}", f[1])))?;
            let trend = match f[2].trim() {
                "none" => None,
                t => Some(Trend::parse(t).ok_or_else(|| err(format!("bad trend {t:?}")))?),
            };
            table.insert(f[0].trim(), severity, trend);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn severity(&self, study_id: &str) -> Result<f64> {
        self.entries.get(study_id).map(|e| e.0).ok_or_else(|| Error::MissingLabel(study_id.to_string()))
    }

    pub fn trend(&self, study_id: &str) -> Result<Option<Trend>> {
        self.entries.get(study_id).map(|e| e.1).ok_or_else(|| Error::MissingLabel(study_id.to_string()))
    }
}

/// Trend labels for each consecutive `(prior, current)` pair of a sequence,
/// recomputed from the recorded severities with the dead-band rule.
pub fn label_progression(seq: &SequenceRecord, labels: &LabelTable) -> Result<Vec<Trend>> {
    let sev: Vec<f64> = seq.entries.iter().map(|e| labels.severity(&e.study_id)).collect::<Result<_>>()?;
    Ok(sev.windows(2).map(|w| Trend::from_delta(w[1] - w[0], TREND_DEAD_BAND)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Paraphrase,
    Contradiction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
}

/// Swap-style sentence pairs over the trend word of every follow-up report:
/// a synonym of the same trend gives a paraphrase, a word of another trend a
/// contradiction.
pub fn sentence_pairs(studies: &[SyntheticStudy], seed: u64) -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut out = Vec::new();
    for s in studies {
        let Some(trend) = s.state.trend else { continue };
        let word = s.report.rsplit(' ').next().expect("report has a trend word");
        let synonyms: Vec<&str> = trend.words().iter().copied().filter(|w| *w != word).collect();
        let others: Vec<&str> = Trend::ALL
            .iter()
            .filter(|t| **t != trend)
            .flat_map(|t| t.words().iter().copied())
            .collect();
        let (replacement, label) = if rng.gen_bool(0.5) {
            (synonyms[rng.gen_range(0..synonyms.len())], PairLabel::Paraphrase)
        } else {
            (others[rng.gen_range(0..others.len())], PairLabel::Contradiction)
        };
        out.push(SentencePair { a: s.report.clone(), b: report_text(s.state.severity, replacement), label });
    }
    out
}

pub fn format_sentence_pairs(pairs: &[SentencePair]) -> String {
    pairs
        .iter()
        .map(|p| {
            let l = match p.label {
                PairLabel::Paraphrase => "paraphrase",
                PairLabel::Contradiction => "contradiction",
            };
            format!("{}|{}|{}\n", p.a, p.b, l)
        })
        .collect()
}

pub fn parse_sentence_pairs(text: &str) -> Result<Vec<SentencePair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('|').collect();
            let label = match f.get(2).map(|s| s.trim()) {
                Some("paraphrase") => PairLabel::Paraphrase,
                Some("contradiction") => PairLabel::Contradiction,
                _ => return Err(Error::Labels { line: i + 1, reason: "expected text|text|paraphrase|contradiction".into() }),
            };
            Ok(SentencePair { a: f[0].to_string(), b: f[1].to_string(), label })
        })
        .collect()
}

/// Class prompts for finding-present vs finding-absent zero-shot evaluation.
pub fn default_prompts() -> String {
    let mut s = String::new();
    for b in &BUCKET_WORDS[3..] {
        let _ = writeln!(s, "pos|finding {b}");
    }
    let _ = writeln!(s, "pos|opacity present");
    for b in &BUCKET_WORDS[..3] {
        let _ = writeln!(s, "neg|finding {b}");
    }
    let _ = writeln!(s, "neg|no evidence of opacity");
    s
}

/// `(positive prompts, negative prompts)` from `pos|text` / `neg|text` lines.
pub fn parse_prompts(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('|') {
            Some(("pos", t)) => pos.push(t.to_string()),
            Some(("neg", t)) => neg.push(t.to_string()),
            _ => return Err(Error::Labels { line: i + 1, reason: "expected pos|text or neg|text".into() }),
        }
    }
    Ok((pos, neg))
}
