//! Studies, patient sequences, manifests and loading of image/report pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// One diagnostic visit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudyRecord {
    pub patient_id: String,
    pub study_id: String,
    /// Lexicographically sortable timestamp, e.g. `20230114T0930`.
    pub order_key: String,
    pub frontal_path: PathBuf,
    pub lateral_path: Option<PathBuf>,
    pub report_path: PathBuf,
}

/// A chronologically ordered run of one patient's studies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub entries: Vec<StudyRecord>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patient_id(&self) -> &str {
        &self.entries[0].patient_id
    }
}

impl StudyRecord {
    pub fn to_manifest_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.patient_id,
            self.study_id,
            self.order_key,
            self.frontal_path.display(),
            self.lateral_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.report_path.display()
        )
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<StudyRecord> {
    let err = |reason: &str| Error::Manifest { line: lineno, reason: reason.to_string() };
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 6 {
        return Err(err(&format!("expected 6 '|'-separated fields, found {}", fields.len())));
    }
    let field = |i: usize, name: &str| -> Result<String> {
        let v = fields[i].trim();
        if v.is_empty() {
            Err(err(&format!("missing {name}")))
        } else {
            Ok(v.to_string())
        }
    };
    let lateral = fields[4].trim();
    Ok(StudyRecord {
        patient_id: field(0, "patient_id")?,
        study_id: field(1, "study_id")?,
        order_key: field(2, "order_key")?,
        frontal_path: PathBuf::from(field(3, "frontal_path")?),
        lateral_path: (!lateral.is_empty()).then(|| PathBuf::from(lateral)),
        report_path: PathBuf::from(field(5, "report_path")?),
    })
}

/// Parses manifest text (`patient_id|study_id|order_key|frontal|lateral|report`
/// per line, blank lines ignored). Line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<StudyRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, i + 1)?;
        if !seen.insert((rec.patient_id.clone(), rec.study_id.clone())) {
            return Err(Error::DuplicateStudy { line: i + 1, patient_id: rec.patient_id, study_id: rec.study_id });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Groups studies per patient, orders them by `(order_key, study_id)` and
/// chunks greedily into runs of `target_len`; every leftover study becomes a
/// singleton sequence. Patients are emitted in id order.
pub fn build_sequences(records: &[StudyRecord], target_len: usize) -> Vec<SequenceRecord> {
    assert!(target_len >= 2, "target_len must be at least 2");
    let mut by_patient: BTreeMap<&str, Vec<&StudyRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (patient, mut studies) in by_patient {
        studies.sort_by(|a, b| a.order_key.cmp(&b.order_key).then_with(|| a.study_id.cmp(&b.study_id)));
        let full = studies.len() / target_len * target_len;
        let mut k = 0;
        for chunk in studies[..full].chunks(target_len) {
            out.push(SequenceRecord {
                sequence_id: format!("{patient}-s{k}"),
                entries: chunk.iter().map(|&r| r.clone()).collect(),
            });
            k += 1;
        }
        for &r in &studies[full..] {
            out.push(SequenceRecord { sequence_id: format!("{patient}-s{k}"), entries: vec![r.clone()] });
            k += 1;
        }
    }
    out
}

/// `sequence_id|patient_id|study_ids(comma-joined)|length` per line.
pub fn format_sequence_manifest(seqs: &[SequenceRecord]) -> String {
    let mut s = String::new();
    for q in seqs {
        let ids: Vec<&str> = q.entries.iter().map(|e| e.study_id.as_str()).collect();
        let _ = writeln!(s, "{}|{}|{}|{}", q.sequence_id, q.patient_id(), ids.join(","), q.len());
    }
    s
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Whitespace tokenizer over a closed word list. The first four entries are
/// always `[PAD] [UNK] [CLS] [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary words; the special tokens are prepended.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, lookup }
    }

    /// One token per line, special tokens first.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() < 4 || lines[..4] != [PAD, UNK, CLS, SEP] {
            return Err(Error::Config("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        Ok(Self::new(&lines[4..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] words… [SEP]`, truncated so the result never exceeds `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut ids = vec![CLS_ID];
        ids.extend(
            text.split_whitespace()
                .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
                .filter(|w| !w.is_empty())
                .map(|w| self.id(&w))
                .take(max_len - 2),
        );
        ids.push(SEP_ID);
        ids
    }
}

/// Loaded pixels and tokens of one study.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub frontal: Mat,
    /// All zeros when the study has no lateral view.
    pub lateral: Mat,
    pub tokens: Vec<usize>,
    pub has_lateral: bool,
}

/// Decodes an image file to grayscale in `[0,1]`, resized to `size×size`.
pub fn load_grayscale(path: &Path, size: usize) -> Result<Mat> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut gray = img.to_luma8();
    if gray.width() as usize != size || gray.height() as usize != size {
        gray = image::imageops::resize(&gray, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    Ok(Mat::from_shape_fn((size, size), |(r, c)| f64::from(gray.get_pixel(c as u32, r as u32)[0]) / 255.0))
}

/// Loads the study's images and report; relative paths resolve against `base`.
pub fn load_pair(
    record: &StudyRecord,
    base: &Path,
    image_size: usize,
    vocab: &Vocabulary,
    max_text_len: usize,
) -> Result<RawPair> {
    let frontal = load_grayscale(&base.join(&record.frontal_path), image_size)?;
    let (lateral, has_lateral) = match &record.lateral_path {
        Some(p) => (load_grayscale(&base.join(p), image_size)?, true),
        None => (Mat::zeros((image_size, image_size)), false),
    };
    let report_path = base.join(&record.report_path);
    let report = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    Ok(RawPair { frontal, lateral, tokens: vocab.encode(&report, max_text_len), has_lateral })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p: &str, s: &str, key: &str) -> StudyRecord {
        StudyRecord {
            patient_id: p.into(),
            study_id: s.into(),
            order_key: key.into(),
            frontal_path: format!("{s}_f.pgm").into(),
            lateral_path: None,
            report_path: format!("{s}.txt").into(),
        }
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn parses_fixture_in_file_order() {
        let text = "p2|s9|20200101T0000|a.pgm||a.txt\n\
                    p1|s1|20190505T1200|b.pgm|b_l.pgm|b.txt\n\
                    p1|s2|20190101T0800|c.pgm||c.txt\n";
        let got = parse_manifest(text).unwrap();
        let expected = vec![
            StudyRecord {
                patient_id: "p2".into(),
                study_id: "s9".into(),
                order_key: "20200101T0000".into(),
                frontal_path: "a.pgm".into(),
                lateral_path: None,
                report_path: "a.txt".into(),
            },
            StudyRecord {
                patient_id: "p1".into(),
                study_id: "s1".into(),
                order_key: "20190505T1200".into(),
                frontal_path: "b.pgm".into(),
                lateral_path: Some("b_l.pgm".into()),
                report_path: "b.txt".into(),
            },
            StudyRecord {
                patient_id: "p1".into(),
                study_id: "s2".into(),
                order_key: "20190101T0800".into(),
                frontal_path: "c.pgm".into(),
                lateral_path: None,
                report_path: "c.txt".into(),
            },
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn missing_frontal_names_line() {
        let text = "p1|s1|k1|a.pgm||a.txt\np1|s2|k2|||b.txt\n";
        match parse_manifest(text) {
            Err(Error::Manifest { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("frontal"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_report_and_duplicates_rejected() {
        assert!(matches!(parse_manifest("p|s|k|a.pgm||\n"), Err(Error::Manifest { line: 1, .. })));
        assert!(matches!(parse_manifest("p|s|k|a.pgm|\n"), Err(Error::Manifest { line: 1, .. })));
        let dup = "p|s|k1|a.pgm||a.txt\np|s|k2|b.pgm||b.txt\n";
        assert!(matches!(parse_manifest(dup), Err(Error::DuplicateStudy { line: 2, .. })));
    }

    #[test]
    fn chunking_rule() {
        let four: Vec<_> = (0..4).map(|i| rec("a", &format!("s{i}"), &format!("k{i}"))).collect();
        let seqs = build_sequences(&four, 4);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 4);

        let seqs = build_sequences(&[rec("b", "s0", "k0")], 4);
        assert_eq!(seqs.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![1]);

        let nine: Vec<_> = (0..9).map(|i| rec("c", &format!("s{i}"), &format!("k{i}"))).collect();
        let lens: Vec<_> = build_sequences(&nine, 4).iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![4, 4, 1]);

        let seven: Vec<_> = (0..7).map(|i| rec("d", &format!("s{i}"), &format!("k{i}"))).collect();
        let lens: Vec<_> = build_sequences(&seven, 4).iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![4, 1, 1, 1]);
    }

    #[test]
    fn orders_by_time_then_study_id() {
        let recs = vec![rec("p", "z", "k2"), rec("p", "b", "k1"), rec("p", "a", "k1"), rec("p", "c", "k0")];
        let seqs = build_sequences(&recs, 4);
        let ids: Vec<_> = seqs[0].entries.iter().map(|e| e.study_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b", "z"]);
        assert_eq!(format_sequence_manifest(&seqs), "p-s0|p|c,a,b,z|4\n");
    }

    proptest! {
        #[test]
        fn sequences_conserve_and_order(keys in proptest::collection::vec((0u8..5, 0u16..1000), 0..60)) {
            let recs: Vec<_> = keys
                .iter()
                .enumerate()
                .map(|(i, (p, k))| rec(&format!("p{p}"), &format!("s{i:03}"), &format!("{k:04}")))
                .collect();
            let seqs = build_sequences(&recs, 4);
            prop_assert_eq!(seqs.iter().map(|s| s.len()).sum::<usize>(), recs.len());
            for s in &seqs {
                prop_assert!(s.len() == 1 || s.len() == 4);
                prop_assert!(s.entries.iter().all(|e| e.patient_id == s.entries[0].patient_id));
                prop_assert!(s.entries.windows(2).all(|w| w[0].order_key <= w[1].order_key));
            }
            prop_assert_eq!(format_sequence_manifest(&seqs), format_sequence_manifest(&build_sequences(&recs, 4)));
        }
    }

    #[test]
    fn tokenizer_fixture() {
        let vocab = Vocabulary::new(&["finding", "stable", "pleural", "effusion"]);
        // [PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3 finding=4 stable=5 pleural=6 effusion=7
        assert_eq!(vocab.encode("stable pleural effusion", 16), vec![2, 5, 6, 7, 3]);
        assert_eq!(vocab.encode("Stable, new effusion.", 16), vec![2, 5, 1, 7, 3]);
        assert_eq!(vocab.encode("stable pleural effusion", 4), vec![2, 5, 6, 3]);
        assert_eq!(Vocabulary::parse(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn load_pair_handles_missing_lateral() {
        let dir = tempfile::tempdir().unwrap();
        let white = image::GrayImage::from_pixel(8, 8, image::Luma([255u8]));
        white.save(dir.path().join("f.pgm")).unwrap();
        fs::write(dir.path().join("r.txt"), "stable pleural effusion").unwrap();
        let vocab = Vocabulary::new(&["stable", "pleural", "effusion"]);
        let r = StudyRecord {
            patient_id: "p".into(),
            study_id: "s".into(),
            order_key: "k".into(),
            frontal_path: "f.pgm".into(),
            lateral_path: None,
            report_path: "r.txt".into(),
        };
        let pair = load_pair(&r, dir.path(), 8, &vocab, 16).unwrap();
        assert!(!pair.has_lateral);
        assert_eq!(pair.lateral.sum(), 0.0);
        assert!(pair.frontal.iter().all(|&v| v == 1.0));
        assert_eq!(pair.tokens, vec![2, 4, 5, 6, 3]);

        let resized = load_pair(&r, dir.path(), 4, &vocab, 16).unwrap();
        assert_eq!(resized.frontal.dim(), (4, 4));

        let missing = StudyRecord { frontal_path: "nope.pgm".into(), ..r };
        assert!(matches!(load_pair(&missing, dir.path(), 8, &vocab, 16), Err(Error::Image { .. })));
    }
}
