//! Labeled token-sequence corpora: synthetic generation, TSV ingest, splits
//! and a replayable on-disk format that carries corruption metadata.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
/// Number of reserved ids preceding ordinary tokens.
pub const RESERVED_IDS: u32 = 3;

const DATASET_MAGIC: &str = "# clearlab-dataset v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid sizes: {0}")]
    InvalidSizes(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{0}: no examples")]
    Empty(String),
    #[error("split fractions must be non-negative and sum to 1 (got {0})")]
    Fractions(f64),
    #[error("{0} split would be empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which partition a dataset represents. Label noise may only touch
/// `Unsplit` or `Train` data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Unsplit,
    Train,
    Val,
    Test,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            Self::Unsplit => "unsplit",
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unsplit" => Self::Unsplit,
            "train" => Self::Train,
            "val" => Self::Val,
            "test" => Self::Test,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    /// Stable identifier; keys loss caches and routing substreams.
    pub id: u64,
    pub tokens: Vec<u32>,
    pub given_label: usize,
    pub true_label: usize,
    pub corrupted: bool,
}

impl LabeledExample {
    pub fn clean(id: u64, tokens: Vec<u32>, label: usize) -> Self {
        Self {
            id,
            tokens,
            given_label: label,
            true_label: label,
            corrupted: false,
        }
    }

    /// Replaces the given label, keeping the corruption flag consistent.
    pub fn relabel(&mut self, label: usize) {
        self.given_label = label;
        self.corrupted = label != self.true_label;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_corrupted(&self) -> usize {
        self.examples.iter().filter(|e| e.corrupted).count()
    }

    pub fn corrupted_fraction(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.num_corrupted() as f64 / self.examples.len() as f64
    }

    /// Checks the structural invariants of every example.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::with_capacity(self.examples.len());
        for (i, e) in self.examples.iter().enumerate() {
            let bad = |reason: String| DataError::Malformed { line: i + 1, reason };
            if !seen.insert(e.id) {
                return Err(bad(format!("duplicate sample id {}", e.id)));
            }
            if e.given_label >= self.num_classes || e.true_label >= self.num_classes {
                return Err(bad(format!("label out of range for {} classes", self.num_classes)));
            }
            if e.corrupted != (e.given_label != e.true_label) {
                return Err(bad("corruption flag disagrees with labels".into()));
            }
            if e.tokens.is_empty() {
                return Err(bad("empty token sequence".into()));
            }
            if let Some(t) = e.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(bad(format!("token {t} outside vocab of {}", self.vocab_size)));
            }
        }
        Ok(())
    }

    /// Writes the replay format: a header, then one
    /// `id<TAB>tokens<TAB>given<TAB>true<TAB>corrupted` row per example.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{DATASET_MAGIC}")?;
        writeln!(
            w,
            "# classes={} vocab={} split={}",
            self.num_classes,
            self.vocab_size,
            self.split.as_str()
        )?;
        for e in &self.examples {
            let toks: Vec<String> = e.tokens.iter().map(u32::to_string).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                toks.join(" "),
                e.given_label,
                e.true_label,
                u8::from(e.corrupted)
            )?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut lines = r.lines();
        let magic = lines.next().transpose()?.unwrap_or_default();
        if magic.trim() != DATASET_MAGIC {
            return Err(DataError::Malformed { line: 1, reason: "missing dataset header".into() });
        }
        let header = lines.next().transpose()?.unwrap_or_default();
        let mut fields = HashMap::new();
        for kv in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let header_err = |what: &str| DataError::Malformed { line: 2, reason: format!("bad or missing {what}") };
        let num_classes = fields.get("classes").and_then(|v| v.parse().ok()).ok_or_else(|| header_err("classes"))?;
        let vocab_size = fields.get("vocab").and_then(|v| v.parse().ok()).ok_or_else(|| header_err("vocab"))?;
        let split = fields.get("split").and_then(|v| SplitTag::parse(v)).ok_or_else(|| header_err("split"))?;

        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 3;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| DataError::Malformed { line: lineno, reason: reason.to_string() };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            let id = cols[0].parse().map_err(|_| bad("bad sample id"))?;
            let tokens = cols[1]
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<Vec<u32>, _>>()
                .map_err(|_| bad("bad token id"))?;
            let given_label = cols[2].parse().map_err(|_| bad("bad given label"))?;
            let true_label = cols[3].parse().map_err(|_| bad("bad true label"))?;
            let corrupted = match cols[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("corrupted flag must be 0 or 1")),
            };
            examples.push(LabeledExample { id, tokens, given_label, true_label, corrupted });
        }
        let ds = Dataset { examples, num_classes, vocab_size, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_tsv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path)?;
        Self::read_tsv(std::io::BufReader::new(f))
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token-string to id map with reserved pad/unknown/mask ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Ids assigned in first-appearance order after the reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = ["[pad]", "[unk]", "[mask]"].map(String::from).to_vec();
        let mut index: HashMap<String, u32> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// Result of [`load_tsv`].
#[derive(Clone, Debug)]
pub struct TextCorpus {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub vocab: Vocab,
    /// Label strings in index order (first appearance in the train file).
    pub label_names: Vec<String>,
}

fn read_text_label_lines(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let content = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| DataError::Malformed { line: i + 1, reason: reason.to_string() };
        let (text, label) = line.rsplit_once('\t').ok_or_else(|| bad("expected text<TAB>label"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(bad("empty label"));
        }
        if tokenize(text).is_empty() {
            return Err(bad("empty text"));
        }
        rows.push((text.to_string(), label.to_string()));
    }
    if rows.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    Ok(rows)
}

/// Loads `text<TAB>label` files. The vocabulary and label mapping come from
/// the train file only; unseen test tokens map to [`UNK_ID`].
pub fn load_tsv(train_path: &Path, test_path: Option<&Path>) -> Result<TextCorpus, DataError> {
    let rows = read_text_label_lines(train_path)?;
    let vocab = Vocab::build(rows.iter().map(|(t, _)| t.as_str()));
    let mut label_names: Vec<String> = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for (_, l) in &rows {
        if !label_ids.contains_key(l) {
            label_ids.insert(l.clone(), label_names.len());
            label_names.push(l.clone());
        }
    }
    let num_classes = label_names.len();
    let make = |rows: &[(String, String)], first_id: u64, split: SplitTag| -> Result<Dataset, DataError> {
        let mut examples = Vec::with_capacity(rows.len());
        for (i, (text, label)) in rows.iter().enumerate() {
            let y = *label_ids.get(label).ok_or_else(|| DataError::Malformed {
                line: i + 1,
                reason: format!("label {label:?} does not occur in the train file"),
            })?;
            examples.push(LabeledExample::clean(first_id + i as u64, vocab.encode(text), y));
        }
        Ok(Dataset { examples, num_classes, vocab_size: vocab.len(), split })
    };
    let train_split = if test_path.is_some() { SplitTag::Train } else { SplitTag::Unsplit };
    let train = make(&rows, 0, train_split)?;
    let test = match test_path {
        Some(p) => Some(make(&read_text_label_lines(p)?, rows.len() as u64, SplitTag::Test)?),
        None => None,
    };
    Ok(TextCorpus { train, test, vocab, label_names })
}

/// Knobs for [`synth_generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub n: usize,
    pub seq_len: usize,
    /// 0 gives pure own-class signal; larger values add distractors and
    /// cross-class signal tokens.
    pub difficulty: f64,
    pub signal_per_class: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            n: 6000,
            seq_len: 10,
            difficulty: 0.8,
            signal_per_class: 6,
            distractors: 200,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn vocab_size(&self) -> usize {
        RESERVED_IDS as usize + self.num_classes * self.signal_per_class + self.distractors
    }

    fn signal_token(&self, class: usize, k: usize) -> u32 {
        RESERVED_IDS + (class * self.signal_per_class + k) as u32
    }

    fn distractor_token(&self, k: usize) -> u32 {
        RESERVED_IDS + (self.num_classes * self.signal_per_class + k) as u32
    }
}

/// Generates a class-balanced corpus. Each sample plants 1–3 signal tokens of
/// its class; every other position is a distractor with probability
/// `difficulty`, otherwise a signal token that belongs to a random other class
/// with probability `difficulty / 2`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    let c = spec.num_classes;
    if c < 2 {
        return Err(DataError::InvalidSizes("need at least 2 classes".into()));
    }
    if spec.n < c * 10 {
        return Err(DataError::InvalidSizes(format!("n={} below 10 samples per class", spec.n)));
    }
    if spec.seq_len < 3 || spec.signal_per_class == 0 {
        return Err(DataError::InvalidSizes("seq_len must be ≥ 3 and signal_per_class ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.difficulty) {
        return Err(DataError::InvalidSizes(format!("difficulty {} outside [0,1]", spec.difficulty)));
    }
    if spec.difficulty > 0.0 && spec.distractors == 0 {
        return Err(DataError::InvalidSizes("difficulty > 0 needs distractor tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % c;
        let planted = rng.random_range(1..=3usize);
        let mut tokens = Vec::with_capacity(spec.seq_len);
        for _ in 0..planted {
            tokens.push(spec.signal_token(label, rng.random_range(0..spec.signal_per_class)));
        }
        while tokens.len() < spec.seq_len {
            let tok = if rng.random_bool(spec.difficulty) {
                spec.distractor_token(rng.random_range(0..spec.distractors))
            } else {
                let class = if rng.random_bool(spec.difficulty / 2.0) {
                    (label + rng.random_range(1..c)) % c
                } else {
                    label
                };
                spec.signal_token(class, rng.random_range(0..spec.signal_per_class))
            };
            tokens.push(tok);
        }
        tokens.shuffle(&mut rng);
        examples.push(LabeledExample::clean(i as u64, tokens, label));
    }
    Ok(Dataset {
        examples,
        num_classes: c,
        vocab_size: spec.vocab_size(),
        split: SplitTag::Unsplit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    /// Absent when the val fraction is exactly 0.
    pub val: Option<Dataset>,
    pub test: Dataset,
}

/// Shuffled, disjoint, covering split with cumulative rounding of sizes.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits, DataError> {
    let SplitFractions { train, val, test } = fractions;
    let total = train + val + test;
    if [train, val, test].iter().any(|f| *f < 0.0 || !f.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(total));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut1 = (train * n as f64).round() as usize;
    let cut2 = (((train + val) * n as f64).round() as usize).max(cut1).min(n);
    let take = |range: &[usize], tag: SplitTag| Dataset {
        examples: range.iter().map(|&i| dataset.examples[i].clone()).collect(),
        num_classes: dataset.num_classes,
        vocab_size: dataset.vocab_size,
        split: tag,
    };
    if cut1 == 0 {
        return Err(DataError::EmptySplit("train"));
    }
    if cut2 == n {
        return Err(DataError::EmptySplit("test"));
    }
    let val_ds = if val == 0.0 {
        None
    } else if cut2 == cut1 {
        return Err(DataError::EmptySplit("val"));
    } else {
        Some(take(&order[cut1..cut2], SplitTag::Val))
    };
    Ok(Splits {
        train: take(&order[..cut1], SplitTag::Train),
        val: val_ds,
        test: take(&order[cut2..], SplitTag::Test),
    })
}

/// Per-example class probabilities from some trained classifier.
pub trait ClassProbabilities {
    fn class_probabilities(&self, examples: &[LabeledExample]) -> Vec<Vec<f64>>;
}

/// Multinomial logistic regression over token counts.
#[derive(Clone, Debug)]
pub struct BagOfTokensProbe {
    weights: Vec<f64>,
    bias: Vec<f64>,
    vocab_size: usize,
    num_classes: usize,
}

impl BagOfTokensProbe {
    /// Full-batch gradient descent on the given labels.
    pub fn fit(train: &Dataset, epochs: usize, lr: f64) -> Self {
        let (v, c) = (train.vocab_size, train.num_classes);
        let mut probe = Self { weights: vec![0.0; v * c], bias: vec![0.0; c], vocab_size: v, num_classes: c };
        let n = train.len().max(1) as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; v * c];
            let mut gb = vec![0.0; c];
            for e in &train.examples {
                let mut p = probe.scores(&e.tokens);
                crate::autodiff::softmax_in_place(&mut p);
                p[e.given_label] -= 1.0;
                for &t in &e.tokens {
                    for k in 0..c {
                        gw[t as usize * c + k] += p[k];
                    }
                }
                for k in 0..c {
                    gb[k] += p[k];
                }
            }
            probe.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g / n);
            probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g / n);
        }
        probe
    }

    fn scores(&self, tokens: &[u32]) -> Vec<f64> {
        let c = self.num_classes;
        let mut s = self.bias.clone();
        for &t in tokens {
            let t = (t as usize).min(self.vocab_size - 1);
            for k in 0..c {
                s[k] += self.weights[t * c + k];
            }
        }
        s
    }

    pub fn predict(&self, tokens: &[u32]) -> usize {
        argmax(&self.scores(tokens))
    }

    /// Accuracy in [0,1] against the true labels.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data.examples.iter().filter(|e| self.predict(&e.tokens) == e.true_label).count();
        hits as f64 / data.len().max(1) as f64
    }
}

impl ClassProbabilities for BagOfTokensProbe {
    fn class_probabilities(&self, examples: &[LabeledExample]) -> Vec<Vec<f64>> {
        examples
            .iter()
            .map(|e| {
                let mut s = self.scores(&e.tokens);
                crate::autodiff::softmax_in_place(&mut s);
                s
            })
            .collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
