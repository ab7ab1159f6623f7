use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{read_features, write_features, DataError, FeatureSequence, Vocab, PAD_ID};
use crate::kv::{KvError, KvMap, KvWriter};
use crate::metrics::SimilarityMatrix;
use crate::numerics::Tensor;

/// Parameters of a synthetic segmented-feature corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub glosses: usize,
    pub feature_dim: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub sentence_min: usize,
    pub sentence_max: usize,
    pub noise: f64,
    /// Move the last word of each sentence to the front.
    pub reorder: bool,
    /// Draw the glosses of a sentence without repetition.
    pub distinct_glosses: bool,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            glosses: 20,
            feature_dim: 32,
            segment_min: 8,
            segment_max: 20,
            sentence_min: 3,
            sentence_max: 6,
            noise: 0.5,
            reorder: true,
            distinct_glosses: false,
            train_size: 500,
            dev_size: 50,
            test_size: 50,
            seed: 42,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "glosses",
    "feature_dim",
    "segment_min",
    "segment_max",
    "sentence_min",
    "sentence_max",
    "noise",
    "reorder",
    "distinct_glosses",
    "train_size",
    "dev_size",
    "test_size",
    "seed",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.glosses == 0 || self.feature_dim == 0 {
            return err("glosses and feature_dim must be positive".into());
        }
        if self.segment_min < 1 || self.segment_min > self.segment_max {
            return err(format!("segment range [{}, {}] is invalid", self.segment_min, self.segment_max));
        }
        if self.sentence_min < 1 || self.sentence_min > self.sentence_max {
            return err(format!("sentence range [{}, {}] is invalid", self.sentence_min, self.sentence_max));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.distinct_glosses && self.glosses < self.sentence_max {
            return err(format!(
                "{} distinct glosses per sentence requested from a vocabulary of {}",
                self.sentence_max, self.glosses
            ));
        }
        Ok(())
    }

    pub fn apply(&mut self, map: &KvMap) -> Result<(), KvError> {
        map.read_into("glosses", &mut self.glosses)?;
        map.read_into("feature_dim", &mut self.feature_dim)?;
        map.read_into("segment_min", &mut self.segment_min)?;
        map.read_into("segment_max", &mut self.segment_max)?;
        map.read_into("sentence_min", &mut self.sentence_min)?;
        map.read_into("sentence_max", &mut self.sentence_max)?;
        map.read_into("noise", &mut self.noise)?;
        map.read_into("reorder", &mut self.reorder)?;
        map.read_into("distinct_glosses", &mut self.distinct_glosses)?;
        map.read_into("train_size", &mut self.train_size)?;
        map.read_into("dev_size", &mut self.dev_size)?;
        map.read_into("test_size", &mut self.test_size)?;
        map.read_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn write(&self, w: &mut KvWriter) {
        w.put("glosses", self.glosses)
            .put("feature_dim", self.feature_dim)
            .put("segment_min", self.segment_min)
            .put("segment_max", self.segment_max)
            .put("sentence_min", self.sentence_min)
            .put("sentence_max", self.sentence_max)
            .put("noise", self.noise)
            .put("reorder", self.reorder)
            .put("distinct_glosses", self.distinct_glosses)
            .put("train_size", self.train_size)
            .put("dev_size", self.dev_size)
            .put("test_size", self.test_size)
            .put("seed", self.seed);
    }

    /// Target word for gloss `g`.
    pub fn word(g: usize) -> String {
        format!("w{g:02}")
    }

    pub fn gloss_label(g: usize) -> String {
        format!("G{g:02}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One gloss occurrence: frames `start..start + len` render gloss `gloss`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub gloss: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldSegmentation {
    pub segments: Vec<Segment>,
}

impl GoldSegmentation {
    fn to_line(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{}:{}", SyntheticSpec::gloss_label(s.gloss), s.len))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn parse(line: &str) -> Result<Self, DataError> {
        let mut start = 0;
        let mut segments = Vec::new();
        for item in line.split_whitespace() {
            let bad = || DataError::Format(format!("bad segment {item:?}"));
            let (label, len) = item.split_once(':').ok_or_else(bad)?;
            let gloss = label.strip_prefix('G').and_then(|g| g.parse().ok()).ok_or_else(bad)?;
            let len: usize = len.parse().map_err(|_| bad())?;
            segments.push(Segment { gloss, start, len });
            start += len;
        }
        Ok(Self { segments })
    }
}

/// A clip, its target sentence, and (for generated data) the hidden gold
/// segmentation. Model and training code only see features and tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    id: String,
    features: FeatureSequence,
    sentence: String,
    tokens: Vec<usize>,
    segmentation: Option<GoldSegmentation>,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: FeatureSequence, sentence: impl Into<String>, vocab: &Vocab) -> Self {
        let sentence = sentence.into();
        Self {
            id: id.into(),
            tokens: vocab.encode(&sentence),
            features,
            sentence,
            segmentation: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn features(&self) -> &FeatureSequence {
        &self.features
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }

    /// Gold gloss segmentation, for analysis tooling only.
    #[cfg(feature = "analysis")]
    pub fn gold_segmentation(&self) -> Option<&GoldSegmentation> {
        self.segmentation.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn similarity(&self, split: Split) -> Result<SimilarityMatrix, DataError> {
        let samples = self.split(split);
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let sentences: Vec<&str> = samples.iter().map(|s| s.sentence.as_str()).collect();
        compute_similarity_oracle(ids, &sentences)
    }
}

/// Generates train, dev, and test samples. Each gloss has a fixed standard
/// normal prototype; a sample renders its gloss sentence as consecutive
/// segments of noisy prototype frames. The target sentence is the gloss
/// words, with the last word moved to the front when `reorder` is set.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.glosses)
        .map(|_| (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let vocab = Vocab::from_words((0..spec.glosses).map(SyntheticSpec::word).collect::<Vec<_>>().iter().map(String::as_str));
    let mut make = |split: Split, n: usize| -> Result<Vec<Sample>, DataError> {
        (0..n)
            .map(|i| {
                let m = rng.random_range(spec.sentence_min..=spec.sentence_max);
                let glosses: Vec<usize> = if spec.distinct_glosses {
                    sample_indices(&mut rng, spec.glosses, m).into_vec()
                } else {
                    (0..m).map(|_| rng.random_range(0..spec.glosses)).collect()
                };
                let mut values = Vec::new();
                let mut segments = Vec::with_capacity(m);
                let mut start = 0;
                for &g in &glosses {
                    let len = rng.random_range(spec.segment_min..=spec.segment_max);
                    for _ in 0..len {
                        for &mu in &prototypes[g] {
                            let eps: f64 = rng.sample(StandardNormal);
                            values.push((mu + spec.noise * eps) as f32);
                        }
                    }
                    segments.push(Segment { gloss: g, start, len });
                    start += len;
                }
                let mut words: Vec<String> = glosses.iter().map(|&g| SyntheticSpec::word(g)).collect();
                if spec.reorder {
                    words.rotate_right(1);
                }
                let features = FeatureSequence::new(start, spec.feature_dim, values)?;
                let mut s = Sample::new(format!("{}-{i:04}", split.name()), features, words.join(" "), &vocab);
                s.segmentation = Some(GoldSegmentation { segments });
                Ok(s)
            })
            .collect()
    };
    let train = make(Split::Train, spec.train_size)?;
    let dev = make(Split::Dev, spec.dev_size)?;
    let test = make(Split::Test, spec.test_size)?;
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        train,
        dev,
        test,
    })
}

/// Cosine similarity of term-frequency vectors. An empty sentence counts
/// as a single unknown token.
pub fn compute_similarity_oracle(ids: Vec<String>, sentences: &[&str]) -> Result<SimilarityMatrix, DataError> {
    let n = sentences.len();
    if n < 2 || ids.len() != n {
        return Err(DataError::Config(format!(
            "similarity needs at least two sentences with ids ({} sentences, {} ids)",
            n,
            ids.len()
        )));
    }
    let bags: Vec<HashMap<&str, f64>> = sentences
        .iter()
        .map(|s| {
            let mut bag = HashMap::new();
            for w in s.split_whitespace() {
                *bag.entry(w).or_insert(0.0) += 1.0;
            }
            if bag.is_empty() {
                bag.insert("<unk>", 1.0);
            }
            bag
        })
        .collect();
    let sq: Vec<f64> = bags.iter().map(|b| b.values().map(|c| c * c).sum::<f64>()).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = bags[i]
                .iter()
                .map(|(w, c)| c * bags[j].get(w).copied().unwrap_or(0.0))
                .sum();
            let c = (dot / (sq[i] * sq[j]).sqrt()).min(1.0);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    SimilarityMatrix::new(ids, values).map_err(|e| DataError::Format(e.to_string()))
}

/// Right-padded batch. Feature tensors are `T_max x D`, token rows are
/// padded with `PAD_ID`; masks mark real positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub features: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub token_masks: Vec<Vec<bool>>,
    pub token_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded features of sample `i`.
    pub fn clip(&self, i: usize) -> Tensor {
        let f = &self.features[i];
        let d = f.cols();
        Tensor::matrix(self.lengths[i], d, f.data()[..self.lengths[i] * d].to_vec())
    }

    /// Unpadded tokens of sample `i`.
    pub fn target(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.token_lengths[i]]
    }
}

/// Consecutive batches of at most `batch_size` samples, in input order.
pub fn batch_and_mask(samples: &[&Sample], batch_size: usize) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let t_max = chunk.iter().map(|s| s.frames()).max().unwrap_or(0);
            let m_max = chunk.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
            let mut b = Batch {
                ids: Vec::new(),
                features: Vec::new(),
                masks: Vec::new(),
                lengths: Vec::new(),
                tokens: Vec::new(),
                token_masks: Vec::new(),
                token_lengths: Vec::new(),
            };
            for s in chunk {
                let (t, d) = (s.frames(), s.features.dim());
                let mut data: Vec<f64> = s.features.values().iter().map(|&v| v as f64).collect();
                data.resize(t_max * d, 0.0);
                b.ids.push(s.id.clone());
                b.features.push(Tensor::matrix(t_max, d, data));
                b.masks.push((0..t_max).map(|i| i < t).collect());
                b.lengths.push(t);
                let m = s.tokens.len();
                let mut toks = s.tokens.clone();
                toks.resize(m_max, PAD_ID);
                b.tokens.push(toks);
                b.token_masks.push((0..m_max).map(|i| i < m).collect());
                b.token_lengths.push(m);
            }
            b
        })
        .collect()
}

// On-disk layout:
//   manifest.txt                 generator parameters as key=value lines
//   vocab.txt                    one token per line, in id order
//   {split}/sentences.txt        `id<TAB>sentence`
//   {split}/glosses.txt          `id<TAB>G03:12 G07:9 ...` (gold segmentation)
//   {split}/features/{id}.gasl   feature file
//   {split}/similarity.csv       bag-of-words similarity matrix

pub fn similarity_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.name()).join("similarity.csv")
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut w = KvWriter::new();
    corpus.spec.write(&mut w);
    std::fs::write(dir.join("manifest.txt"), w.finish())?;
    std::fs::write(dir.join("vocab.txt"), corpus.vocab.to_text())?;
    for split in Split::ALL {
        let samples = corpus.split(split);
        let sdir = dir.join(split.name());
        std::fs::create_dir_all(sdir.join("features"))?;
        let mut sentences = String::new();
        let mut glosses = String::new();
        for s in samples {
            write_features(&sdir.join("features").join(format!("{}.gasl", s.id)), &s.features)?;
            sentences.push_str(&format!("{}\t{}\n", s.id, s.sentence));
            if let Some(seg) = &s.segmentation {
                glosses.push_str(&format!("{}\t{}\n", s.id, seg.to_line()));
            }
        }
        std::fs::write(sdir.join("sentences.txt"), sentences)?;
        std::fs::write(sdir.join("glosses.txt"), glosses)?;
        if samples.len() >= 2 {
            corpus
                .similarity(split)?
                .save(&similarity_path(dir, split))
                .map_err(|e| DataError::Format(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn read_split(dir: &Path, split: Split, vocab: &Vocab) -> Result<Vec<Sample>, DataError> {
    let sdir = dir.join(split.name());
    let text = std::fs::read_to_string(sdir.join("sentences.txt"))?;
    let mut segs = HashMap::new();
    if let Ok(g) = std::fs::read_to_string(sdir.join("glosses.txt")) {
        for line in g.lines() {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| DataError::Format(format!("bad segmentation line {line:?}")))?;
            segs.insert(id.to_string(), GoldSegmentation::parse(rest)?);
        }
    }
    text.lines()
        .map(|line| {
            let (id, sentence) = line
                .split_once('\t')
                .ok_or_else(|| DataError::Format(format!("bad sentence line {line:?}")))?;
            let features = read_features(&sdir.join("features").join(format!("{id}.gasl")))?;
            let mut s = Sample::new(id, features, sentence, vocab);
            s.segmentation = segs.remove(id);
            Ok(s)
        })
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let map = KvMap::parse(&manifest).map_err(|e| DataError::Format(e.to_string()))?;
    map.check_known(SPEC_KEYS).map_err(|e| DataError::Format(e.to_string()))?;
    let mut spec = SyntheticSpec::default();
    spec.apply(&map).map_err(|e| DataError::Format(e.to_string()))?;
    let vocab = Vocab::from_text(&std::fs::read_to_string(dir.join("vocab.txt"))?).map_err(DataError::Format)?;
    let train = read_split(dir, Split::Train, &vocab)?;
    let dev = read_split(dir, Split::Dev, &vocab)?;
    let test = read_split(dir, Split::Test, &vocab)?;
    Ok(Corpus {
        spec,
        vocab,
        train,
        dev,
        test,
    })
}
