use super::HarnessError;
use crate::data::{Sample, Vocab};
use crate::kv::KvWriter;
use crate::metrics::{asd, bleu, corpus_rouge_l, embedding_similarity, mean_cad, SimilarityMatrix};
use crate::model::{DecodeMode, Translator};
use crate::numerics::Tensor;

pub const ROUGE_BETA: f64 = 1.2;
pub const CAD_DELTA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// BLEU-1 through BLEU-4.
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    /// Average similarity difference between the encoder's sentence
    /// embeddings and the reference similarity matrix.
    pub asd: f64,
    /// Mean encoder attention diagonality over samples, layers, and heads.
    pub cad: f64,
    pub hypotheses: Vec<String>,
}

impl EvalReport {
    pub fn bleu4(&self) -> f64 {
        self.bleu[3]
    }

    pub fn write(&self, w: &mut KvWriter, prefix: &str) {
        for (i, b) in self.bleu.iter().enumerate() {
            w.put(&format!("{prefix}bleu{}", i + 1), b);
        }
        w.put(&format!("{prefix}rouge_l"), self.rouge_l)
            .put(&format!("{prefix}asd"), self.asd)
            .put(&format!("{prefix}cad"), self.cad);
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.put("samples", self.samples);
        self.write(&mut w, "");
        w.finish()
    }
}

/// Decodes every sample and scores the result. `similarity` must cover the
/// sample ids.
pub fn evaluate(
    model: &Translator,
    samples: &[Sample],
    vocab: &Vocab,
    similarity: &SimilarityMatrix,
    mode: DecodeMode,
) -> Result<EvalReport, HarnessError> {
    if samples.len() < 2 {
        return Err(HarnessError::Config("evaluation needs at least two samples".into()));
    }
    let d = model.config().d_model;
    let mut embeddings = Vec::with_capacity(samples.len() * d);
    let mut cad_total = 0.0;
    let mut hypotheses = Vec::with_capacity(samples.len());
    for s in samples {
        let clip = s.features().to_tensor();
        let enc = model.encode(&clip, &vec![true; clip.rows()])?;
        embeddings.extend_from_slice(&enc.embedding);
        cad_total += mean_cad(&enc.maps, CAD_DELTA);
        let out = model.translate(&clip, mode)?;
        hypotheses.push(vocab.decode(&out));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
    let s_hat = embedding_similarity(&Tensor::matrix(samples.len(), d, embeddings), ids.clone())?;
    let s_ref = similarity.select(&ids)?;
    let hyps: Vec<&str> = hypotheses.iter().map(String::as_str).collect();
    let refs: Vec<&str> = samples.iter().map(Sample::sentence).collect();
    Ok(EvalReport {
        samples: samples.len(),
        bleu: bleu(&hyps, &refs, 4)?,
        rouge_l: corpus_rouge_l(&hyps, &refs, ROUGE_BETA)?,
        asd: asd(&s_hat, &s_ref)?,
        cad: cad_total / samples.len() as f64,
        hypotheses,
    })
}
