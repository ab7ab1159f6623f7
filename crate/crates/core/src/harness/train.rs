use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, Adam, EvalReport, HarnessError, Plateau, TrainConfig};
use crate::data::{batch_and_mask, Batch, Corpus, Sample, BOS_ID, EOS_ID, PAD_ID};
use crate::kv::KvWriter;
use crate::metrics::SimilarityMatrix;
use crate::model::{save_checkpoint, DecodeMode, ModelConfig, NormStats, ParamId, Translator};
use crate::numerics::{Tensor, Var};
use crate::objectives::{kt_loss_batch, label_smoothed_ce, LossReport};

/// Best model and the per-epoch log of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Translator,
    pub config: TrainConfig,
    pub log: Vec<String>,
    pub best_epoch: usize,
    pub best_dev: EvalReport,
    /// Mean training losses per completed epoch.
    pub losses: Vec<LossReport>,
}

/// Fills vocabulary size and input width from the corpus when unset (zero)
/// and rejects explicit values that disagree with it.
pub fn resolve_model_config(model: &ModelConfig, corpus: &Corpus) -> Result<ModelConfig, HarnessError> {
    let mut m = model.clone();
    let (vocab, dim) = (corpus.vocab.len(), corpus.spec.feature_dim);
    for (name, slot, actual) in [("vocab_size", &mut m.vocab_size, vocab), ("input_dim", &mut m.input_dim, dim)] {
        if *slot == 0 {
            *slot = actual;
        } else if *slot != actual {
            return Err(HarnessError::Config(format!("{name} {} does not match the corpus ({actual})", *slot)));
        }
    }
    m.validate().map_err(HarnessError::Config)?;
    Ok(m)
}

type StepResult = (Vec<(ParamId, Tensor)>, NormStats, LossReport);

struct Step<'a> {
    config: &'a TrainConfig,
    similarity: &'a SimilarityMatrix,
    index: &'a HashMap<&'a str, usize>,
}

impl Step<'_> {
    /// Forward and backward pass over one batch; returns parameter gradients,
    /// the updated batch-norm statistics, and the batch losses.
    fn run(
        &self,
        model: &Translator,
        batch: &Batch,
        dropout_seed: u64,
    ) -> Result<StepResult, HarnessError> {
        let mut s = model.session(true, dropout_seed);
        let clips: Vec<Tensor> = (0..batch.len()).map(|i| batch.clip(i)).collect();
        let clip_refs: Vec<&Tensor> = clips.iter().collect();
        let video = s.embed_videos(&clip_refs)?;
        let mut dec_in = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for i in 0..batch.len() {
            let y = batch.target(i);
            let mut input = vec![BOS_ID];
            input.extend_from_slice(y);
            dec_in.push(input);
            targets.extend_from_slice(y);
            targets.push(EOS_ID);
        }
        let dec_refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let text = s.embed_texts(&dec_refs)?;
        let mut logits = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let enc = s.encode(video[i], &vec![true; batch.lengths[i]])?;
            embeddings.push(enc.embedding);
            logits.push(s.decode(enc.hidden, &enc.valid, text[i])?);
        }
        let all = s.graph.concat_rows(&logits).map_err(crate::model::ModelError::from)?;
        let (ce, tokens) = label_smoothed_ce(&mut s.graph, all, &targets, self.config.label_smoothing, Some(PAD_ID))?;
        let lambda = self.config.lambda_kt;
        let (loss, kt): (Var, f64) = if lambda > 0.0 {
            let idx: Vec<usize> = batch.ids.iter().map(|id| self.index[id.as_str()]).collect();
            let sub: Vec<f64> = idx
                .iter()
                .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.similarity.get(i, j))
                .collect();
            let kt = kt_loss_batch(&mut s.graph, &embeddings, &sub)?;
            let scaled = s.graph.scale(kt, lambda);
            let total = s.graph.add(ce, scaled).map_err(crate::model::ModelError::from)?;
            (total, s.graph.value(kt).item())
        } else {
            (ce, 0.0)
        };
        let translation = s.graph.value(ce).item();
        let grads = s.graph.backward(loss).map_err(crate::model::ModelError::from)?;
        let pairs = s
            .bound_params()
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g)))
            .collect();
        Ok((pairs, s.norms, LossReport::new(translation, kt, lambda, tokens)))
    }
}

fn shuffled<'a>(samples: &'a [Sample], rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.shuffle(rng);
    order
}

fn mean_report(reports: &[LossReport], lambda: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let translation = reports.iter().map(|r| r.translation).sum::<f64>() / n;
    let kt = reports.iter().map(|r| r.kt).sum::<f64>() / n;
    LossReport::new(translation, kt, lambda, reports.iter().map(|r| r.tokens).sum())
}

/// Trains on `corpus.train`, evaluating on `corpus.dev` after every epoch.
/// The rate is halved on dev BLEU-4 plateaus and training stops early once it
/// drops below `min_learning_rate`. With `out` set, the resolved config,
/// the epoch log, and the best checkpoint are written there.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    train_similarity: &SimilarityMatrix,
    dev_similarity: &SimilarityMatrix,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&str),
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let mut config = config.clone();
    config.model = resolve_model_config(&config.model, corpus)?;
    if corpus.train.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let index: HashMap<&str, usize> = train_similarity
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if let Some(s) = corpus.train.iter().find(|s| !index.contains_key(s.id())) {
        return Err(HarnessError::Config(format!("no similarity row for sample {:?}", s.id())));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), config.to_kv())?;
    }

    let mut model = Translator::new(config.model.clone(), config.seed)?;
    let mut opt = Adam::new(
        &model.params,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
        config.weight_decay,
    );
    let mut scheduler = Plateau::new(config.patience, config.decay_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let step = Step {
        config: &config,
        similarity: train_similarity,
        index: &index,
    };
    let mut log = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(usize, EvalReport, Translator)> = None;

    for epoch in 1..=config.epochs {
        let lr = opt.lr;
        let order = shuffled(&corpus.train, &mut rng);
        let mut reports = Vec::new();
        for batch in batch_and_mask(&order, config.batch_size) {
            let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(opt.steps());
            let (grads, norms, report) = step.run(&model, &batch, seed)?;
            opt.step(&mut model.params, &grads);
            model.norms = norms;
            reports.push(report);
        }
        let epoch_loss = mean_report(&reports, config.lambda_kt);
        losses.push(epoch_loss);
        let dev = evaluate(&model, &corpus.dev, &corpus.vocab, dev_similarity, DecodeMode::from_width(config.model.beam))?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| dev.bleu4() > b.bleu4());
        let mut w = KvWriter::new();
        w.put("epoch", epoch)
            .put("lr", lr)
            .put("train_translation", epoch_loss.translation)
            .put("train_kt", epoch_loss.kt)
            .put("train_total", epoch_loss.total);
        dev.write(&mut w, "dev_");
        w.put("best", u8::from(improved));
        let line = w.finish().trim_end().replace('\n', " ");
        on_epoch(&line);
        log.push(line);
        if improved {
            if let Some(dir) = out {
                save_checkpoint(&model, &dir.join("best.ckpt"))?;
            }
            best = Some((epoch, dev.clone(), model.clone()));
        }
        opt.lr = scheduler.observe(dev.bleu4(), opt.lr);
        if let Some(dir) = out {
            std::fs::write(dir.join("log.txt"), log.join("\n") + "\n")?;
        }
        if opt.lr < config.min_learning_rate {
            break;
        }
    }
    let (best_epoch, best_dev, model) = match best {
        Some(b) => b,
        None => {
            let dev = evaluate(&model, &corpus.dev, &corpus.vocab, dev_similarity, DecodeMode::Greedy)?;
            (0, dev, model)
        }
    };
    Ok(TrainOutcome {
        model,
        config,
        log,
        best_epoch,
        best_dev,
        losses,
    })
}

/// Mean training losses of one epoch over `samples` at the model's current
/// parameters, without updating them.
pub fn train_epoch_losses(
    model: &Translator,
    config: &TrainConfig,
    samples: &[Sample],
    similarity: &SimilarityMatrix,
) -> Result<LossReport, HarnessError> {
    let index: HashMap<&str, usize> = similarity.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let step = Step {
        config,
        similarity,
        index: &index,
    };
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut reports = Vec::new();
    for batch in batch_and_mask(&refs, config.batch_size) {
        reports.push(step.run(model, &batch, 0)?.2);
    }
    Ok(mean_report(&reports, config.lambda_kt))
}
