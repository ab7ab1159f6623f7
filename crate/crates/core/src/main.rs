use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gloss_core::attention::AttentionVariant;
use gloss_core::data::{generate_corpus, read_corpus, read_split, similarity_path, write_corpus, Split, SyntheticSpec, Vocab, SPEC_KEYS};
use gloss_core::harness::{self, HarnessError, TrainConfig};
use gloss_core::kv::{KvMap, KvWriter};
use gloss_core::metrics::SimilarityMatrix;
use gloss_core::model::{load_checkpoint, DecodeMode};

#[derive(Parser)]
#[command(name = "gloss", version, about = "Gloss-attention sequence translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// key=value generator spec; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write config.txt, log.txt, and best.ckpt.
    Train {
        /// key=value training and model settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a split and print metrics as key=value lines.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Also write the hypotheses, one `id<TAB>text` line each.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time single-head attention forward passes.
    Bench {
        /// Sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        t: Vec<usize>,
        /// Attended positions (gloss) or window width (sliding).
        #[arg(long, default_value_t = 7)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "gloss,self")]
        variant: Vec<BenchVariant>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the encoder attention maps of one sample as CSV files.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchVariant {
    Gloss,
    #[value(name = "self")]
    SelfAttention,
    Sliding,
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec, HarnessError> {
    let mut spec = SyntheticSpec::default();
    if let Some(p) = path {
        let map = KvMap::parse(&std::fs::read_to_string(p)?)?;
        map.check_known(SPEC_KEYS)?;
        spec.apply(&map)?;
    }
    Ok(spec)
}

fn load_similarity(dir: &Path, split: Split) -> Result<SimilarityMatrix, HarnessError> {
    Ok(SimilarityMatrix::load(&similarity_path(dir, split))?)
}

fn load_vocab(dir: &Path) -> Result<Vocab, HarnessError> {
    let text = std::fs::read_to_string(dir.join("vocab.txt"))?;
    Vocab::from_text(&text).map_err(HarnessError::Config)
}

fn check_split(dir: &Path, split: Split) -> Result<(), HarnessError> {
    if dir.join(split.name()).join("sentences.txt").is_file() {
        Ok(())
    } else {
        Err(HarnessError::NotFound(format!("split {split} not found in {}", dir.display())))
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut spec = load_spec(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            // generation validates, so an invalid spec never touches the disk
            let corpus = generate_corpus(&spec)?;
            write_corpus(&corpus, &out)?;
            println!(
                "train={} dev={} test={} vocab={}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                corpus.vocab.len()
            );
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if data.is_some() {
                cfg.data = data;
            }
            let dir = cfg
                .data
                .clone()
                .ok_or_else(|| HarnessError::Config("no corpus: pass --data or set data= in the config".into()))?;
            cfg.validate()?;
            let corpus = read_corpus(&dir)?;
            let (s_train, s_dev) = (load_similarity(&dir, Split::Train)?, load_similarity(&dir, Split::Dev)?);
            let outcome = harness::train(&cfg, &corpus, &s_train, &s_dev, Some(&out), |line| println!("{line}"))?;
            println!(
                "best_epoch={} best_dev_bleu4={}",
                outcome.best_epoch,
                outcome.best_dev.bleu4()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            beam,
            out,
        } => {
            check_split(&data, split)?;
            let model = load_checkpoint(&checkpoint)?;
            let vocab = load_vocab(&data)?;
            let samples = read_split(&data, split, &vocab)?;
            let sim = load_similarity(&data, split)?;
            let report = harness::evaluate(&model, &samples, &vocab, &sim, DecodeMode::from_width(beam))?;
            print!("{}", report.to_kv());
            if let Some(p) = out {
                let mut text = String::new();
                for (s, h) in samples.iter().zip(&report.hypotheses) {
                    text.push_str(&format!("{}\t{h}\n", s.id()));
                }
                std::fs::write(p, text)?;
            }
        }
        Command::Bench {
            t,
            n,
            d,
            variant,
            repeats,
            seed,
            out,
        } => {
            let mut rows = Vec::new();
            for v in variant {
                let v = match v {
                    BenchVariant::Gloss => AttentionVariant::Gloss { positions: n },
                    BenchVariant::SelfAttention => AttentionVariant::SelfAttention,
                    BenchVariant::Sliding => AttentionVariant::SlidingWindow { window: n },
                };
                for &len in &t {
                    rows.push(harness::bench_variant(v, len, d, repeats, seed)?);
                }
            }
            let csv = harness::bench_csv(&rows);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::DumpAttn {
            checkpoint,
            data,
            split,
            id,
            out,
        } => {
            check_split(&data, split)?;
            let model = load_checkpoint(&checkpoint)?;
            let vocab = load_vocab(&data)?;
            let samples = read_split(&data, split, &vocab)?;
            let sample = samples
                .iter()
                .find(|s| s.id() == id)
                .ok_or_else(|| HarnessError::NotFound(format!("sample {id:?} not in split {split}")))?;
            let files = harness::dump_attention(&model, sample, &out)?;
            println!("files={}", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut w = KvWriter::new();
            w.put("error", e.kind());
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{} message={msg}", w.finish().trim_end());
            ExitCode::FAILURE
        }
    }
}
