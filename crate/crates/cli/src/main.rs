use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geotok::encoder::checkpoint::Checkpoint;
use geotok::encoder::gradcheck::{gradcheck, toy_batch, GradCheckOptions};
use geotok::encoder::train::trace_to_jsonl;
use geotok::encoder::{EncoderConfig, Params};
use geotok::exec::Execution;
use geotok::grid::Backend;
use geotok::masking::{mask_stats, MaskStrategy};
use geotok::pipeline::config::RunConfig;
use geotok::pipeline::data::encoder_inputs;
use geotok::pipeline::ingest::{ingest_path, load_trajectories, write_trajectories};
use geotok::pipeline::run::{
    bank_inputs, comment_block, load_input, loss_transfer_trace, pretrain, pretrain_data, prepare, read_embeddings, read_tokens,
    read_v_max, resolve_v_max, run_pipeline, split_trajectories, transfer_csv, vocabulary_for, write_embeddings, write_tokens,
};
use geotok::pipeline::split::{Split, SplitStats};
use geotok::similarity::{build_bank, embed_all, evaluate, Pooling, RetrievalBank};
use geotok::synth::synth_city;
use geotok::tokenizer::Tokenizer;
use geotok::vocab::Vocabulary;

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; missing keys take built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `parallel` or `sequential`.
    #[arg(long, global = true)]
    execution: Option<Execution>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage with caching.
    Run {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
    },
    /// Generate the synthetic city as a trajectory store.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Parse a Porto-format CSV into a trajectory store.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        interval_s: Option<f64>,
    },
    /// Split proportions, plus one trajectory store per split.
    SplitStats {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build a vocabulary from the TRAIN split of the input.
    BuildVocab {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        backend: Option<Backend>,
        #[arg(long)]
        r_min: Option<u8>,
        #[arg(long)]
        r_max: Option<u8>,
        #[arg(long)]
        capacity: Option<u64>,
        #[arg(long)]
        target_cells: Option<usize>,
        #[arg(long)]
        fixed_resolution: Option<u8>,
    },
    /// Tokenize trajectories against a vocabulary.
    Tokenize {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        dedup: bool,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        v_max: Option<f64>,
    },
    /// Masking statistics over a token store.
    MaskStats {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        avg_span: Option<usize>,
        #[arg(long)]
        strategy: Option<MaskStrategy>,
    },
    /// Pretrain the encoder on a token store.
    Pretrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Defaults to `v_max.txt` beside the training tokens.
        #[arg(long)]
        v_max: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Finite-difference gradient check on a random toy batch.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Zero-shot embeddings for every sequence in a token store.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        v_max: Option<f64>,
        #[arg(long)]
        pooling: Option<Pooling>,
    },
    /// Retrieval bank with exact DTW from the TEST split of the input.
    Bank {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        n_corpus: Option<usize>,
    },
    /// Retrieval metrics of embeddings against a bank.
    EvalSim {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Held-out loss and zero-shot HR@10 every `interval` steps.
    Trace {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        interval: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Parser)]
#[command(name = "geotok", version, about = "Adaptive spatial tokens, masked trajectory pretraining, DTW retrieval evaluation")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn v_max_beside(tokens: &Path, given: Option<f64>) -> Result<f64> {
    match given {
        Some(v) => Ok(v),
        None => {
            let p = tokens.with_file_name("v_max.txt");
            read_v_max(&p).with_context(|| format!("no --v-max given and {} unreadable", p.display()))
        }
    }
}

fn main() -> Result<()> {
    let top = Top::parse();
    let c = top.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.execution, c.execution);
    let exec = cfg.execution;
    let out = c.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match top.command {
        Command::Run { input, trace } => {
            if input.is_some() {
                cfg.input = input;
            }
            cfg.trace.enabled |= trace;
            let summary = run_pipeline(&cfg, &out)?;
            print!("{}", summary.to_text());
            print!("{}", summary.metrics.to_text());
        }
        Command::Synth { n } => {
            set(&mut cfg.synth.n_trajectories, n);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let trajs = synth_city(&cfg.synth, exec)?;
            write_trajectories(out.join("trajectories.tsv"), &trajs, &echo)?;
            println!("trajectories={}", trajs.len());
        }
        Command::Ingest { input, interval_s } => {
            set(&mut cfg.ingest.interval_s, interval_s);
            cfg.input = Some(input.clone());
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let r = ingest_path(&input, &cfg.ingest)?;
            write_trajectories(out.join("trajectories.tsv"), &r.trajectories, &echo)?;
            write(&out.join("ingest_stats.txt"), comment_block(&echo) + &r.stats.to_text())?;
            let diags: String = r.diagnostics.iter().map(|d| format!("line {}: {}\n", d.line, d.message)).collect();
            write(&out.join("diagnostics.txt"), diags)?;
            print!("{}", r.stats.to_text());
        }
        Command::SplitStats { input } => {
            if input.is_some() {
                cfg.input = input;
            }
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let (trajs, _, _) = load_input(&cfg)?;
            let stats = SplitStats::from_ids(trajs.iter().map(|t| t.id.as_str()));
            for (split, part) in split_trajectories(trajs) {
                write_trajectories(out.join(format!("{}.tsv", split.to_string().to_lowercase())), &part, &echo)?;
            }
            write(&out.join("split_stats.txt"), comment_block(&echo) + &stats.to_text())?;
            print!("{}", stats.to_text());
        }
        Command::BuildVocab {
            input,
            backend,
            r_min,
            r_max,
            capacity,
            target_cells,
            fixed_resolution,
        } => {
            if input.is_some() {
                cfg.input = input;
            }
            set(&mut cfg.grid.backend, backend);
            set(&mut cfg.grid.r_min, r_min);
            set(&mut cfg.grid.r_max, r_max);
            set(&mut cfg.vocab.capacity, capacity);
            cfg.vocab.target_cells = target_cells.or(cfg.vocab.target_cells);
            cfg.vocab.fixed_resolution = fixed_resolution.or(cfg.vocab.fixed_resolution);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let (trajs, _, _) = load_input(&cfg)?;
            let train = split_trajectories(trajs).remove(&Split::Train).unwrap_or_default();
            let mut vocab = vocabulary_for(&cfg, &train)?;
            vocab.note = Some(echo);
            vocab.save(out.join("vocab.txt"))?;
            println!("cells={}\nvocab_size={}\ncapacity={}", vocab.num_cells(), vocab.size(), vocab.capacity);
        }
        Command::Tokenize {
            input,
            vocab,
            dedup,
            max_len,
            v_max,
        } => {
            if input.is_some() {
                cfg.input = input;
            }
            cfg.tokenize.dedup |= dedup;
            set(&mut cfg.tokenize.max_len, max_len);
            cfg.tokenize.v_max = v_max.or(cfg.tokenize.v_max);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let tok = Tokenizer::new(Vocabulary::load(&vocab)?)?;
            let (trajs, _, _) = load_input(&cfg)?;
            let train = split_trajectories(trajs.clone()).remove(&Split::Train).unwrap_or_default();
            let v = resolve_v_max(&cfg, &train)?;
            let seqs = tok.tokenize_all(&trajs, cfg.tokenize.options(), exec)?;
            write_tokens(&out.join("tokens.tsv"), &seqs, &echo)?;
            write(&out.join("v_max.txt"), comment_block(&echo) + &format!("v_max={v:?}\n"))?;
            println!("sequences={}\nv_max={v}", seqs.len());
        }
        Command::MaskStats {
            tokens,
            ratio,
            avg_span,
            strategy,
        } => {
            set(&mut cfg.mask.ratio, ratio);
            set(&mut cfg.mask.avg_span, avg_span);
            set(&mut cfg.mask.strategy, strategy);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let ids: Vec<Vec<u32>> = read_tokens(&tokens)?.iter().map(|s| s.ids()).collect();
            let stats = mask_stats(&ids, &cfg.mask_spec(), exec)?;
            write(&out.join("mask_stats.txt"), comment_block(&echo) + &stats.to_text())?;
            print!("{}", stats.to_text());
        }
        Command::Pretrain {
            train,
            val,
            vocab,
            v_max,
            steps,
            batch_size,
            lr,
        } => {
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.lr, lr);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let v = v_max_beside(&train, v_max)?;
            let vocab = Vocabulary::load(&vocab)?;
            let train_seqs = read_tokens(&train)?;
            let val_seqs = match &val {
                Some(p) => read_tokens(p)?,
                None => vec![],
            };
            let data = pretrain_data(&cfg, vocab.size(), &train_seqs, &val_seqs, v)?;
            let outcome = pretrain(&cfg, &data, |_, _| Ok(()))?;
            let tc = cfg.train_config();
            Checkpoint::new(data.cfg, outcome.params, tc.steps as u64, tc.seed, echo.clone()).save(out.join("checkpoint.bin"))?;
            write(&out.join("trace.jsonl"), trace_to_jsonl(&outcome.trace)?)?;
            let summary = format!("steps={}\nmasked_accuracy={:?}\n", tc.steps, outcome.final_accuracy);
            write(&out.join("pretrain.txt"), comment_block(&echo) + &summary)?;
            print!("{summary}");
        }
        Command::Gradcheck {
            vocab_size,
            len,
            batch,
            coords,
            eps,
            tolerance,
        } => {
            let enc = EncoderConfig::toy(vocab_size);
            enc.validate()?;
            let params = Params::init(&enc, cfg.seed);
            let examples = toy_batch(&enc, batch, len, &cfg.mask_spec(), cfg.seed)?;
            let opts = GradCheckOptions {
                coords_per_tensor: coords,
                eps,
                tolerance,
                seed: cfg.seed,
            };
            let report = gradcheck(&params, &enc, &examples, &cfg.loss, &opts, exec)?;
            write(&out.join("gradcheck.txt"), comment_block(&cfg.to_toml()?) + &report.to_text())?;
            println!("coords={}\nmax_rel_error={:e}\npassed={}", report.entries.len(), report.max_rel_error, report.passed());
            if !report.passed() {
                bail!("gradient check failed: max relative error {:e} > {:e}", report.max_rel_error, tolerance);
            }
        }
        Command::Embed {
            checkpoint,
            tokens,
            v_max,
            pooling,
        } => {
            set(&mut cfg.eval.pooling, pooling);
            let echo = cfg.to_toml()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let seqs = read_tokens(&tokens)?;
            let inputs = encoder_inputs(&seqs, v_max_beside(&tokens, v_max)?, ck.header.config.max_seq_len, exec)?;
            let emb = embed_all(&ck.params, &ck.header.config, &inputs, cfg.eval.pooling, exec)?;
            let ids: Vec<String> = seqs.iter().map(|s| s.id.clone()).collect();
            write_embeddings(&out.join("embeddings.tsv"), &ids, &emb, &echo)?;
            println!("embeddings={}", emb.len());
        }
        Command::Bank { input, n_queries, n_corpus } => {
            if input.is_some() {
                cfg.input = input;
            }
            set(&mut cfg.eval.n_queries, n_queries);
            set(&mut cfg.eval.n_corpus, n_corpus);
            cfg.validate()?;
            let trajs = match &cfg.input {
                Some(p) => load_trajectories(p, &cfg.ingest)?,
                None => synth_city(&cfg.synth, exec)?,
            };
            let test = split_trajectories(trajs).remove(&Split::Test).unwrap_or_default();
            let mut bank = build_bank(&test, cfg.eval.n_queries, cfg.eval.n_corpus, cfg.bank_seed(), exec)?;
            bank.note = Some(cfg.to_toml()?);
            bank.save(out.join("bank.txt"))?;
            println!("n_q={}\nn_c={}", bank.n_q(), bank.n_c());
        }
        Command::EvalSim { bank, embeddings } => {
            let echo = cfg.to_toml()?;
            let bank = RetrievalBank::load(&bank)?;
            let emb = read_embeddings(&embeddings)?;
            let get = |ids: &[String]| -> Result<Vec<Vec<f64>>> {
                ids.iter()
                    .map(|id| emb.get(id).cloned().with_context(|| format!("no embedding for {id}")))
                    .collect()
            };
            let m = evaluate(&bank, &get(&bank.query_ids)?, &get(&bank.corpus_ids)?, exec)?;
            write(&out.join("metrics.txt"), comment_block(&echo) + &m.to_text())?;
            write(&out.join("metrics.json"), m.to_json()?)?;
            print!("{}", m.to_text());
        }
        Command::Trace { input, interval, steps } => {
            if input.is_some() {
                cfg.input = input;
            }
            cfg.trace.enabled = true;
            set(&mut cfg.trace.interval, interval);
            set(&mut cfg.train.steps, steps);
            cfg.validate()?;
            let echo = cfg.to_toml()?;
            let p = prepare(&cfg)?;
            let data = pretrain_data(&cfg, p.vocab.size(), &p.train, &p.val, p.v_max)?;
            let bank = build_bank(&p.test_trajectories, cfg.trace.n_queries, cfg.trace.n_corpus, cfg.bank_seed(), exec)?;
            let bank_in = bank_inputs(&bank, &p.test, p.v_max, data.cfg.max_seq_len, exec)?;
            let rows = loss_transfer_trace(&cfg, &data, &bank, &bank_in)?;
            write(&out.join("loss_transfer.csv"), transfer_csv(&rows, &echo))?;
            println!("rows={}", rows.len());
        }
    }
    Ok(())
}
