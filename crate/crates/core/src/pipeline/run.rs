//! Staged experiment driver.
//!
//! Each stage lives in `<out>/<stage>-<key>` where the key hashes the
//! stage name, the configuration subset it reads and the keys of the
//! stages it consumes. Stages are deterministic, so an upstream key stands
//! in for the digest of that stage's outputs. A directory containing a
//! `.complete` marker is reused as-is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::data::{all_points, capacity_for_cells, encoder_inputs};
use super::ingest::{ingest_path, read_trajectories, write_trajectories, IngestStats};
use super::split::{split_of, Split, SplitStats};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::grad::LossBreakdown;
use crate::encoder::train::{eval_examples, eval_loss, majority_baseline, train, trace_to_jsonl, TrainOutcome};
use crate::encoder::{EncoderConfig, EncoderInput, Example, Params};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::Trajectory;
use crate::masking::mask_stats;
use crate::similarity::{build_bank, embed_all, evaluate, MetricsReport, Pooling, RetrievalBank};
use crate::synth::synth_city;
use crate::tokenizer::{export_line, parse_export_line, segment_speed_quantile, TokenSequence, Tokenizer};
use crate::vocab::{build_vocabulary, fixed_resolution_vocabulary, sha256_hex, Vocabulary};

const MARKER: &str = ".complete";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub name: &'static str,
    pub key: String,
    pub dir: PathBuf,
    pub rebuilt: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageReport>,
    pub metrics: MetricsReport,
}

impl RunSummary {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for st in &self.stages {
            let status = if st.rebuilt { "built" } else { "up-to-date" };
            s.push_str(&format!("{}\t{}\t{}\n", st.name, status, st.dir.display()));
        }
        s
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `text` with every line prefixed by `# `.
pub fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

struct Runner<'a> {
    out: &'a Path,
    reports: Vec<StageReport>,
}

impl Runner<'_> {
    fn stage<K, F>(&mut self, name: &'static str, material: &K, upstream: &[&str], build: F) -> Result<(String, PathBuf)>
    where
        K: Serialize,
        F: FnOnce(&Path) -> Result<()>,
    {
        let wrap = |e| Error::stage(name, e);
        let mut key_src = format!("{name}\n{}\n", serde_json::to_string(material).map_err(|e| wrap(e.into()))?);
        for u in upstream {
            key_src.push_str(u);
            key_src.push('\n');
        }
        let key = sha256_hex(key_src.as_bytes());
        let dir = self.out.join(format!("{name}-{}", &key[..16]));
        let rebuilt = !dir.join(MARKER).exists();
        if rebuilt {
            let tmp = self.out.join(format!(".{name}-{}.tmp", &key[..16]));
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp).map_err(|e| wrap(Error::io(&tmp, e)))?;
            }
            std::fs::create_dir_all(&tmp).map_err(|e| wrap(Error::io(&tmp, e)))?;
            build(&tmp).map_err(wrap)?;
            write(&tmp.join(MARKER), format!("{key}\n")).map_err(wrap)?;
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
            }
            std::fs::rename(&tmp, &dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        }
        self.reports.push(StageReport {
            name,
            key: key.clone(),
            dir: dir.clone(),
            rebuilt,
        });
        Ok((key, dir))
    }
}

/// Loads the configured input, or generates the synthetic city.
pub fn load_input(cfg: &RunConfig) -> Result<(Vec<Trajectory>, Option<IngestStats>, Vec<String>)> {
    match &cfg.input {
        Some(path) if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
            let r = ingest_path(path, &cfg.ingest)?;
            let diags = r.diagnostics.iter().map(|d| format!("line {}: {}", d.line, d.message)).collect();
            Ok((r.trajectories, Some(r.stats), diags))
        }
        Some(path) => Ok((read_trajectories(path)?, None, vec![])),
        None => Ok((synth_city(&cfg.synth, cfg.execution)?, None, vec![])),
    }
}

pub fn split_trajectories(trajs: Vec<Trajectory>) -> BTreeMap<Split, Vec<Trajectory>> {
    let mut out: BTreeMap<Split, Vec<Trajectory>> = [Split::Train, Split::Val, Split::Test].into_iter().map(|s| (s, vec![])).collect();
    for t in trajs {
        out.get_mut(&split_of(&t.id)).expect("all splits present").push(t);
    }
    out
}

/// Vocabulary per the `[grid]` and `[vocab]` sections, from training points.
pub fn vocabulary_for(cfg: &RunConfig, train: &[Trajectory]) -> Result<Vocabulary> {
    let points = all_points(train);
    if points.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let grid = cfg.grid.grid_config();
    match (cfg.vocab.fixed_resolution, cfg.vocab.target_cells) {
        (Some(r), _) => fixed_resolution_vocabulary(&points, grid.bbox, grid.backend, r),
        (None, Some(target)) => Ok(capacity_for_cells(&points, &grid, target, cfg.execution)?.1),
        (None, None) => build_vocabulary(&points, &grid, cfg.vocab.capacity, cfg.execution),
    }
}

pub fn write_tokens(path: &Path, seqs: &[TokenSequence], echo: &str) -> Result<()> {
    let mut s = comment_block(echo);
    for q in seqs {
        s.push_str(&export_line(q));
        s.push('\n');
    }
    write(path, s)
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenSequence>> {
    read(path)?
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_export_line)
        .collect()
}

fn key_value_lines(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn read_v_max(path: &Path) -> Result<f64> {
    key_value_lines(&read(path)?)
        .get("v_max")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Malformed(format!("{}: no v_max", path.display())))
}

/// Inputs and fixed-mask held-out examples for pretraining.
pub struct PretrainData {
    pub cfg: EncoderConfig,
    pub train: Vec<EncoderInput>,
    pub eval: Vec<Example>,
}

pub fn pretrain_data(cfg: &RunConfig, vocab_size: usize, train_seqs: &[TokenSequence], val_seqs: &[TokenSequence], v_max: f64) -> Result<PretrainData> {
    let enc = cfg.encoder.config(vocab_size);
    enc.validate()?;
    let limit = cfg.train.train_limit.unwrap_or(usize::MAX).min(train_seqs.len());
    let train = encoder_inputs(&train_seqs[..limit], v_max, enc.max_seq_len, cfg.execution)?;
    let n_eval = cfg.train.eval_size.min(val_seqs.len());
    let val = encoder_inputs(&val_seqs[..n_eval], v_max, enc.max_seq_len, cfg.execution)?;
    let eval = eval_examples(&val, &cfg.mask_spec())?;
    Ok(PretrainData { cfg: enc, train, eval })
}

pub fn pretrain(cfg: &RunConfig, data: &PretrainData, mut on_step: impl FnMut(usize, &Params) -> Result<()>) -> Result<TrainOutcome> {
    let tc = cfg.train_config();
    let init = Params::init(&data.cfg, tc.seed);
    train(init, &data.cfg, &data.train, &data.eval, &cfg.mask_spec(), &cfg.loss, &tc, cfg.execution, |step, p, _| on_step(step, p))
}

/// Encoder inputs for the bank's queries and corpus, looked up by id.
pub fn bank_inputs(bank: &RetrievalBank, seqs: &[TokenSequence], v_max: f64, max_len: usize, exec: Execution) -> Result<(Vec<EncoderInput>, Vec<EncoderInput>)> {
    let by_id: BTreeMap<&str, &TokenSequence> = seqs.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Result<Vec<EncoderInput>> {
        let chosen = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Malformed(format!("bank id {id} has no token sequence")))
            })
            .collect::<Result<Vec<_>>>()?;
        encoder_inputs(&chosen, v_max, max_len, exec)
    };
    Ok((pick(&bank.query_ids)?, pick(&bank.corpus_ids)?))
}

pub fn evaluate_params(
    params: &Params,
    enc: &EncoderConfig,
    bank: &RetrievalBank,
    inputs: &(Vec<EncoderInput>, Vec<EncoderInput>),
    pooling: Pooling,
    exec: Execution,
) -> Result<MetricsReport> {
    let q = embed_all(params, enc, &inputs.0, pooling, exec)?;
    let c = embed_all(params, enc, &inputs.1, pooling, exec)?;
    evaluate(bank, &q, &c, exec)
}

pub fn write_embeddings(path: &Path, ids: &[String], emb: &[Vec<f64>], echo: &str) -> Result<()> {
    let mut s = comment_block(echo);
    for (id, e) in ids.iter().zip(emb) {
        let vals: Vec<String> = e.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&format!("{id}\t{}\n", vals.join("\t")));
    }
    write(path, s)
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for line in read(path)?.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split('\t');
        let id = it.next().unwrap_or_default().to_string();
        let v = it
            .map(|x| x.parse::<f64>().map_err(|_| Error::Malformed(format!("embedding line for {id}"))))
            .collect::<Result<Vec<_>>>()?;
        out.insert(id, v);
    }
    Ok(out)
}

/// One row of the loss-versus-transfer trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferRow {
    pub step: usize,
    pub val_loss: f64,
    pub hr10: f64,
}

pub fn transfer_csv(rows: &[TransferRow], echo: &str) -> String {
    let mut s = comment_block(echo);
    s.push_str("step,val_loss,hr10\n");
    for r in rows {
        s.push_str(&format!("{},{:?},{:?}\n", r.step, r.val_loss, r.hr10));
    }
    s
}

/// Trains per the run config and, every `trace.interval` steps, records
/// held-out joint loss and zero-shot HR@10 on a small bank.
pub fn loss_transfer_trace(
    cfg: &RunConfig,
    data: &PretrainData,
    bank: &RetrievalBank,
    bank_in: &(Vec<EncoderInput>, Vec<EncoderInput>),
) -> Result<Vec<TransferRow>> {
    if data.eval.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let interval = cfg.trace.interval.max(1);
    let mut rows = Vec::new();
    pretrain(cfg, data, |step, p| {
        if step % interval == 0 {
            let LossBreakdown { joint, .. } = eval_loss(p, &data.cfg, &data.eval, &cfg.loss, cfg.execution)?;
            let m = evaluate_params(p, &data.cfg, bank, bank_in, cfg.eval.pooling, cfg.execution)?;
            rows.push(TransferRow {
                step,
                val_loss: joint,
                hr10: m.hr10,
            });
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Everything up to tokenization, computed in memory.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub v_max: f64,
    pub train: Vec<TokenSequence>,
    pub val: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub test_trajectories: Vec<Trajectory>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (trajs, _, _) = load_input(cfg)?;
    let mut parts = split_trajectories(trajs);
    let train_t = parts.remove(&Split::Train).unwrap_or_default();
    let val_t = parts.remove(&Split::Val).unwrap_or_default();
    let test_t = parts.remove(&Split::Test).unwrap_or_default();
    let vocab = vocabulary_for(cfg, &train_t)?;
    let v_max = resolve_v_max(cfg, &train_t)?;
    let tok = Tokenizer::new(vocab.clone())?;
    let opts = cfg.tokenize.options();
    Ok(Prepared {
        train: tok.tokenize_all(&train_t, opts, cfg.execution)?,
        val: tok.tokenize_all(&val_t, opts, cfg.execution)?,
        test: tok.tokenize_all(&test_t, opts, cfg.execution)?,
        vocab,
        v_max,
        test_trajectories: test_t,
    })
}

/// `tokenize.v_max`, or the configured quantile of training segment speeds.
pub fn resolve_v_max(cfg: &RunConfig, train: &[Trajectory]) -> Result<f64> {
    match cfg.tokenize.v_max {
        Some(v) => Ok(v),
        None => segment_speed_quantile(train, cfg.tokenize.v_max_quantile)
            .filter(|v| *v > 0.0)
            .ok_or(Error::InsufficientData { needed: 1, available: 0 }),
    }
}

#[derive(Serialize)]
struct IngestKey<'a> {
    input_digest: Option<String>,
    input_is_csv: bool,
    ingest: &'a super::ingest::IngestOptions,
    synth: Option<&'a crate::synth::SynthConfig>,
}

/// Runs every stage, reusing completed ones.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = cfg.to_toml()?;
    let exec = cfg.execution;
    let mut r = Runner {
        out,
        reports: vec![],
    };

    let ingest_key = IngestKey {
        input_digest: cfg.input.as_deref().map(file_digest).transpose()?,
        input_is_csv: cfg.input.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))),
        ingest: &cfg.ingest,
        synth: cfg.input.is_none().then_some(&cfg.synth),
    };
    let (k_ingest, d_ingest) = r.stage("ingest", &ingest_key, &[], |dir| {
        let (trajs, stats, diags) = load_input(cfg)?;
        write_trajectories(dir.join("trajectories.tsv"), &trajs, &echo)?;
        let stats_text = stats.map(|s| s.to_text()).unwrap_or_else(|| format!("trajectories={}\n", trajs.len()));
        write(&dir.join("ingest_stats.txt"), comment_block(&echo) + &stats_text)?;
        write(&dir.join("diagnostics.txt"), diags.join("\n"))
    })?;

    let (k_split, d_split) = r.stage("split", &(), &[&k_ingest], |dir| {
        let trajs = read_trajectories(d_ingest.join("trajectories.tsv"))?;
        let stats = SplitStats::from_ids(trajs.iter().map(|t| t.id.as_str()));
        for (split, part) in split_trajectories(trajs) {
            write_trajectories(dir.join(format!("{}.tsv", split.to_string().to_lowercase())), &part, &echo)?;
        }
        write(&dir.join("split_stats.txt"), comment_block(&echo) + &stats.to_text())
    })?;
    let load_split = |s: &str| read_trajectories(d_split.join(format!("{s}.tsv")));

    let (k_vocab, d_vocab) = r.stage("vocab", &(&cfg.grid, &cfg.vocab), &[&k_split], |dir| {
        let mut vocab = vocabulary_for(cfg, &load_split("train")?)?;
        vocab.note = Some(echo.clone());
        vocab.save(dir.join("vocab.txt"))
    })?;

    let (k_tok, d_tok) = r.stage("tokenize", &cfg.tokenize, &[&k_vocab, &k_split], |dir| {
        let tokenizer = Tokenizer::new(Vocabulary::load(d_vocab.join("vocab.txt"))?)?;
        let train = load_split("train")?;
        let v_max = resolve_v_max(cfg, &train)?;
        for name in ["train", "val", "test"] {
            let trajs = if name == "train" { train.clone() } else { load_split(name)? };
            let seqs = tokenizer.tokenize_all(&trajs, cfg.tokenize.options(), exec)?;
            write_tokens(&dir.join(format!("tokens_{name}.tsv")), &seqs, &echo)?;
        }
        write(&dir.join("v_max.txt"), comment_block(&echo) + &format!("v_max={v_max:?}\n"))
    })?;
    let load_tokens = |s: &str| read_tokens(&d_tok.join(format!("tokens_{s}.tsv")));
    let v_max = || read_v_max(&d_tok.join("v_max.txt"));
    let mask = cfg.mask_spec();

    r.stage("mask_stats", &mask, &[&k_tok], |dir| {
        let ids: Vec<Vec<u32>> = load_tokens("train")?.iter().map(|s| s.ids()).collect();
        let stats = mask_stats(&ids, &mask, exec)?;
        write(&dir.join("mask_stats.txt"), comment_block(&echo) + &stats.to_text())
    })?;

    let bank_sizes = (cfg.eval.n_queries, cfg.eval.n_corpus, cfg.bank_seed());
    let (k_bank, d_bank) = r.stage("bank", &bank_sizes, &[&k_split], |dir| {
        let mut bank = build_bank(&load_split("test")?, bank_sizes.0, bank_sizes.1, bank_sizes.2, exec)?;
        bank.note = Some(echo.clone());
        bank.save(dir.join("bank.txt"))
    })?;

    let train_key = (&mask, &cfg.encoder, &cfg.loss, &cfg.train, cfg.train_config());
    let vocab_size = || -> Result<usize> { Ok(Vocabulary::load(d_vocab.join("vocab.txt"))?.size()) };
    let (k_pre, d_pre) = r.stage("pretrain", &train_key, &[&k_tok], |dir| {
        let data = pretrain_data(cfg, vocab_size()?, &load_tokens("train")?, &load_tokens("val")?, v_max()?)?;
        let outcome = pretrain(cfg, &data, |_, _| Ok(()))?;
        let tc = cfg.train_config();
        Checkpoint::new(data.cfg, outcome.params.clone(), tc.steps as u64, tc.seed, echo.clone()).save(dir.join("checkpoint.bin"))?;
        write(&dir.join("trace.jsonl"), trace_to_jsonl(&outcome.trace)?)?;
        let val = if data.eval.is_empty() {
            LossBreakdown::default()
        } else {
            eval_loss(&outcome.params, &data.cfg, &data.eval, &cfg.loss, exec)?
        };
        let summary = format!(
            "steps={}\ntrain_trajectories={}\neval_examples={}\nmasked_accuracy={:?}\nmajority_baseline={:?}\nval_J={:?}\nval_L_geom={:?}\nval_L_kin={:?}\n",
            tc.steps,
            data.train.len(),
            data.eval.len(),
            outcome.final_accuracy,
            majority_baseline(&data.eval),
            val.joint,
            val.geom,
            val.kin
        );
        write(&dir.join("pretrain.txt"), comment_block(&echo) + &summary)
    })?;

    let (k_emb, d_emb) = r.stage("embed", &(cfg.eval.pooling, cfg.encoder.max_seq_len), &[&k_pre, &k_bank, &k_tok], |dir| {
        let ck = Checkpoint::load(d_pre.join("checkpoint.bin"))?;
        let bank = RetrievalBank::load(d_bank.join("bank.txt"))?;
        let inputs = bank_inputs(&bank, &load_tokens("test")?, v_max()?, ck.header.config.max_seq_len, exec)?;
        let ids: Vec<String> = bank.query_ids.iter().chain(&bank.corpus_ids).cloned().collect();
        let mut emb = embed_all(&ck.params, &ck.header.config, &inputs.0, cfg.eval.pooling, exec)?;
        emb.extend(embed_all(&ck.params, &ck.header.config, &inputs.1, cfg.eval.pooling, exec)?);
        write_embeddings(&dir.join("embeddings.tsv"), &ids, &emb, &echo)
    })?;

    let (_, d_eval) = r.stage("eval", &(), &[&k_emb, &k_bank], |dir| {
        let bank = RetrievalBank::load(d_bank.join("bank.txt"))?;
        let emb = read_embeddings(&d_emb.join("embeddings.tsv"))?;
        let get = |ids: &[String]| -> Result<Vec<Vec<f64>>> {
            ids.iter()
                .map(|id| emb.get(id).cloned().ok_or_else(|| Error::Malformed(format!("no embedding for {id}"))))
                .collect()
        };
        let m = evaluate(&bank, &get(&bank.query_ids)?, &get(&bank.corpus_ids)?, exec)?;
        write(&dir.join("metrics.txt"), comment_block(&echo) + &m.to_text())?;
        write(&dir.join("metrics.json"), m.to_json()?)
    })?;
    let metrics = parse_metrics(&read(&d_eval.join("metrics.txt"))?)?;

    if cfg.trace.enabled {
        r.stage("trace", &(&train_key, &cfg.trace, cfg.eval.pooling, cfg.bank_seed()), &[&k_tok, &k_split], |dir| {
            let data = pretrain_data(cfg, vocab_size()?, &load_tokens("train")?, &load_tokens("val")?, v_max()?)?;
            let bank = build_bank(&load_split("test")?, cfg.trace.n_queries, cfg.trace.n_corpus, cfg.bank_seed(), exec)?;
            let bank_in = bank_inputs(&bank, &load_tokens("test")?, v_max()?, data.cfg.max_seq_len, exec)?;
            let rows = loss_transfer_trace(cfg, &data, &bank, &bank_in)?;
            write(&dir.join("loss_transfer.csv"), transfer_csv(&rows, &echo))
        })?;
    }

    let summary = RunSummary {
        stages: r.reports,
        metrics,
    };
    write(&out.join("run_summary.txt"), summary.to_text())?;
    Ok(summary)
}

/// Parses the `key=value` metrics text back into a report.
pub fn parse_metrics(text: &str) -> Result<MetricsReport> {
    let kv = key_value_lines(text);
    let f = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("metrics: missing {k}")))
    };
    Ok(MetricsReport {
        hr1: f("HR@1")?,
        hr10: f("HR@10")?,
        r5_20: f("R5@20")?,
        mrr: f("MRR")?,
        ndcg5: f("NDCG@5")?,
        ndcg10: f("NDCG@10")?,
        ndcg50: f("NDCG@50")?,
        spearman: f("spearman")?,
        n_q: f("n_q")? as usize,
        n_c: f("n_c")? as usize,
        seed: f("seed")? as u64,
    })
}
