//! Versioned binary checkpoints: model tensors by name, optimizer moments,
//! run counters, data-sampler position, and the config snapshot, all under a
//! whole-file checksum. Writes are atomic (temp file, then rename).

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datagen::{CorpusConfig, CorpusStreamState, DataSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::substream;
use crate::trainer::run::RunState;
use crate::trainer::{OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EMOC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// Data-source snapshot, positioned at the next batch to draw.
    pub data: DataSpec,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub run: RunState,
}

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn u32_slice(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u32(x);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file holds {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible string length {n}")));
        }
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
    }
    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u32_vec(&mut self) -> Result<Vec<u32>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("bad boolean byte {v}"))),
        }
    }
}

fn write_model_cfg(w: &mut ByteWriter, c: &ModelConfig) {
    w.usize(c.n_layers);
    w.usize(c.d_model);
    w.usize(c.n_q_heads);
    w.usize(c.n_kv_heads);
    w.usize(c.d_head);
    w.usize(c.vocab_size);
    w.usize(c.seq_len);
    w.f64(c.rope_base);
    w.usize(c.dense_prefix_layers);
    w.usize(c.n_experts);
    w.usize(c.top_k);
    w.usize(c.d_expert_hidden);
    w.usize(c.n_shared_experts);
    w.f64(c.lb_coeff);
    w.u8(c.router_bias_enabled as u8);
}

fn read_model_cfg(r: &mut ByteReader) -> Result<ModelConfig> {
    Ok(ModelConfig {
        n_layers: r.usize()?,
        d_model: r.usize()?,
        n_q_heads: r.usize()?,
        n_kv_heads: r.usize()?,
        d_head: r.usize()?,
        vocab_size: r.usize()?,
        seq_len: r.usize()?,
        rope_base: r.f64()?,
        dense_prefix_layers: r.usize()?,
        n_experts: r.usize()?,
        top_k: r.usize()?,
        d_expert_hidden: r.usize()?,
        n_shared_experts: r.usize()?,
        lb_coeff: r.f64()?,
        router_bias_enabled: r.bool()?,
    })
}

fn write_train_cfg(w: &mut ByteWriter, c: &TrainConfig) {
    w.usize(c.batch_tokens);
    w.usize(c.seq_len);
    w.f64(c.total_tokens);
    w.f64(c.peak_lr);
    w.usize(c.warmup_steps);
    w.f64(c.decay_start_fraction);
    w.f64(c.final_lr_ratio);
    w.usize(c.expansion_warmup_steps);
    w.f64(c.beta1);
    w.f64(c.beta2);
    w.f64(c.adam_eps);
    w.f64(c.weight_decay);
    w.f64(c.clip_norm);
    w.u64(c.seed);
    w.usize(c.eval_interval_steps);
}

fn read_train_cfg(r: &mut ByteReader) -> Result<TrainConfig> {
    Ok(TrainConfig {
        batch_tokens: r.usize()?,
        seq_len: r.usize()?,
        total_tokens: r.f64()?,
        peak_lr: r.f64()?,
        warmup_steps: r.usize()?,
        decay_start_fraction: r.f64()?,
        final_lr_ratio: r.f64()?,
        expansion_warmup_steps: r.usize()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        adam_eps: r.f64()?,
        weight_decay: r.f64()?,
        clip_norm: r.f64()?,
        seed: r.u64()?,
        eval_interval_steps: r.usize()?,
    })
}

fn write_corpus_cfg(w: &mut ByteWriter, c: &CorpusConfig) {
    w.usize(c.n_domains);
    w.usize(c.vocab_size);
    w.usize(c.markov_order);
    w.f64(c.domain_vocab_overlap);
    w.f64_slice(&c.domain_weights);
    w.usize(c.seq_len);
    w.u64(c.seed);
}

fn read_corpus_cfg(r: &mut ByteReader) -> Result<CorpusConfig> {
    Ok(CorpusConfig {
        n_domains: r.usize()?,
        vocab_size: r.usize()?,
        markov_order: r.usize()?,
        domain_vocab_overlap: r.f64()?,
        domain_weights: r.f64_vec()?,
        seq_len: r.usize()?,
        seed: r.u64()?,
    })
}

fn write_run_state(w: &mut ByteWriter, s: &RunState) {
    w.u64(s.global_step);
    w.f64(s.tokens_consumed);
    w.usize(s.current_stage);
    w.u64(s.stage_step);
    w.u64(s.loss_history.len() as u64);
    for &(step, loss) in &s.loss_history {
        w.u64(step);
        w.f64(loss);
    }
}

fn read_run_state(r: &mut ByteReader) -> Result<RunState> {
    let global_step = r.u64()?;
    let tokens_consumed = r.f64()?;
    let current_stage = r.usize()?;
    let stage_step = r.u64()?;
    let n = r.u64()? as usize;
    let mut loss_history = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        loss_history.push((r.u64()?, r.f64()?));
    }
    Ok(RunState {
        global_step,
        tokens_consumed,
        current_stage,
        stage_step,
        loss_history,
    })
}

fn write_corpus_state(w: &mut ByteWriter, s: &CorpusStreamState) {
    w.u128(s.word_pos);
    w.u64(s.contexts.len() as u64);
    for ctx in &s.contexts {
        w.u32_slice(ctx);
    }
}

fn read_corpus_state(r: &mut ByteReader) -> Result<CorpusStreamState> {
    let word_pos = r.u128()?;
    let n = r.u64()? as usize;
    let mut contexts = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        contexts.push(r.u32_vec()?);
    }
    Ok(CorpusStreamState { word_pos, contexts })
}

fn write_data_spec(w: &mut ByteWriter, spec: &DataSpec) {
    match spec {
        DataSpec::Corpus { config, state } => {
            w.u8(0);
            write_corpus_cfg(w, config);
            write_corpus_state(w, state);
        }
        DataSpec::File {
            path,
            seq_len,
            next_seq,
        } => {
            w.u8(1);
            w.string(path);
            w.usize(*seq_len);
            w.u64(*next_seq);
        }
    }
}

fn read_data_spec(r: &mut ByteReader) -> Result<DataSpec> {
    match r.u8()? {
        0 => Ok(DataSpec::Corpus {
            config: read_corpus_cfg(r)?,
            state: read_corpus_state(r)?,
        }),
        1 => Ok(DataSpec::File {
            path: r.string()?,
            seq_len: r.usize()?,
            next_seq: r.u64()?,
        }),
        tag => Err(Error::Checkpoint(format!("unknown data-source tag {tag}"))),
    }
}

fn write_params(w: &mut ByteWriter, p: &ModelParams) {
    let named = p.named_tensors();
    w.u64(named.len() as u64);
    for (name, t) in named {
        w.string(&name);
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.usize(d);
        }
        for &x in t.data() {
            w.f64(x);
        }
    }
}

fn read_params(r: &mut ByteReader, cfg: &ModelConfig) -> Result<ModelParams> {
    let n = r.u64()? as usize;
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.usize()?);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if by_name.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }

    // Rebuild the structural skeleton from the config, then fill every
    // tensor from the file by name.
    let mut params = ModelParams::init(cfg, &mut substream(0, "checkpoint/skeleton"))?;
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut fill_err: Option<Error> = None;
    params.for_each_tensor_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        match by_name.get(&name) {
            None => missing.push(name),
            Some((shape, data)) => {
                if shape != t.shape() {
                    fill_err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {shape:?}, model wants {:?}",
                        t.shape()
                    )));
                    return;
                }
                t.data_mut().copy_from_slice(data);
                used += 1;
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks tensors: {missing:?}"
        )));
    }
    if used != by_name.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model uses {used}",
            by_name.len()
        )));
    }
    Ok(params)
}

fn write_opt(w: &mut ByteWriter, o: &OptimizerState) {
    w.u64(o.step);
    w.f64_slice(&o.m);
    w.f64_slice(&o.v);
}

fn read_opt(r: &mut ByteReader) -> Result<OptimizerState> {
    Ok(OptimizerState {
        step: r.u64()?,
        m: r.f64_vec()?,
        v: r.f64_vec()?,
    })
}

fn encode(data: &CheckpointData) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_model_cfg(&mut w, &data.model_cfg);
    write_train_cfg(&mut w, &data.train_cfg);
    write_data_spec(&mut w, &data.data);
    write_run_state(&mut w, &data.run);
    write_opt(&mut w, &data.opt);
    write_params(&mut w, &data.params);
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn checkpoint_save(data: &CheckpointData, path: &Path) -> Result<()> {
    let bytes = encode(data);
    let tmp = path.with_extension("emoc.tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(Error::Checkpoint(format!(
            "file too small ({} bytes) to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = ByteReader::new(body);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported; this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let model_cfg = read_model_cfg(&mut r)?;
    let train_cfg = read_train_cfg(&mut r)?;
    let data = read_data_spec(&mut r)?;
    let run = read_run_state(&mut r)?;
    let opt = read_opt(&mut r)?;
    let params = read_params(&mut r, &model_cfg)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            body.len() - r.pos
        )));
    }
    if opt.len() != params.n_params() {
        return Err(Error::Checkpoint(format!(
            "optimizer holds {} moments for {} parameters",
            opt.len(),
            params.n_params()
        )));
    }
    Ok(CheckpointData {
        model_cfg,
        train_cfg,
        data,
        params,
        opt,
        run,
    })
}
