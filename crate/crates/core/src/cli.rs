//! The command harness behind the `emo` binary: a declarative run config,
//! the fit/plan/train/report commands as library functions, and the manifest
//! that makes every run directory self-describing and verifiable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::allocation::{format_schedule, make_schedule, schedule_from_cumulatives, Schedule};
use crate::datagen::{CorpusConfig, DataSource};
use crate::error::{Error, Result};
use crate::expansion::{InitKind, InitStrategy, ParentSelection};
use crate::metrics::{
    collect_utilization, detect_spike_recovery, emit_reports, gini_report, SpikeReport,
};
use crate::model::{count_params, flops_per_step, ModelConfig, ModelParams};
use crate::rng::substream;
use crate::scaling_law::{fit, format_fit_report, parse_fit_params, parse_observations, FitConfig, FitReport};
use crate::trainer::{run_emo, stage_specs_from_schedule, StageSpec, TrainConfig, TrainerIo};

/// Output is chatty unless the `EMO_QUIET` environment variable is set.
fn verbose() -> bool {
    std::env::var_os("EMO_QUIET").is_none()
}

/// Where a run's stage schedule comes from: written out explicitly, or
/// derived from a fitted law by the planner.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSource {
    /// `(expert count, fraction of the token budget)` per stage.
    Explicit(Vec<(usize, f64)>),
    Planner {
        law_params: PathBuf,
        n_act: f64,
        experts: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSourceSpec {
    Corpus(CorpusConfig),
    TokenFile(PathBuf),
}

/// A fully validated run description. The model's starting expert count is
/// taken from the schedule, never from the `[model]` section, so configs for
/// controlled comparisons differ only in their `[schedule]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSource,
    pub data: DataSourceSpec,
    pub strategy: InitStrategy,
}

struct Section {
    name: &'static str,
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            entries: BTreeMap::new(),
        }
    }

    fn insert(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        if self
            .entries
            .insert(key.to_string(), (value.to_string(), line))
            .is_some()
        {
            return Err(Error::Parse(format!(
                "line {line}: key {key} repeats within [{}]",
                self.name
            )));
        }
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn take_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| {
                Error::Parse(format!("line {line}: bad value for {key}: {e}"))
            }),
        }
    }

    /// Errors on any key that was never consumed; silent typos would
    /// otherwise corrupt controlled comparisons.
    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Parse(format!(
                "line {line}: unknown key {key} in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Parse(format!("line {line}: bad {what} entry {s}: {e}")))
        })
        .collect()
}

fn parse_stage_list(value: &str, line: usize) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (e, frac) = part.split_once(':').ok_or_else(|| {
            Error::Parse(format!(
                "line {line}: stage entry {part} wants the form E:fraction"
            ))
        })?;
        let e = e.trim().parse::<usize>().map_err(|err| {
            Error::Parse(format!("line {line}: bad expert count {e}: {err}"))
        })?;
        let frac = frac.trim().parse::<f64>().map_err(|err| {
            Error::Parse(format!("line {line}: bad fraction {frac}: {err}"))
        })?;
        out.push((e, frac));
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("line {line}: stage list is empty")));
    }
    Ok(out)
}

/// Parses the sectioned `key = value` run-config format. Returns the config
/// plus warnings (currently only fraction renormalization) for the manifest.
pub fn parse_run_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    let mut top = Section::new("top level");
    let mut model = Section::new("model");
    let mut train = Section::new("train");
    let mut schedule = Section::new("schedule");
    let mut data = Section::new("data");
    let mut current = &mut top;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = match name.trim() {
                "model" => &mut model,
                "train" => &mut train,
                "schedule" => &mut schedule,
                "data" => &mut data,
                other => {
                    return Err(Error::Parse(format!(
                        "line {line_no}: unknown section [{other}]"
                    )))
                }
            };
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!(
                "line {line_no}: expected key = value, got {line}"
            )));
        };
        current.insert(key.trim(), value.trim(), line_no)?;
    }

    let mut warnings = Vec::new();

    let output_dir = top
        .take("output_dir")
        .map(|(v, _)| PathBuf::from(v))
        .ok_or_else(|| Error::Parse("output_dir is required".into()))?;
    top.finish()?;

    let mut mc = ModelConfig::desk_default();
    if let Some((_, line)) = model.take("n_experts") {
        return Err(Error::Parse(format!(
            "line {line}: n_experts is set by the schedule, not the [model] section"
        )));
    }
    if let Some(v) = model.take_parse("n_layers")? {
        mc.n_layers = v;
    }
    if let Some(v) = model.take_parse("d_model")? {
        mc.d_model = v;
    }
    if let Some(v) = model.take_parse("n_q_heads")? {
        mc.n_q_heads = v;
    }
    if let Some(v) = model.take_parse("n_kv_heads")? {
        mc.n_kv_heads = v;
    }
    if let Some(v) = model.take_parse("d_head")? {
        mc.d_head = v;
    }
    if let Some(v) = model.take_parse("vocab_size")? {
        mc.vocab_size = v;
    }
    if let Some(v) = model.take_parse("seq_len")? {
        mc.seq_len = v;
    }
    if let Some(v) = model.take_parse("rope_base")? {
        mc.rope_base = v;
    }
    if let Some(v) = model.take_parse("dense_prefix_layers")? {
        mc.dense_prefix_layers = v;
    }
    if let Some(v) = model.take_parse("top_k")? {
        mc.top_k = v;
    }
    if let Some(v) = model.take_parse("d_expert_hidden")? {
        mc.d_expert_hidden = v;
    }
    if let Some(v) = model.take_parse("n_shared_experts")? {
        mc.n_shared_experts = v;
    }
    if let Some(v) = model.take_parse("lb_coeff")? {
        mc.lb_coeff = v;
    }
    if let Some(v) = model.take_parse("router_bias_enabled")? {
        mc.router_bias_enabled = v;
    }
    model.finish()?;

    let mut tc = TrainConfig::desk_default();
    if let Some(v) = train.take_parse("batch_tokens")? {
        tc.batch_tokens = v;
    }
    if let Some(v) = train.take_parse("seq_len")? {
        tc.seq_len = v;
    }
    if let Some(v) = train.take_parse("total_tokens")? {
        tc.total_tokens = v;
    }
    if let Some(v) = train.take_parse("peak_lr")? {
        tc.peak_lr = v;
    }
    if let Some(v) = train.take_parse("warmup_steps")? {
        tc.warmup_steps = v;
    }
    if let Some(v) = train.take_parse("decay_start_fraction")? {
        tc.decay_start_fraction = v;
    }
    if let Some(v) = train.take_parse("final_lr_ratio")? {
        tc.final_lr_ratio = v;
    }
    if let Some(v) = train.take_parse("expansion_warmup_steps")? {
        tc.expansion_warmup_steps = v;
    }
    if let Some(v) = train.take_parse("beta1")? {
        tc.beta1 = v;
    }
    if let Some(v) = train.take_parse("beta2")? {
        tc.beta2 = v;
    }
    if let Some(v) = train.take_parse("adam_eps")? {
        tc.adam_eps = v;
    }
    if let Some(v) = train.take_parse("weight_decay")? {
        tc.weight_decay = v;
    }
    if let Some(v) = train.take_parse("clip_norm")? {
        tc.clip_norm = v;
    }
    if let Some(v) = train.take_parse("seed")? {
        tc.seed = v;
    }
    if let Some(v) = train.take_parse("eval_interval_steps")? {
        tc.eval_interval_steps = v;
    }
    train.finish()?;

    let mut strategy = InitStrategy::default();
    if let Some((v, line)) = schedule.take("expansion_init") {
        strategy.kind = match v.as_str() {
            "gaussian" => InitKind::Gaussian,
            "gaussian_bias_reset" => InitKind::GaussianBiasReset,
            "copy_from_parent" => InitKind::CopyFromParent,
            other => {
                return Err(Error::Parse(format!(
                    "line {line}: unknown expansion_init {other}"
                )))
            }
        };
    }
    if let Some(v) = schedule.take_parse("expansion_noise_std")? {
        strategy.noise_std = v;
    }
    if let Some((v, line)) = schedule.take("parent_selection") {
        strategy.parent_selection = match v.as_str() {
            "most_utilized" => ParentSelection::MostUtilized,
            "round_robin" => ParentSelection::RoundRobin,
            other => match other.parse::<usize>() {
                Ok(i) => ParentSelection::FixedIndex(i),
                Err(_) => {
                    return Err(Error::Parse(format!(
                        "line {line}: unknown parent_selection {other}"
                    )))
                }
            },
        };
    }

    let explicit = schedule.take("stages");
    let planner_keys = (
        schedule.take("law_params"),
        schedule.take_parse::<f64>("n_act")?,
        schedule.take("experts"),
    );
    let schedule_source = match (explicit, planner_keys) {
        (Some((v, line)), (None, None, None)) => {
            let mut stages = parse_stage_list(&v, line)?;
            for w in stages.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::Parse(format!(
                        "line {line}: expert counts must strictly increase, got {} then {}",
                        w[0].0, w[1].0
                    )));
                }
            }
            if stages.iter().any(|&(_, f)| f <= 0.0) {
                return Err(Error::Parse(format!(
                    "line {line}: stage fractions must be positive"
                )));
            }
            let sum: f64 = stages.iter().map(|&(_, f)| f).sum();
            if (sum - 1.0).abs() > 1e-9 {
                warnings.push(format!(
                    "schedule fractions summed to {sum}; normalized to 1"
                ));
                for s in &mut stages {
                    s.1 /= sum;
                }
            }
            ScheduleSource::Explicit(stages)
        }
        (None, (Some((path, _)), Some(n_act), Some((experts, eline)))) => {
            let experts: Vec<u32> = parse_list(&experts, eline, "experts")?;
            if experts.is_empty() {
                return Err(Error::Parse(format!("line {eline}: experts list is empty")));
            }
            ScheduleSource::Planner {
                law_params: PathBuf::from(path),
                n_act,
                experts,
            }
        }
        (Some(_), _) => {
            return Err(Error::Parse(
                "[schedule] mixes explicit stages with planner keys; give exactly one".into(),
            ))
        }
        (None, _) => {
            return Err(Error::Parse(
                "[schedule] needs either stages or all of law_params, n_act, experts".into(),
            ))
        }
    };
    schedule.finish()?;

    let token_file = data.take("token_file");
    let has_corpus_keys = [
        "n_domains",
        "vocab_size",
        "markov_order",
        "domain_vocab_overlap",
        "domain_weights",
        "seq_len",
        "seed",
    ]
    .iter()
    .any(|k| data.has(k));
    let data_source = match (token_file, has_corpus_keys) {
        (Some((path, _)), false) => DataSourceSpec::TokenFile(PathBuf::from(path)),
        (None, true) => {
            let mut cc = CorpusConfig::desk_default();
            if let Some(v) = data.take_parse("n_domains")? {
                cc.n_domains = v;
            }
            if let Some(v) = data.take_parse("vocab_size")? {
                cc.vocab_size = v;
            }
            if let Some(v) = data.take_parse("markov_order")? {
                cc.markov_order = v;
            }
            if let Some(v) = data.take_parse("domain_vocab_overlap")? {
                cc.domain_vocab_overlap = v;
            }
            if let Some((v, line)) = data.take("domain_weights") {
                cc.domain_weights = parse_list(&v, line, "domain_weights")?;
            }
            if let Some(v) = data.take_parse("seq_len")? {
                cc.seq_len = v;
            }
            if let Some(v) = data.take_parse("seed")? {
                cc.seed = v;
            }
            DataSourceSpec::Corpus(cc)
        }
        (Some(_), true) => {
            return Err(Error::Parse(
                "[data] mixes token_file with corpus keys; give exactly one source".into(),
            ))
        }
        (None, false) => {
            return Err(Error::Parse(
                "[data] needs either token_file or corpus keys".into(),
            ))
        }
    };
    data.finish()?;

    // Cross-section consistency.
    if mc.seq_len != tc.seq_len {
        return Err(Error::Config(format!(
            "model seq_len {} != train seq_len {}",
            mc.seq_len, tc.seq_len
        )));
    }
    if let DataSourceSpec::Corpus(cc) = &data_source {
        if cc.seq_len != tc.seq_len {
            return Err(Error::Config(format!(
                "data seq_len {} != train seq_len {}",
                cc.seq_len, tc.seq_len
            )));
        }
        if cc.vocab_size != mc.vocab_size {
            return Err(Error::Config(format!(
                "data vocab_size {} != model vocab_size {}",
                cc.vocab_size, mc.vocab_size
            )));
        }
        cc.validate()?;
    }
    mc.n_experts = match &schedule_source {
        ScheduleSource::Explicit(stages) => stages[0].0,
        ScheduleSource::Planner { experts, .. } => experts[0] as usize,
    };
    mc.validate()?;
    tc.validate()?;

    Ok((
        RunConfig {
            output_dir,
            model: mc,
            train: tc,
            schedule: schedule_source,
            data: data_source,
            strategy,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: usize,
    pub e: usize,
    pub steps: usize,
    pub seconds: f64,
}

/// What `manifest.txt` records: enough to audit a run directory and verify
/// that nothing in it was altered after the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub config_sha256: String,
    pub flops_per_step: Option<f64>,
    pub stage_timings: Vec<StageTiming>,
    /// `(relative path, sha256)` for every emitted file except the manifest.
    pub files: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn format_manifest(m: &RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version={}", m.version);
    let _ = writeln!(s, "seed={}", m.seed);
    let _ = writeln!(s, "status={}", m.status);
    if let Some(e) = &m.error {
        let _ = writeln!(s, "error={}", e.replace('\n', "; "));
    }
    let _ = writeln!(s, "config_sha256={}", m.config_sha256);
    if let Some(f) = m.flops_per_step {
        let _ = writeln!(s, "flops_per_step={f}");
    }
    for w in &m.warnings {
        let _ = writeln!(s, "warning={}", w.replace('\n', "; "));
    }
    for t in &m.stage_timings {
        let _ = writeln!(
            s,
            "stage={} e={} steps={} seconds={:.3} seconds_per_step={:.6}",
            t.stage,
            t.e,
            t.steps,
            t.seconds,
            t.seconds / t.steps.max(1) as f64
        );
    }
    for (path, hash) in &m.files {
        let _ = writeln!(s, "file={path} sha256={hash}");
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let mut m = RunManifest {
        version: String::new(),
        seed: 0,
        status: String::new(),
        error: None,
        warnings: Vec::new(),
        config_sha256: String::new(),
        flops_per_step: None,
        stage_timings: Vec::new(),
        files: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!("manifest line {}: no =", i + 1)));
        };
        match key {
            "version" => m.version = value.to_string(),
            "seed" => {
                m.seed = value
                    .parse()
                    .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?
            }
            "status" => m.status = value.to_string(),
            "error" => m.error = Some(value.to_string()),
            "config_sha256" => m.config_sha256 = value.to_string(),
            "flops_per_step" => {
                m.flops_per_step = Some(
                    value
                        .parse()
                        .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
                )
            }
            "warning" => m.warnings.push(value.to_string()),
            "stage" => {
                let mut fields = BTreeMap::new();
                fields.insert("stage".to_string(), value.split_whitespace().next().unwrap_or("").to_string());
                for tok in line.split_whitespace().skip(1) {
                    if let Some((k, v)) = tok.split_once('=') {
                        fields.insert(k.to_string(), v.to_string());
                    }
                }
                let get = |k: &str| -> Result<String> {
                    fields
                        .get(k)
                        .cloned()
                        .ok_or_else(|| Error::Parse(format!("manifest line {}: stage record lacks {k}", i + 1)))
                };
                m.stage_timings.push(StageTiming {
                    stage: get("stage")?.parse().map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
                    e: get("e")?.parse().map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
                    steps: get("steps")?.parse().map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
                    seconds: get("seconds")?.parse().map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
                });
            }
            "file" => {
                let mut path = value;
                let mut hash = "";
                if let Some((p, rest)) = value.split_once(" sha256=") {
                    path = p;
                    hash = rest;
                }
                if hash.is_empty() {
                    return Err(Error::Parse(format!(
                        "manifest line {}: file record lacks sha256",
                        i + 1
                    )));
                }
                m.files.push((path.to_string(), hash.to_string()));
            }
            other => {
                return Err(Error::Parse(format!(
                    "manifest line {}: unknown key {other}",
                    i + 1
                )))
            }
        }
    }
    Ok(m)
}

/// Checks every checksum in a run directory's manifest against the files on
/// disk. Returns the parsed manifest on success.
pub fn verify_run_dir(dir: &Path) -> Result<RunManifest> {
    let manifest = parse_manifest(&std::fs::read_to_string(dir.join("manifest.txt"))?)?;
    for (rel, expected) in &manifest.files {
        let path = dir.join(rel);
        if !path.exists() {
            return Err(Error::Data(format!(
                "manifest lists {rel} but it is missing from {}",
                dir.display()
            )));
        }
        let actual = sha256_file(&path)?;
        if &actual != expected {
            return Err(Error::Data(format!(
                "{rel} does not match its manifest checksum"
            )));
        }
    }
    Ok(manifest)
}

/// Fits the joint scaling law to an observation file and writes the report.
pub fn cmd_fit(observations_path: &Path, out_path: &Path, seed: u64) -> Result<FitReport> {
    let text = std::fs::read_to_string(observations_path).map_err(|e| {
        Error::Data(format!(
            "cannot read observations {}: {e}",
            observations_path.display()
        ))
    })?;
    let obs = parse_observations(&text)?;
    let report = fit(&obs, &FitConfig::desk_default(seed))?;
    std::fs::write(out_path, format_fit_report(&report))?;
    if verbose() {
        println!(
            "fit: {} observations, r_squared={:.6}, rmse_train={:.6}, rmse_holdout={:.6}",
            obs.len(),
            report.r_squared,
            report.rmse_train,
            report.rmse_holdout
        );
        println!("fit: wrote {}", out_path.display());
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PlanArgs {
    pub law_params: Option<PathBuf>,
    pub n_act: Option<f64>,
    pub cumulatives: Option<Vec<f64>>,
    pub experts: Vec<u32>,
    pub d_total: f64,
    pub out: PathBuf,
}

/// Plans a stage schedule, either from a fitted law or from externally
/// supplied cumulative optima, and writes it as a schedule file.
pub fn cmd_plan(args: &PlanArgs) -> Result<Schedule> {
    if args.experts.is_empty() {
        return Err(Error::Config("experts list is empty".into()));
    }
    let schedule = match (&args.cumulatives, &args.law_params) {
        (Some(c), None) => {
            if c.len() != args.experts.len() {
                return Err(Error::Config(format!(
                    "{} cumulative optima for {} expert counts",
                    c.len(),
                    args.experts.len()
                )));
            }
            schedule_from_cumulatives(c, &args.experts, args.d_total)?
        }
        (None, Some(path)) => {
            let n_act = args
                .n_act
                .ok_or_else(|| Error::Config("n_act is required with law_params".into()))?;
            let params = parse_fit_params(&std::fs::read_to_string(path).map_err(|e| {
                Error::Data(format!("cannot read law params {}: {e}", path.display()))
            })?)?;
            make_schedule(&params, n_act, &args.experts, args.d_total)?
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either cumulatives or law_params, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "one of cumulatives or law_params is required".into(),
            ))
        }
    };
    std::fs::write(&args.out, format_schedule(&schedule))?;
    if verbose() {
        for st in &schedule.stages {
            println!(
                "plan: stage {} E={} allocated={:.4e} tokens ({:.2}%)",
                st.stage,
                st.e,
                st.allocated,
                st.fraction * 100.0
            );
        }
        println!("plan: wrote {}", args.out.display());
    }
    Ok(schedule)
}

struct RunArtifacts {
    stage_timings: Vec<StageTiming>,
    flops_per_step: f64,
    files: Vec<String>,
}

fn execute_run(rc: &RunConfig, dir: &Path) -> Result<RunArtifacts> {
    let mut files: Vec<String> = vec!["config.txt".into()];

    // Resolve the schedule into concrete stage specs.
    let stage_specs: Vec<StageSpec> = match &rc.schedule {
        ScheduleSource::Explicit(stages) => stages
            .iter()
            .enumerate()
            .map(|(i, &(e, frac))| StageSpec {
                stage: i + 1,
                e,
                allocated_tokens: frac * rc.train.total_tokens,
                strategy: rc.strategy,
            })
            .collect(),
        ScheduleSource::Planner {
            law_params,
            n_act,
            experts,
        } => {
            let params = parse_fit_params(&std::fs::read_to_string(law_params).map_err(|e| {
                Error::Data(format!(
                    "cannot read law params {}: {e}",
                    law_params.display()
                ))
            })?)?;
            let schedule = make_schedule(&params, *n_act, experts, rc.train.total_tokens)?;
            std::fs::write(dir.join("schedule.csv"), format_schedule(&schedule))?;
            files.push("schedule.csv".into());
            stage_specs_from_schedule(&schedule, rc.strategy)
        }
    };
    let mut stages_csv = String::from("stage,e,allocated,fraction\n");
    for s in &stage_specs {
        let _ = writeln!(
            stages_csv,
            "{},{},{},{}",
            s.stage,
            s.e,
            s.allocated_tokens,
            s.allocated_tokens / rc.train.total_tokens
        );
    }
    std::fs::write(dir.join("stages.csv"), stages_csv)?;
    files.push("stages.csv".into());

    // Data source.
    let mut source = match &rc.data {
        DataSourceSpec::Corpus(cc) => DataSource::from_corpus(cc.clone())?,
        DataSourceSpec::TokenFile(path) => DataSource::from_token_file(path, rc.train.seq_len)?,
    };
    if source.vocab_size() != rc.model.vocab_size {
        return Err(Error::Config(format!(
            "data vocab {} != model vocab {}",
            source.vocab_size(),
            rc.model.vocab_size
        )));
    }

    // Model at the first stage's expert count.
    let params = ModelParams::init(&rc.model, &mut substream(rc.train.seed, "init/model"))?;

    let checkpoint_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir)?;
    let metrics_file = std::fs::File::create(dir.join("metrics.csv"))?;
    let mut io = TrainerIo::sink()
        .with_metrics(Box::new(metrics_file))
        .with_checkpoint_dir(checkpoint_dir);

    if verbose() {
        let (total, activated) = count_params(&rc.model, rc.model.n_experts);
        println!(
            "train: {} stages, {} total params ({} activated) at start, budget {:.3e} tokens",
            stage_specs.len(),
            total,
            activated,
            rc.train.total_tokens
        );
    }
    let result = run_emo(
        params,
        &rc.model,
        &stage_specs,
        &mut source,
        &rc.train,
        &mut io,
    )?;
    files.push("metrics.csv".into());

    // Post-run reports: routing utilization, Gini, spike recovery.
    let util = match io.utilization.last() {
        Some(u) => u.clone(),
        None => {
            // The run was shorter than the eval interval; probe with fresh
            // batches so the reports still describe the final model.
            let n_seqs = rc.train.batch_tokens / rc.train.seq_len;
            let batches: Vec<_> = (0..4).map(|_| source.next_batch(n_seqs)).collect();
            collect_utilization(
                &result.params,
                &result.model_cfg,
                &batches,
                result.run.global_step,
            )?
        }
    };
    let gini = gini_report(&util)?;
    let mut spikes: Vec<SpikeReport> = Vec::new();
    for &(stage, estep) in &result.expansion_steps {
        if estep == 0 {
            continue;
        }
        let steps_in_stage = result.stage_step_counts[stage - 1] as u64;
        let window = 50.min(estep as usize);
        let budget = (steps_in_stage / 10).max(1);
        spikes.push(detect_spike_recovery(
            &result.run.loss_history,
            estep,
            window,
            budget,
        )?);
    }
    emit_reports(&util, &gini, &spikes, dir)?;
    files.extend(["utilization.csv".into(), "gini.csv".into(), "spikes.txt".into()]);

    let mut checkpoint_files: Vec<String> = std::fs::read_dir(dir.join("checkpoints"))?
        .map(|e| Ok(format!("checkpoints/{}", e?.file_name().to_string_lossy())))
        .collect::<std::io::Result<_>>()?;
    checkpoint_files.sort();
    files.extend(checkpoint_files);

    let stage_timings = stage_specs
        .iter()
        .enumerate()
        .map(|(i, s)| StageTiming {
            stage: s.stage,
            e: s.e,
            steps: result.stage_step_counts[i],
            seconds: result.stage_seconds[i],
        })
        .collect();
    let (_, activated) = count_params(&rc.model, rc.model.n_experts);
    Ok(RunArtifacts {
        stage_timings,
        flops_per_step: flops_per_step(rc.train.batch_tokens, activated),
        files,
    })
}

/// Runs a config end to end and leaves a self-describing run directory:
/// config snapshot, metrics stream, stage checkpoints, routing reports, and
/// a checksummed manifest. On failure the manifest records the error.
pub fn cmd_train(config_path: &Path, seed_override: Option<u64>) -> Result<PathBuf> {
    let raw = std::fs::read_to_string(config_path).map_err(|e| {
        Error::Data(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let (mut rc, warnings) = parse_run_config(&raw)?;
    if let Some(seed) = seed_override {
        rc.train.seed = seed;
    }
    let dir = rc.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), &raw)?;
    let config_sha256 = sha256_hex(raw.as_bytes());

    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: rc.train.seed,
        status: String::new(),
        error: None,
        warnings,
        config_sha256,
        flops_per_step: None,
        stage_timings: Vec::new(),
        files: Vec::new(),
    };

    match execute_run(&rc, &dir) {
        Ok(artifacts) => {
            manifest.status = "complete".into();
            manifest.flops_per_step = Some(artifacts.flops_per_step);
            manifest.stage_timings = artifacts.stage_timings;
            for rel in &artifacts.files {
                manifest.files.push((rel.clone(), sha256_file(&dir.join(rel))?));
            }
            std::fs::write(dir.join("manifest.txt"), format_manifest(&manifest))?;
            verify_run_dir(&dir)?;
            if verbose() {
                println!("train: run complete, artifacts in {}", dir.display());
            }
            Ok(dir)
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            std::fs::write(dir.join("manifest.txt"), format_manifest(&manifest))?;
            Err(e)
        }
    }
}

struct RunView {
    name: String,
    status: String,
    steps: u64,
    final_smoothed: Option<f64>,
    losses: BTreeMap<u64, f64>,
    gini: Vec<(String, f64)>,
    spikes: Vec<String>,
}

fn load_run_view(dir: &Path, name: String, smooth_window: usize) -> Result<RunView> {
    let status = match std::fs::read_to_string(dir.join("manifest.txt")) {
        Ok(text) => {
            let m = parse_manifest(&text)?;
            if m.status == "complete" {
                "complete".to_string()
            } else {
                format!("partial ({})", m.status)
            }
        }
        Err(_) => "partial (no manifest)".to_string(),
    };

    let mut losses = BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(dir.join("metrics.csv")) {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let step_col = header.iter().position(|&h| h == "step");
        let loss_col = header.iter().position(|&h| h == "loss");
        if let (Some(sc), Some(lc)) = (step_col, loss_col) {
            for line in lines {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() <= sc.max(lc) {
                    continue;
                }
                if let (Ok(step), Ok(loss)) = (cols[sc].parse::<u64>(), cols[lc].parse::<f64>()) {
                    losses.insert(step, loss);
                }
            }
        }
    }
    let steps = losses.keys().next_back().copied().unwrap_or(0);
    let final_smoothed = if losses.is_empty() {
        None
    } else {
        let vals: Vec<f64> = losses.values().copied().collect();
        let w = smooth_window.max(1).min(vals.len());
        Some(vals[vals.len() - w..].iter().sum::<f64>() / w as f64)
    };

    let mut gini = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join("gini.csv")) {
        for line in text.lines().skip(1) {
            if let Some((label, v)) = line.split_once(',') {
                if let Ok(v) = v.parse::<f64>() {
                    gini.push((label.to_string(), v));
                }
            }
        }
    }
    let spikes = std::fs::read_to_string(dir.join("spikes.txt"))
        .map(|t| t.lines().map(str::to_string).collect())
        .unwrap_or_default();

    Ok(RunView {
        name,
        status,
        steps,
        final_smoothed,
        losses,
        gini,
        spikes,
    })
}

/// Tabulates one or more run directories into a single comparison file:
/// run summaries, the aligned per-step loss table, per-layer Gini, and spike
/// recoveries. With exactly two runs the loss table gains a difference
/// column.
pub fn cmd_report(run_dirs: &[PathBuf], out_path: &Path, smooth_window: usize) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut views = Vec::new();
    for dir in run_dirs {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "run directory {} does not exist",
                dir.display()
            )));
        }
        let base = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut name = base.clone();
        let mut n = 1;
        while views.iter().any(|v: &RunView| v.name == name) {
            n += 1;
            name = format!("{base}#{n}");
        }
        views.push(load_run_view(dir, name, smooth_window)?);
    }

    let mut out = String::new();
    let _ = writeln!(out, "# runs");
    let _ = writeln!(out, "run,dir,status,steps,final_smoothed_loss");
    for (v, dir) in views.iter().zip(run_dirs) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            v.name,
            dir.display(),
            v.status,
            v.steps,
            v.final_smoothed.map(|x| x.to_string()).unwrap_or_default()
        );
    }

    let _ = writeln!(out, "# loss");
    let mut header: Vec<String> = vec!["step".into()];
    header.extend(views.iter().map(|v| v.name.clone()));
    let with_diff = views.len() == 2;
    if with_diff {
        header.push("diff".into());
    }
    let _ = writeln!(out, "{}", header.join(","));
    let mut all_steps: Vec<u64> = views
        .iter()
        .flat_map(|v| v.losses.keys().copied())
        .collect();
    all_steps.sort_unstable();
    all_steps.dedup();
    for step in all_steps {
        let mut row = vec![step.to_string()];
        for v in &views {
            row.push(
                v.losses
                    .get(&step)
                    .map(|x| x.to_string())
                    .unwrap_or_default(),
            );
        }
        if with_diff {
            row.push(
                match (views[0].losses.get(&step), views[1].losses.get(&step)) {
                    (Some(a), Some(b)) => (b - a).to_string(),
                    _ => String::new(),
                },
            );
        }
        let _ = writeln!(out, "{}", row.join(","));
    }

    let _ = writeln!(out, "# gini");
    let _ = writeln!(out, "run,layer,gini");
    for v in &views {
        for (label, g) in &v.gini {
            let _ = writeln!(out, "{},{label},{g}", v.name);
        }
    }

    let _ = writeln!(out, "# spikes");
    let _ = writeln!(out, "run,record");
    for v in &views {
        for line in &v.spikes {
            let _ = writeln!(out, "{},{}", v.name, line.replace(' ', ";"));
        }
    }

    std::fs::write(out_path, &out)?;
    if verbose() {
        for v in &views {
            println!(
                "report: {} status={} steps={} final_smoothed={}",
                v.name,
                v.status,
                v.steps,
                v.final_smoothed.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
            );
        }
        println!("report: wrote {}", out_path.display());
    }
    Ok(out)
}
