//! Deterministic synthetic multi-domain corpus.
//!
//! Each domain is an order-k Markov chain over its own (mostly disjoint)
//! vocabulary band, with a sparse successor table: every context admits
//! [`N_SUCCESSORS`] candidate next tokens with fixed decreasing weights.
//! This gives the data enough low-entropy structure that routed experts can
//! specialize by domain while staying cheap to sample. Everything is
//! reproducible byte-for-byte from (config, seed).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{next_f64, next_index, substream};

pub const N_SUCCESSORS: usize = 6;
pub const SUCCESSOR_WEIGHTS: [f64; N_SUCCESSORS] = [0.35, 0.25, 0.15, 0.12, 0.08, 0.05];

const TOKEN_FILE_MAGIC: [u8; 4] = *b"EMOT";
const TOKEN_FILE_VERSION: u32 = 1;
/// Context tables are materialized densely; cap their size.
const MAX_CONTEXTS: usize = 1 << 22;
/// Steps run at construction so each chain starts inside its attractor.
const BURN_IN_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_domains: usize,
    pub vocab_size: usize,
    pub markov_order: usize,
    /// Fraction of each band's width shared with its neighbors.
    pub domain_vocab_overlap: f64,
    /// Relative sequence frequencies per domain; normalized internally.
    pub domain_weights: Vec<f64>,
    pub seq_len: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn desk_default() -> Self {
        Self {
            n_domains: 4,
            vocab_size: 512,
            markov_order: 2,
            domain_vocab_overlap: 0.1,
            domain_weights: vec![1.0; 4],
            seq_len: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if self.domain_weights.len() != self.n_domains {
            return Err(Error::Config(format!(
                "{} weights for {} domains",
                self.domain_weights.len(),
                self.n_domains
            )));
        }
        if self.domain_weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.domain_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("domain weights must be nonnegative with positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.domain_vocab_overlap) {
            return Err(Error::Config("overlap must lie in [0, 1]".into()));
        }
        if self.markov_order == 0 {
            return Err(Error::Config("markov_order must be >= 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        let band = self.vocab_size / self.n_domains;
        if band < 2 {
            return Err(Error::Config(format!(
                "vocab {} too small for {} domain bands",
                self.vocab_size, self.n_domains
            )));
        }
        let mut contexts = 1usize;
        for _ in 0..self.markov_order {
            contexts = contexts.saturating_mul(2 * band);
            if contexts > MAX_CONTEXTS {
                return Err(Error::Config(format!(
                    "order-{} contexts over a {band}-token band exceed the table cap",
                    self.markov_order
                )));
            }
        }
        Ok(())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let s: f64 = self.domain_weights.iter().sum();
        self.domain_weights.iter().map(|w| w / s).collect()
    }

    /// `[start, end)` vocabulary band of one domain. Bands partition the
    /// vocabulary at overlap 0 and extend symmetrically into their
    /// neighbors as overlap grows.
    pub fn band(&self, domain: usize) -> (usize, usize) {
        let w = self.vocab_size / self.n_domains;
        let base_start = domain * w;
        let base_end = if domain + 1 == self.n_domains {
            self.vocab_size
        } else {
            (domain + 1) * w
        };
        let h = (self.domain_vocab_overlap * w as f64 / 2.0).round() as usize;
        (base_start.saturating_sub(h), (base_end + h).min(self.vocab_size))
    }
}

/// One domain's Markov source. The transition table is fixed at build time;
/// only the rolling context advances during generation.
#[derive(Debug, Clone)]
pub struct DomainGenerator {
    band_start: u32,
    band: usize,
    order: usize,
    /// `band^order` rows of candidate successors (local token ids).
    successors: Vec<[u32; N_SUCCESSORS]>,
    /// Last `order` local tokens, oldest first.
    context: Vec<u32>,
}

impl DomainGenerator {
    fn build(config: &CorpusConfig, domain: usize) -> Self {
        let (start, end) = config.band(domain);
        let band = end - start;
        let order = config.markov_order;
        let n_contexts = band.pow(order as u32);
        let mut rng = substream(config.seed, &format!("datagen/domain{domain}"));
        let mut successors = Vec::with_capacity(n_contexts);
        for _ in 0..n_contexts {
            let mut row = [0u32; N_SUCCESSORS];
            for slot in row.iter_mut() {
                *slot = next_index(&mut rng, band) as u32;
            }
            successors.push(row);
        }
        let mut g = Self {
            band_start: start as u32,
            band,
            order,
            successors,
            context: vec![0; order],
        };
        for _ in 0..BURN_IN_STEPS {
            g.next_token(&mut rng);
        }
        g
    }

    fn context_index(&self) -> usize {
        let mut idx = 0usize;
        for &c in &self.context {
            idx = idx * self.band + c as usize;
        }
        idx
    }

    /// Emits one token and advances the context.
    pub fn next_token(&mut self, rng: &mut ChaCha8Rng) -> u32 {
        let row = &self.successors[self.context_index()];
        let u = next_f64(rng);
        let mut acc = 0.0;
        let mut local = row[N_SUCCESSORS - 1];
        for (slot, &w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                local = row[slot];
                break;
            }
        }
        self.context.rotate_left(1);
        *self.context.last_mut().unwrap() = local;
        self.band_start + local
    }

    pub fn band_range(&self) -> (u32, u32) {
        (self.band_start, self.band_start + self.band as u32)
    }

    /// Rolling context, for checkpointing.
    pub fn context(&self) -> &[u32] {
        &self.context
    }

    pub fn set_context(&mut self, context: &[u32]) -> Result<()> {
        if context.len() != self.order || context.iter().any(|&c| c as usize >= self.band) {
            return Err(Error::Checkpoint("invalid generator context".into()));
        }
        self.context.copy_from_slice(context);
        Ok(())
    }

    pub fn successor_table(&self) -> &[[u32; N_SUCCESSORS]] {
        &self.successors
    }
}

/// Domain sources for one corpus.
pub fn build_generators(config: &CorpusConfig) -> Result<Vec<DomainGenerator>> {
    config.validate()?;
    Ok((0..config.n_domains)
        .map(|d| DomainGenerator::build(config, d))
        .collect())
}

/// A batch of whole sequences with their (diagnostic-only) domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// Row-major `batch x seq_len`.
    pub tokens: Vec<u32>,
    /// One domain id per sequence; never an input to the model.
    pub domain_labels: Vec<u32>,
}

impl TokenBatch {
    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Draws `batch_size` sequences; each picks its domain by weight, then that
/// domain's chain emits `seq_len` tokens.
pub fn next_batch(
    generators: &mut [DomainGenerator],
    config: &CorpusConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> TokenBatch {
    let weights = config.normalized_weights();
    let s = config.seq_len;
    let mut tokens = Vec::with_capacity(batch_size * s);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u = next_f64(rng);
        let mut acc = 0.0;
        let mut domain = generators.len() - 1;
        for (d, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                domain = d;
                break;
            }
        }
        labels.push(domain as u32);
        let g = &mut generators[domain];
        for _ in 0..s {
            tokens.push(g.next_token(rng));
        }
    }
    TokenBatch {
        batch: batch_size,
        seq_len: s,
        tokens,
        domain_labels: labels,
    }
}

/// Owns the generators plus the sampling stream; the unit the trainer
/// consumes and checkpoints.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    pub config: CorpusConfig,
    generators: Vec<DomainGenerator>,
    rng: ChaCha8Rng,
}

impl CorpusStream {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        let generators = build_generators(&config)?;
        let rng = substream(config.seed, "datagen/stream");
        Ok(Self {
            config,
            generators,
            rng,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> TokenBatch {
        next_batch(&mut self.generators, &self.config, batch_size, &mut self.rng)
    }

    /// Position snapshot: sampling-stream offset plus each chain's context.
    pub fn state(&self) -> CorpusStreamState {
        CorpusStreamState {
            word_pos: self.rng.get_word_pos(),
            contexts: self.generators.iter().map(|g| g.context().to_vec()).collect(),
        }
    }

    pub fn restore(&mut self, state: &CorpusStreamState) -> Result<()> {
        if state.contexts.len() != self.generators.len() {
            return Err(Error::Checkpoint("generator count mismatch".into()));
        }
        for (g, ctx) in self.generators.iter_mut().zip(&state.contexts) {
            g.set_context(ctx)?;
        }
        self.rng.set_word_pos(state.word_pos);
        Ok(())
    }

    pub fn generators(&self) -> &[DomainGenerator] {
        &self.generators
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStreamState {
    pub word_pos: u128,
    pub contexts: Vec<Vec<u32>>,
}

/// Raw token file: everything needed to replay a corpus without its config.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFile {
    pub vocab_size: u32,
    pub tokens: Vec<u32>,
}

impl TokenFile {
    /// Head/tail split with the validation share taken deterministically
    /// from the end.
    pub fn split(&self, val_fraction: f64) -> (&[u32], &[u32]) {
        assert!((0.0..1.0).contains(&val_fraction));
        let cut = ((self.tokens.len() as f64) * (1.0 - val_fraction)).floor() as usize;
        self.tokens.split_at(cut)
    }
}

pub fn write_token_file(path: &Path, vocab_size: u32, tokens: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + tokens.len() * 4);
    buf.extend_from_slice(&TOKEN_FILE_MAGIC);
    buf.extend_from_slice(&TOKEN_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab_size.to_le_bytes());
    buf.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for &t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Sequential batches replayed from a raw token file. Sequences are
/// consecutive non-overlapping windows over the token array, wrapping at the
/// last full window. Token files carry no domain labels, so every sequence
/// is labeled domain 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFileStream {
    tokens: Vec<u32>,
    vocab_size: usize,
    seq_len: usize,
    next_seq: u64,
}

impl TokenFileStream {
    pub fn new(file: TokenFile, seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Data(format!("seq_len {seq_len} too short")));
        }
        if file.tokens.len() < seq_len {
            return Err(Error::Data(format!(
                "token file holds {} tokens, one sequence needs {seq_len}",
                file.tokens.len()
            )));
        }
        Ok(Self {
            tokens: file.tokens,
            vocab_size: file.vocab_size as usize,
            seq_len,
            next_seq: 0,
        })
    }

    /// Full sequences available before the stream wraps.
    pub fn n_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn next_batch(&mut self, batch_size: usize) -> TokenBatch {
        let n = self.n_sequences() as u64;
        let mut tokens = Vec::with_capacity(batch_size * self.seq_len);
        for _ in 0..batch_size {
            let s = (self.next_seq % n) as usize * self.seq_len;
            tokens.extend_from_slice(&self.tokens[s..s + self.seq_len]);
            self.next_seq += 1;
        }
        TokenBatch {
            batch: batch_size,
            seq_len: self.seq_len,
            tokens,
            domain_labels: vec![0; batch_size],
        }
    }
}

/// A training batch producer: the synthetic corpus or a replayed token file.
#[derive(Debug, Clone)]
pub enum DataSource {
    Corpus(CorpusStream),
    File { path: String, stream: TokenFileStream },
}

/// Serializable snapshot of a [`DataSource`], sufficient to rebuild it at
/// the exact position it held. File-backed sources record the path they were
/// opened from, so resuming requires the file to still be there.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Corpus {
        config: CorpusConfig,
        state: CorpusStreamState,
    },
    File {
        path: String,
        seq_len: usize,
        next_seq: u64,
    },
}

impl DataSource {
    pub fn from_corpus(config: CorpusConfig) -> Result<Self> {
        Ok(Self::Corpus(CorpusStream::new(config)?))
    }

    pub fn from_token_file(path: &Path, seq_len: usize) -> Result<Self> {
        let stream = TokenFileStream::new(load_token_file(path)?, seq_len)?;
        Ok(Self::File {
            path: path.to_string_lossy().into_owned(),
            stream,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> TokenBatch {
        match self {
            Self::Corpus(s) => s.next_batch(batch_size),
            Self::File { stream, .. } => stream.next_batch(batch_size),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Self::Corpus(s) => s.config.seq_len,
            Self::File { stream, .. } => stream.seq_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Corpus(s) => s.config.vocab_size,
            Self::File { stream, .. } => stream.vocab_size,
        }
    }

    pub fn n_domains(&self) -> usize {
        match self {
            Self::Corpus(s) => s.config.n_domains,
            Self::File { .. } => 1,
        }
    }

    pub fn snapshot(&self) -> DataSpec {
        match self {
            Self::Corpus(s) => DataSpec::Corpus {
                config: s.config.clone(),
                state: s.state(),
            },
            Self::File { path, stream } => DataSpec::File {
                path: path.clone(),
                seq_len: stream.seq_len,
                next_seq: stream.next_seq,
            },
        }
    }

    pub fn from_spec(spec: DataSpec) -> Result<Self> {
        match spec {
            DataSpec::Corpus { config, state } => {
                let mut stream = CorpusStream::new(config)?;
                stream.restore(&state)?;
                Ok(Self::Corpus(stream))
            }
            DataSpec::File {
                path,
                seq_len,
                next_seq,
            } => {
                let mut stream = TokenFileStream::new(load_token_file(Path::new(&path))?, seq_len)?;
                stream.next_seq = next_seq;
                Ok(Self::File { path, stream })
            }
        }
    }
}

pub fn load_token_file(path: &Path) -> Result<TokenFile> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read token file {}: {e}", path.display())))?;
    if bytes.len() < 20 {
        return Err(Error::Data(format!(
            "token file {} too short for its header",
            path.display()
        )));
    }
    if bytes[..4] != TOKEN_FILE_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a token file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOKEN_FILE_VERSION {
        return Err(Error::Data(format!(
            "token file version {version}, expected {TOKEN_FILE_VERSION}"
        )));
    }
    let vocab_size = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = &bytes[20..];
    if payload.len() != count * 4 {
        return Err(Error::Data(format!(
            "token file declares {count} tokens but carries {} payload bytes",
            payload.len()
        )));
    }
    let mut tokens = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let t = u32::from_le_bytes(chunk.try_into().unwrap());
        if t >= vocab_size {
            return Err(Error::Data(format!(
                "token {t} at offset {i} outside vocab {vocab_size}"
            )));
        }
        tokens.push(t);
    }
    Ok(TokenFile { vocab_size, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(overlap: f64, seed: u64) -> CorpusConfig {
        CorpusConfig {
            n_domains: 4,
            vocab_size: 512,
            markov_order: 2,
            domain_vocab_overlap: overlap,
            domain_weights: vec![1.0; 4],
            seq_len: 32,
            seed,
        }
    }

    #[test]
    fn zero_overlap_confines_each_domain_to_its_band() {
        let c = cfg(0.0, 1);
        let mut stream = CorpusStream::new(c.clone()).unwrap();
        let batch = stream.next_batch(64);
        for i in 0..batch.batch {
            let d = batch.domain_labels[i] as usize;
            let (lo, hi) = c.band(d);
            for &t in batch.sequence(i) {
                assert!(
                    (t as usize) >= lo && (t as usize) < hi,
                    "domain {d} token {t} outside band [{lo}, {hi})"
                );
            }
        }
        // 512 / 4 at zero overlap: exact 128-wide bands.
        assert_eq!(c.band(0), (0, 128));
        assert_eq!(c.band(3), (384, 512));
    }

    #[test]
    fn overlapping_bands_share_their_edges() {
        let c = cfg(0.1, 1);
        let (lo1, hi1) = c.band(1);
        let (lo2, hi2) = c.band(2);
        assert!(lo2 < hi1, "adjacent bands must overlap");
        assert!(hi1 - lo2 >= 10, "overlap width");
        assert!(lo1 < lo2 && hi1 < hi2);
        assert!(c.band(0).0 == 0 && c.band(3).1 == 512);
    }

    #[test]
    fn same_seed_rebuilds_identical_tables_and_streams() {
        let c = cfg(0.1, 42);
        let mut a = CorpusStream::new(c.clone()).unwrap();
        let mut b = CorpusStream::new(c).unwrap();
        for (ga, gb) in a.generators().iter().zip(b.generators()) {
            assert_eq!(ga.successor_table(), gb.successor_table());
        }
        assert_eq!(a.next_batch(8), b.next_batch(8));
    }

    #[test]
    fn first_tokens_for_seed_42_are_frozen() {
        let mut stream = CorpusStream::new(cfg(0.1, 42)).unwrap();
        let batch = stream.next_batch(1);
        // Pinned observed prefix; any change means the stream is no longer
        // reproducible across builds.
        let got = &batch.tokens[..10];
        let want = frozen_seed_42_prefix();
        assert_eq!(got, want, "stream prefix drifted");
    }

    fn frozen_seed_42_prefix() -> [u32; 10] {
        [456, 447, 398, 472, 482, 474, 503, 500, 456, 447]
    }

    #[test]
    fn domain_frequencies_track_weights() {
        let mut c = cfg(0.0, 7);
        c.domain_weights = vec![0.4, 0.3, 0.2, 0.1];
        c.seq_len = 4;
        let mut stream = CorpusStream::new(c).unwrap();
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..10 {
            let b = stream.next_batch(n / 10);
            for &d in &b.domain_labels {
                counts[d as usize] += 1;
            }
        }
        let want = [0.4, 0.3, 0.2, 0.1];
        for d in 0..4 {
            let f = counts[d] as f64 / n as f64;
            assert!(
                (f - want[d]).abs() < 0.02,
                "domain {d} frequency {f} vs weight {}",
                want[d]
            );
        }
    }

    #[test]
    fn tokens_always_stay_inside_the_vocabulary() {
        let c = cfg(1.0, 9);
        let v = c.vocab_size as u32;
        let mut stream = CorpusStream::new(c).unwrap();
        let b = stream.next_batch(32);
        assert!(b.tokens.iter().all(|&t| t < v));
    }

    /// Empirical unigram distribution against the chain's stationary
    /// distribution, computed by power iteration over the sparse context
    /// transition graph.
    #[test]
    fn sample_matches_stationary_distribution() {
        let mut c = cfg(0.0, 11);
        c.n_domains = 1;
        c.vocab_size = 128;
        c.domain_weights = vec![1.0];
        c.seq_len = 1000;
        let mut stream = CorpusStream::new(c).unwrap();
        let band = 128usize;

        // Stationary context distribution, starting from the generator's
        // current context so the iteration lives on the reachable class.
        let g = &stream.generators()[0];
        let table: Vec<[u32; N_SUCCESSORS]> = g.successor_table().to_vec();
        let mut p = vec![0.0f64; band * band];
        let ctx = g.context();
        p[ctx[0] as usize * band + ctx[1] as usize] = 1.0;
        let mut sum_p = vec![0.0f64; band * band];
        for it in 0..600 {
            let mut q = vec![0.0f64; band * band];
            for (idx, mass) in p.iter().enumerate() {
                if *mass == 0.0 {
                    continue;
                }
                let b_tok = idx % band;
                for (slot, &w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                    let c_tok = table[idx][slot] as usize;
                    q[b_tok * band + c_tok] += mass * w;
                }
            }
            p = q;
            if it >= 400 {
                for (s, v) in sum_p.iter_mut().zip(&p) {
                    *s += v;
                }
            }
        }
        let norm: f64 = sum_p.iter().sum();
        // Expected emission distribution under the averaged stationary
        // context weights.
        let mut expected = vec![0.0f64; band];
        for (idx, mass) in sum_p.iter().enumerate() {
            if *mass == 0.0 {
                continue;
            }
            for (slot, &w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                expected[table[idx][slot] as usize] += mass / norm * w;
            }
        }

        let mut counts = vec![0u64; band];
        let n_tokens = 1_000_000usize;
        for _ in 0..n_tokens / 1000 {
            let b = stream.next_batch(1);
            for &t in &b.tokens {
                counts[t as usize] += 1;
            }
        }
        let tv: f64 = (0..band)
            .map(|t| (counts[t] as f64 / n_tokens as f64 - expected[t]).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "total variation {tv} too large");
    }

    #[test]
    fn stream_state_round_trips() {
        let mut stream = CorpusStream::new(cfg(0.1, 13)).unwrap();
        stream.next_batch(5);
        let state = stream.state();
        let a = stream.next_batch(3);
        let mut other = CorpusStream::new(cfg(0.1, 13)).unwrap();
        other.restore(&state).unwrap();
        let b = other.next_batch(3);
        assert_eq!(a, b);
    }

    #[test]
    fn token_file_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tok");
        let tokens: Vec<u32> = (0..1000u32).map(|i| i % 512).collect();
        write_token_file(&path, 512, &tokens).unwrap();
        let back = load_token_file(&path).unwrap();
        assert_eq!(back.vocab_size, 512);
        assert_eq!(back.tokens, tokens);

        let (train, val) = back.split(0.1);
        assert_eq!(train.len(), 900);
        assert_eq!(val.len(), 100);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.tok");
        std::fs::write(&bad_magic, &bytes).unwrap();
        let err = load_token_file(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let truncated = dir.path().join("truncated.tok");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&truncated, &orig[..orig.len() - 3]).unwrap();
        assert!(load_token_file(&truncated).is_err());

        let oob = dir.path().join("oob.tok");
        write_token_file(&oob, 512, &[1, 2, 3]).unwrap();
        let mut bytes = std::fs::read(&oob).unwrap();
        // Rewrite the third token to the vocab boundary.
        bytes[20 + 8..20 + 12].copy_from_slice(&512u32.to_le_bytes());
        std::fs::write(&oob, &bytes).unwrap();
        let err = load_token_file(&oob).unwrap_err().to_string();
        assert!(err.contains("offset 2"), "{err}");
    }

    #[test]
    fn config_validation_guards_sizes() {
        let mut c = cfg(0.1, 1);
        c.vocab_size = 4;
        assert!(c.validate().is_err());
        let mut c = cfg(0.1, 1);
        c.domain_weights = vec![0.0; 4];
        assert!(c.validate().is_err());
        let mut c = cfg(0.1, 1);
        c.markov_order = 9;
        assert!(c.validate().is_err(), "context table would explode");
        assert!(cfg(0.1, 1).validate().is_ok());
    }

    #[test]
    fn file_stream_walks_windows_and_wraps() {
        let tokens: Vec<u32> = (0..26).collect();
        let mut s = TokenFileStream::new(
            TokenFile {
                vocab_size: 32,
                tokens,
            },
            8,
        )
        .unwrap();
        assert_eq!(s.n_sequences(), 3);
        let b = s.next_batch(2);
        assert_eq!(b.sequence(0), (0..8).collect::<Vec<u32>>());
        assert_eq!(b.sequence(1), (8..16).collect::<Vec<u32>>());
        assert_eq!(b.domain_labels, vec![0, 0]);
        // Third window, then wrap to the first.
        let b = s.next_batch(2);
        assert_eq!(b.sequence(0), (16..24).collect::<Vec<u32>>());
        assert_eq!(b.sequence(1), (0..8).collect::<Vec<u32>>());

        assert!(TokenFileStream::new(
            TokenFile {
                vocab_size: 32,
                tokens: vec![1, 2, 3]
            },
            8
        )
        .is_err());
    }

    #[test]
    fn data_source_snapshot_resumes_both_variants() {
        let mut corpus = DataSource::from_corpus(cfg(0.1, 9)).unwrap();
        corpus.next_batch(5);
        let spec = corpus.snapshot();
        let a = corpus.next_batch(4);
        let b = DataSource::from_spec(spec).unwrap().next_batch(4);
        assert_eq!(a, b);
        assert_eq!(corpus.n_domains(), 4);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.emot");
        write_token_file(&path, 64, &(0..64).cycle().take(640).collect::<Vec<u32>>()).unwrap();
        let mut file = DataSource::from_token_file(&path, 16).unwrap();
        assert_eq!(file.vocab_size(), 64);
        assert_eq!(file.seq_len(), 16);
        assert_eq!(file.n_domains(), 1);
        file.next_batch(3);
        let spec = file.snapshot();
        let a = file.next_batch(4);
        let b = DataSource::from_spec(spec.clone()).unwrap().next_batch(4);
        assert_eq!(a, b);

        // Resume fails cleanly when the backing file is gone.
        drop(dir);
        assert!(DataSource::from_spec(spec).is_err());
    }
}
