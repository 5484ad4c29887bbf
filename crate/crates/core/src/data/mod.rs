//! Byte tokenization and deterministic packed-batch streaming.

pub mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Bytes map to ids `0..256`; BOS, EOS and PAD follow.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Drops special ids; any id outside the vocabulary is a format error.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS | PAD => {}
                _ => return Err(Error::Format(format!("token id {id} outside vocabulary of {VOCAB_SIZE}"))),
            }
        }
        Ok(out)
    }
}

/// Batch geometry. Each step consumes `batch_size · seq_len` predicted tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub batch_size: usize,
    pub seq_len: usize,
}

impl DataConfig {
    pub fn batch_tokens(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("data.batch_size must be positive".to_string());
        }
        if self.seq_len == 0 {
            errs.push("data.seq_len must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Monotone count of training tokens consumed (`steps × batch_tokens`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TokenBudgetClock {
    tokens: u64,
}

impl TokenBudgetClock {
    pub fn at(tokens: u64) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn advance(&mut self, batch_tokens: u64) {
        self.tokens += batch_tokens;
    }
}

/// `[batch, seq_len + 1]` ids for teacher forcing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    /// Per row: offsets where a new document begins (right after an EOS).
    pub doc_starts: Vec<Vec<usize>>,
}

impl SequenceBatch {
    pub fn row(&self, i: usize) -> &[usize] {
        let w = self.seq_len + 1;
        &self.ids[i * w..(i + 1) * w]
    }
}

/// Newline-delimited documents, already tokenized. Blank lines are skipped.
#[derive(Clone, Debug)]
pub struct Corpus {
    docs: Vec<Vec<u16>>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let docs = bytes
            .split(|&b| b == b'\n')
            .filter(|line| !line.is_empty())
            .map(|line| line.iter().map(|&b| b as u16).collect())
            .collect();
        Self { docs }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corpus = Self::from_bytes(&bytes);
        if corpus.docs.is_empty() {
            return Err(Error::Input(format!("corpus {} has no documents", path.display())));
        }
        Ok(corpus)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    /// Tokens per epoch including one EOS per document.
    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.len() + 1).sum()
    }

    /// Splits off every `k`-th document as a held-out set.
    pub fn split_every(&self, k: usize) -> (Corpus, Corpus) {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, d) in self.docs.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                held.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
        (Corpus { docs: train }, Corpus { docs: held })
    }
}

/// Deterministic infinite stream of packed batches.
///
/// Each epoch shuffles document order with a permutation seeded by
/// `(seed, epoch)`, concatenates documents with EOS separators and cuts the
/// result into non-overlapping windows of `seq_len + 1` ids. The tail that
/// does not fill a whole batch is dropped (and logged).
pub struct BatchStream {
    corpus: Corpus,
    cfg: DataConfig,
    seed: u64,
    epoch: u64,
    epoch_ids: Vec<u16>,
    batches_per_epoch: usize,
    next_in_epoch: usize,
    clock: TokenBudgetClock,
}

impl BatchStream {
    pub fn new(corpus: Corpus, cfg: DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let per_batch = cfg.batch_size * (cfg.seq_len + 1);
        if corpus.num_tokens() < per_batch {
            return Err(Error::Input(format!(
                "corpus holds {} tokens, one batch needs {per_batch}",
                corpus.num_tokens()
            )));
        }
        let mut s = Self {
            corpus,
            cfg,
            seed,
            epoch: 0,
            epoch_ids: Vec::new(),
            batches_per_epoch: 0,
            next_in_epoch: 0,
            clock: TokenBudgetClock::default(),
        };
        s.build_epoch(0);
        Ok(s)
    }

    pub fn open(path: &Path, cfg: DataConfig, seed: u64) -> Result<Self> {
        Self::new(Corpus::load(path)?, cfg, seed)
    }

    fn build_epoch(&mut self, epoch: u64) {
        let mut order: Vec<usize> = (0..self.corpus.docs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut ids = Vec::with_capacity(self.corpus.num_tokens());
        for i in order {
            ids.extend_from_slice(&self.corpus.docs[i]);
            ids.push(EOS as u16);
        }
        let per_batch = self.cfg.batch_size * (self.cfg.seq_len + 1);
        self.batches_per_epoch = ids.len() / per_batch;
        let dropped = ids.len() - self.batches_per_epoch * per_batch;
        if dropped > 0 {
            log::debug!("epoch {epoch}: dropping final partial chunk of {dropped} tokens");
        }
        self.epoch_ids = ids;
        self.epoch = epoch;
        self.next_in_epoch = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn clock(&self) -> TokenBudgetClock {
        self.clock
    }

    pub fn config(&self) -> DataConfig {
        self.cfg
    }

    /// Fast-forwards past `steps` batches without materializing them.
    pub fn skip_steps(&mut self, steps: u64) {
        let mut left = steps;
        while left > 0 {
            let avail = (self.batches_per_epoch - self.next_in_epoch) as u64;
            if left < avail {
                self.next_in_epoch += left as usize;
                self.clock.advance(left * self.cfg.batch_tokens());
                return;
            }
            left -= avail;
            self.clock.advance(avail * self.cfg.batch_tokens());
            self.build_epoch(self.epoch + 1);
        }
    }
}

impl Iterator for BatchStream {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.next_in_epoch == self.batches_per_epoch {
            self.build_epoch(self.epoch + 1);
        }
        let w = self.cfg.seq_len + 1;
        let per_batch = self.cfg.batch_size * w;
        let start = self.next_in_epoch * per_batch;
        let ids: Vec<usize> = self.epoch_ids[start..start + per_batch].iter().map(|&t| t as usize).collect();
        let doc_starts = ids
            .chunks(w)
            .map(|row| (1..w).filter(|&j| row[j - 1] == EOS).collect())
            .collect();
        self.next_in_epoch += 1;
        self.clock.advance(self.cfg.batch_tokens());
        Some(SequenceBatch { batch_size: self.cfg.batch_size, seq_len: self.cfg.seq_len, ids, doc_starts })
    }
}

/// First `n` batches of a stream, for held-out evaluation.
pub fn fixed_batches(corpus: Corpus, cfg: DataConfig, seed: u64, n: usize) -> Result<Vec<SequenceBatch>> {
    let stream = BatchStream::new(corpus, cfg, seed)?;
    let n = n.min(stream.batches_per_epoch().max(1));
    Ok(stream.take(n).collect())
}
