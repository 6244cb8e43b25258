use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::IGNORE_TARGET;

use super::bpe::SEP_ID;

/// `[B, T]` inputs with their next-token targets, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Builds a batch from windows of `seq + 1` tokens. A target whose input
    /// is a document separator is ignored, so no position learns to predict
    /// the start of an unrelated document.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [usize]>, seq: usize) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut batch = 0;
        for w in windows {
            debug_assert_eq!(w.len(), seq + 1);
            inputs.extend_from_slice(&w[..seq]);
            targets.extend(w.windows(2).map(|p| if p[0] == SEP_ID { IGNORE_TARGET } else { p[1] }));
            batch += 1;
        }
        Self { inputs, targets, batch, seq }
    }

    /// Number of targets that count towards the loss.
    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_TARGET).count()
    }
}

fn window_starts(len: usize, seq: usize) -> Result<Vec<usize>> {
    if seq == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    if len < seq + 1 {
        return Err(Error::Data(format!(
            "{len} tokens are too few for one window of length {seq}"
        )));
    }
    Ok((0..=(len - seq - 1)).step_by(seq).collect())
}

/// Endless stream of training batches: non-overlapping windows at stride
/// `T`, reshuffled every epoch from a seeded generator.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    tokens: Vec<usize>,
    seq: usize,
    batch: usize,
    starts: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(tokens: Vec<usize>, seq: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let starts = window_starts(tokens.len(), seq)?;
        let mut it = Self { tokens, seq, batch, starts, cursor: 0, epoch: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        it.starts.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.starts.len()
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut picked = Vec::with_capacity(self.batch);
        while picked.len() < self.batch {
            if self.cursor == self.starts.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.starts.shuffle(&mut self.rng);
            }
            picked.push(self.starts[self.cursor]);
            self.cursor += 1;
        }
        let seq = self.seq;
        Batch::from_windows(picked.iter().map(|&s| &self.tokens[s..s + seq + 1]), seq)
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Fixed evaluation windows in corpus order, grouped into batches of at
/// most `batch` rows.
#[derive(Clone, Debug)]
pub struct EvalSet {
    batches: Vec<Batch>,
}

impl EvalSet {
    pub fn new(tokens: &[usize], seq: usize, batch: usize, max_windows: Option<usize>) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut starts = window_starts(tokens.len(), seq)?;
        if let Some(m) = max_windows {
            starts.truncate(m.max(1));
        }
        let batches = starts
            .chunks(batch)
            .map(|group| Batch::from_windows(group.iter().map(|&s| &tokens[s..s + seq + 1]), seq))
            .collect();
        Ok(Self { batches })
    }

    pub fn from_batches(batches: Vec<Batch>) -> Self {
        Self { batches }
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn is_empty(&self) -> bool {
        self.batches.iter().all(|b| b.target_count() == 0)
    }

    pub fn seq(&self) -> usize {
        self.batches.first().map_or(0, |b| b.seq)
    }
}
