use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Identifies one batch: the emitting stream and its sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchId {
    pub stream: u32,
    pub seq: u64,
}

impl fmt::Display for BatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.stream, self.seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

/// Resumable position of a [`BatchStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub id: BatchId,
    /// Indices into the dataset.
    pub indices: Vec<usize>,
}

/// Epoch-based sampling without replacement. Each epoch's order is a pure
/// function of `(shuffle_seed, epoch)`, so a stream is fully described by
/// its spec and [`StreamState`].
#[derive(Clone, Debug)]
pub struct BatchStream {
    spec: BatchSpec,
    tag: u32,
    len: usize,
    state: StreamState,
    perm: Vec<usize>,
}

impl BatchStream {
    pub fn new(spec: BatchSpec, tag: u32, dataset_len: usize) -> Result<Self, DataError> {
        Self::from_state(spec, tag, dataset_len, StreamState::default())
    }

    pub fn from_state(spec: BatchSpec, tag: u32, dataset_len: usize, state: StreamState) -> Result<Self, DataError> {
        if spec.batch_size == 0 {
            return Err(DataError::InvalidSpec("batch size must be at least 1".into()));
        }
        if dataset_len == 0 {
            return Err(DataError::Empty("batch stream over an empty dataset".into()));
        }
        if spec.drop_last && spec.batch_size > dataset_len {
            return Err(DataError::BatchTooLarge {
                batch: spec.batch_size,
                size: dataset_len,
            });
        }
        let perm = epoch_order(spec.shuffle_seed, state.epoch, dataset_len);
        Ok(BatchStream {
            spec,
            tag,
            len: dataset_len,
            state,
            perm,
        })
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    fn advance_epoch(&mut self) {
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.perm = epoch_order(self.spec.shuffle_seed, self.state.epoch, self.len);
    }

    pub fn next_batch(&mut self) -> Batch {
        let remaining = self.len - self.state.cursor;
        if remaining == 0 || (self.spec.drop_last && remaining < self.spec.batch_size) {
            self.advance_epoch();
        }
        let take = self.spec.batch_size.min(self.len - self.state.cursor);
        let indices = self.perm[self.state.cursor..self.state.cursor + take].to_vec();
        self.state.cursor += take;
        let id = BatchId {
            stream: self.tag,
            seq: self.state.seq,
        };
        self.state.seq += 1;
        Batch { id, indices }
    }
}

fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}
