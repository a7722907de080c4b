//! Paired inputs and targets, stored column-wise, and the seeded batch sampler.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, SeededRng};

/// Inputs `X ∈ R^{m×n}` and targets `Y ∈ R^{o×n}`; sample `i` is column `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::dim("dataset", format!("{} target columns", x.cols()), y.cols()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.y.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            y: self.y.select_columns(idx),
        }
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }
}

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Epoch-based sampler: each epoch draws a fresh seeded permutation and cuts
/// it into batches, keeping the last short batch. When the batch covers the
/// whole dataset no shuffling happens, so full-batch runs see columns in
/// their stored order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: SeededRng,
    queue: VecDeque<Vec<usize>>,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Config(format!(
                "sampler needs positive sizes (n = {n}, batch = {batch_size})"
            )));
        }
        Ok(Self {
            n,
            batch_size: batch_size.min(n),
            rng: rng::seeded(seed),
            queue: VecDeque::new(),
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill(&mut self) {
        let order = if self.batch_size >= self.n {
            (0..self.n).collect()
        } else {
            rng::permutation(&mut self.rng, self.n)
        };
        self.queue.extend(order.chunks(self.batch_size).map(<[usize]>::to_vec));
        self.epoch += 1;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front().unwrap()
    }

    /// The batch that the next call to [`next_batch`](Self::next_batch) will
    /// return, drawing the next epoch's permutation if needed.
    pub fn peek(&mut self) -> &[usize] {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.front().unwrap()
    }
}
