use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract_err, Result};
use crate::rng::{self, Purpose, StreamRng};

/// Chooses the two models updated at each iteration.
///
/// A random permutation of the models is cut into a cyclic schedule of
/// `ceil(k/2)` pairs (odd `k` wraps the last model onto the first), so any
/// `ceil(k/2)` consecutive iterations touch every model. The order inside
/// each pair is drawn at random.
#[derive(Clone, Debug)]
pub struct PairSampler {
    k: usize,
    schedule: Vec<(usize, usize)>,
    pos: usize,
    rng: StreamRng,
}

impl PairSampler {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return contract_err(format!("pair sampling needs at least 2 models, got {k}"));
        }
        let mut rng = rng::stream(seed, Purpose::Pairs, 0);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut schedule: Vec<(usize, usize)> = perm.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if k % 2 == 1 {
            schedule.push((perm[k - 1], perm[0]));
        }
        Ok(Self { k, schedule, pos: 0, rng })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Iterations within which every model is updated at least once.
    pub fn window(&self) -> usize {
        self.k.div_ceil(2)
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        let (a, b) = self.schedule[self.pos];
        self.pos = (self.pos + 1) % self.schedule.len();
        if self.rng.random_bool(0.5) {
            (b, a)
        } else {
            (a, b)
        }
    }
}
