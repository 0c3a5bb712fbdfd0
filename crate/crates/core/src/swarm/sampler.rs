//! Per-peer sample order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PeerId;

/// Endless stream of sample indices: a fresh seeded permutation of the
/// dataset every epoch, distinct per peer.
#[derive(Debug, Clone)]
pub struct SampleStream {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(num_samples: usize, seed: u64, peer: PeerId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(peer.0 as u64 + 1);
        let mut s = Self {
            order: (0..num_samples).collect(),
            pos: 0,
            epoch: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let k = (n - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_are_permutations() {
        let mut s = SampleStream::new(10, 1, PeerId(0));
        let mut a = s.take(10);
        a.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let b = s.take(25);
        assert_eq!(b.len(), 25);
        assert_eq!(s.epoch(), 3);
    }

    #[test]
    fn deterministic_and_peer_specific() {
        let a = SampleStream::new(100, 5, PeerId(1)).take(20);
        assert_eq!(a, SampleStream::new(100, 5, PeerId(1)).take(20));
        assert_ne!(a, SampleStream::new(100, 5, PeerId(2)).take(20));
        assert!(SampleStream::new(0, 5, PeerId(2)).take(3).is_empty());
    }
}
