use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic random stream keyed by `(seed, label)`.
///
/// Components take their own labelled stream so that adding draws in one
/// component never shifts the values another component sees.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label_hash: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let label_hash = fnv1a(label);
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(label_hash);
        Self {
            seed,
            label_hash,
            inner,
        }
    }

    /// Independent child stream; depends only on this stream's key, not its position.
    pub fn fork(&self, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed ^ self.label_hash.rotate_left(17));
        let label_hash = fnv1a(label);
        inner.set_stream(label_hash);
        Self {
            seed: self.seed ^ self.label_hash.rotate_left(17),
            label_hash,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn sample<T, D: Distribution<T>>(&mut self, dist: &D) -> T {
        dist.sample(&mut self.inner)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
