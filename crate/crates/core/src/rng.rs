//! Deterministic splittable random streams.
//!
//! Counter-based design: the stream is a pure function of `(seed, position)`,
//! so equal seeds give bitwise-equal sequences on every platform, and
//! `split(child_id)` derives an independent stream without consuming state
//! from the parent.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded counter-based random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    gauss_spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed: mix(seed ^ GAMMA), counter: 0, gauss_spare: None }
    }

    /// Derives an independent deterministic child stream. Splitting does not
    /// advance the parent, so the same `(seed, child_id)` always yields the
    /// same stream regardless of how much the parent has been used.
    pub fn split(&self, child_id: u64) -> Rng {
        Rng {
            seed: mix(self.seed ^ mix(child_id.wrapping_add(GAMMA))),
            counter: 0,
            gauss_spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let value = mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)).wrapping_add(GAMMA));
        self.counter += 1;
        value
    }

    /// Uniform on [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) without modulo bias worth worrying about
    /// at the bounds used here (bound << 2^64).
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below requires a positive bound");
        (self.next_u64() % bound as u64) as usize
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(spare) = self.gauss_spare.take() {
            return spare;
        }
        // Reject u1 == 0 so the log is finite.
        let mut u1 = self.next_f64();
        while u1 <= 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, len: usize, mean: f64, std: f64) -> Vec<f64> {
        (0..len).map(|_| mean + std * self.normal()).collect()
    }

    /// `count` distinct indices drawn uniformly from [0, n), in draw order
    /// (partial Fisher-Yates over an index table).
    pub fn sample_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot draw {count} distinct indices from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
