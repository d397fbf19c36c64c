//! Counter-based random source.
//!
//! Each `(seed, stream_id)` pair maps to a SplitMix64 sequence with its own
//! odd increment: output `k` is `mix64(base + k·gamma)`. Nothing is shared
//! between streams, so replication `r` can run on any thread with
//! `stream_id = r` and still reproduce bit-for-bit.

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Variant finalizer used to derive increments, following the splittable design:
// force the increment odd and reject ones with too few bit transitions.
#[inline]
fn mix_gamma(z: u64) -> u64 {
    let mut z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z = (z ^ (z >> 33)) | 1;
    if (z ^ (z >> 1)).count_ones() < 24 {
        z ^ 0xaaaa_aaaa_aaaa_aaaa
    } else {
        z
    }
}

#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream_id: u64,
    base: u64,
    gamma: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

/// The identifying part of a source; what configs and reports persist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceId {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(seed ^ mix64(stream_id.wrapping_add(GOLDEN_GAMMA)));
        let gamma = mix_gamma(key.wrapping_add(stream_id.wrapping_mul(GOLDEN_GAMMA)));
        let base = mix64(key ^ GOLDEN_GAMMA);
        Self { seed, stream_id, base, gamma, counter: 0, spare_normal: None }
    }

    pub fn id(&self) -> SourceId {
        SourceId { seed: self.seed, stream_id: self.stream_id }
    }

    /// An independent child stream, a pure function of `(seed, stream_id, tag)`.
    pub fn substream(&self, tag: u64) -> RandomSource {
        let child_seed = mix64(self.seed ^ mix64(self.stream_id.wrapping_mul(GOLDEN_GAMMA) ^ 0x5851_f42d_4c95_7f2d));
        RandomSource::new(child_seed, tag)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.base.wrapping_add(self.counter.wrapping_mul(self.gamma)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform on [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift with rejection.
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal by Box–Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Laplace with density `exp(−|x|/b)/(2b)`: a signed exponential.
    pub fn laplace(&mut self, b: f64) -> f64 {
        let e = -self.uniform_open0().ln();
        self.rademacher() * b * e
    }
}
