//! Per-target Bloom filters over source SIDs.
//!
//! Probe positions use double hashing: `pos_i = (h1 + i * h2) mod m` with
//! `h1 = mix64(sid ^ seed1)` and `h2 = mix64(sid ^ seed2) | 1`. The sum is
//! evaluated exactly (not in wrapping 64-bit arithmetic), so consecutive
//! positions differ by `h2 mod m`.

mod image;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::Sid;
use crate::par::{self, Exec};

pub use image::{build_image, Descriptor, ImageError, ImageErrorKind, ImageView, MetadataImage, HEADER_LEN};

/// Largest hash count accepted anywhere.
pub const MAX_K: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Bits; a positive multiple of 64.
    pub m: u32,
    /// Hash count in `1..=8`.
    pub k: u8,
    pub seed1: u64,
    pub seed2: u64,
}

/// `m` and `k` chosen for a target set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sizing {
    pub m: u32,
    pub k: u8,
}

/// 64-bit avalanche mixer (SplitMix64 output function, with the increment).
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(1 - e^(-k n / m))^k`
pub fn analytic_fp(m: u32, k: u8, n: usize) -> f64 {
    let k = f64::from(k);
    (1.0 - (-k * n as f64 / f64::from(m)).exp()).powf(k)
}

fn round_up_64(bits: f64) -> u32 {
    let words = (bits / 64.0).ceil().max(1.0);
    (words as u32) * 64
}

/// Picks `(m, k)` for `n` members so the analytic rate stays at or below
/// `target_fp`.
pub fn size_filter(n: usize, target_fp: f64) -> Sizing {
    assert!(target_fp > 0.0 && target_fp < 1.0, "target_fp must lie in (0, 1)");
    if n == 0 {
        // nothing to encode: an all-zero word rejects every source
        return Sizing { m: 64, k: 1 };
    }
    let ln2 = std::f64::consts::LN_2;
    let ideal = (n as f64 * -target_fp.ln() / (ln2 * ln2)).ceil();
    let mut m = round_up_64(ideal);
    let k = ((f64::from(m) / n as f64) * ln2).round().clamp(1.0, f64::from(MAX_K)) as u8;
    while analytic_fp(m, k, n) > target_fp {
        m += 64;
    }
    Sizing { m, k }
}

/// Smallest multiple of 64 meeting `target_fp` with a fixed `k`.
pub fn min_bits_for(n: usize, k: u8, target_fp: f64) -> u32 {
    if analytic_fp(64, k, n) <= target_fp {
        return 64;
    }
    // fp is decreasing in m for fixed k and n
    let mut hi: u32 = 2;
    while analytic_fp(hi * 64, k, n) > target_fp {
        hi *= 2;
    }
    let mut lo = hi / 2; // fails
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if analytic_fp(mid * 64, k, n) <= target_fp {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi * 64
}

/// The `k` probe positions for `sid`.
pub fn hash_positions(sid: Sid, params: &FilterParams) -> Vec<u32> {
    let mut out = Vec::with_capacity(params.k as usize);
    for_each_position(sid, params.m, params.k, params.seed1, params.seed2, |p| out.push(p));
    out
}

pub(crate) fn for_each_position(sid: Sid, m: u32, k: u8, seed1: u64, seed2: u64, mut f: impl FnMut(u32)) {
    let s = u64::from(sid.get());
    let h1 = mix64(s ^ seed1);
    let h2 = mix64(s ^ seed2) | 1;
    let m = u64::from(m);
    let step = h2 % m;
    let mut pos = h1 % m;
    for _ in 0..k {
        f(pos as u32);
        pos = (pos + step) % m;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    params: FilterParams,
    n_inserted: usize,
    words: Vec<u64>,
}

impl BloomFilter {
    pub fn empty(params: FilterParams) -> Self {
        assert!(params.m >= 64 && params.m.is_multiple_of(64), "m must be a positive multiple of 64");
        assert!((1..=MAX_K).contains(&params.k), "k must lie in 1..=8");
        BloomFilter { params, n_inserted: 0, words: vec![0; (params.m / 64) as usize] }
    }

    /// Sets the probe bits of every member.
    pub fn encode<'a>(allowed: impl IntoIterator<Item = &'a Sid>, params: FilterParams) -> Self {
        let mut f = BloomFilter::empty(params);
        let members: BTreeSet<Sid> = allowed.into_iter().copied().collect();
        for sid in &members {
            for_each_position(*sid, params.m, params.k, params.seed1, params.seed2, |p| {
                f.words[(p / 64) as usize] |= 1 << (p % 64);
            });
        }
        f.n_inserted = members.len();
        f
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn n_inserted(&self) -> usize {
        self.n_inserted
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, b: u32) -> bool {
        self.words[(b / 64) as usize] >> (b % 64) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn query(&self, sid: Sid) -> bool {
        self.query_counted(sid).0
    }

    /// Membership plus the number of bit reads performed. Every probe is
    /// read, so the count is always `k`.
    pub fn query_counted(&self, sid: Sid) -> (bool, u32) {
        let p = &self.params;
        let mut all = true;
        let mut reads = 0;
        for_each_position(sid, p.m, p.k, p.seed1, p.seed2, |pos| {
            reads += 1;
            all &= self.bit(pos);
        });
        (all, reads)
    }
}

/// Fraction of `probes` uniformly random non-member SIDs the filter admits.
/// Deterministic in `seed` regardless of `exec`.
pub fn empirical_fp(filter: &BloomFilter, members: &BTreeSet<Sid>, probes: usize, seed: u64, exec: Exec) -> f64 {
    if probes == 0 {
        return 0.0;
    }
    const CHUNK: usize = 1 << 15;
    let chunks = probes.div_ceil(CHUNK);
    let hits: usize = par::map_range(chunks, exec, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let count = CHUNK.min(probes - c * CHUNK);
        let mut hits = 0;
        let mut done = 0;
        while done < count {
            let sid = Sid::new(rng.gen_range(1..=Sid::MAX)).expect("in range");
            if members.contains(&sid) {
                continue;
            }
            done += 1;
            hits += usize::from(filter.query(sid));
        }
        hits
    })
    .into_iter()
    .sum();
    hits as f64 / probes as f64
}

/// Draws `n` distinct random SIDs.
pub fn random_sids(n: usize, rng: &mut impl Rng) -> BTreeSet<Sid> {
    let mut out = BTreeSet::new();
    while out.len() < n {
        out.insert(Sid::new(rng.gen_range(1..=Sid::MAX)).expect("in range"));
    }
    out
}
