//! Seeded, reproducible sampling schedule over dataset indices.
//!
//! Wire constants: the seed is `SHA-256(registration_digest || beacon)`; draw
//! `k` is the first 8 bytes (big-endian) of `HMAC-SHA-256(seed, k as u64 BE)`,
//! mapped to `[0, N)` by rejection above the largest multiple of `N` below
//! `2^64`. Repeated indices are skipped, so the schedule is a
//! without-replacement prefix of a seed-determined permutation.

use std::collections::HashSet;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::digest::Digest;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("{what} must be 32 bytes, got {got}")]
    Length { what: &'static str, got: usize },
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("all {0} indices have been scheduled")]
    Exhausted(u64),
}

/// Public randomness for an audit: `SHA-256(registration_digest || beacon)`.
pub fn derive_seed(registration_digest: &[u8], beacon: &[u8]) -> Result<Digest, ScheduleError> {
    if registration_digest.len() != 32 {
        return Err(ScheduleError::Length { what: "registration digest", got: registration_digest.len() });
    }
    if beacon.len() != 32 {
        return Err(ScheduleError::Length { what: "beacon", got: beacon.len() });
    }
    Ok(Digest::of_parts(&[registration_digest, beacon]))
}

/// Keyed pseudorandom draw number `counter`.
pub fn prf_draw(seed: &Digest, counter: u64) -> u64 {
    let mut mac = HmacSha256::new_from_slice(seed.as_bytes()).expect("hmac accepts any key length");
    mac.update(&counter.to_be_bytes());
    let out = mac.finalize().into_bytes();
    u64::from_be_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Exclusive upper limit for accepted raw draws: `floor(2^64 / n) * n`.
fn acceptance_limit(n: u64) -> u128 {
    let space = 1u128 << 64;
    space - space % u128::from(n)
}

#[derive(Debug, Clone)]
pub struct SamplingSchedule {
    seed: Digest,
    population_size: u64,
    draw_counter: u64,
    limit: u128,
    emitted: Vec<u64>,
    seen: HashSet<u64>,
}

impl SamplingSchedule {
    pub fn new(seed: Digest, population_size: u64) -> Result<Self, ScheduleError> {
        if population_size == 0 {
            return Err(ScheduleError::EmptyPopulation);
        }
        Ok(SamplingSchedule {
            seed,
            population_size,
            draw_counter: 0,
            limit: acceptance_limit(population_size),
            emitted: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn seed(&self) -> &Digest {
        &self.seed
    }

    pub fn population_size(&self) -> u64 {
        self.population_size
    }

    /// Number of distinct indices emitted so far.
    pub fn position(&self) -> u64 {
        self.emitted.len() as u64
    }

    pub fn emitted(&self) -> &[u64] {
        &self.emitted
    }

    pub fn is_exhausted(&self) -> bool {
        self.position() == self.population_size
    }

    pub fn next_index(&mut self) -> Result<u64, ScheduleError> {
        if self.is_exhausted() {
            return Err(ScheduleError::Exhausted(self.population_size));
        }
        loop {
            let raw = prf_draw(&self.seed, self.draw_counter);
            self.draw_counter += 1;
            if u128::from(raw) >= self.limit {
                continue;
            }
            let idx = raw % self.population_size;
            if self.seen.insert(idx) {
                self.emitted.push(idx);
                return Ok(idx);
            }
        }
    }

    /// Index at schedule position `pos`, drawing forward as needed.
    pub fn index_at(&mut self, pos: u64) -> Result<u64, ScheduleError> {
        while self.position() <= pos {
            self.next_index()?;
        }
        Ok(self.emitted[pos as usize])
    }

    /// Schedule positions `[start, start + len)`.
    pub fn segment(&mut self, start: u64, len: u64) -> Result<Vec<u64>, ScheduleError> {
        if len == 0 {
            return Ok(Vec::new());
        }
        self.index_at(start + len - 1)?;
        Ok(self.emitted[start as usize..(start + len) as usize].to_vec())
    }
}

/// First `k` scheduled indices for `(seed, population_size)`.
pub fn schedule_prefix(seed: &Digest, population_size: u64, k: u64) -> Result<Vec<u64>, ScheduleError> {
    SamplingSchedule::new(*seed, population_size)?.segment(0, k)
}

/// True iff `claimed` equals the schedule prefix of the same length.
pub fn verify_membership(seed: &Digest, population_size: u64, claimed: &[u64]) -> bool {
    verify_segment(seed, population_size, 0, claimed)
}

/// True iff `claimed` equals schedule positions `[start, start + claimed.len())`.
pub fn verify_segment(seed: &Digest, population_size: u64, start: u64, claimed: &[u64]) -> bool {
    let len = claimed.len() as u64;
    if population_size == 0 || start.saturating_add(len) > population_size {
        return false;
    }
    match SamplingSchedule::new(*seed, population_size).and_then(|mut s| s.segment(start, len)) {
        Ok(expected) => expected == claimed,
        Err(_) => false,
    }
}
