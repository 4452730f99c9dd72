//! Hash-linked chain of experience blocks.
//!
//! Every block batches `B` experiences together with the payment records
//! settled since the previous block, and commits to its predecessor through
//! `prev_hash`. A block's hash is SHA-256 over its canonical serialization:
//! a whitespace-free JSON object with a fixed field order in which every real
//! number is written with exactly six decimals. The same serialization, with
//! the hash appended as a final field, is one line of the `chain.jsonl` dump.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;
use serde::Deserialize;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::mdp::StateVector;

pub type Digest = [u8; 32];

pub const DEFAULT_BLOCK_SIZE: usize = 32;
pub const DEFAULT_REPLAY_WINDOW: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("a block needs at least one experience")]
    EmptyBlock,
    #[error("requested {requested} experiences but only {available} are in the replay window")]
    NotEnoughExperience { requested: usize, available: usize },
    #[error("chain dump failed verification at block {0}")]
    Corrupt(usize),
}

/// One `<s, a, r, s'>` tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVector,
    pub step: u64,
}

/// Settlement of a completed transaction.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentRecord {
    pub transaction_id: u64,
    pub provider_id: usize,
    pub amount: f64,
    pub settled_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub experiences: Vec<Experience>,
    pub payments: Vec<PaymentRecord>,
    pub hash: Digest,
}

impl Block {
    fn seal(index: u64, prev_hash: Digest, experiences: Vec<Experience>, payments: Vec<PaymentRecord>) -> Self {
        let mut block = Block {
            index,
            prev_hash,
            experiences,
            payments,
            hash: [0; 32],
        };
        block.hash = block.compute_hash();
        block
    }

    /// Canonical serialization of everything but the hash.
    pub fn canonical_content(&self) -> String {
        let mut out = String::with_capacity(64 + self.experiences.len() * 720);
        write_content(&mut out, self);
        out
    }

    pub fn compute_hash(&self) -> Digest {
        Sha256::digest(self.canonical_content().as_bytes()).into()
    }

    /// The block's line in a chain dump, without the trailing newline.
    pub fn to_line(&self) -> String {
        let mut out = self.canonical_content();
        out.pop();
        out.push_str(",\"hash\":\"");
        out.push_str(&hex::encode(self.hash));
        out.push_str("\"}");
        out
    }
}

fn write_real(out: &mut String, x: f64) {
    let _ = write!(out, "{x:.6}");
}

fn write_reals(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_real(out, *x);
    }
    out.push(']');
}

fn write_content(out: &mut String, block: &Block) {
    let _ = write!(
        out,
        "{{\"index\":{},\"prev_hash\":\"{}\",\"experiences\":[",
        block.index,
        hex::encode(block.prev_hash)
    );
    for (i, e) in block.experiences.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"step\":{},\"action\":{},\"reward\":", e.step, e.action);
        write_real(out, e.reward);
        out.push_str(",\"state\":");
        write_reals(out, e.state.features());
        out.push_str(",\"next_state\":");
        write_reals(out, e.next_state.features());
        out.push('}');
    }
    out.push_str("],\"payments\":[");
    for (i, p) in block.payments.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{{\"transaction_id\":{},\"provider_id\":{},\"amount\":",
            p.transaction_id, p.provider_id
        );
        write_real(out, p.amount);
        let _ = write!(out, ",\"settled_step\":{}}}", p.settled_step);
    }
    out.push_str("]}");
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperience {
    step: u64,
    action: usize,
    reward: f64,
    state: Vec<f64>,
    next_state: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    index: u64,
    prev_hash: String,
    experiences: Vec<RawExperience>,
    payments: Vec<PaymentRecord>,
    hash: String,
}

fn parse_digest(s: &str) -> Option<Digest> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).ok()?;
    Some(out)
}

/// Parses one dump line. Only the exact canonical form is accepted, so any
/// change to the bytes either fails here or changes the hashed content.
pub fn parse_block_line(line: &[u8]) -> Result<Block, Fault> {
    let raw: RawBlock = serde_json::from_slice(line).map_err(|_| Fault::Unparseable)?;
    let state = |v: Vec<f64>| StateVector::from_features(v).ok_or(Fault::Unparseable);
    let experiences = raw
        .experiences
        .into_iter()
        .map(|e| {
            Ok(Experience {
                state: state(e.state)?,
                action: e.action,
                reward: e.reward,
                next_state: state(e.next_state)?,
                step: e.step,
            })
        })
        .collect::<Result<Vec<_>, Fault>>()?;
    let block = Block {
        index: raw.index,
        prev_hash: parse_digest(&raw.prev_hash).ok_or(Fault::Unparseable)?,
        experiences,
        payments: raw.payments,
        hash: parse_digest(&raw.hash).ok_or(Fault::Unparseable)?,
    };
    if block.to_line().as_bytes() != line {
        return Err(Fault::NonCanonical);
    }
    Ok(block)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Unparseable,
    NonCanonical,
    IndexMismatch,
    BrokenLink,
    HashMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerificationReport {
    Valid,
    Invalid { block: usize, fault: Fault },
}

impl VerificationReport {
    pub fn is_valid(&self) -> bool {
        matches!(self, VerificationReport::Valid)
    }

    pub fn first_invalid_block(&self) -> Option<usize> {
        match self {
            VerificationReport::Valid => None,
            VerificationReport::Invalid { block, .. } => Some(*block),
        }
    }
}

fn check_block(position: usize, block: &Block, prev: Option<&Block>) -> Option<Fault> {
    if block.index != position as u64 {
        return Some(Fault::IndexMismatch);
    }
    let expected_prev = prev.map_or([0u8; 32], |p| p.hash);
    if block.prev_hash != expected_prev {
        return Some(Fault::BrokenLink);
    }
    if block.compute_hash() != block.hash {
        return Some(Fault::HashMismatch);
    }
    None
}

fn verify_blocks(blocks: &[Block]) -> VerificationReport {
    for (k, block) in blocks.iter().enumerate() {
        let prev = k.checked_sub(1).map(|p| &blocks[p]);
        if let Some(fault) = check_block(k, block, prev) {
            return VerificationReport::Invalid { block: k, fault };
        }
    }
    VerificationReport::Valid
}

/// Checks a `chain.jsonl` dump: every line canonical, indexed, linked and
/// hashed correctly.
pub fn verify_dump(dump: &[u8]) -> VerificationReport {
    match parse_dump(dump) {
        Ok(blocks) => verify_blocks(&blocks),
        Err((block, fault)) => VerificationReport::Invalid { block, fault },
    }
}

fn parse_dump(dump: &[u8]) -> Result<Vec<Block>, (usize, Fault)> {
    let body = match dump.split_last() {
        None => return Ok(Vec::new()),
        Some((b'\n', body)) => body,
        Some(_) => dump,
    };
    body.split(|b| *b == b'\n')
        .enumerate()
        .map(|(k, line)| parse_block_line(line).map_err(|f| (k, f)))
        .collect()
}

/// The contract's ledger: sealed blocks plus experiences and payments that
/// await the next seal.
#[derive(Clone, Debug)]
pub struct Chain {
    blocks: Vec<Block>,
    /// Number of experiences sealed before block `k`.
    offsets: Vec<usize>,
    sealed: usize,
    pending: Vec<Experience>,
    pending_payments: Vec<PaymentRecord>,
    block_size: usize,
    replay_window: usize,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new(DEFAULT_BLOCK_SIZE, DEFAULT_REPLAY_WINDOW)
    }
}

impl Chain {
    pub fn new(block_size: usize, replay_window: usize) -> Self {
        assert!(block_size > 0 && replay_window > 0);
        Self {
            blocks: Vec::new(),
            offsets: Vec::new(),
            sealed: 0,
            pending: Vec::new(),
            pending_payments: Vec::new(),
            block_size,
            replay_window,
        }
    }

    /// Rebuilds a chain from a verified dump.
    pub fn from_dump(dump: &[u8], block_size: usize, replay_window: usize) -> Result<Self, LedgerError> {
        let blocks = parse_dump(dump).map_err(|(k, _)| LedgerError::Corrupt(k))?;
        if let VerificationReport::Invalid { block, .. } = verify_blocks(&blocks) {
            return Err(LedgerError::Corrupt(block));
        }
        let mut chain = Self::new(block_size, replay_window);
        for block in blocks {
            chain.offsets.push(chain.sealed);
            chain.sealed += block.experiences.len();
            chain.blocks.push(block);
        }
        Ok(chain)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Direct access to sealed blocks, for audits and fault injection.
    /// Changing the number of experiences in a block invalidates sampling.
    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn head(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn pending(&self) -> &[Experience] {
        &self.pending
    }

    pub fn pending_payments(&self) -> &[PaymentRecord] {
        &self.pending_payments
    }

    /// Experiences in sealed blocks plus the pending buffer.
    pub fn experience_count(&self) -> usize {
        self.sealed + self.pending.len()
    }

    pub fn payments(&self) -> impl Iterator<Item = &PaymentRecord> {
        self.blocks
            .iter()
            .flat_map(|b| b.payments.iter())
            .chain(self.pending_payments.iter())
    }

    /// Seals `experiences` and `payments` into a new block linked to the head.
    pub fn append_block(
        &mut self,
        experiences: Vec<Experience>,
        payments: Vec<PaymentRecord>,
    ) -> Result<&Block, LedgerError> {
        if experiences.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let prev_hash = self.head().map_or([0u8; 32], |b| b.hash);
        let index = self.blocks.len() as u64;
        self.offsets.push(self.sealed);
        self.sealed += experiences.len();
        self.blocks.push(Block::seal(index, prev_hash, experiences, payments));
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Buffers an experience, sealing a block once `B` are pending.
    /// Returns the index of a newly sealed block.
    pub fn push_experience(&mut self, experience: Experience) -> Option<u64> {
        self.pending.push(experience);
        if self.pending.len() < self.block_size {
            return None;
        }
        let experiences = core::mem::take(&mut self.pending);
        let payments = core::mem::take(&mut self.pending_payments);
        self.append_block(experiences, payments).ok().map(|b| b.index)
    }

    /// Queues a payment record for the next sealed block.
    pub fn push_payment(&mut self, payment: PaymentRecord) {
        self.pending_payments.push(payment);
    }

    /// Seals whatever is pending. The closing block of a run may carry
    /// payments only.
    pub fn flush(&mut self) -> Option<u64> {
        if self.pending.is_empty() && self.pending_payments.is_empty() {
            return None;
        }
        let experiences = core::mem::take(&mut self.pending);
        let payments = core::mem::take(&mut self.pending_payments);
        let prev_hash = self.head().map_or([0u8; 32], |b| b.hash);
        let index = self.blocks.len() as u64;
        self.offsets.push(self.sealed);
        self.sealed += experiences.len();
        self.blocks.push(Block::seal(index, prev_hash, experiences, payments));
        Some(index)
    }

    pub fn verify(&self) -> VerificationReport {
        verify_blocks(&self.blocks)
    }

    /// Sealed blocks as `chain.jsonl`: one canonical line per block.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&block.to_line());
            out.push('\n');
        }
        out
    }

    fn experience_at(&self, global: usize) -> &Experience {
        if global >= self.sealed {
            return &self.pending[global - self.sealed];
        }
        let k = self.offsets.partition_point(|&o| o <= global) - 1;
        &self.blocks[k].experiences[global - self.offsets[k]]
    }

    /// Uniform sample without replacement from the most recent
    /// `replay_window` experiences, sealed or pending.
    pub fn sample_experiences<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Experience>, LedgerError> {
        let total = self.experience_count();
        let window = total.min(self.replay_window);
        if batch_size > window {
            return Err(LedgerError::NotEnoughExperience {
                requested: batch_size,
                available: window,
            });
        }
        let base = total - window;
        Ok(rand::seq::index::sample(rng, window, batch_size)
            .into_iter()
            .map(|i| self.experience_at(base + i))
            .collect())
    }
}

pub fn verify_chain(chain: &Chain) -> VerificationReport {
    chain.verify()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskType;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(step: u64) -> Experience {
        let s = StateVector::new(TaskType::Computation, 0.25, &[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]);
        let n = StateVector::new(TaskType::Computation, 0.75, &[0.2, 0.2], &[0.1, 0.2], &[0.5, 0.7]);
        Experience {
            state: s,
            action: (step % 2) as usize,
            reward: 1.0 + step as f64 * 1e-3,
            next_state: n,
            step,
        }
    }

    fn pay(id: u64) -> PaymentRecord {
        PaymentRecord { transaction_id: id, provider_id: 1, amount: 4.0, settled_step: id + 1 }
    }

    fn chain_of(blocks: usize) -> Chain {
        let mut c = Chain::new(4, 100);
        for i in 0..blocks as u64 * 4 {
            if i % 3 == 0 {
                c.push_payment(pay(i));
            }
            c.push_experience(exp(i));
        }
        c
    }

    #[test]
    fn genesis_block() {
        let mut c = Chain::default();
        let b = c.append_block(vec![exp(0)], vec![]).unwrap();
        assert_eq!(b.index, 0);
        assert_eq!(b.prev_hash, [0u8; 32]);
    }

    #[test]
    fn empty_block_is_refused() {
        let mut c = Chain::default();
        assert_eq!(c.append_block(vec![], vec![pay(0)]).unwrap_err(), LedgerError::EmptyBlock);
    }

    #[test]
    fn blocks_link_to_their_predecessor() {
        let mut c = Chain::default();
        let h0 = c.append_block(vec![exp(0)], vec![]).unwrap().hash;
        let b1 = c.append_block(vec![exp(1)], vec![]).unwrap();
        assert_eq!(b1.prev_hash, h0);
    }

    #[test]
    fn identical_content_hashes_identically() {
        let mut a = Chain::default();
        let mut b = Chain::default();
        let ha = a.append_block(vec![exp(0), exp(1)], vec![pay(3)]).unwrap().hash;
        let hb = b.append_block(vec![exp(0), exp(1)], vec![pay(3)]).unwrap().hash;
        assert_eq!(ha, hb);
    }

    #[test]
    fn count_based_sealing() {
        let c = chain_of(3);
        assert_eq!(c.blocks().len(), 3);
        assert!(c.pending().is_empty());
        assert_eq!(c.experience_count(), 12);
        let mut c = c;
        c.push_experience(exp(99));
        assert_eq!(c.blocks().len(), 3);
        assert_eq!(c.pending().len(), 1);
    }

    #[test]
    fn payments_ride_in_the_next_block() {
        let mut c = Chain::new(2, 10);
        c.push_experience(exp(0));
        c.push_payment(pay(0));
        assert_eq!(c.payments().count(), 1);
        c.push_experience(exp(1));
        assert_eq!(c.blocks()[0].payments, vec![pay(0)]);
        assert!(c.pending_payments().is_empty());
    }

    #[test]
    fn flush_seals_leftover_payments() {
        let mut c = chain_of(2);
        assert_eq!(c.flush(), None);
        c.push_payment(pay(50));
        assert_eq!(c.flush(), Some(2));
        assert!(c.blocks()[2].experiences.is_empty());
        assert_eq!(c.payments().count(), 4);
        assert!(c.verify().is_valid());
        assert!(verify_dump(c.to_jsonl().as_bytes()).is_valid());
    }

    #[test]
    fn untampered_and_empty_chains_verify() {
        assert!(Chain::default().verify().is_valid());
        assert!(chain_of(5).verify().is_valid());
        assert!(verify_dump(b"").is_valid());
        assert!(verify_dump(chain_of(5).to_jsonl().as_bytes()).is_valid());
    }

    #[test]
    fn in_memory_tampering_names_the_block() {
        let mut c = chain_of(5);
        c.blocks_mut()[3].experiences[1].reward = 0.25;
        assert_eq!(
            c.verify(),
            VerificationReport::Invalid { block: 3, fault: Fault::HashMismatch }
        );
    }

    #[test]
    fn byte_flip_in_block_three_is_located() {
        let c = chain_of(5);
        let mut dump = c.to_jsonl().into_bytes();
        let starts: Vec<usize> = core::iter::once(0)
            .chain(dump.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1))
            .collect();
        // a digit inside block 3's first experience reward
        let line = &dump[starts[3]..];
        let at = starts[3] + line.windows(9).position(|w| w == b"\"reward\":").unwrap() + 9;
        dump[at] ^= 0x01;
        assert_eq!(verify_dump(&dump).first_invalid_block(), Some(3));
    }

    #[test]
    fn dump_round_trip_is_byte_identical() {
        let c = chain_of(4);
        let dump = c.to_jsonl();
        let back = Chain::from_dump(dump.as_bytes(), 4, 100).unwrap();
        assert_eq!(back.to_jsonl(), dump);
        assert_eq!(back.experience_count(), 16);
    }

    #[test]
    fn quantized_content_changes_below_precision_are_invisible() {
        let mut c = chain_of(1);
        let h = c.blocks()[0].hash;
        c.blocks_mut()[0].experiences[0].reward += 1e-9;
        assert_eq!(c.blocks()[0].compute_hash(), h);
    }

    #[test]
    fn sampling_whole_window_returns_everything_once() {
        let c = chain_of(3);
        let mut c = c;
        c.push_experience(exp(12));
        c.push_experience(exp(13));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut steps: Vec<u64> = c.sample_experiences(14, &mut rng).unwrap().iter().map(|e| e.step).collect();
        steps.sort();
        assert_eq!(steps, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_is_an_error() {
        let c = chain_of(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            c.sample_experiences(5, &mut rng).unwrap_err(),
            LedgerError::NotEnoughExperience { requested: 5, available: 4 }
        );
    }

    #[test]
    fn window_limits_sampling_to_recent_experiences() {
        let mut c = Chain::new(4, 10);
        for i in 0..50 {
            c.push_experience(exp(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for e in c.sample_experiences(3, &mut rng).unwrap() {
                assert!(e.step >= 40);
            }
        }
    }

    #[test]
    fn single_draws_are_uniform_over_the_window() {
        let mut c = Chain::new(32, 100);
        for i in 0..100 {
            c.push_experience(exp(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [0usize; 100];
        for _ in 0..draws {
            counts[c.sample_experiences(1, &mut rng).unwrap()[0].step as usize] += 1;
        }
        let p: f64 = 0.01;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        // 3 sigma per cell, plus a chi-square bound on the whole histogram
        let chi2: f64 = counts.iter().map(|&k| (k as f64 - mean).powi(2) / mean).sum();
        let outliers = counts.iter().filter(|&&k| (k as f64 - mean).abs() > 3.0 * sigma).count();
        assert!(outliers <= 1, "{outliers} cells beyond 3 sigma");
        assert!(chi2 < 99.0 + 3.0 * (2.0f64 * 99.0).sqrt() * 1.5, "chi2 = {chi2}");
    }
}
