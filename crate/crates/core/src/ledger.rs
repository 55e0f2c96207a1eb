//! Subchain ledger: activation transactions, sub-blocks and verification.
//!
//! Canonical encoding: fields in declaration order, big-endian integers,
//! raw fixed-size byte strings, `u32` length prefixes on every variable
//! length item and no padding. `f64` values travel as their IEEE-754 bits.
//! A sub-block hash is SHA-256 over `index || prev_hash || payload_root`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::{MinerId, Role, SubchainId};

pub type Hash32 = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Hash32 {
    Sha256::digest(bytes).into()
}

/// Serde adapter writing 32-byte digests as lowercase hex.
pub mod hex32 {
    use alloc::string::String;

    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(text, &mut out).map_err(D::Error::custom)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivationType {
    Training,
    Challenge,
    Audit,
}

impl ActivationType {
    fn code(self) -> u8 {
        match self {
            ActivationType::Training => 0,
            ActivationType::Challenge => 1,
            ActivationType::Audit => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ActivationType::Training),
            1 => Some(ActivationType::Challenge),
            2 => Some(ActivationType::Audit),
            _ => None,
        }
    }
}

/// Result carried by an activation. Challenges record the measured
/// accuracy; audits record whether the replay matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    None,
    Accuracy { value: f64 },
    AuditPassed { rounds: u64 },
    AuditFailed { round: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTransaction {
    pub tx_number: u64,
    pub activation_type: ActivationType,
    pub chain_id: SubchainId,
    #[serde(with = "hex32")]
    pub model_hash: Hash32,
    pub verifier: (MinerId, Role),
    pub miner: (MinerId, Role),
    #[serde(with = "hex32")]
    pub data_id: Hash32,
    pub prev_dependency: Option<u64>,
    pub outcome: Outcome,
}

/// Cursor over canonical bytes.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn fail<T>(&self, reason: &'static str) -> Result<T> {
        Err(Error::Decode { offset: self.pos, reason })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail("unexpected end of input");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    pub fn hash(&mut self) -> Result<Hash32> {
        let mut a = [0u8; 32];
        a.copy_from_slice(self.take(32)?);
        Ok(a)
    }

    pub fn role(&mut self) -> Result<Role> {
        let code = self.u8()?;
        match Role::from_code(code) {
            Some(r) => Ok(r),
            None => self.fail("unknown role code"),
        }
    }
}

/// Canonical, injective byte encoding of a ledger type.
pub trait Canonical: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(reader: &mut Reader<'_>) -> Result<Self>;

    fn to_canonical(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes a value that must span exactly `bytes`.
    fn from_canonical(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader::new(bytes);
        let value = Self::decode(&mut reader)?;
        if !reader.is_empty() {
            return reader.fail("trailing bytes");
        }
        Ok(value)
    }
}

impl Canonical for ActivationTransaction {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.tx_number.to_be_bytes());
        out.push(self.activation_type.code());
        out.extend_from_slice(&self.chain_id.0.to_be_bytes());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&self.verifier.0 .0.to_be_bytes());
        out.push(self.verifier.1.code());
        out.extend_from_slice(&self.miner.0 .0.to_be_bytes());
        out.push(self.miner.1.code());
        out.extend_from_slice(&self.data_id);
        match self.prev_dependency {
            None => out.push(0),
            Some(tx) => {
                out.push(1);
                out.extend_from_slice(&tx.to_be_bytes());
            }
        }
        match self.outcome {
            Outcome::None => out.push(0),
            Outcome::Accuracy { value } => {
                out.push(1);
                out.extend_from_slice(&value.to_bits().to_be_bytes());
            }
            Outcome::AuditPassed { rounds } => {
                out.push(2);
                out.extend_from_slice(&rounds.to_be_bytes());
            }
            Outcome::AuditFailed { round } => {
                out.push(3);
                out.extend_from_slice(&round.to_be_bytes());
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let tx_number = r.u64()?;
        let activation_type = match ActivationType::from_code(r.u8()?) {
            Some(t) => t,
            None => return r.fail("unknown activation type"),
        };
        let chain_id = SubchainId(r.u32()?);
        let model_hash = r.hash()?;
        let verifier = (MinerId(r.u32()?), r.role()?);
        let miner = (MinerId(r.u32()?), r.role()?);
        let data_id = r.hash()?;
        let prev_dependency = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            _ => return r.fail("bad dependency tag"),
        };
        let outcome = match r.u8()? {
            0 => Outcome::None,
            1 => Outcome::Accuracy { value: f64::from_bits(r.u64()?) },
            2 => Outcome::AuditPassed { rounds: r.u64()? },
            3 => Outcome::AuditFailed { round: r.u64()? },
            _ => return r.fail("bad outcome tag"),
        };
        Ok(ActivationTransaction {
            tx_number,
            activation_type,
            chain_id,
            model_hash,
            verifier,
            miner,
            data_id,
            prev_dependency,
            outcome,
        })
    }
}

/// Binary Merkle root over leaf digests; an odd node is paired with itself.
pub fn merkle_root(leaves: &[Hash32]) -> Hash32 {
    if leaves.is_empty() {
        return sha256(&[0x00]);
    }
    if leaves.len() == 1 {
        return leaves[0];
    }
    let mut level: Vec<Hash32> = leaves.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            let left = pair[0];
            let right = if pair.len() == 2 { pair[1] } else { pair[0] };
            let mut hasher = Sha256::new();
            hasher.update(left);
            hasher.update(right);
            next.push(hasher.finalize().into());
        }
        level = next;
    }
    level[0]
}

/// Root over the canonical transaction bytes, plus the opaque transfer
/// ledger as one extra leaf when it is non-empty.
pub fn payload_root(payload: &[ActivationTransaction], transfers: &[u8]) -> Hash32 {
    let mut leaves: Vec<Hash32> = payload.iter().map(|tx| sha256(&tx.to_canonical())).collect();
    if !transfers.is_empty() {
        leaves.push(sha256(transfers));
    }
    merkle_root(&leaves)
}

fn header_hash(index: u64, prev_hash: &Hash32, payload_root: &Hash32) -> Hash32 {
    let mut header = Vec::with_capacity(72);
    header.extend_from_slice(&index.to_be_bytes());
    header.extend_from_slice(prev_hash);
    header.extend_from_slice(payload_root);
    sha256(&header)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBlock {
    pub index: u64,
    #[serde(with = "hex32")]
    pub prev_hash: Hash32,
    pub payload: Vec<ActivationTransaction>,
    /// Ordinary transfer records, carried but never interpreted.
    pub transfers: Vec<u8>,
    #[serde(with = "hex32")]
    pub payload_root: Hash32,
    #[serde(with = "hex32")]
    pub hash: Hash32,
}

impl SubBlock {
    /// Computes root and hash without validating the payload.
    pub fn seal(
        index: u64,
        prev_hash: Hash32,
        payload: Vec<ActivationTransaction>,
        transfers: Vec<u8>,
    ) -> Self {
        let payload_root = payload_root(&payload, &transfers);
        let hash = header_hash(index, &prev_hash, &payload_root);
        SubBlock { index, prev_hash, payload, transfers, payload_root, hash }
    }
}

impl Canonical for SubBlock {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        for tx in &self.payload {
            let bytes = tx.to_canonical();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&(self.transfers.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.transfers);
        out.extend_from_slice(&self.payload_root);
        out.extend_from_slice(&self.hash);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let index = r.u64()?;
        let prev_hash = r.hash()?;
        let count = r.u32()? as usize;
        let mut payload = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            let tx = ActivationTransaction::from_canonical(bytes).map_err(|e| match e {
                Error::Decode { offset, reason } => Error::Decode { offset: r.position() - len + offset, reason },
                other => other,
            })?;
            payload.push(tx);
        }
        let transfer_len = r.u32()? as usize;
        let transfers = r.take(transfer_len)?.to_vec();
        let payload_root = r.hash()?;
        let hash = r.hash()?;
        Ok(SubBlock { index, prev_hash, payload, transfers, payload_root, hash })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailReason {
    /// Stored index differs from the position in the chain.
    Index,
    /// `prev_hash` does not match the preceding head.
    Link,
    /// Recomputed Merkle root differs from the stored one.
    PayloadRoot,
    /// Recomputed header hash differs from the stored one.
    Hash,
    /// Transaction numbers not exactly `0..count` in order, or a
    /// dependency that does not point backwards.
    TxOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChainStatus {
    Ok,
    Fail { index: u64, reason: FailReason },
}

/// A subchain: sub-blocks hanging off the previous main-block head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    #[serde(with = "hex32")]
    pub prev_block_head: Hash32,
    pub blocks: Vec<SubBlock>,
}

impl Chain {
    pub fn new(prev_block_head: Hash32) -> Self {
        Chain { prev_block_head, blocks: Vec::new() }
    }

    pub fn head(&self) -> Hash32 {
        self.blocks.last().map_or(self.prev_block_head, |b| b.hash)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn transaction_count(&self) -> u64 {
        self.blocks.iter().map(|b| b.payload.len() as u64).sum()
    }

    /// Next transaction number this chain expects.
    pub fn next_tx_number(&self) -> u64 {
        self.transaction_count()
    }

    pub fn transactions(&self) -> impl Iterator<Item = (u64, &ActivationTransaction)> {
        self.blocks.iter().flat_map(|b| b.payload.iter().map(move |tx| (b.index, tx)))
    }

    /// Validates `payload` and appends it as the next sub-block.
    pub fn append_sub_block(
        &mut self,
        payload: Vec<ActivationTransaction>,
        transfers: Vec<u8>,
    ) -> Result<&SubBlock> {
        for (expected, tx) in (self.next_tx_number()..).zip(&payload) {
            if tx.tx_number != expected {
                return Err(Error::InvalidTx(alloc::format!(
                    "tx_number {} where {expected} was expected",
                    tx.tx_number
                )));
            }
            if let Some(dep) = tx.prev_dependency {
                if dep >= tx.tx_number {
                    return Err(Error::InvalidTx(alloc::format!(
                        "tx {} depends on later tx {dep}",
                        tx.tx_number
                    )));
                }
            }
            if let Outcome::Accuracy { value } = tx.outcome {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::InvalidTx(alloc::format!(
                        "tx {} carries accuracy {value} outside [0, 1]",
                        tx.tx_number
                    )));
                }
            }
        }
        let block = SubBlock::seal(self.blocks.len() as u64, self.head(), payload, transfers);
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Concatenated canonical sub-blocks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for block in &self.blocks {
            block.encode(&mut out);
        }
        out
    }

    /// Inverse of [`Chain::to_bytes`]. The previous main-block head is
    /// taken from the first sub-block (all zeros for an empty chain).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader::new(bytes);
        let mut blocks = Vec::new();
        while !reader.is_empty() {
            blocks.push(SubBlock::decode(&mut reader)?);
        }
        let prev_block_head = blocks.first().map_or([0u8; 32], |b| b.prev_hash);
        Ok(Chain { prev_block_head, blocks })
    }
}

/// Recomputes every link, root, hash and transaction number; reports the
/// first violation.
pub fn verify_chain(chain: &Chain) -> ChainStatus {
    let mut prev = chain.prev_block_head;
    let mut next_tx = 0u64;
    for (i, block) in chain.blocks.iter().enumerate() {
        let index = i as u64;
        let fail = |reason| ChainStatus::Fail { index, reason };
        if block.index != index {
            return fail(FailReason::Index);
        }
        if block.prev_hash != prev {
            return fail(FailReason::Link);
        }
        if payload_root(&block.payload, &block.transfers) != block.payload_root {
            return fail(FailReason::PayloadRoot);
        }
        if header_hash(block.index, &block.prev_hash, &block.payload_root) != block.hash {
            return fail(FailReason::Hash);
        }
        for tx in &block.payload {
            if tx.tx_number != next_tx || tx.prev_dependency.is_some_and(|d| d >= tx.tx_number) {
                return fail(FailReason::TxOrder);
            }
            next_tx += 1;
        }
        prev = block.hash;
    }
    ChainStatus::Ok
}

/// Median of a non-empty slice; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Picks the candidate with the highest median challenge accuracy; ties go
/// to the lower subchain id. A candidate without any challenge result
/// ranks below every candidate that has one.
pub fn select_winner<'a, I>(candidates: I) -> Result<(SubchainId, Option<f64>)>
where
    I: IntoIterator<Item = (SubchainId, &'a [f64])>,
{
    let mut best: Option<(SubchainId, Option<f64>)> = None;
    for (id, accuracies) in candidates {
        let m = median(accuracies);
        best = match best {
            None => Some((id, m)),
            Some((bid, bm)) => {
                let better = match (m, bm) {
                    (Some(a), Some(b)) => a > b || (a == b && id < bid),
                    (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (None, None) => id < bid,
                };
                if better { Some((id, m)) } else { Some((bid, bm)) }
            }
        };
    }
    best.ok_or(Error::NoCandidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn sample_tx(n: u64) -> ActivationTransaction {
        ActivationTransaction {
            tx_number: n,
            activation_type: ActivationType::Training,
            chain_id: SubchainId(3),
            model_hash: [0xab; 32],
            verifier: (MinerId(1), Role::Host),
            miner: (MinerId(7), Role::Trainer),
            data_id: [0x11; 32],
            prev_dependency: n.checked_sub(1),
            outcome: Outcome::None,
        }
    }

    fn build_chain(blocks: usize, per_block: u64) -> Chain {
        let mut chain = Chain::new([9u8; 32]);
        let mut n = 0;
        for _ in 0..blocks {
            let payload = (0..per_block).map(|k| sample_tx(n + k)).collect();
            n += per_block;
            chain.append_sub_block(payload, Vec::new()).unwrap();
        }
        chain
    }

    #[test]
    fn canonical_bytes_are_stable_and_field_sensitive() {
        let a = sample_tx(5);
        assert_eq!(a.to_canonical(), a.to_canonical());
        let mut b = a.clone();
        b.tx_number = 6;
        assert_ne!(a.to_canonical(), b.to_canonical());
    }

    #[test]
    fn golden_transaction_bytes() {
        let tx = ActivationTransaction {
            tx_number: 2,
            activation_type: ActivationType::Challenge,
            chain_id: SubchainId(1),
            model_hash: [0x01; 32],
            verifier: (MinerId(4), Role::DataContributor),
            miner: (MinerId(5), Role::Host),
            data_id: [0x02; 32],
            prev_dependency: Some(1),
            outcome: Outcome::Accuracy { value: 0.5 },
        };
        let hex = hex::encode(tx.to_canonical());
        let expected = alloc::format!(
            "{}{}{}{}{}{}{}{}{}{}",
            "0000000000000002",
            "01",
            "00000001",
            "01".repeat(32),
            "0000000403",
            "0000000501",
            "02".repeat(32),
            "010000000000000001",
            "01",
            "3fe0000000000000",
        );
        assert_eq!(hex, expected);
        assert_eq!(ActivationTransaction::from_canonical(&tx.to_canonical()).unwrap(), tx);
    }

    #[test]
    fn empty_and_single_roots() {
        assert_eq!(payload_root(&[], &[]), sha256(&[0x00]));
        let tx = sample_tx(0);
        assert_eq!(payload_root(core::slice::from_ref(&tx), &[]), sha256(&tx.to_canonical()));
    }

    #[test]
    fn odd_leaf_is_duplicated() {
        let l = [sha256(b"a"), sha256(b"b"), sha256(b"c")];
        let pair = |x: &Hash32, y: &Hash32| {
            let mut v = x.to_vec();
            v.extend_from_slice(y);
            sha256(&v)
        };
        let expected = pair(&pair(&l[0], &l[1]), &pair(&l[2], &l[2]));
        assert_eq!(merkle_root(&l), expected);
    }

    #[test]
    fn fresh_chain_verifies() {
        let chain = build_chain(10, 3);
        assert_eq!(verify_chain(&chain), ChainStatus::Ok);
        assert_eq!(chain.blocks[0].prev_hash, [9u8; 32]);
        assert_eq!(chain.transaction_count(), 30);
    }

    #[test]
    fn flipped_link_is_reported() {
        let mut chain = build_chain(10, 2);
        chain.blocks[5].prev_hash[0] ^= 1;
        assert_eq!(verify_chain(&chain), ChainStatus::Fail { index: 5, reason: FailReason::Link });
    }

    #[test]
    fn tampered_tx_is_reported_at_its_block() {
        let mut chain = build_chain(10, 2);
        chain.blocks[7].payload[1].data_id[3] ^= 0x40;
        assert_eq!(
            verify_chain(&chain),
            ChainStatus::Fail { index: 7, reason: FailReason::PayloadRoot }
        );
    }

    #[test]
    fn duplicate_tx_number_is_reported() {
        let mut chain = build_chain(4, 2);
        // Re-seal block 2 with a duplicated number so hashes stay consistent.
        let mut payload = chain.blocks[2].payload.clone();
        payload[1].tx_number = payload[0].tx_number;
        payload[1].prev_dependency = None;
        let prev = chain.blocks[1].hash;
        chain.blocks.truncate(2);
        chain.blocks.push(SubBlock::seal(2, prev, payload, Vec::new()));
        assert_eq!(verify_chain(&chain), ChainStatus::Fail { index: 2, reason: FailReason::TxOrder });
    }

    #[test]
    fn append_rejects_out_of_sequence_numbers() {
        let mut chain = build_chain(1, 2);
        let err = chain.append_sub_block(vec![sample_tx(5)], Vec::new()).unwrap_err();
        assert!(matches!(err, Error::InvalidTx(_)));
        let mut forward = sample_tx(2);
        forward.prev_dependency = Some(2);
        assert!(chain.append_sub_block(vec![forward], Vec::new()).is_err());
    }

    #[test]
    fn chain_bytes_round_trip() {
        let mut chain = build_chain(3, 2);
        chain.append_sub_block(vec![sample_tx(6)], vec![1, 2, 3]).unwrap();
        let restored = Chain::from_bytes(&chain.to_bytes()).unwrap();
        assert_eq!(restored, chain);
        assert_eq!(verify_chain(&restored), ChainStatus::Ok);
        let bytes = chain.to_bytes();
        assert!(Chain::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn winner_selection() {
        let a = [0.91];
        let b = [0.93];
        assert_eq!(select_winner([(SubchainId(0), &a[..])]).unwrap().0, SubchainId(0));
        assert_eq!(select_winner([(SubchainId(0), &a[..]), (SubchainId(1), &b[..])]).unwrap().0, SubchainId(1));
        let c = [0.5, 0.9, 0.7];
        let d = [0.7, 0.1, 0.95];
        assert_eq!(select_winner([(SubchainId(4), &c[..]), (SubchainId(2), &d[..])]).unwrap().0, SubchainId(2));
        assert_eq!(select_winner(core::iter::empty::<(SubchainId, &[f64])>()), Err(Error::NoCandidate));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
