use alloc::string::String;

use crate::ids::{MinerId, SubchainId};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: &'static str, reason: String },

    #[error("no core pool reached the confirmation threshold")]
    NoPoolFormed,

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("unknown miner {0}")]
    UnknownMiner(MinerId),

    #[error("partnership references unknown pool {0}")]
    PartnershipUnknownPool(SubchainId),

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX item counts differ: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: usize, available: usize },

    #[error("label {label} at index {index} is out of range")]
    InvalidLabel { index: usize, label: u32 },

    #[error("dataset has {available} samples, shards need {needed}")]
    DatasetTooSmall { available: usize, needed: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("aggregation round has no updates")]
    EmptyRound,

    #[error("update from round {update_round} is ahead of current round {current_round}")]
    StaleNegative { update_round: u64, current_round: u64 },

    #[error("subchain {0} has no contributors this round")]
    NoContributors(SubchainId),

    #[error("exact Shapley supports at most {max} members, got {got}")]
    TooManyMembers { got: usize, max: usize },

    #[error("invalid transaction: {0}")]
    InvalidTx(String),

    #[error("no subchain qualified as a candidate")]
    NoCandidate,

    #[error("miner {issuer} already issued a challenge set in period {period}")]
    AlreadyIssued { issuer: MinerId, period: u64 },

    #[error("challenge subset of {requested} exceeds shard size {available}")]
    SubsetTooLarge { requested: usize, available: usize },

    #[error("subchain {0} has no model")]
    NoModel(SubchainId),

    #[error("round {round} lacks a seed for miner {miner}")]
    MissingSeeds { round: u64, miner: MinerId },

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: &'static str },
}
