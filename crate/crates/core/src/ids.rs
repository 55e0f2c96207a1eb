use core::fmt;

use serde::{Deserialize, Serialize};

/// Dense miner index, `0..miner_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MinerId(pub u32);

impl MinerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for MinerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubchainId(pub u32);

impl fmt::Display for SubchainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Role a miner plays in a recorded activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Trainer,
    Host,
    /// Label only; proxies never rewrite latencies.
    Proxy,
    DataContributor,
    Auditor,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Trainer,
        Role::Host,
        Role::Proxy,
        Role::DataContributor,
        Role::Auditor,
    ];

    pub fn code(self) -> u8 {
        match self {
            Role::Trainer => 0,
            Role::Host => 1,
            Role::Proxy => 2,
            Role::DataContributor => 3,
            Role::Auditor => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.get(code as usize).copied()
    }
}
