use core::fmt;

use serde::{Deserialize, Serialize};

/// A projection inside one transformer layer that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    FfnUp,
    FfnDown,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::FfnUp, Role::FfnDown];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::FfnUp => "ffn_up",
            Role::FfnDown => "ffn_down",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub layer: usize,
    pub role: Role,
}

impl Slot {
    pub fn new(layer: usize, role: Role) -> Self {
        Self { layer, role }
    }

    /// Every attention and feed-forward projection of an `n_layers` model.
    pub fn all(n_layers: usize) -> impl Iterator<Item = Slot> {
        (0..n_layers).flat_map(|l| Role::ALL.into_iter().map(move |r| Slot::new(l, r)))
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}", self.layer, self.role.as_str())
    }
}
