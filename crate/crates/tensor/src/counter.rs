use std::collections::BTreeMap;
use std::ops::AddAssign;

/// Arithmetic operation tallies.
///
/// `mults` counts multiplications and divisions, `adds` additions and
/// subtractions, `exps` transcendental evaluations (exp, log, tanh, sqrt).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub mults: u64,
    pub adds: u64,
    pub exps: u64,
}

impl Counts {
    pub fn new(mults: u64, adds: u64, exps: u64) -> Self {
        Self { mults, adds, exps }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.mults += rhs.mults;
        self.adds += rhs.adds;
        self.exps += rhs.exps;
    }
}

/// Operation counter attached to a [`Graph`](crate::Graph).
///
/// Forward and backward work are tallied separately; forward work is also
/// attributed to the scope label active when the op was recorded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpCounter {
    pub forward: Counts,
    pub backward: Counts,
    pub scopes: BTreeMap<String, Counts>,
    /// Peak simultaneously-live bytes over forward and (if run) backward.
    pub peak_live_bytes: u64,
    /// Same, excluding leaf values and leaf gradients.
    pub peak_activation_bytes: u64,
}

impl OpCounter {
    pub fn mults(&self) -> u64 {
        self.forward.mults + self.backward.mults
    }

    pub fn adds(&self) -> u64 {
        self.forward.adds + self.backward.adds
    }

    pub fn exps(&self) -> u64 {
        self.forward.exps + self.backward.exps
    }

    pub fn scope(&self, name: &str) -> Counts {
        self.scopes.get(name).copied().unwrap_or_default()
    }
}
