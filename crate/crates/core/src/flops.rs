//! Floating-point operation accounting.
//!
//! Dense layers cost `2 * fan_in * fan_out` per forward sample; a backward
//! pass is charged twice the forward cost. Other kernels report their own
//! multiply-add counts through [`FlopCount::add`].

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlopCount(pub u64);

impl FlopCount {
    pub fn add(&mut self, n: u64) {
        self.0 = self.0.saturating_add(n);
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Add for FlopCount {
    type Output = FlopCount;
    fn add(self, rhs: FlopCount) -> FlopCount {
        FlopCount(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl std::iter::Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> FlopCount {
        iter.fold(FlopCount::default(), |a, b| a + b)
    }
}

/// Forward cost of one sample through a dense network with the given widths.
pub fn mlp_forward(layer_sizes: &[usize]) -> u64 {
    layer_sizes
        .windows(2)
        .map(|w| 2 * (w[0] * w[1]) as u64)
        .sum()
}

pub fn mlp_backward(layer_sizes: &[usize]) -> u64 {
    2 * mlp_forward(layer_sizes)
}
