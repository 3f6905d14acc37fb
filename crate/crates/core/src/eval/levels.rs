use std::collections::BTreeSet;

use crate::quant::{ActQuantizer, SymmetricQuantizer};

/// A quantizer whose level occupancy can be measured.
#[derive(Clone, Copy, Debug)]
pub enum LevelQuantizer<'a> {
    Symmetric(&'a SymmetricQuantizer),
    Dual(&'a ActQuantizer),
}

impl LevelQuantizer<'_> {
    pub fn bits(&self) -> u32 {
        match self {
            LevelQuantizer::Symmetric(q) => q.bits,
            LevelQuantizer::Dual(q) => q.bits,
        }
    }

    /// Integer codes produced for `sample`. Symmetric codes are signed
    /// `b`-bit integers; dual-bound codes are unsigned `q = k + Z`.
    pub fn codes(&self, sample: &[f64]) -> Vec<i64> {
        match self {
            LevelQuantizer::Symmetric(q) => q.levels_of(sample),
            LevelQuantizer::Dual(q) => {
                let x = crate::tensor::Tensor::from_vec(sample.to_vec());
                q.quantize(&x).0
            }
        }
    }

    /// Representable codes as an inclusive range.
    pub fn code_range(&self) -> (i64, i64) {
        let b = self.bits();
        match self {
            LevelQuantizer::Symmetric(_) => (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1),
            LevelQuantizer::Dual(_) => (0, (1i64 << b) - 1),
        }
    }
}

/// Fraction of the `2^b` representable levels that `sample` never hits.
pub fn wasted_levels(sample: &[f64], q: LevelQuantizer<'_>) -> f64 {
    let (lo, hi) = q.code_range();
    let hit: BTreeSet<i64> = q.codes(sample).into_iter().filter(|c| (lo..=hi).contains(c)).collect();
    let total = (hi - lo + 1) as f64;
    (total - hit.len() as f64) / total
}
