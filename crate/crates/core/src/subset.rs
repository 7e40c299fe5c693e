//! Modality subsets and their model indices.
//!
//! A subset of `N` modalities is a bitmask: bit `n` set means modality `n` is
//! present. The bitmask value itself is the model index `m`, so the non-empty
//! subsets are exactly `1..=2^N - 1` and the full subset is `M = 2^N - 1`.

use crate::error::{Error, Result};

/// Largest supported modality count.
pub const MAX_MODALITIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityMask {
    bits: usize,
    n_modalities: usize,
}

/// `M = 2^N - 1`.
pub fn model_count(n_modalities: usize) -> usize {
    (1usize << n_modalities) - 1
}

impl ModalityMask {
    pub fn new(bits: usize, n_modalities: usize) -> Result<Self> {
        if n_modalities == 0 || n_modalities > MAX_MODALITIES {
            return Err(Error::Parameter(format!(
                "modality count {n_modalities} outside 1..={MAX_MODALITIES}"
            )));
        }
        if bits == 0 {
            return Err(Error::ModalityMismatch("empty modality subset".into()));
        }
        if bits > model_count(n_modalities) {
            return Err(Error::Index {
                index: bits,
                bound: model_count(n_modalities),
            });
        }
        Ok(Self { bits, n_modalities })
    }

    pub fn from_modalities(present: &[usize], n_modalities: usize) -> Result<Self> {
        let mut bits = 0;
        for &p in present {
            if p >= n_modalities {
                return Err(Error::ModalityMismatch(format!(
                    "modality {p} does not exist (N = {n_modalities})"
                )));
            }
            bits |= 1 << p;
        }
        Self::new(bits, n_modalities)
    }

    pub fn full(n_modalities: usize) -> Result<Self> {
        Self::new(model_count(n_modalities), n_modalities)
    }

    /// All subsets in model-index order `1..=M`.
    pub fn all(n_modalities: usize) -> Result<Vec<Self>> {
        (1..=model_count(n_modalities))
            .map(|b| Self::new(b, n_modalities))
            .collect()
    }

    /// Model index `m` in `1..=M`.
    pub fn index(self) -> usize {
        self.bits
    }

    pub fn n_modalities(self) -> usize {
        self.n_modalities
    }

    pub fn contains(self, modality: usize) -> bool {
        modality < self.n_modalities && self.bits & (1 << modality) != 0
    }

    /// Present modalities in ascending order.
    pub fn modalities(self) -> Vec<usize> {
        (0..self.n_modalities).filter(|&n| self.contains(n)).collect()
    }

    pub fn count(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_full(self) -> bool {
        self.bits == model_count(self.n_modalities)
    }

    /// `•` for present and `∘` for absent modalities, modality 0 first.
    pub fn symbols(self) -> String {
        (0..self.n_modalities)
            .map(|n| if self.contains(n) { '•' } else { '∘' })
            .collect()
    }
}
