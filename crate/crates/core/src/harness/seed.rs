//! Labelled seed derivation for pipeline stages.

use crate::numkernel::{child_seed, Rng};

/// Stage labels used by the pipeline runner.
pub const STAGE_LABELS: &[&str] = &["mae", "align", "merge", "fusion", "head", "data", "eval"];

/// Root of a labelled seed tree. Each label maps to its own child seed, so
/// adding a label never shifts the streams of the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, label: &str) -> u64 {
        child_seed(self.root, label)
    }

    pub fn rng(&self, label: &str) -> Rng {
        Rng::new(self.seed(label))
    }

    pub fn subtree(&self, label: &str) -> SeedTree {
        SeedTree {
            root: self.seed(label),
        }
    }
}

pub fn seed_everything(seed: u64) -> SeedTree {
    SeedTree { root: seed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_label_same_seed() {
        let t = seed_everything(42);
        assert_eq!(t.seed("mae"), seed_everything(42).seed("mae"));
        assert_eq!(t.rng("align").next_u64(), t.rng("align").next_u64());
    }

    #[test]
    fn stage_labels_do_not_collide() {
        for root in 0..64 {
            let t = seed_everything(root);
            let mut seen = HashSet::new();
            for l in STAGE_LABELS {
                assert!(seen.insert(t.seed(l)), "collision for {l} at root {root}");
            }
            for i in 0..16 {
                assert!(seen.insert(t.subtree("align").seed(&format!("decoder_{i}"))));
            }
        }
    }
}
