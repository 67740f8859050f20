use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::predictor::AiQuality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExplanationQuality {
    Good,
    Poor,
    None,
}

impl ExplanationQuality {
    pub const ALL: [ExplanationQuality; 3] = [
        ExplanationQuality::Good,
        ExplanationQuality::Poor,
        ExplanationQuality::None,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainExplanation {
    Shown,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Training,
    Testing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Branch {
    pub ai_quality: AiQuality,
    pub test_explanation: ExplanationQuality,
    pub train_explanation: TrainExplanation,
}

impl Branch {
    pub const fn new(
        ai_quality: AiQuality,
        test_explanation: ExplanationQuality,
        train_explanation: TrainExplanation,
    ) -> Self {
        Branch {
            ai_quality,
            test_explanation,
            train_explanation,
        }
    }

    /// Canonical order: AI quality, then test explanation, then training
    /// explanation.
    pub fn all() -> [Branch; 12] {
        let mut out = [Branch::new(
            AiQuality::Good,
            ExplanationQuality::Good,
            TrainExplanation::Shown,
        ); 12];
        let mut i = 0;
        for ai in AiQuality::ALL {
            for x in ExplanationQuality::ALL {
                for t in [TrainExplanation::Shown, TrainExplanation::Hidden] {
                    out[i] = Branch::new(ai, x, t);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn index(self) -> usize {
        Branch::all()
            .iter()
            .position(|&b| b == self)
            .expect("every branch is canonical")
    }

    pub fn train_explanation_shown(self) -> bool {
        self.train_explanation == TrainExplanation::Shown
    }

    /// Opaque label safe to hand to clients.
    pub fn condition_code(self) -> String {
        let d = Sha256::digest(format!("trustshift-condition-{}", self.index()).as_bytes());
        format!("c{}", &hex::encode(d)[..8])
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x = match self.test_explanation {
            ExplanationQuality::Good => "GoodX",
            ExplanationQuality::Poor => "PoorX",
            ExplanationQuality::None => "NoX",
        };
        let t = match self.train_explanation {
            TrainExplanation::Shown => "train-X",
            TrainExplanation::Hidden => "train-noX",
        };
        write!(f, "{}AI/{x}/{t}", self.ai_quality)
    }
}

/// Sessions per branch; the least-filled branch is assigned next.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounter {
    pub counts: [u64; 12],
}

impl BranchCounter {
    pub fn next(&self) -> Branch {
        let min = *self.counts.iter().min().expect("12 counts");
        let i = self
            .counts
            .iter()
            .position(|&c| c == min)
            .expect("min exists");
        Branch::all()[i]
    }

    pub fn assign(&mut self) -> Branch {
        let b = self.next();
        self.counts[b.index()] += 1;
        b
    }

    pub fn release(&mut self, branch: Branch) {
        let c = &mut self.counts[branch.index()];
        *c = c.saturating_sub(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_distinct_branches() {
        let all = Branch::all();
        let set: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), 12);
        for (i, b) in all.iter().enumerate() {
            assert_eq!(b.index(), i);
        }
        let codes: std::collections::BTreeSet<_> = all.iter().map(|b| b.condition_code()).collect();
        assert_eq!(codes.len(), 12);
    }

    #[test]
    fn least_filled_assignment() {
        let mut c = BranchCounter::default();
        assert_eq!(c.next(), Branch::all()[0]);
        c.counts = [3; 12];
        c.counts[5] = 2;
        assert_eq!(c.next(), Branch::all()[5]);

        let mut c = BranchCounter::default();
        for _ in 0..1200 {
            c.assign();
        }
        assert_eq!(c.counts, [100; 12]);
    }
}
