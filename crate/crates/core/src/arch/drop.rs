use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ArchError;

/// Per-block survival probabilities under linear decay from `p0` to `p_last`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropSchedule {
    pub blocks: usize,
    pub p0: f64,
    pub p_last: f64,
}

impl DropSchedule {
    pub fn new(blocks: usize, p0: f64, p_last: f64) -> Result<Self, ArchError> {
        if blocks == 0 {
            return Err(ArchError::Schedule("need at least one block".into()));
        }
        for (name, p) in [("p0", p0), ("pL", p_last)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ArchError::Schedule(format!("{name} = {p} outside (0, 1]")));
            }
        }
        if p_last > p0 {
            return Err(ArchError::Schedule(format!("pL = {p_last} exceeds p0 = {p0}")));
        }
        Ok(Self { blocks, p0, p_last })
    }

    /// The usual `p0 = 1` linear decay.
    pub fn linear(blocks: usize, p_last: f64) -> Result<Self, ArchError> {
        Self::new(blocks, 1.0, p_last)
    }

    /// Survival probability of block `l` (1-based).
    pub fn survival(&self, l: usize) -> f64 {
        self.p0 + (l as f64 / self.blocks as f64) * (self.p_last - self.p0)
    }

    pub fn survivals(&self) -> Vec<f64> {
        (1..=self.blocks).map(|l| self.survival(l)).collect()
    }
}

/// Draws one keep/drop decision per block; `mask[l - 1]` is true when block `l` survives.
pub fn sample_drop_mask<R: Rng + ?Sized>(schedule: &DropSchedule, rng: &mut R) -> Vec<bool> {
    (1..=schedule.blocks).map(|l| rng.random::<f64>() < schedule.survival(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation() {
        let s = DropSchedule::linear(10, 0.5).unwrap();
        assert!((s.survival(5) - 0.75).abs() < 1e-15);
        assert_eq!(s.survival(10), 0.5);
        assert!(s.survivals().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(DropSchedule::new(4, 1.0, 0.0).is_err());
        assert!(DropSchedule::new(4, 0.5, 0.9).is_err());
        assert!(DropSchedule::new(0, 1.0, 0.5).is_err());
    }

    #[test]
    fn all_survive_at_p_one() {
        let s = DropSchedule::linear(6, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_drop_mask(&s, &mut rng).into_iter().all(|k| k));
    }
}
