use serde::{Deserialize, Serialize};

use super::UpdateError;

/// Pipeline openers `i_order` and their dependent-step partners `j_order`.
///
/// Pipeline `p` separates agent `i_order[p]` and later trains agent
/// `j_order[p]`; `j_order` is a fixed-point-free rearrangement of `i_order`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineAssignment {
    pub i_order: Vec<usize>,
    pub j_order: Vec<usize>,
}

impl PipelineAssignment {
    pub fn n(&self) -> usize {
        self.i_order.len()
    }

    /// Checks that both orders are permutations of `0..n` and `j_p ≠ i_p`.
    pub fn validate(&self) -> Result<(), UpdateError> {
        let n = self.i_order.len();
        if self.j_order.len() != n {
            return Err(UpdateError::Selection("orders differ in length".into()));
        }
        for order in [&self.i_order, &self.j_order] {
            let mut seen = vec![false; n];
            for &a in order.iter() {
                if a >= n || seen[a] {
                    return Err(UpdateError::Selection(format!("{order:?} is not a permutation")));
                }
                seen[a] = true;
            }
        }
        if let Some(p) = (0..n).find(|&p| self.i_order[p] == self.j_order[p]) {
            return Err(UpdateError::Selection(format!("pipeline {p} selects its own opener")));
        }
        Ok(())
    }

    /// Pipeline whose dependent step trains `agent`.
    pub fn pipeline_training(&self, agent: usize) -> Option<usize> {
        self.j_order.iter().position(|&j| j == agent)
    }
}

/// Cyclic shift over the identity opener order.
pub fn nonoverlapping_selection(n: usize, shift: usize) -> Result<PipelineAssignment, UpdateError> {
    nonoverlapping_selection_from((0..n).collect(), shift)
}

/// Cyclic shift: `j_order` is `i_order` rotated left by `shift`.
pub fn nonoverlapping_selection_from(i_order: Vec<usize>, shift: usize) -> Result<PipelineAssignment, UpdateError> {
    let n = i_order.len();
    if n < 2 {
        return Err(UpdateError::Selection("need at least two agents".into()));
    }
    if shift % n == 0 {
        return Err(UpdateError::Selection(format!("shift {shift} is a multiple of {n}")));
    }
    let j_order = (0..n).map(|p| i_order[(p + shift) % n]).collect();
    let out = PipelineAssignment { i_order, j_order };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_agents_swap() {
        let a = nonoverlapping_selection(2, 1).unwrap();
        assert_eq!(a.j_order, vec![1, 0]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(nonoverlapping_selection(1, 1).is_err());
        assert!(nonoverlapping_selection(4, 8).is_err());
        assert!(nonoverlapping_selection(4, 0).is_err());
    }

    #[test]
    fn rotation_of_a_labelled_order() {
        // labels are 1-based in the usual write-up
        let i: Vec<usize> = [2, 4, 1, 3, 5].iter().map(|x| x - 1).collect();
        let a = nonoverlapping_selection_from(i, 1).unwrap();
        let j: Vec<usize> = a.j_order.iter().map(|x| x + 1).collect();
        assert_eq!(j, vec![4, 1, 3, 5, 2]);
    }

    proptest! {
        #[test]
        fn every_valid_shift_is_a_derangement(n in 2usize..9, shift in 1usize..40, seed in any::<u64>()) {
            prop_assume!(shift % n != 0);
            let mut order: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for k in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(k, (s >> 33) as usize % (k + 1));
            }
            let a = nonoverlapping_selection_from(order, shift).unwrap();
            prop_assert!(a.validate().is_ok());
            for agent in 0..n {
                prop_assert!(a.pipeline_training(agent).is_some());
            }
        }
    }
}
