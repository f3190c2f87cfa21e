use serde::{Deserialize, Serialize};

/// Monte Carlo check of the dependent-step constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    /// `Σ_i μ̂` with every other agent at the new parameters.
    pub sum_mu_intermediate: f64,
    /// `Σ_i μ̂` with the others still at the collecting parameters.
    pub sum_mu_old: f64,
    pub met: bool,
}

/// Per-agent estimates `(μ̂_intermediate, μ̂_old)` from samples of the old policy.
///
/// `old_logp[i][t]` and `new_logp[i][t]` are agent `i`'s log-probabilities of
/// the taken action; `adv_split[i][t]` its advantage share. Agent `i` acts
/// from the new policy in both estimates.
pub fn mu_estimates(old_logp: &[Vec<f64>], new_logp: &[Vec<f64>], adv_split: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = old_logp.len();
    let len = old_logp.first().map_or(0, Vec::len);
    let joint: Vec<f64> = (0..len)
        .map(|t| (0..n).map(|j| new_logp[j][t] - old_logp[j][t]).sum::<f64>().exp())
        .collect();
    (0..n)
        .map(|i| {
            let mut inter = 0.0;
            let mut old = 0.0;
            for t in 0..len {
                inter += joint[t] * adv_split[i][t];
                old += (new_logp[i][t] - old_logp[i][t]).exp() * adv_split[i][t];
            }
            (inter / len as f64, old / len as f64)
        })
        .collect()
}

pub fn condition_estimate(old_logp: &[Vec<f64>], new_logp: &[Vec<f64>], adv_split: &[Vec<f64>]) -> ConditionEstimate {
    let per = mu_estimates(old_logp, new_logp, adv_split);
    let sum_mu_intermediate = per.iter().map(|p| p.0).sum();
    let sum_mu_old = per.iter().map(|p| p.1).sum();
    ConditionEstimate {
        sum_mu_intermediate,
        sum_mu_old,
        met: sum_mu_intermediate >= sum_mu_old,
    }
}

/// Average-split shortcut: with `A^i = A/n` the sums collapse to
/// `mean[r_joint A]` and `mean[(1/n) Σ_i r_i A]`.
pub fn condition_estimate_average(old_logp: &[Vec<f64>], new_logp: &[Vec<f64>], joint_adv: &[f64]) -> (f64, f64) {
    let n = old_logp.len() as f64;
    let len = joint_adv.len() as f64;
    let mut inter = 0.0;
    let mut old = 0.0;
    for (t, a) in joint_adv.iter().enumerate() {
        let lr: Vec<f64> = old_logp.iter().zip(new_logp).map(|(o, w)| w[t] - o[t]).collect();
        inter += lr.iter().sum::<f64>().exp() * a;
        old += lr.iter().map(|d| d.exp()).sum::<f64>() / n * a;
    }
    (inter / len, old / len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unchanged_policy_gives_equal_sums() {
        let lp = vec![vec![-0.5, -1.0, -2.0], vec![-0.1, -0.7, -0.3]];
        let adv = vec![vec![0.3, -0.2, 1.0], vec![0.5, 0.5, -2.0]];
        let c = condition_estimate(&lp, &lp, &adv);
        assert_eq!(c.sum_mu_intermediate, c.sum_mu_old);
        assert!(c.met);
    }

    #[test]
    fn average_split_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..5 {
            let len = 50;
            let old: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-2.0..0.0)).collect()).collect();
            let new: Vec<Vec<f64>> = old.iter().map(|o| o.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect()).collect();
            let joint: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let split: Vec<Vec<f64>> = (0..n).map(|_| joint.iter().map(|a| a / n as f64).collect()).collect();
            let c = condition_estimate(&old, &new, &split);
            let (i, o) = condition_estimate_average(&old, &new, &joint);
            assert!((c.sum_mu_intermediate - i).abs() < 1e-12);
            assert!((c.sum_mu_old - o).abs() < 1e-12);
        }
    }
}
