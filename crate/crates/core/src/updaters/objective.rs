//! Surrogate objectives. Each `*_surrogate` returns the per-sample `[B, 1]`
//! value to be maximized; losses negate a mean over stacked samples.

use super::UpdateError;
use crate::nn::{Graph, Tensor, Var};
use crate::policies::{Action, PolicyEnsemble};

/// Live ratio `exp(logp - old_logp)` and entropy of `agent` on the tape.
pub fn live_ratio(
    g: &mut Graph,
    ens: &PolicyEnsemble,
    agent: usize,
    input: &Tensor,
    actions: &[Action],
    old_logp: &[f64],
) -> Result<(Var, Var), UpdateError> {
    let (lp, ent) = ens.evaluate_actions(g, agent, input, actions)?;
    let old = g.input(Tensor::column(old_logp.to_vec()));
    let d = g.sub(lp, old)?;
    Ok((g.exp(d), ent))
}

fn check_finite(what: &str, xs: &[f64]) -> Result<(), UpdateError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(UpdateError::NonFinite(what.into()))
    }
}

/// Per-sample full-pipeline surrogate.
///
/// Without `double`: `min((r_i r_rest - 1) r_j A, (clip(r_i) r_rest - 1) r_j A)`.
/// With `double = Some(eps2)` and `h = clip(r_rest r_j, 1 ± eps2)`:
/// `min((r_i h - r_j) A, (clip(r_i) h - r_j) A)`.
pub fn fp3o_surrogate(
    g: &mut Graph,
    ratio_i: Var,
    ratio_rest: &[f64],
    ratio_j: &[f64],
    adv: &[f64],
    eps: f64,
    double: Option<f64>,
) -> Result<Var, UpdateError> {
    let b = g.value(ratio_i).rows();
    if ratio_rest.len() != b || ratio_j.len() != b || adv.len() != b {
        return Err(UpdateError::Shape(format!("surrogate inputs for {b} samples differ in length")));
    }
    check_finite("ratio_i", g.value(ratio_i).data())?;
    check_finite("ratio_rest", ratio_rest)?;
    check_finite("ratio_j", ratio_j)?;
    let clipped = g.clamp(ratio_i, 1.0 - eps, 1.0 + eps);
    let (s1, s2) = match double {
        None => {
            let rest = g.input(Tensor::column(ratio_rest.to_vec()));
            let k = g.input(Tensor::column(ratio_j.iter().zip(adv).map(|(r, a)| r * a).collect()));
            let mut branch = |x: Var| -> Result<Var, UpdateError> {
                let y = g.mul(x, rest)?;
                let y = g.add_scalar(y, -1.0);
                Ok(g.mul(y, k)?)
            };
            (branch(ratio_i)?, branch(clipped)?)
        }
        Some(eps2) => {
            let h = g.input(Tensor::column(
                ratio_rest
                    .iter()
                    .zip(ratio_j)
                    .map(|(r, j)| (r * j).clamp(1.0 - eps2, 1.0 + eps2))
                    .collect(),
            ));
            let rj = g.input(Tensor::column(ratio_j.to_vec()));
            let a = g.input(Tensor::column(adv.to_vec()));
            let mut branch = |x: Var| -> Result<Var, UpdateError> {
                let y = g.mul(x, h)?;
                let y = g.sub(y, rj)?;
                Ok(g.mul(y, a)?)
            };
            (branch(ratio_i)?, branch(clipped)?)
        }
    };
    Ok(g.min(s1, s2)?)
}

/// `-mean` of [`fp3o_surrogate`].
pub fn fp3o_objective(
    g: &mut Graph,
    ratio_i: Var,
    ratio_rest: &[f64],
    ratio_j: &[f64],
    adv: &[f64],
    eps: f64,
    double: Option<f64>,
) -> Result<Var, UpdateError> {
    let s = fp3o_surrogate(g, ratio_i, ratio_rest, ratio_j, adv, eps, double)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Per-sample PPO clip surrogate `min(r A, clip(r) A)`.
pub fn ppo_clip_surrogate(g: &mut Graph, ratio: Var, adv: &[f64], eps: f64) -> Result<Var, UpdateError> {
    check_finite("ratio", g.value(ratio).data())?;
    let a = g.input(Tensor::column(adv.to_vec()));
    let s1 = g.mul(ratio, a)?;
    let c = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = g.mul(c, a)?;
    Ok(g.min(s1, s2)?)
}

/// Per-sample coordinated surrogate with the others' joint ratio frozen:
/// `h = clip(r_others, 1 ± eps2)`, `min(r h A, clip(r h, 1 ± eps) A)`.
pub fn coppo_surrogate(g: &mut Graph, ratio: Var, ratio_others: &[f64], adv: &[f64], eps: f64, eps2: f64) -> Result<Var, UpdateError> {
    check_finite("ratio", g.value(ratio).data())?;
    check_finite("ratio_others", ratio_others)?;
    let h = g.input(Tensor::column(ratio_others.iter().map(|r| r.clamp(1.0 - eps2, 1.0 + eps2)).collect()));
    let joint = g.mul(ratio, h)?;
    let a = g.input(Tensor::column(adv.to_vec()));
    let s1 = g.mul(joint, a)?;
    let c = g.clamp(joint, 1.0 - eps, 1.0 + eps);
    let s2 = g.mul(c, a)?;
    Ok(g.min(s1, s2)?)
}

/// `-(Σ surrogate) / R - c (Σ entropy) / R` over `R` stacked samples.
///
/// Mirrors one mean over all agents' rows in a single batch.
pub fn stacked_loss(g: &mut Graph, terms: &[(Var, Var)], entropy_coef: f64) -> Result<(Var, f64, f64), UpdateError> {
    if terms.is_empty() {
        return Err(UpdateError::Shape("no loss terms".into()));
    }
    let rows: usize = terms.iter().map(|(s, _)| g.value(*s).rows()).sum();
    let mut total: Option<Var> = None;
    let (mut pl, mut ent) = (0.0, 0.0);
    for &(s, e) in terms {
        let ss = g.sum(s);
        let se = g.sum(e);
        pl -= g.value(ss).item() / rows as f64;
        ent += g.value(se).item() / rows as f64;
        let a = g.scale(ss, -1.0 / rows as f64);
        let b = g.scale(se, -entropy_coef / rows as f64);
        let t = g.add(a, b)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let loss = total.expect("terms is non-empty");
    if !g.value(loss).is_finite() {
        return Err(UpdateError::NonFinite("loss".into()));
    }
    Ok((loss, pl, ent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_surr(r: f64, rest: f64, rj: f64, adv: f64, eps: f64, double: Option<f64>) -> f64 {
        let mut g = Graph::new();
        let x = g.input(Tensor::column(vec![r]));
        let s = fp3o_surrogate(&mut g, x, &[rest], &[rj], &[adv], eps, double).unwrap();
        g.value(s).item()
    }

    #[test]
    fn hand_values() {
        // clipped branch active: (1.2 - 1) * adv
        assert!((scalar_surr(1.5, 1.0, 1.0, 2.0, 0.2, None) - 0.4).abs() < 1e-15);
        assert_eq!(scalar_surr(1.0, 1.0, 1.0, 3.0, 0.2, None), 0.0);
        assert_eq!(scalar_surr(1.0, 1.0, 1.0, 3.0, 0.2, Some(0.2)), 0.0);
        // double clip: h = clip(2.0 * 1.0, 1 ± .2) = 1.2; min((.9*1.2 - 1)*-1, (.9*1.2-1)*-1)
        let v = scalar_surr(0.9, 2.0, 1.0, -1.0, 0.2, Some(0.2));
        assert!((v - (-(0.9 * 1.2 - 1.0))).abs() < 1e-15);
        // adv < 0 with ratio 0.5: PPO picks the clipped 0.8 branch
        let mut g = Graph::new();
        let x = g.input(Tensor::column(vec![0.5]));
        let s = ppo_clip_surrogate(&mut g, x, &[-1.0], 0.2).unwrap();
        assert_eq!(g.value(s).item(), -0.8);
        // others' ratio 2.0 inner-clipped to 1.2
        let mut g = Graph::new();
        let x = g.input(Tensor::column(vec![1.0]));
        let s = coppo_surrogate(&mut g, x, &[2.0], &[1.0], 0.5, 0.2).unwrap();
        assert!((g.value(s).item() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.input(Tensor::column(vec![1.0]));
        assert!(matches!(
            fp3o_surrogate(&mut g, x, &[f64::INFINITY], &[1.0], &[1.0], 0.2, None),
            Err(UpdateError::NonFinite(_))
        ));
    }
}
