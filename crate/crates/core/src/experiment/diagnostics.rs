//! Post-hoc views of a run: matching degree and per-agent KL quantiles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, MetricRecord};

/// `100 · N_m / N_t` over records that carry both a condition and a
/// post-hoc constraint evaluation.
pub fn matching_degree(records: &[MetricRecord]) -> Result<f64, ExperimentError> {
    let flags: Vec<bool> = records.iter().filter_map(|r| r.matching).collect();
    if flags.is_empty() {
        return Err(ExperimentError::Empty("no iteration recorded a condition check".into()));
    }
    let matched = flags.iter().filter(|&&m| m).count();
    Ok(100.0 * matched as f64 / flags.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentKl {
    pub agent: usize,
    pub iterations: usize,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

/// Linear interpolation between closest ranks on sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distribution over iterations of each agent's mean KL from the collecting
/// policy to the updated one.
pub fn kl_report(records: &[MetricRecord]) -> Vec<AgentKl> {
    let n = records.iter().map(|r| r.kl.len()).max().unwrap_or(0);
    (0..n)
        .map(|agent| {
            let mut xs: Vec<f64> = records.iter().filter_map(|r| r.kl.get(agent)).map(|k| k.mean).collect();
            xs.sort_by(f64::total_cmp);
            AgentKl {
                agent,
                iterations: xs.len(),
                median: quantile(&xs, 0.5),
                p90: quantile(&xs, 0.9),
                max: xs.last().copied().unwrap_or(0.0),
            }
        })
        .collect()
}

pub fn write_kl_csv(rows: &[AgentKl], out: impl Write) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::KlStats;
    use proptest::prelude::*;

    fn rec(matching: Option<bool>, kl: &[f64]) -> MetricRecord {
        MetricRecord {
            matching,
            kl: kl.iter().map(|&m| KlStats { mean: m, max: m }).collect(),
            ..MetricRecord::initial(0.0, 0.0)
        }
    }

    #[test]
    fn degree_arithmetic() {
        let all = vec![rec(Some(true), &[]); 5];
        assert_eq!(matching_degree(&all).unwrap(), 100.0);
        let mixed = [Some(true), Some(false), Some(true), Some(true), None].map(|m| rec(m, &[]));
        assert_eq!(matching_degree(&mixed).unwrap(), 75.0);
        assert!(matching_degree(&[]).is_err());
        assert!(matching_degree(&[rec(None, &[])]).is_err());
    }

    proptest! {
        #[test]
        fn degree_ignores_order(flags in proptest::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut recs: Vec<_> = flags.iter().map(|&f| rec(Some(f), &[])).collect();
            let a = matching_degree(&recs).unwrap();
            recs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, matching_degree(&recs).unwrap());
        }
    }

    #[test]
    fn kl_quantiles() {
        let one = kl_report(&[rec(None, &[0.3, 0.0])]);
        assert_eq!((one[0].median, one[0].p90, one[0].max), (0.3, 0.3, 0.3));
        assert_eq!((one[1].median, one[1].p90, one[1].max), (0.0, 0.0, 0.0));
        let recs: Vec<_> = (0..11).map(|k| rec(None, &[k as f64])).collect();
        let r = kl_report(&recs);
        assert_eq!((r[0].median, r[0].p90, r[0].max, r[0].iterations), (5.0, 9.0, 10.0, 11));
        let mut buf = Vec::new();
        write_kl_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "agent,iterations,median,p90,max");
    }
}
