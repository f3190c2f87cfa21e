use serde::{Deserialize, Serialize};

use super::UpdateError;
use crate::nn::SharingMode;
use crate::rollout::SplitKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Fp3o,
    Fp3oInstepOnly,
    Happo,
    Mappo,
    Ippo,
    Coppo,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Fp3o, Algo::Fp3oInstepOnly, Algo::Happo, Algo::Mappo, Algo::Ippo, Algo::Coppo];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.label() == s.to_ascii_lowercase())
    }

    pub fn label(&self) -> &'static str {
        match self {
            Algo::Fp3o => "fp3o",
            Algo::Fp3oInstepOnly => "fp3o_instep_only",
            Algo::Happo => "happo",
            Algo::Mappo => "mappo",
            Algo::Ippo => "ippo",
            Algo::Coppo => "coppo",
        }
    }

    /// Whether the actor objectives consume per-agent split advantages.
    pub fn uses_split(&self) -> bool {
        matches!(self, Algo::Fp3o | Algo::Fp3oInstepOnly)
    }
}

/// Optimizer and trust-region knobs. Serialized names follow the usual
/// hyperparameter table spelling, `gae_lamda` included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub algo: Algo,
    #[serde(rename = "ppo_clip")]
    pub clip: f64,
    pub double_clip: bool,
    /// Inner clip range; `None` means the same as `ppo_clip`.
    #[serde(rename = "ppo_clip_inner")]
    pub clip2: Option<f64>,
    pub ppo_epochs: usize,
    pub num_mini_batch: usize,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    #[serde(rename = "optimizer_epsilon")]
    pub adam_eps: f64,
    #[serde(rename = "gradient_clip_norm")]
    pub max_grad_norm: f64,
    pub huber_delta: f64,
    pub gamma: f64,
    pub gae_lamda: f64,
    pub split: SplitKind,
    pub sharing: SharingMode,
    /// Cyclic shift of the non-overlapping selection.
    pub shift: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Fp3o,
            clip: 0.2,
            double_clip: false,
            clip2: None,
            ppo_epochs: 5,
            num_mini_batch: 1,
            entropy_coef: 0.001,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            adam_eps: 1e-5,
            max_grad_norm: 10.0,
            huber_delta: 10.0,
            gamma: 0.99,
            gae_lamda: 0.95,
            split: SplitKind::Average,
            sharing: SharingMode::Full,
            shift: 1,
        }
    }
}

impl UpdateConfig {
    pub fn inner_clip(&self) -> f64 {
        self.clip2.unwrap_or(self.clip)
    }

    pub fn validate(&self) -> Result<(), UpdateError> {
        let bad = |m: String| Err(UpdateError::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("ppo_clip {} outside (0, 1)", self.clip));
        }
        let e2 = self.inner_clip();
        if !(e2 > 0.0 && e2 < 1.0) {
            return bad(format!("inner clip {e2} outside (0, 1)"));
        }
        if self.ppo_epochs == 0 || self.num_mini_batch == 0 {
            return bad("ppo_epochs and num_mini_batch must be at least 1".into());
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.max_grad_norm > 0.0 && self.huber_delta > 0.0) {
            return bad("optimizer_epsilon, gradient_clip_norm and huber_delta must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lamda) {
            return bad(format!("gamma {} / gae_lamda {}", self.gamma, self.gae_lamda));
        }
        if self.algo == Algo::Coppo && self.sharing != SharingMode::Full {
            return Err(UpdateError::Unsupported(format!(
                "coppo needs full parameter sharing, got {}",
                self.sharing.label()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_table_names() {
        let c = UpdateConfig::default();
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["gae_lamda"], 0.95);
        assert_eq!(j["ppo_clip"], 0.2);
        let back: UpdateConfig = serde_json::from_str(r#"{"algo":"happo","ppo_epochs":3}"#).unwrap();
        assert_eq!(back.algo, Algo::Happo);
        assert_eq!(back.ppo_epochs, 3);
        assert_eq!(back.clip, 0.2);
    }

    #[test]
    fn validation() {
        assert!(UpdateConfig::default().validate().is_ok());
        let c = UpdateConfig {
            algo: Algo::Coppo,
            sharing: SharingMode::None,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(UpdateError::Unsupported(_))));
        let c = UpdateConfig {
            clip: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(Algo::parse("fp3o_instep_only"), Some(Algo::Fp3oInstepOnly));
    }
}
