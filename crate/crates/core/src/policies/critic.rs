use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::nn::{bind_sharing, forward, infer, Graph, HeadKind, HeadOut, MlpSpec, ParamStore, SharingMode, Tensor, Var};

/// What the value network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInput {
    /// One centralized value of the global state.
    Global,
    /// One value per agent from its own observation plus agent one-hot.
    Local,
}

/// State-value network. A single parameter set serves every stream.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub store: ParamStore,
    spec: MlpSpec,
    input: CriticInput,
    n_agents: usize,
    feature_dim: usize,
}

impl CriticNet {
    /// `feature_dim` is the state size for [`CriticInput::Global`] and the
    /// observation size for [`CriticInput::Local`].
    pub fn new(input: CriticInput, feature_dim: usize, n_agents: usize, hidden: Vec<usize>, seed: u64) -> Result<Self, PolicyError> {
        let in_dim = match input {
            CriticInput::Global => feature_dim,
            CriticInput::Local => feature_dim + n_agents,
        };
        let mut spec = MlpSpec::new(in_dim, hidden, HeadKind::Value);
        spec.gain_head = 1.0;
        let store = bind_sharing(&spec, 1, SharingMode::Full, seed)?;
        Ok(Self {
            store,
            spec,
            input,
            n_agents,
            feature_dim,
        })
    }

    pub fn input_kind(&self) -> CriticInput {
        self.input
    }

    /// Number of value streams: 1 centralized, or one per agent.
    pub fn streams(&self) -> usize {
        match self.input {
            CriticInput::Global => 1,
            CriticInput::Local => self.n_agents,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Input rows for `stream` from its feature rows.
    pub fn stream_input<R: AsRef<[f64]>>(&self, stream: usize, rows: &[R]) -> Result<Tensor, PolicyError> {
        if stream >= self.streams() {
            return Err(PolicyError::Dimension(format!("stream {stream} of {}", self.streams())));
        }
        let mut data = Vec::with_capacity(rows.len() * self.spec.input_dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != self.feature_dim {
                return Err(PolicyError::Dimension(format!(
                    "critic features of {} values, expected {}",
                    r.len(),
                    self.feature_dim
                )));
            }
            data.extend_from_slice(r);
            if self.input == CriticInput::Local {
                data.extend((0..self.n_agents).map(|k| if k == stream { 1.0 } else { 0.0 }));
            }
        }
        Ok(Tensor::new(vec![rows.len(), self.spec.input_dim], data)?)
    }

    pub fn values(&self, input: &Tensor) -> Result<Vec<f64>, PolicyError> {
        match infer(&self.store, &self.spec, 0, input)? {
            HeadOut::Value(v) if v.is_finite() => Ok(v.into_data()),
            HeadOut::Value(_) => Err(PolicyError::NonFinite("critic value".into())),
            _ => unreachable!("critic has a value head"),
        }
    }

    /// Mean Huber loss of `returns - V(input)` on the tape.
    pub fn value_loss(&self, g: &mut Graph, input: &Tensor, returns: &[f64], delta: f64) -> Result<Var, PolicyError> {
        if returns.len() != input.rows() {
            return Err(PolicyError::Dimension(format!("{} returns for {} rows", returns.len(), input.rows())));
        }
        let x = g.input(input.clone());
        let HeadOut::Value(v) = forward(g, &self.store, &self.spec, 0, x)? else {
            unreachable!("critic has a value head")
        };
        let r = g.input(Tensor::column(returns.to_vec()));
        let err = g.sub(r, v)?;
        let h = g.huber(err, delta);
        Ok(g.mean(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, clip_grad_norm};

    #[test]
    fn local_streams_get_distinct_ids() {
        let c = CriticNet::new(CriticInput::Local, 2, 3, vec![8], 0).unwrap();
        assert_eq!(c.streams(), 3);
        let a = c.stream_input(0, &[[0.5, 0.5]]).unwrap();
        let b = c.stream_input(2, &[[0.5, 0.5]]).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 1.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[0.5, 0.5, 0.0, 0.0, 1.0]);
        assert!(c.stream_input(3, &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn fits_a_constant_target() {
        let mut c = CriticNet::new(CriticInput::Global, 1, 2, vec![16], 3).unwrap();
        let x = c.stream_input(0, &[[1.0]; 4]).unwrap();
        let opt = Adam::new(1e-2);
        for _ in 0..800 {
            let mut g = Graph::new();
            let l = c.value_loss(&mut g, &x, &[2.5; 4], 10.0).unwrap();
            let mut grads = g.backward(l).unwrap();
            clip_grad_norm(&mut grads, 10.0);
            opt.step(&mut c.store, &grads).unwrap();
        }
        let v = c.values(&x).unwrap();
        assert!(v.iter().all(|v| (v - 2.5).abs() < 1e-3), "{v:?}");
    }
}
