use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::init::{orthogonal, slot_rng};
use super::store::ParamStore;
use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Categorical { actions: usize },
    /// Diagonal Gaussian with a state-independent log-std row.
    Gaussian { dim: usize },
    Value,
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            HeadKind::Categorical { actions } => actions,
            HeadKind::Gaussian { dim } => dim,
            HeadKind::Value => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Full,
    Partial,
    None,
}

impl SharingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "fups" => Some(Self::Full),
            "partial" | "paps" => Some(Self::Partial),
            "none" | "nops" => Some(Self::None),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Partial => "partial",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub gain_hidden: f64,
    pub gain_head: f64,
    pub log_std_init: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, head: HeadKind) -> Self {
        Self {
            input_dim,
            hidden,
            head,
            gain_hidden: 2f64.sqrt(),
            gain_head: 0.01,
            log_std_init: 0.5f64.ln(),
        }
    }

    pub fn layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn dims(&self, layer: usize) -> (usize, usize) {
        let fan_in = if layer == 0 {
            self.input_dim
        } else {
            self.hidden[layer - 1]
        };
        let fan_out = if layer == self.hidden.len() {
            self.head.out_dim()
        } else {
            self.hidden[layer]
        };
        (fan_in, fan_out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.head.out_dim() == 0 {
            return Err(NnError::Shape("mlp dims must be positive".into()));
        }
        Ok(())
    }

    fn init_layer(&self, layer: usize, seed: u64, stream: usize) -> Vec<Tensor> {
        let (i, o) = self.dims(layer);
        let head = layer == self.hidden.len();
        let gain = if head { self.gain_head } else { self.gain_hidden };
        let mut rng = slot_rng(seed, stream);
        let mut ts = vec![orthogonal(i, o, gain, &mut rng), Tensor::zeros(&[1, o])];
        if head {
            if let HeadKind::Gaussian { dim } = self.head {
                ts.push(Tensor::full(&[1, dim], self.log_std_init));
            }
        }
        ts
    }
}

/// Builds a store whose bindings realize the sharing mode.
///
/// Layer `l` of agent `a` is bound at key `(a, l)`. Slot init streams depend on
/// the slot's own index so that the shared layout is reproducible on its own.
pub fn bind_sharing(spec: &MlpSpec, n_agents: usize, mode: SharingMode, seed: u64) -> Result<ParamStore, NnError> {
    spec.validate()?;
    if n_agents == 0 {
        return Err(NnError::Shape("no agents".into()));
    }
    let mut store = ParamStore::new();
    let head = spec.layers() - 1;
    for layer in 0..spec.layers() {
        let shared = match mode {
            SharingMode::Full => true,
            SharingMode::Partial => layer != head,
            SharingMode::None => false,
        };
        if shared {
            let id = store.add_slot(&format!("layer{layer}"), spec.init_layer(layer, seed, store.slot_count()));
            for a in 0..n_agents {
                store.bind(a, layer, id)?;
            }
        } else {
            for a in 0..n_agents {
                let id = store.add_slot(
                    &format!("agent{a}.layer{layer}"),
                    spec.init_layer(layer, seed, store.slot_count()),
                );
                store.bind(a, layer, id)?;
            }
        }
    }
    store.validate()?;
    Ok(store)
}

/// Network output, either as tape variables or plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOut<T> {
    Logits(T),
    Gaussian { mean: T, log_std: T },
    Value(T),
}

/// Forward pass recorded on the tape.
pub fn forward(g: &mut Graph, store: &ParamStore, spec: &MlpSpec, agent: usize, x: Var) -> Result<HeadOut<Var>, NnError> {
    let cols = g.value(x).cols();
    if cols != spec.input_dim {
        return Err(NnError::Shape(format!("input has {cols} features, net expects {}", spec.input_dim)));
    }
    let mut h = x;
    let head = spec.layers() - 1;
    for layer in 0..spec.layers() {
        let id = store.binding(agent, layer)?;
        let w = g.param(store, id, 0)?;
        let b = g.param(store, id, 1)?;
        let z = g.matmul(h, w)?;
        h = g.add_row(z, b)?;
        if layer != head {
            h = g.relu(h);
        }
    }
    let id = store.binding(agent, head)?;
    Ok(match spec.head {
        HeadKind::Categorical { .. } => HeadOut::Logits(h),
        HeadKind::Value => HeadOut::Value(h),
        HeadKind::Gaussian { .. } => HeadOut::Gaussian {
            mean: h,
            log_std: g.param(store, id, 2)?,
        },
    })
}

/// Tape-free forward pass; uses the same kernels so values match bit for bit.
pub fn infer(store: &ParamStore, spec: &MlpSpec, agent: usize, x: &Tensor) -> Result<HeadOut<Tensor>, NnError> {
    if x.cols() != spec.input_dim {
        return Err(NnError::Shape(format!(
            "input has {} features, net expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    let head = spec.layers() - 1;
    let mut h = x.clone();
    for layer in 0..spec.layers() {
        let id = store.binding(agent, layer)?;
        h = h.matmul(store.tensor(id, 0)?)?.add_row(store.tensor(id, 1)?)?;
        if layer != head {
            h = h.relu();
        }
    }
    let id = store.binding(agent, head)?;
    Ok(match spec.head {
        HeadKind::Categorical { .. } => HeadOut::Logits(h),
        HeadKind::Value => HeadOut::Value(h),
        HeadKind::Gaussian { .. } => HeadOut::Gaussian {
            mean: h,
            log_std: store.tensor(id, 2)?.clone(),
        },
    })
}
