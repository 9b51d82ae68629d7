use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with std 0.02, truncated at two standard deviations.
    TruncNormal,
    /// He-normal scaled by the given fan-in.
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Every learned tensor of the model, in a fixed order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c1, c2) = cfg.encoder_channels;
    let k = cfg.filters;
    let d = cfg.token_dim();
    let hidden = cfg.mlp_dim();
    let mut v = vec![
        spec("enc.conv1.weight", &[c1, 1, 3, 3], Init::FanIn(9)),
        spec("enc.conv1.bias", &[c1], Init::Zeros),
        spec("enc.gn1.gain", &[c1], Init::Ones),
        spec("enc.gn1.bias", &[c1], Init::Zeros),
        spec("enc.conv2.weight", &[c2, c1, 3, 3], Init::FanIn(9 * c1)),
        spec("enc.conv2.bias", &[c2], Init::Zeros),
        spec("enc.gn2.gain", &[c2], Init::Ones),
        spec("enc.gn2.bias", &[c2], Init::Zeros),
        spec("enc.conv3.weight", &[k, c2, 3, 3], Init::FanIn(9 * c2)),
        spec("enc.conv3.bias", &[k], Init::Zeros),
        spec("energy.weight", &[d, 1], Init::TruncNormal),
        spec("pos_embedding", &[cfg.seq_len + 1, d], Init::TruncNormal),
    ];
    for b in 0..cfg.blocks {
        let p = |s: &str| format!("block{}.{}", b, s);
        v.extend([
            spec(p("ln1.gain"), &[d], Init::Ones),
            spec(p("ln1.bias"), &[d], Init::Zeros),
            spec(p("attn.qkv"), &[d, 3 * d], Init::TruncNormal),
            spec(p("attn.proj"), &[d, d], Init::TruncNormal),
            spec(p("ln2.gain"), &[d], Init::Ones),
            spec(p("ln2.bias"), &[d], Init::Zeros),
            spec(p("mlp.fc1.weight"), &[d, hidden], Init::TruncNormal),
            spec(p("mlp.fc1.bias"), &[hidden], Init::Zeros),
            spec(p("mlp.fc2.weight"), &[hidden, d], Init::TruncNormal),
            spec(p("mlp.fc2.bias"), &[d], Init::Zeros),
        ]);
    }
    v.extend([
        // transposed kernels are [C_in, C_out, 3, 3]; each output pixel sees
        // on average 9/4 input taps per channel
        spec("dec.deconv1.weight", &[k, c2, 3, 3], Init::FanIn(9 * k / 4)),
        spec("dec.deconv1.bias", &[c2], Init::Zeros),
        spec("dec.gn1.gain", &[c2], Init::Ones),
        spec("dec.gn1.bias", &[c2], Init::Zeros),
        spec(
            "dec.deconv2.weight",
            &[c2, c1, 3, 3],
            Init::FanIn(9 * c2 / 4),
        ),
        spec("dec.deconv2.bias", &[c1], Init::Zeros),
        spec("dec.gn2.gain", &[c1], Init::Ones),
        spec("dec.gn2.bias", &[c1], Init::Zeros),
        spec("dec.conv3.weight", &[c1, c1, 3, 3], Init::FanIn(9 * c1)),
        spec("dec.conv3.bias", &[c1], Init::Zeros),
        spec("dec.conv4.weight", &[1, c1, 3, 3], Init::FanIn(9 * c1)),
        spec("dec.conv4.bias", &[1], Init::Zeros),
    ]);
    v
}

/// Closed-form number of learned scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (c1, c2) = cfg.encoder_channels;
    let k = cfg.filters;
    let d = cfg.token_dim();
    let r = cfg.mlp_ratio;
    let encoder = (9 * c1 + 3 * c1) + (9 * c1 * c2 + 3 * c2) + (9 * c2 * k + k);
    let embeddings = d + (cfg.seq_len + 1) * d;
    let block = 4 * d * d + 2 * r * d * d + 5 * d + r * d;
    let decoder =
        (9 * k * c2 + 3 * c2) + (9 * c2 * c1 + 3 * c1) + (9 * c1 * c1 + c1) + (9 * c1 + 1);
    encoder + embeddings + cfg.blocks * block + decoder
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = ParamStore {
            names: Vec::with_capacity(named.len()),
            tensors: Vec::with_capacity(named.len()),
            index: HashMap::new(),
        };
        for (name, t) in named {
            if store
                .index
                .insert(name.clone(), store.names.len())
                .is_some()
            {
                return Err(Error::Data(format!("duplicate parameter '{}'", name)));
            }
            store.names.push(name);
            store.tensors.push(t);
        }
        Ok(store)
    }

    pub(crate) fn initialize<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let named = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::TruncNormal => {
                        let normal = Normal::new(0.0, 0.02).unwrap();
                        (0..n)
                            .map(|_| loop {
                                let v: f64 = normal.sample(rng);
                                if v.abs() <= 0.04 {
                                    break T::of(v);
                                }
                            })
                            .collect()
                    }
                    Init::FanIn(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                        (0..n).map(|_| T::of(normal.sample(rng))).collect()
                    }
                };
                (
                    s.name,
                    Tensor::new(&s.shape, data).expect("spec shapes are consistent"),
                )
            })
            .collect();
        Self::from_named(named).expect("spec names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that names and shapes match what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for s in specs {
            let t = self
                .get(&s.name)
                .ok_or_else(|| Error::Data(format!("missing parameter '{}'", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }
}
