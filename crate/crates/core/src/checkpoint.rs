//! Model checkpoints: configuration echo, parameters and optimizer state.

use std::path::Path;

use crate::config::RegistrationConfig;
use crate::container::Container;
use crate::dynamics::ResidualNetParams;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const KIND: &str = "checkpoint";

/// Saved Adam moments, in trainable-parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f64> {
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn capture(adam: &Adam<S>) -> Self {
        let (first, second) = adam.moments();
        Self {
            step: adam.step_count(),
            first: first.to_vec(),
            second: second.to_vec(),
        }
    }

    /// Optimizer with hyperparameters from `config` and these moments.
    pub fn restore(&self, config: &RegistrationConfig) -> Result<Adam<S>> {
        let mut adam = Adam::from_config(config);
        adam.restore(self.step, self.first.clone(), self.second.clone())?;
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S = f64> {
    pub config: RegistrationConfig,
    pub params: ResidualNetParams<S>,
    pub adam: Option<AdamState<S>>,
    /// Free-form run metadata (target path, epoch, ...).
    pub meta: KvFile,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: RegistrationConfig, params: ResidualNetParams<S>) -> Self {
        Self {
            config,
            params,
            adam: None,
            meta: KvFile::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        for (k, v) in self.config.to_kv().entries() {
            c.meta.push(format!("config.{k}"), v);
        }
        for (k, v) in self.meta.entries() {
            c.meta.push(format!("meta.{k}"), v);
        }
        for (name, t) in self.params.named_tensors() {
            c.push_tensor(format!("param.{name}"), t);
        }
        if let Some(adam) = &self.adam {
            c.meta.push("adam.step", adam.step);
            c.meta.push("adam.buffers", adam.first.len());
            for (i, (m, v)) in adam.first.iter().zip(&adam.second).enumerate() {
                c.push_tensor(format!("adam.first.{i}"), m);
                c.push_tensor(format!("adam.second.{i}"), v);
            }
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        c.expect_kind(KIND, origin)?;
        let sub = |prefix: &str| {
            let mut kv = KvFile::new();
            for (k, v) in c.meta.with_prefix(prefix) {
                kv.push(&k[prefix.len()..], v);
            }
            kv
        };
        let config = RegistrationConfig::from_kv(&sub("config."), origin)?;
        let meta = sub("meta.");
        let params: Vec<Tensor<S>> = c
            .tensors()
            .iter()
            .filter(|(n, _)| n.starts_with("param."))
            .map(|(_, t)| t.cast())
            .collect();
        let params = ResidualNetParams::from_tensors(params)?;
        let adam = match c.meta.get("adam.step") {
            None => None,
            Some(_) => {
                let step = c.meta.parse_value("adam.step", origin)?;
                let n: usize = c.meta.parse_value("adam.buffers", origin)?;
                let fetch = |name: String| {
                    c.tensor(&name)
                        .map(|t| t.cast())
                        .ok_or_else(|| Error::malformed(origin, format!("missing tensor `{name}`")))
                };
                let first = (0..n).map(|i| fetch(format!("adam.first.{i}"))).collect::<Result<_>>()?;
                let second = (0..n).map(|i| fetch(format!("adam.second.{i}"))).collect::<Result<_>>()?;
                Some(AdamState { step, first, second })
            }
        };
        Ok(Self {
            config,
            params,
            adam,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}
