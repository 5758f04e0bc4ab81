use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const PARAM_MAGIC: &[u8; 8] = b"MOADPARM";
const PARAM_VERSION: u32 = 1;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds a fan-in scaled uniform `[fan_in, fan_out]` weight and a bias.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.insert(format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
        self.insert(format!("{prefix}.bias"), Tensor::vector(b));
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_u32::<LittleEndian>(PARAM_VERSION)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in &self.params {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Data(format!("parameter file truncated: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Data("not a parameter file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != PARAM_VERSION {
            return Err(Error::Data(format!("unsupported parameter file version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(bad)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(bad)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name not utf-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(bad)?;
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(bad)?;
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Parameters of a [`ParamStore`] placed on a graph as gradient leaves.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> BoundParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        BoundParams {
            store,
            vars: BTreeMap::new(),
        }
    }

    /// Binds names to existing graph nodes instead of fresh leaves.
    pub fn preset(store: &'a ParamStore, vars: BTreeMap<String, Var>) -> Self {
        BoundParams { store, vars }
    }

    /// The leaf for `name`, created on first use.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        let v = g.named_param(name, t.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · W + b` using `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.weight"))?;
        let b = self.var(g, &format!("{prefix}.bias"))?;
        g.linear(x, w, b)
    }

    /// Gradients of every parameter used on the graph, by name.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| g.grad(*v).map(|t| (name.clone(), t.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adaptive-moment optimizer with L2 weight decay folded into the gradient.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for (((p, g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + c.weight_decay * *p;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_exact() {
        let mut rng = SeededRng::new(9);
        let mut store = ParamStore::new();
        store.init_linear("fc", 3, 2, &mut rng);
        store.insert("scalar", Tensor::scalar(-0.1));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, store);
        assert!(ParamStore::read_from(&buf[..10]).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let mut bound = BoundParams::new(&store);
            let x = bound.var(&mut g, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let grads = bound.gradients(&g);
            opt.step(&mut store, &grads);
        }
        let x = store.get("x").unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
