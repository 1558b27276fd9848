//! Named parameters, Adam, and the binary checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tape, Tensor};
use crate::error::{DrfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered table of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Kaiming-uniform fan-in initialization (`bound = sqrt(6 / fan_in)`).
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Per-parameter gradients from a finished backward pass; parameters the
    /// tape never touched get zeros.
    pub fn gradients(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        let mut grads: Vec<Vec<T>> = self.values.iter().map(|v| vec![T::zero(); v.numel()]).collect();
        for (id, g) in tape.param_grads() {
            for (a, b) in grads[id.0].iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
        grads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(DrfError::Shape {
                op: "adam",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = store.values.iter().map(|v| vec![0.0; v.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.values[i].data_mut();
            if g.len() != p.len() {
                return Err(DrfError::Shape {
                    op: "adam",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j].as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] = p[j] - T::from_f64(update);
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 5] = b"DRFN1";

/// Serialized model: metadata plus a named-parameter table of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(DrfError::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| DrfError::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        Checkpoint {
            meta,
            params: store
                .iter()
                .map(|(_, name, v)| {
                    (
                        name.to_string(),
                        v.shape().to_vec(),
                        v.data().iter().map(|x| x.as_f64() as f32).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Layout: magic, metadata pairs, then `(name, rank, dims, values)` per
    /// parameter; integers are `u32` and values `f32`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            for s in [k, v] {
                put_u32(&mut out, s.len());
                out.extend_from_slice(s.as_bytes());
            }
        }
        put_u32(&mut out, self.params.len());
        for (name, shape, data) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len());
            for d in shape {
                put_u32(&mut out, *d);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(MAGIC.len())? != MAGIC {
            return Err(DrfError::Checkpoint("bad magic, not a DRFN1 checkpoint".into()));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..c.u32()? {
            let k = c.string()?;
            meta.insert(k, c.string()?);
        }
        let count = c.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = c.string()?;
            let rank = c.u32()?;
            let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push((name, shape, data));
        }
        if c.at != bytes.len() {
            return Err(DrfError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Metadata keys whose values differ from `expected`.
    pub fn meta_mismatches(&self, expected: &BTreeMap<String, String>) -> Vec<String> {
        expected
            .iter()
            .filter(|(k, v)| self.meta.get(*k) != Some(*v))
            .map(|(k, v)| {
                format!(
                    "{k}: checkpoint has {}, config has {v}",
                    self.meta.get(k).map(String::as_str).unwrap_or("<missing>")
                )
            })
            .collect()
    }

    /// Copies values into a store with the identical name/shape table.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        if self.params.len() != store.len() {
            problems.push(format!(
                "parameter count: checkpoint has {}, model has {}",
                self.params.len(),
                store.len()
            ));
        }
        for (name, shape, _) in &self.params {
            match store.id(name) {
                None => problems.push(format!("{name}: not in model")),
                Some(id) if store.value(id).shape() != shape.as_slice() => problems.push(format!(
                    "{name}: checkpoint shape {shape:?}, model shape {:?}",
                    store.value(id).shape()
                )),
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(DrfError::Checkpoint(problems.join("; ")));
        }
        for (name, _, data) in &self.params {
            let id = store.id(name).expect("checked above");
            for (dst, src) in store.value_mut(id).data_mut().iter_mut().zip(data) {
                *dst = T::from_f64(*src as f64);
            }
        }
        Ok(())
    }
}
