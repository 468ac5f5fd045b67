use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SISW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// `U(-b, b)` with `b = gain · sqrt(6 / fan_in)`.
    HeUniform { gain: f64 },
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    /// Creates a parameter; `fan_in` is taken as the product of all but the leading axis.
    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::HeUniform { gain } => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
            }
        };
        self.insert(name, Tensor { shape: shape.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Every finite?
    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Parameters bound to leaves of one tape.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binds existing tape nodes under parameter names.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        let mut vars = Vec::new();
        let mut index = HashMap::new();
        for (name, v) in pairs {
            index.insert(name.into(), vars.len());
            vars.push(v);
        }
        Self { vars, index }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name:?} is not registered"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParamStore<f32>) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore<f32>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let count = read_u32(r, "tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r, "name length")? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let rank = read_u32(r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "tensor dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        read_exact(r, &mut bytes, &format!("tensor {name} payload"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name.clone(), Tensor::new(shape, data).map_err(|_| Error::Format(format!("tensor {name} has an empty axis")))?);
    }
    Ok(store)
}
