//! Nested, string-keyed tensor collections sharing a leading batch shape.
//!
//! A [`TensorMap`] is the carrier for everything that flows through the
//! engine: model inputs and outputs, cached activations, gradients,
//! attributions and parameter maps. Keys never contain `.`, so a nested
//! path flattens injectively to a dotted string and the same addressing
//! scheme serves module paths and map paths.

use std::fmt;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEPARATOR: char = '.';

/// A non-empty sequence of keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyPath(Vec<String>);

impl KeyPath {
    pub fn new<I, S>(segments: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.is_empty() {
            return Err(Error::InvalidKey(String::new()));
        }
        for s in &segments {
            validate_key(s)?;
        }
        Ok(KeyPath(segments))
    }

    /// Splits a dotted string.
    pub fn parse(dotted: &str) -> Result<Self> {
        KeyPath::new(dotted.split(SEPARATOR))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn join(&self) -> String {
        self.0.join(".")
    }

    pub fn child(&self, key: &str) -> Result<KeyPath> {
        validate_key(key)?;
        let mut s = self.0.clone();
        s.push(key.to_string());
        Ok(KeyPath(s))
    }
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.join())
    }
}

impl TryFrom<&str> for KeyPath {
    type Error = Error;
    fn try_from(s: &str) -> Result<Self> {
        KeyPath::parse(s)
    }
}

impl TryFrom<String> for KeyPath {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        KeyPath::parse(&s)
    }
}

impl TryFrom<&String> for KeyPath {
    type Error = Error;
    fn try_from(s: &String) -> Result<Self> {
        KeyPath::parse(s)
    }
}

impl TryFrom<&KeyPath> for KeyPath {
    type Error = Error;
    fn try_from(p: &KeyPath) -> Result<Self> {
        Ok(p.clone())
    }
}

pub fn validate_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains(SEPARATOR) {
        Err(Error::InvalidKey(key.to_string()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Map(TensorMap),
}

impl Entry {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Entry::Tensor(t) => Some(t),
            Entry::Map(_) => None,
        }
    }

    pub fn as_map(&self) -> Option<&TensorMap> {
        match self {
            Entry::Map(m) => Some(m),
            Entry::Tensor(_) => None,
        }
    }
}

impl From<Tensor> for Entry {
    fn from(t: Tensor) -> Self {
        Entry::Tensor(t)
    }
}

impl From<TensorMap> for Entry {
    fn from(m: TensorMap) -> Self {
        Entry::Map(m)
    }
}

/// Ordered nested map from keys to tensors or sub-maps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    entries: IndexMap<String, Entry>,
    batch_shape: Vec<usize>,
}

/// Flattened view: dotted key to tensor, in traversal order.
pub type FlatMap = IndexMap<String, Tensor>;

impl TensorMap {
    /// An empty map with no batch constraint.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_batch(batch_shape: impl Into<Vec<usize>>) -> Self {
        TensorMap { entries: IndexMap::new(), batch_shape: batch_shape.into() }
    }

    pub fn batch_shape(&self) -> &[usize] {
        &self.batch_shape
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-level keys in insertion order.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of leaf tensors in the whole nest.
    pub fn leaf_count(&self) -> usize {
        self.entries
            .values()
            .map(|e| match e {
                Entry::Tensor(_) => 1,
                Entry::Map(m) => m.leaf_count(),
            })
            .sum()
    }

    fn check_leaf(&self, path: &str, t: &Tensor) -> Result<()> {
        let b = &self.batch_shape;
        if t.shape().len() < b.len() || &t.shape()[..b.len()] != b.as_slice() {
            return Err(Error::BatchShape { path: path.to_string(), expected: b.clone(), actual: t.shape().to_vec() });
        }
        Ok(())
    }

    fn check_entry(&self, path: &str, e: &Entry) -> Result<()> {
        match e {
            Entry::Tensor(t) => self.check_leaf(path, t),
            Entry::Map(m) => {
                for (k, t) in m.flatten_keys() {
                    self.check_leaf(&format!("{path}.{k}"), &t)?;
                }
                Ok(())
            }
        }
    }

    /// Inserts `value` at `path`, creating intermediate maps and replacing
    /// any previous value.
    pub fn put<P, V>(&mut self, path: P, value: V) -> Result<()>
    where
        P: TryInto<KeyPath, Error = Error>,
        V: Into<Entry>,
    {
        let path = path.try_into()?;
        let mut value = value.into();
        self.check_entry(&path.join(), &value)?;
        if let Entry::Map(m) = &mut value {
            m.set_batch_recursive(&self.batch_shape);
        }
        let segs = path.segments();
        let mut node = self;
        for (i, seg) in segs[..segs.len() - 1].iter().enumerate() {
            let batch = node.batch_shape.clone();
            let entry = node.entries.entry(seg.clone()).or_insert_with(|| Entry::Map(TensorMap::with_batch(batch)));
            node = match entry {
                Entry::Map(m) => m,
                Entry::Tensor(_) => return Err(Error::PrefixIsLeaf { path: path.join(), leaf: segs[..=i].join(".") }),
            };
        }
        node.entries.insert(segs[segs.len() - 1].clone(), value);
        Ok(())
    }

    /// Builder-style [`put`](Self::put).
    pub fn with<P, V>(mut self, path: P, value: V) -> Result<Self>
    where
        P: TryInto<KeyPath, Error = Error>,
        V: Into<Entry>,
    {
        self.put(path, value)?;
        Ok(self)
    }

    fn set_batch_recursive(&mut self, batch: &[usize]) {
        self.batch_shape = batch.to_vec();
        for e in self.entries.values_mut() {
            if let Entry::Map(m) = e {
                m.set_batch_recursive(batch);
            }
        }
    }

    pub fn get<P>(&self, path: P) -> Result<&Entry>
    where
        P: TryInto<KeyPath, Error = Error>,
    {
        let path = path.try_into()?;
        let segs = path.segments();
        let mut node = self;
        for (i, seg) in segs.iter().enumerate() {
            let entry = node.entries.get(seg).ok_or_else(|| Error::MissingPath(path.join()))?;
            if i + 1 == segs.len() {
                return Ok(entry);
            }
            node = match entry {
                Entry::Map(m) => m,
                Entry::Tensor(_) => return Err(Error::PrefixIsLeaf { path: path.join(), leaf: segs[..=i].join(".") }),
            };
        }
        unreachable!("key paths are non-empty")
    }

    pub fn get_tensor<P>(&self, path: P) -> Result<&Tensor>
    where
        P: TryInto<KeyPath, Error = Error>,
    {
        let path = path.try_into()?;
        match self.get(&path)? {
            Entry::Tensor(t) => Ok(t),
            Entry::Map(_) => Err(Error::WrongEntry { path: path.join(), expected: "tensor" }),
        }
    }

    pub fn get_map<P>(&self, path: P) -> Result<&TensorMap>
    where
        P: TryInto<KeyPath, Error = Error>,
    {
        let path = path.try_into()?;
        match self.get(&path)? {
            Entry::Map(m) => Ok(m),
            Entry::Tensor(_) => Err(Error::WrongEntry { path: path.join(), expected: "map" }),
        }
    }

    pub fn contains<P>(&self, path: P) -> bool
    where
        P: TryInto<KeyPath, Error = Error>,
    {
        matches!(path.try_into().map(|p| self.get(&p).is_ok()), Ok(true))
    }

    /// Removes and returns the entry at `path`.
    pub fn remove<P>(&mut self, path: P) -> Result<Entry>
    where
        P: TryInto<KeyPath, Error = Error>,
    {
        let path = path.try_into()?;
        let segs = path.segments();
        let mut node = self;
        for seg in &segs[..segs.len() - 1] {
            node = match node.entries.get_mut(seg) {
                Some(Entry::Map(m)) => m,
                _ => return Err(Error::MissingPath(path.join())),
            };
        }
        node.entries.shift_remove(&segs[segs.len() - 1]).ok_or_else(|| Error::MissingPath(path.join()))
    }

    /// Structure-preserving transform of every leaf.
    pub fn apply(&self, f: impl Fn(&Tensor) -> Tensor) -> Result<TensorMap> {
        self.try_apply(|t| Ok(f(t)))
    }

    pub fn try_apply(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<TensorMap> {
        self.apply_inner(&f, "")
    }

    fn apply_inner(&self, f: &dyn Fn(&Tensor) -> Result<Tensor>, prefix: &str) -> Result<TensorMap> {
        let mut out = TensorMap::with_batch(self.batch_shape.clone());
        for (k, e) in &self.entries {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            let v = match e {
                Entry::Tensor(t) => {
                    let r = f(t)?;
                    out.check_leaf(&path, &r)?;
                    Entry::Tensor(r)
                }
                Entry::Map(m) => Entry::Map(m.apply_inner(f, &path)?),
            };
            out.entries.insert(k.clone(), v);
        }
        Ok(out)
    }

    /// Pairs up leaves of two maps with identical structure.
    pub fn zip_apply(&self, other: &TensorMap, f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<TensorMap> {
        let a = self.flatten_keys();
        let b = other.flatten_keys();
        if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
            return Err(Error::Structure(format!(
                "key sets differ: {:?} vs {:?}",
                a.keys().collect::<Vec<_>>(),
                b.keys().collect::<Vec<_>>()
            )));
        }
        let mut flat = FlatMap::new();
        for ((k, x), y) in a.into_iter().zip(b.into_values()) {
            flat.insert(k, f(&x, &y)?);
        }
        let batch = common_prefix(self.batch_shape(), other.batch_shape());
        TensorMap::unflatten_keys_with_batch(flat, batch)
    }

    /// Flattens the nest into dotted keys, in traversal order.
    pub fn flatten_keys(&self) -> FlatMap {
        let mut out = FlatMap::new();
        self.flatten_into("", &mut out);
        out
    }

    fn flatten_into(&self, prefix: &str, out: &mut FlatMap) {
        for (k, e) in &self.entries {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match e {
                Entry::Tensor(t) => {
                    out.insert(key, t.clone());
                }
                Entry::Map(m) => m.flatten_into(&key, out),
            }
        }
    }

    /// Inverse of [`flatten_keys`](Self::flatten_keys); the batch shape is
    /// left empty.
    pub fn unflatten_keys(flat: FlatMap) -> Result<TensorMap> {
        Self::unflatten_keys_with_batch(flat, Vec::new())
    }

    pub fn unflatten_keys_with_batch(flat: FlatMap, batch_shape: Vec<usize>) -> Result<TensorMap> {
        let mut m = TensorMap::with_batch(batch_shape);
        for (k, t) in flat {
            if m.contains(k.as_str()) {
                return Err(Error::Structure(format!("duplicate key {k:?}")));
            }
            m.put(k.as_str(), t)?;
        }
        Ok(m)
    }

    /// Stacks maps of identical structure along a new leading axis.
    pub fn stack(maps: &[TensorMap]) -> Result<TensorMap> {
        let first = maps.first().ok_or_else(|| Error::Structure("cannot stack zero maps".into()))?;
        let flats: Vec<FlatMap> = maps.iter().map(TensorMap::flatten_keys).collect();
        let keys: Vec<&String> = flats[0].keys().collect();
        for (i, f) in flats.iter().enumerate().skip(1) {
            if f.len() != keys.len() || f.keys().zip(&keys).any(|(a, b)| a != *b) {
                return Err(Error::Structure(format!("map {i} has a different key structure")));
            }
            if maps[i].batch_shape != first.batch_shape {
                return Err(Error::Structure(format!("map {i} has a different batch shape")));
            }
        }
        let mut out = FlatMap::new();
        for key in keys {
            let parts: Vec<Tensor> = flats.iter().map(|f| f[key].clone()).collect();
            let stacked = Tensor::stack(&parts).map_err(|e| Error::Structure(format!("leaf {key:?}: {e}")))?;
            out.insert(key.clone(), stacked);
        }
        let mut batch = vec![maps.len()];
        batch.extend_from_slice(&first.batch_shape);
        TensorMap::unflatten_keys_with_batch(out, batch)
    }

    /// Splits along the leading batch axis.
    pub fn unstack(&self) -> Result<Vec<TensorMap>> {
        let n = *self
            .batch_shape
            .first()
            .ok_or_else(|| Error::Structure("cannot unstack a map without batch dims".into()))?;
        let inner_batch = self.batch_shape[1..].to_vec();
        let flat = self.flatten_keys();
        let mut outs: Vec<FlatMap> = vec![FlatMap::new(); n];
        for (k, t) in flat {
            for (i, part) in t.unstack()?.into_iter().enumerate() {
                outs[i].insert(k.clone(), part);
            }
        }
        outs.into_iter().map(|f| TensorMap::unflatten_keys_with_batch(f, inner_batch.clone())).collect()
    }

    /// Concatenates maps of identical structure along the leading axis.
    pub fn concat(maps: &[TensorMap]) -> Result<TensorMap> {
        let first = maps.first().ok_or_else(|| Error::Structure("cannot concatenate zero maps".into()))?;
        let flats: Vec<FlatMap> = maps.iter().map(TensorMap::flatten_keys).collect();
        let mut out = FlatMap::new();
        for key in flats[0].keys() {
            let parts = flats
                .iter()
                .map(|f| f.get(key).cloned().ok_or_else(|| Error::Structure(format!("missing leaf {key:?}"))))
                .collect::<Result<Vec<_>>>()?;
            out.insert(key.clone(), Tensor::concat(&parts)?);
        }
        let mut batch = first.batch_shape.clone();
        if let Some(b) = batch.first_mut() {
            *b = maps.iter().map(|m| m.batch_shape.first().copied().unwrap_or(0)).sum();
        }
        TensorMap::unflatten_keys_with_batch(out, batch)
    }

    /// Sets the batch shape after checking every leaf against it.
    pub fn rebatch(mut self, batch_shape: impl Into<Vec<usize>>) -> Result<TensorMap> {
        let b = batch_shape.into();
        let probe = TensorMap::with_batch(b.clone());
        for (k, t) in self.flatten_keys() {
            probe.check_leaf(&k, &t)?;
        }
        self.set_batch_recursive(&b);
        Ok(self)
    }

    /// Bitwise structural and numerical equality.
    pub fn bitwise_eq(&self, other: &TensorMap) -> bool {
        let a = self.flatten_keys();
        let b = other.flatten_keys();
        a.len() == b.len() && a.iter().zip(b.iter()).all(|((ka, ta), (kb, tb))| ka == kb && ta.bitwise_eq(tb))
    }
}

fn common_prefix(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().zip(b).take_while(|(x, y)| x == y).map(|(x, _)| *x).collect()
}
