use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::binio::{put_string, put_u32, Reader};
use crate::error::{Error, FormatError, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order, matching [`Binder::grads`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary trainable tensor.
    Weight,
    /// Trainable log-variance of a Gaussian; clamped after each optimiser step.
    LogVar,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::LogVar => 1,
            ParamKind::Buffer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::LogVar,
            2 => ParamKind::Buffer,
            _ => return None,
        })
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Named tensors of one model, addressed by path (`encoder.fc1.weight`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate path, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter path {name}");
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.numel()).sum()
    }

    /// Clamps every log-variance tensor into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn clamp_log_vars(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.kind == ParamKind::LogVar) {
            e.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        }
    }

    /// Sets every log-variance tensor to the clamp floor.
    pub fn set_log_vars_to_floor(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.kind == ParamKind::LogVar) {
            e.value.data_mut().iter_mut().for_each(|v| *v = LOG_VAR_MIN);
        }
    }

    /// Copies values from `other` by path. Every path of `self` must exist in
    /// `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        self.load_from_matching(other, "")
    }

    /// [`ParamStore::load_from`] restricted to paths starting with `prefix`.
    pub fn load_from_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Shape(format!("checkpoint has no parameter {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}: model expects shape {:?}, checkpoint has {:?}",
                    e.name,
                    e.value.shape(),
                    src.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CIBW";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus free-form string metadata (model kind, resolved config).
///
/// Layout, little-endian: magic `CIBW`, `u32` version, `u32` metadata count,
/// then `(string key, string value)` pairs, `u32` tensor count, then per
/// tensor `string path`, `u8` kind, `u32` rank, `u64` dims, `f64` data.
/// Strings are a `u32` byte length followed by UTF-8 bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        put_u32(&mut out, self.params.entries.len() as u32);
        for e in &self.params.entries {
            put_string(&mut out, &e.name);
            out.push(e.kind.code());
            put_u32(&mut out, e.value.ndim() as u32);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor path")?;
            let kind = ParamKind::from_code(r.u8("tensor kind")?)
                .ok_or_else(|| FormatError::Malformed(format!("unknown kind for {name}")))?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64("tensor data")?);
            }
            let value = Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            if params.id_of(&name).is_some() {
                return Err(FormatError::Malformed(format!("duplicate path {name}")));
            }
            params.add(name, kind, value);
        }
        r.finish()?;
        Ok(Checkpoint { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Ok(Self::from_bytes(&buf)?)
    }
}

/// Puts the parameters of a [`ParamStore`] onto a tape, creating each leaf
/// on first use, and collects batch-norm buffer updates made during the
/// forward pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: Vec<Option<Var<'t>>>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder { tape, store, vars: vec![None; store.len()], buffer_updates: Vec::new() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, id: ParamId) -> Result<Var<'t>> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.store.kind(id).trainable())?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var<'t>> {
        Ok(self.tape.constant(t)?)
    }

    pub(crate) fn queue_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.retain(|(i, _)| *i != id);
        self.buffer_updates.push((id, value));
    }

    /// Gradients of every bound trainable parameter, in store order; `None`
    /// for parameters that were not used or received no gradient.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| v.grad())).collect()
    }

    /// Buffer values produced by the forward pass, to be written back with
    /// [`ParamStore::set`].
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamKind::Weight, Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.3));
        s.add("a.log_var", ParamKind::LogVar, Tensor::full(&[2, 3], -6.0));
        s.add("bn.running_mean", ParamKind::Buffer, Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        s
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut ck = Checkpoint { metadata: BTreeMap::new(), params: sample_store() };
        ck.metadata.insert("model".into(), "cib".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for id in ck.params.ids() {
            let (a, b) = (ck.params.get(id), back.params.get(id));
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(ck.params.kind(id), back.params.kind(id));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_format_errors() {
        let bytes = Checkpoint { metadata: BTreeMap::new(), params: sample_store() }.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(FormatError::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn load_from_reports_shape_mismatch() {
        let mut a = sample_store();
        let mut b = ParamStore::new();
        b.add("a.weight", ParamKind::Weight, Tensor::zeros(&[3, 3]));
        let err = a.load_from(&b).unwrap_err().to_string();
        assert!(err.contains("a.weight") && err.contains("[2, 3]") && err.contains("[3, 3]"), "{err}");
    }

    #[test]
    fn clamp_touches_only_log_vars() {
        let mut s = sample_store();
        let w = s.id_of("a.weight").unwrap();
        s.set(w, Tensor::full(&[2, 3], 50.0)).unwrap();
        let lv = s.id_of("a.log_var").unwrap();
        s.set(lv, Tensor::from_vec(vec![-20.0, 20.0, 0.0, 1.0, -10.0, 10.0]).reshaped(&[2, 3]).unwrap()).unwrap();
        s.clamp_log_vars();
        assert_eq!(s.get(w).data()[0], 50.0);
        assert_eq!(s.get(lv).data(), &[-10.0, 10.0, 0.0, 1.0, -10.0, 10.0]);
    }
}
