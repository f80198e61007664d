//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint `<stem>` is two files: `<stem>.f32` holding every tensor as
//! raw little-endian `f32` in registration order, and `<stem>.index.toml`
//! listing name, kind, shape and byte offset of each tensor.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

/// Partition of a network's tensors, selected by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "enc.",
            ParamGroup::Decoder => "dec.",
            ParamGroup::Classifier => "cls.",
        }
    }

    pub fn of_name(name: &str) -> Option<Self> {
        [Self::Encoder, Self::Decoder, Self::Classifier]
            .into_iter()
            .find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

impl<T> ParamEntry<T> {
    pub fn group(&self) -> ParamGroup {
        ParamGroup::of_name(&self.name).expect("names are validated at registration")
    }
}

/// Ordered, uniquely named tensors of one network.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    frozen: Vec<ParamGroup>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        tensor: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if ParamGroup::of_name(&name).is_none() {
            return Err(Error::invalid(format!(
                "parameter name {name:?} must start with enc., dec. or cls."
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(move |e| e.group() == group)
    }

    pub fn scalar_count(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        self.entries[id.0].tensor.accumulate_grad(delta);
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.clear_grad());
    }

    /// Excludes a group from optimizer updates.
    pub fn freeze(&mut self, group: ParamGroup) {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
    }

    pub fn frozen_groups(&self) -> &[ParamGroup] {
        &self.frozen
    }

    /// Copies every tensor of `group` (weights and buffers) from `source` by
    /// value. Both sides must hold the same names with the same shapes.
    pub fn copy_group_from(&mut self, source: &ModelParams<T>, group: ParamGroup) -> Result<()> {
        let src: Vec<&ParamEntry<T>> = source.group(group).collect();
        let mut problems = Vec::new();
        for e in &src {
            match self.by_name(&e.name) {
                None => problems.push(format!("{} missing in destination", e.name)),
                Some(t) if t.shape() != e.tensor.shape() => problems.push(format!(
                    "{}: source {} vs destination {}",
                    e.name,
                    e.tensor.shape_str(),
                    t.shape_str()
                )),
                Some(_) => {}
            }
        }
        for e in self.group(group) {
            if source.id(&e.name).is_none() {
                problems.push(format!("{} missing in source", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::invalid(format!(
                "parameter transfer mismatch: {}",
                problems.join("; ")
            )));
        }
        for e in src {
            let dst = self.by_name_mut(&e.name).expect("checked above");
            dst.data_mut().copy_from_slice(e.tensor.data());
        }
        Ok(())
    }

    /// Bitwise equality of all tensor values in `group`.
    pub fn group_bits_equal(&self, other: &ModelParams<T>, group: ParamGroup) -> bool {
        let mine: Vec<_> = self.group(group).collect();
        let theirs: Vec<_> = other.group(group).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let (data_path, index_path) = checkpoint_paths(stem);
        let mut bytes = Vec::with_capacity(self.scalar_count(ParamKind::Trainable) * 4);
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(CheckpointEntry {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.tensor.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for &v in e.tensor.data() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let index = CheckpointIndex {
            format: "f32-le".to_string(),
            version: 1,
            data_file: file_name(&data_path),
            total_bytes: bytes.len() as u64,
            tensors,
        };
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        let text = toml::to_string(&index).map_err(|e| Error::format(&index_path, e))?;
        fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
        Ok(())
    }

    /// Loads values into an already-built parameter set; names, kinds and
    /// shapes must match exactly.
    pub fn load_checkpoint(&mut self, stem: &Path) -> Result<()> {
        let (data_path, index_path) = checkpoint_paths(stem);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: CheckpointIndex =
            toml::from_str(&text).map_err(|e| Error::format(&index_path, e))?;
        if index.format != "f32-le" {
            return Err(Error::format(
                &index_path,
                format!("unsupported format {:?}", index.format),
            ));
        }
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if bytes.len() as u64 != index.total_bytes {
            return Err(Error::format(
                &data_path,
                format!("expected {} bytes, found {}", index.total_bytes, bytes.len()),
            ));
        }
        if index.tensors.len() != self.entries.len() {
            return Err(Error::format(
                &index_path,
                format!(
                    "checkpoint has {} tensors, model expects {}",
                    index.tensors.len(),
                    self.entries.len()
                ),
            ));
        }
        for (rec, e) in index.tensors.iter().zip(self.entries.iter_mut()) {
            if rec.name != e.name || rec.kind != e.kind || rec.shape != e.tensor.shape() {
                return Err(Error::format(
                    &index_path,
                    format!(
                        "tensor {} {:?} does not match model tensor {} {}",
                        rec.name,
                        rec.shape,
                        e.name,
                        e.tensor.shape_str()
                    ),
                ));
            }
            let start = rec.offset as usize;
            let end = start + e.tensor.len() * 4;
            let raw = bytes.get(start..end).ok_or_else(|| {
                Error::format(&data_path, format!("tensor {} out of bounds", rec.name))
            })?;
            for (dst, chunk) in e.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `(<stem>.f32, <stem>.index.toml)`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = OsString::from(stem.as_os_str());
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".f32"), with(".index.toml"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub total_bytes: u64,
    pub tensors: Vec<CheckpointEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams<f32> {
        let mut p = ModelParams::new();
        p.register(
            "enc.0.w",
            ParamKind::Trainable,
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0),
        )
        .unwrap();
        p.register("enc.0.bn.running_var", ParamKind::Buffer, Tensor::full(&[3], 1.0))
            .unwrap();
        p.register("dec.out.b", ParamKind::Trainable, Tensor::full(&[1], -0.25))
            .unwrap();
        p
    }

    #[test]
    fn names_must_be_prefixed_and_unique() {
        let mut p = sample();
        assert!(p
            .register("body.w", ParamKind::Trainable, Tensor::zeros(&[1]))
            .is_err());
        assert!(p
            .register("enc.0.w", ParamKind::Trainable, Tensor::zeros(&[1]))
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let src = sample();
        src.save_checkpoint(&stem).unwrap();
        let mut dst = sample();
        dst.entries_mut()
            .iter_mut()
            .for_each(|e| e.tensor.data_mut().fill(9.0));
        dst.load_checkpoint(&stem).unwrap();
        for (a, b) in src.entries().iter().zip(dst.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let text = fs::read_to_string(dir.path().join("net.index.toml")).unwrap();
        assert!(text.contains("name = \"enc.0.bn.running_var\""));
        assert_eq!(fs::metadata(dir.path().join("net.f32")).unwrap().len(), 40);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        sample().save_checkpoint(&stem).unwrap();
        let mut other = ModelParams::<f32>::new();
        other
            .register("enc.0.w", ParamKind::Trainable, Tensor::zeros(&[3, 2]))
            .unwrap();
        other
            .register("enc.0.bn.running_var", ParamKind::Buffer, Tensor::zeros(&[3]))
            .unwrap();
        other
            .register("dec.out.b", ParamKind::Trainable, Tensor::zeros(&[1]))
            .unwrap();
        assert!(other.load_checkpoint(&stem).is_err());
    }

    #[test]
    fn group_copy_reports_mismatches() {
        let src = sample();
        let mut dst = ModelParams::<f32>::new();
        dst.register("enc.0.w", ParamKind::Trainable, Tensor::zeros(&[2, 2]))
            .unwrap();
        let err = dst.copy_group_from(&src, ParamGroup::Encoder).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc.0.w") && msg.contains("enc.0.bn.running_var"), "{msg}");
    }
}
