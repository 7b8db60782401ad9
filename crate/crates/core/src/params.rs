//! Named parameter storage and the freeze-group partition.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Mat;

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    /// Declared shape; vectors are rank 1 even though they are stored `1 x n`.
    pub shape: Vec<usize>,
    pub value: Mat<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "shape of {name}"
        );
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, shape, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.shape.clone(), e.value.cast());
        }
        out
    }

    /// Element count of every parameter in `group`.
    pub fn group_size(&self, group: FreezeGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| FreezeGroup::of(&e.name) == Some(group))
            .map(|e| e.value.len())
            .sum()
    }

    /// Stable 64-bit digest of the exact bit patterns of a group's tensors.
    pub fn group_hash(&self, group: FreezeGroup) -> u64 {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        for e in &self.entries {
            if FreezeGroup::of(&e.name) != Some(group) {
                continue;
            }
            digest.update(e.name.as_bytes());
            for v in &e.value.data {
                digest.update(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        digest.finalize()
    }

    pub fn ids_in(&self, group: FreezeGroup) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| FreezeGroup::of(&self.entries[i].name) == Some(group))
            .collect()
    }

    /// Checks that every tensor name maps to exactly one freeze group.
    pub fn check_groups(&self) -> Result<()> {
        for e in &self.entries {
            if FreezeGroup::of(&e.name).is_none() {
                return Err(Error::Malformed(format!(
                    "tensor {} belongs to no freeze group",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter partition used to decide what each training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FreezeGroup {
    CoreMamba,
    MmuLora,
    T2iLora,
    VisualProjector,
    ImageHead,
    TextHead,
    Embeddings,
    FrozenVisionEncoder,
}

impl FreezeGroup {
    pub const ALL: [FreezeGroup; 8] = [
        FreezeGroup::CoreMamba,
        FreezeGroup::MmuLora,
        FreezeGroup::T2iLora,
        FreezeGroup::VisualProjector,
        FreezeGroup::ImageHead,
        FreezeGroup::TextHead,
        FreezeGroup::Embeddings,
        FreezeGroup::FrozenVisionEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezeGroup::CoreMamba => "core_mamba",
            FreezeGroup::MmuLora => "mmu_lora",
            FreezeGroup::T2iLora => "t2i_lora",
            FreezeGroup::VisualProjector => "visual_projector",
            FreezeGroup::ImageHead => "image_head",
            FreezeGroup::TextHead => "text_head",
            FreezeGroup::Embeddings => "embeddings",
            FreezeGroup::FrozenVisionEncoder => "frozen_vision_encoder",
        }
    }

    /// Group of a tensor, derived from its stable name.
    pub fn of(name: &str) -> Option<FreezeGroup> {
        if let Some(rest) = name.strip_prefix("layers.") {
            let (_, field) = rest.split_once('.')?;
            return Some(if field.starts_with("lora.mmu.") {
                FreezeGroup::MmuLora
            } else if field.starts_with("lora.t2i.") {
                FreezeGroup::T2iLora
            } else {
                FreezeGroup::CoreMamba
            });
        }
        Some(match name {
            "final_norm" => FreezeGroup::CoreMamba,
            "projector.weight" | "projector.bias" => FreezeGroup::VisualProjector,
            "head.image" | "head.shared" => FreezeGroup::ImageHead,
            "head.text" => FreezeGroup::TextHead,
            "vision.table" => FreezeGroup::FrozenVisionEncoder,
            n if n.starts_with("embed.") => FreezeGroup::Embeddings,
            _ => return None,
        })
    }
}

impl fmt::Display for FreezeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
