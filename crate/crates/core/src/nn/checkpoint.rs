//! Raw slot files: little-endian `f64` values, one file per slot, tensors
//! concatenated in slot order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::{ParamStore, SlotId};
use super::{NnError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub name: String,
    pub file: String,
    pub shapes: Vec<Vec<usize>>,
}

pub fn write_slots(dir: &Path, prefix: &str, store: &ParamStore) -> Result<Vec<SlotRecord>, NnError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for id in store.slot_ids() {
        let slot = store.slot(id)?;
        let file = format!("{prefix}_slot_{}.bin", id.0);
        let mut bytes = Vec::with_capacity(slot.param_count() * 8);
        for t in &slot.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;
        records.push(SlotRecord {
            name: slot.name.clone(),
            file,
            shapes: slot.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        });
    }
    Ok(records)
}

/// Loads values into a store that already has the matching layout.
pub fn read_slots(dir: &Path, records: &[SlotRecord], store: &mut ParamStore) -> Result<(), NnError> {
    if records.len() != store.slot_count() {
        return Err(NnError::Format(format!(
            "checkpoint has {} slots, network has {}",
            records.len(),
            store.slot_count()
        )));
    }
    for (k, rec) in records.iter().enumerate() {
        let id = SlotId(k);
        let slot = store.slot(id)?;
        if slot.name != rec.name {
            return Err(NnError::Format(format!("slot {k} is {} in file, {} in network", rec.name, slot.name)));
        }
        let bytes = fs::read(dir.join(&rec.file))?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Format(format!("{} is not a whole number of f64s", rec.file)));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut offset = 0;
        let mut loaded = Vec::new();
        for shape in &rec.shapes {
            let n: usize = shape.iter().product();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| NnError::Format(format!("{} is truncated", rec.file)))?;
            loaded.push(Tensor::new(shape.clone(), chunk.to_vec())?);
            offset += n;
        }
        if offset != values.len() {
            return Err(NnError::Format(format!("{} has trailing data", rec.file)));
        }
        for (t, l) in slot.tensors.iter().zip(&loaded) {
            if t.shape() != l.shape() {
                return Err(NnError::Format(format!("shape mismatch in {}", rec.name)));
            }
        }
        for (i, l) in loaded.into_iter().enumerate() {
            *store.tensor_mut(id, i)? = l;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_sharing, HeadKind, MlpSpec, SharingMode};

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = MlpSpec::new(3, vec![4], HeadKind::Gaussian { dim: 2 });
        let store = bind_sharing(&spec, 2, SharingMode::None, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let recs = write_slots(dir.path(), "actor", &store).unwrap();
        let mut other = bind_sharing(&spec, 2, SharingMode::None, 8).unwrap();
        assert_ne!(other, store);
        read_slots(dir.path(), &recs, &mut other).unwrap();
        for id in store.slot_ids() {
            assert_eq!(store.slot(id).unwrap().tensors, other.slot(id).unwrap().tensors);
        }
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let spec = MlpSpec::new(3, vec![4], HeadKind::Value);
        let store = bind_sharing(&spec, 2, SharingMode::None, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let recs = write_slots(dir.path(), "c", &store).unwrap();
        let mut full = bind_sharing(&spec, 2, SharingMode::Full, 7).unwrap();
        assert!(matches!(read_slots(dir.path(), &recs, &mut full), Err(NnError::Format(_))));
    }
}
