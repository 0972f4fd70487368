use std::path::Path;

use super::{Backbone, BackboneConfig};
use crate::checkpoint::Container;
use crate::error::{ensure, Result};
use crate::tensor::{hex, Scalar};

pub const BACKBONE_KIND: &str = "backbone";

impl<T: Scalar> Backbone<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new()
            .meta("kind", BACKBONE_KIND)
            .meta("config", serde_json::to_string(&self.config)?)
            .meta("frozen", self.is_frozen().to_string())
            .meta("checksum", hex(&self.checksum()));
        for (name, t) in self.named_params() {
            c.push(&name, t);
        }
        Ok(c)
    }

    /// Rebuilds a backbone from a container. A backbone saved frozen comes
    /// back frozen, and its recomputed checksum must match the stored one.
    pub fn from_container(c: &Container) -> Result<Self> {
        ensure!(
            c.meta_value("kind")? == BACKBONE_KIND,
            Format,
            "container holds '{}', not a backbone",
            c.meta_value("kind")?
        );
        let config: BackboneConfig = serde_json::from_str(c.meta_value("config")?)?;
        config.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
        let mut b = Backbone::<T>::new(config, 0)?;
        let names: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
        ensure!(
            c.entries.len() == names.len(),
            Format,
            "backbone container has {} tensors, expected {}",
            c.entries.len(),
            names.len()
        );
        let mut loaded = Vec::with_capacity(names.len());
        for name in &names {
            loaded.push(c.tensor::<T>(name)?);
        }
        for (slot, (name, t)) in b.params_mut().into_iter().zip(names.iter().zip(loaded)) {
            ensure!(
                slot.shape() == t.shape(),
                Format,
                "tensor '{}' has shape {:?}, expected {:?}",
                name,
                t.shape(),
                slot.shape()
            );
            slot.data_mut().copy_from_slice(t.data());
        }
        ensure!(
            hex(&b.checksum()) == c.meta_value("checksum")?,
            Integrity,
            "backbone checksum does not match its manifest"
        );
        if c.meta_value("frozen")? == "true" {
            b.freeze();
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

