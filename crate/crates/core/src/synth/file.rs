use std::path::Path;

use serde::{Deserialize, Serialize};

use super::knowledge::KNOWLEDGE_VERSION;
use super::vocab::vocab_len;
use super::{Pair, PairedDataset, Tier};
use crate::error::{ensure, Error, Result};

pub const DATASET_FORMAT: &str = "slq-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    version: u32,
    template_version: String,
    seed: u64,
    pairs: Vec<Pair>,
}

pub fn to_json(ds: &PairedDataset) -> Result<String> {
    let file = DatasetFile {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        template_version: ds.template_version.clone(),
        seed: ds.seed,
        pairs: ds.pairs.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    parse_dataset(&std::fs::read(path)?)
}

/// Parses and validates a dataset container. Unknown format versions and
/// template versions are rejected.
pub fn parse_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    let file: DatasetFile = serde_json::from_slice(bytes)?;
    ensure!(file.format == DATASET_FORMAT, Format, "not a dataset file: format '{}'", file.format);
    ensure!(
        file.version == DATASET_VERSION,
        Format,
        "unsupported dataset version {}",
        file.version
    );
    ensure!(
        file.template_version == KNOWLEDGE_VERSION,
        Format,
        "unknown template version '{}'",
        file.template_version
    );
    let mut seen = std::collections::HashSet::new();
    for p in &file.pairs {
        ensure!(seen.insert(p.id.as_str()), Format, "duplicate pair id '{}'", p.id);
        // re-run image validation; serde bypasses the constructor
        super::SynthImage::new(p.image.grid(), p.image.cells().to_vec())
            .map_err(|e| Error::Format(format!("pair '{}': {e}", p.id)))?;
        ensure!(!p.caption.tokens.is_empty(), Format, "pair '{}' has an empty caption", p.id);
        ensure!(
            p.caption.tokens.iter().all(|&t| t < vocab_len()),
            Format,
            "pair '{}' has an out-of-vocabulary token",
            p.id
        );
        ensure!(
            (p.caption.tier == Tier::Reasoning) == p.caption.target.is_some(),
            Format,
            "pair '{}': target present iff reasoning tier",
            p.id
        );
    }
    Ok(PairedDataset {
        seed: file.seed,
        template_version: file.template_version,
        pairs: file.pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_explicit, gen_reasoning, DimensionMix};

    #[test]
    fn round_trip() {
        let mut ds = gen_reasoning(12, 3, &DimensionMix::benchmark()).unwrap();
        ds.pairs.extend(gen_explicit(5, 3).unwrap().pairs);
        let back = parse_dataset(to_json(&ds).unwrap().as_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_unknown_versions() {
        let ds = gen_explicit(2, 1).unwrap();
        let text = to_json(&ds).unwrap();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(parse_dataset(bumped.as_bytes()), Err(Error::Format(_))));
        let other = text.replace(KNOWLEDGE_VERSION, "kt-99");
        assert!(matches!(parse_dataset(other.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_empty_images() {
        let ds = gen_explicit(1, 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&ds).unwrap()).unwrap();
        let cells = v["pairs"][0]["image"]["cells"].as_array_mut().unwrap();
        for c in cells.iter_mut() {
            *c = serde_json::Value::Null;
        }
        let bytes = serde_json::to_vec(&v).unwrap();
        assert!(parse_dataset(&bytes).is_err());
    }
}
