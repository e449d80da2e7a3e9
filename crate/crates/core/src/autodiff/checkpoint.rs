use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec, ParamStore, Segment};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "pil-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub spec: MlpSpec,
    pub offset: usize,
}

/// Self-describing JSON snapshot of a parameter store and the networks
/// that live in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub segments: Vec<Segment>,
    pub networks: BTreeMap<String, NetworkEntry>,
    pub flat: Vec<f64>,
}

impl Checkpoint {
    pub fn capture<'a>(store: &ParamStore, networks: impl IntoIterator<Item = (&'a str, &'a Mlp)>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            segments: store.segments().to_vec(),
            networks: networks
                .into_iter()
                .map(|(name, net)| {
                    (
                        name.to_string(),
                        NetworkEntry {
                            spec: net.spec().clone(),
                            offset: net.offset(),
                        },
                    )
                })
                .collect(),
            flat: store.flat().to_vec(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_parts(self.flat.clone(), self.segments.clone())
    }

    pub fn network(&self, store: &ParamStore, name: &str) -> Result<Mlp> {
        let entry = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Missing(format!("network '{name}' not in checkpoint")))?;
        Mlp::attach(store, entry.spec.clone(), entry.offset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.store()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::numkit::RngStream;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = RngStream::new(5);
        let mut store = ParamStore::new();
        let a = Mlp::new(
            &mut store,
            "encoder",
            MlpSpec::new(vec![3, 8, 4], Activation::LeakyRelu, Activation::Linear).unwrap(),
            &mut rng,
        )
        .unwrap();
        let b = Mlp::new(
            &mut store,
            "policy",
            MlpSpec::new(vec![2, 5, 1], Activation::Tanh, Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::capture(&store, [("encoder", &a), ("policy", &b)]).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let restored = loaded.store().unwrap();
        assert_eq!(restored.flat(), store.flat());
        let b2 = loaded.network(&restored, "policy").unwrap();
        assert_eq!(b2, b);
        assert_eq!(b2.eval(&restored, &[0.3, -0.2]), b.eval(&store, &[0.3, -0.2]));
        assert!(loaded.network(&restored, "critic").is_err());
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut c = Checkpoint::capture(&ParamStore::new(), []);
        c.version = 99;
        c.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse(_))));
    }
}
