//! Checkpoint container: a JSON manifest naming every tensor (shape,
//! dtype, payload offset, pretrained designation) followed by the
//! "\0NTFPACK\0" separator and concatenated NTF payloads.
//!
//! Offsets are relative to the byte after the separator. Manifest entries
//! are sorted by name, so identical contents serialize byte-identically.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ntf;
use crate::arch::{is_pretrained_designated, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

pub const SEPARATOR: &[u8; 9] = b"\0NTFPACK\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub pretrained_designated: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: BTreeMap<String, ManifestEntry>,
}

/// Named-tensor container tied to the config that produced it.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, (Tensor, bool)>, // name -> (values, designated)
}

/// Outcome of a selective initialization: exact tensor-name lists.
#[derive(Debug, Clone)]
pub struct InitReport {
    pub initialized: Vec<String>,
    pub skipped: Vec<String>,
}

impl Checkpoint {
    /// Snapshot every parameter of a network. Designation follows the
    /// fixed rule (encoder stages 2-5 VSS blocks and patch mergings).
    pub fn from_network(net: &Network) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, t) in net.named_params() {
            let designated = is_pretrained_designated(&name);
            tensors.insert(name, (t.detach(), designated));
        }
        Checkpoint { config: net.config.clone(), tensors }
    }

    /// Deterministic surrogate for an externally pretrained backbone:
    /// contains exactly the designated tensor set, drawn from the init
    /// distribution under a dedicated seed stream.
    pub fn make_surrogate_pretrained(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
        let net = Network::build(config, seed ^ 0x5u64.rotate_left(32), DType::F32)?;
        let mut tensors = BTreeMap::new();
        for (name, t) in net.named_params() {
            if is_pretrained_designated(&name) {
                tensors.insert(name, (t.detach(), true));
            }
        }
        Ok(Checkpoint { config: config.clone(), tensors })
    }

    pub fn designated_names(&self) -> Vec<String> {
        self.tensors.iter().filter(|(_, (_, d))| *d).map(|(n, _)| n.clone()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, (t, designated)) in &self.tensors {
            let blob = ntf::to_bytes(t)?;
            entries.insert(
                name.clone(),
                ManifestEntry {
                    shape: t.shape().to_vec(),
                    dtype: t.dtype().name().to_string(),
                    offset: payload.len() as u64,
                    pretrained_designated: *designated,
                },
            );
            payload.extend_from_slice(&blob);
        }
        let manifest = Manifest {
            format: "swin-umamba-checkpoint-v1".to_string(),
            config: self.config.clone(),
            tensors: entries,
        };
        let mut f = std::fs::File::create(path)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(text.as_bytes())?;
        f.write_all(SEPARATOR)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let sep = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| Error::Format("checkpoint separator not found".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..sep]).map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
        let payload = &bytes[sep + SEPARATOR.len()..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest.tensors {
            let off = entry.offset as usize;
            if off >= payload.len() {
                return Err(Error::Format(format!("tensor {name} offset {off} beyond payload")));
            }
            let t = ntf::read_from(&mut &payload[off..])
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} payload shape {:?} disagrees with manifest {:?}",
                    t.shape(),
                    entry.shape
                )));
            }
            tensors.insert(name, (t, entry.pretrained_designated));
        }
        Ok(Checkpoint { config: manifest.config, tensors })
    }

    /// Strict full load into a config-matched network: every network
    /// parameter must be present with matching shape; unknown checkpoint
    /// tensors are also faults. The error lists every offender.
    pub fn apply_full(&self, net: &Network) -> Result<()> {
        let params = net.named_params();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, t) in &params {
            match self.tensors.get(name) {
                None => missing.push(name.clone()),
                Some((src, _)) if src.shape() != t.shape() => mismatched.push(format!(
                    "{name} (checkpoint {:?}, network {:?})",
                    src.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        let param_names: std::collections::HashSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let unknown: Vec<String> =
            self.tensors.keys().filter(|n| !param_names.contains(n.as_str())).cloned().collect();
        if !missing.is_empty() || !mismatched.is_empty() || !unknown.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match network: missing [{}]; mismatched [{}]; unknown [{}]",
                missing.join(", "),
                mismatched.join(", "),
                unknown.join(", ")
            )));
        }
        for (name, t) in &params {
            copy_values(&self.tensors[name].0, t)?;
        }
        Ok(())
    }

    /// Copies only pretrained-designated tensors whose names match;
    /// a designated tensor with a mismatched shape is a hard error.
    /// Returns the exact initialized / skipped name lists.
    pub fn selective_init(&self, net: &Network) -> Result<InitReport> {
        let params = net.named_params();
        let mut initialized = Vec::new();
        let mut skipped = Vec::new();
        for (name, t) in &params {
            match self.tensors.get(name) {
                Some((src, true)) => {
                    if src.shape() != t.shape() {
                        return Err(Error::Config(format!(
                            "designated tensor {name} has checkpoint shape {:?} but network shape {:?}",
                            src.shape(),
                            t.shape()
                        )));
                    }
                    copy_values(src, t)?;
                    initialized.push(name.clone());
                }
                _ => skipped.push(name.clone()),
            }
        }
        Ok(InitReport { initialized, skipped })
    }
}

fn copy_values(src: &Tensor, dst: &Tensor) -> Result<()> {
    let v = src.to_f64_vec();
    dst.with_data_mut(|s| match s {
        Storage::F32(out) => {
            for (o, x) in out.iter_mut().zip(&v) {
                *o = *x as f32;
            }
        }
        Storage::F64(out) => out.copy_from_slice(&v),
        Storage::U8(_) => {}
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny(Variant::Umamba, 2, 1, 32)
    }

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("sumamba-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_cfg();
        let net = Network::build(&cfg, 3, DType::F32).unwrap();
        let ck = Checkpoint::from_network(&net);
        let dir = tmpdir();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        ck.write(&p1).unwrap();
        let back = Checkpoint::read(&p1).unwrap();
        back.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn full_load_round_trips_values() {
        let cfg = tiny_cfg();
        let a = Network::build(&cfg, 3, DType::F32).unwrap();
        let b = Network::build(&cfg, 99, DType::F32).unwrap();
        Checkpoint::from_network(&a).apply_full(&b).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(ta.to_f64_vec(), tb.to_f64_vec());
        }
    }

    #[test]
    fn depth_mismatch_names_offending_tensors() {
        let cfg = tiny_cfg();
        let mut deeper = cfg.clone();
        deeper.vss_depths = vec![2, 1, 1, 1];
        let net_deep = Network::build(&deeper, 1, DType::F32).unwrap();
        let net_shallow = Network::build(&cfg, 1, DType::F32).unwrap();
        let ck = Checkpoint::from_network(&net_deep);
        let err = ck.apply_full(&net_shallow).unwrap_err().to_string();
        assert!(err.contains("encoder.stage2.block2"), "error should name the extra block: {err}");

        let ck2 = Checkpoint::from_network(&net_shallow);
        let err2 = ck2.apply_full(&net_deep).unwrap_err().to_string();
        assert!(err2.contains("missing") && err2.contains("encoder.stage2.block2"), "{err2}");
    }

    #[test]
    fn surrogate_contains_exactly_designated_set() {
        let cfg = tiny_cfg();
        let ck = Checkpoint::make_surrogate_pretrained(&cfg, 7).unwrap();
        assert!(!ck.tensors.is_empty());
        for (name, (_, designated)) in &ck.tensors {
            assert!(designated);
            assert!(is_pretrained_designated(name), "{name} should not be in surrogate");
        }
        // same seed => identical bytes; different seed => same manifest, different payload
        let dir = tmpdir();
        let (p1, p2, p3) = (dir.join("s1.ckpt"), dir.join("s2.ckpt"), dir.join("s3.ckpt"));
        ck.write(&p1).unwrap();
        Checkpoint::make_surrogate_pretrained(&cfg, 7).unwrap().write(&p2).unwrap();
        Checkpoint::make_surrogate_pretrained(&cfg, 8).unwrap().write(&p3).unwrap();
        let (b1, b2, b3) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap(), std::fs::read(&p3).unwrap());
        assert_eq!(b1, b2);
        assert_ne!(b1, b3);
        let sep = |b: &[u8]| b.windows(SEPARATOR.len()).position(|w| w == SEPARATOR).unwrap();
        assert_eq!(&b1[..sep(&b1)], &b3[..sep(&b3)], "manifests must agree across seeds");
    }

    #[test]
    fn selective_init_touches_only_designated() {
        let cfg = tiny_cfg();
        let net = Network::build(&cfg, 21, DType::F32).unwrap();
        let before: Vec<(String, Vec<f64>)> =
            net.named_params().iter().map(|(n, t)| (n.clone(), t.to_f64_vec())).collect();
        let ck = Checkpoint::make_surrogate_pretrained(&cfg, 5).unwrap();
        let report = ck.selective_init(&net).unwrap();

        let designated: std::collections::BTreeSet<String> = ck.designated_names().into_iter().collect();
        let initialized: std::collections::BTreeSet<String> = report.initialized.iter().cloned().collect();
        assert_eq!(designated, initialized, "initialized set must equal designated set");
        assert!(report.skipped.iter().any(|n| n.contains("embed")), "patch embed must be skipped");
        assert!(report.skipped.iter().any(|n| n.starts_with("decoder.")), "decoder must be skipped");

        for (name, old) in &before {
            let now = net.named_params().iter().find(|(n, _)| n == name).unwrap().1.to_f64_vec();
            if initialized.contains(name) {
                let want = ck.tensors[name].0.to_f64_vec();
                assert_eq!(now, want, "{name} must hold checkpoint values");
            } else {
                assert_eq!(&now, old, "{name} must be untouched");
            }
        }

        // randomly initialized designated tensors genuinely changed
        let changed = before.iter().any(|(name, old)| {
            initialized.contains(name)
                && &net.named_params().iter().find(|(n, _)| n == name).unwrap().1.to_f64_vec() != old
        });
        assert!(changed, "surrogate init must actually alter some weights");
    }

    #[test]
    fn empty_checkpoint_initializes_nothing() {
        let cfg = tiny_cfg();
        let net = Network::build(&cfg, 2, DType::F32).unwrap();
        let empty = Checkpoint { config: cfg.clone(), tensors: BTreeMap::new() };
        let before: Vec<Vec<f64>> = net.named_params().iter().map(|(_, t)| t.to_f64_vec()).collect();
        let report = empty.selective_init(&net).unwrap();
        assert!(report.initialized.is_empty());
        assert_eq!(report.skipped.len(), net.named_params().len());
        let after: Vec<Vec<f64>> = net.named_params().iter().map(|(_, t)| t.to_f64_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn designated_shape_mismatch_is_hard_error() {
        let cfg = tiny_cfg();
        let net = Network::build(&cfg, 2, DType::F32).unwrap();
        let mut ck = Checkpoint::make_surrogate_pretrained(&cfg, 5).unwrap();
        let name = ck.designated_names()[0].clone();
        let wrong = Tensor::zeros(DType::F32, &[1, 2, 3]);
        ck.tensors.insert(name.clone(), (wrong, true));
        let err = ck.selective_init(&net).unwrap_err().to_string();
        assert!(err.contains(&name));
    }
}
