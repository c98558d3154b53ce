//! Directory checkpoints: `manifest.json` plus one binary blob per tensor
//! under `blobs/`.
//!
//! Blob layout (little-endian): 8-byte magic, `u32` name length, name bytes,
//! `u8` dtype (1 = f32), `u32` rank, `u64` per dimension, then the values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blender::{BlendMode, BlenderParams};
use crate::error::{Error, Result};
use crate::fusion_net::{FusionNetParams, RegionPair};
use crate::generator::{GeneratorMeta, GeneratorWeights, HiddenAssignment, ToyGenerator};
use crate::hierarchy::{build_tree, FusionTree, Topology};
use crate::segmentation::{RegionModel, Standardization};
use crate::style_space::LayerLayout;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: &str = "sf-v1";
pub const MAGIC: [u8; 8] = *b"SFTENSR1";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub layout: LayerLayout,
    pub seed: u64,
    pub z_dim: usize,
    pub test_oracle: HiddenAssignment,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModelManifest {
    pub k: usize,
    pub channels: usize,
    pub regions: Vec<String>,
    pub cluster_labels: Vec<usize>,
    pub softmin_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlenderManifest {
    pub mode: BlendMode,
    pub rep: usize,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeManifest {
    pub region_pair: RegionPair,
    pub align: Option<BlenderManifest>,
    pub fuse: BlenderManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeManifest {
    pub topology: Topology,
    pub layout: LayerLayout,
    pub training_order: Vec<String>,
    pub nodes: BTreeMap<String, NodeManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    #[serde(default)]
    pub generator: Option<GeneratorManifest>,
    #[serde(default)]
    pub region_model: Option<RegionModelManifest>,
    #[serde(default)]
    pub tree: Option<TreeManifest>,
    #[serde(default)]
    pub configs: BTreeMap<String, TrainConfig>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Any subset of generator, region model and tree, plus the configs and
/// seeds that produced them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub generator: Option<ToyGenerator>,
    pub region_model: Option<RegionModel>,
    pub tree: Option<FusionTree>,
    pub configs: BTreeMap<String, TrainConfig>,
    pub seeds: BTreeMap<String, u64>,
}

fn blob_file(name: &str) -> String {
    format!("blobs/{name}.bin")
}

fn blender_tensors(prefix: &str, b: &BlenderParams, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (name, shape, off) in b.tensor_layout() {
        let len: usize = shape.iter().product();
        out.push((format!("{prefix}/{name}"), shape, b.theta[off..off + len].to_vec()));
    }
}

fn blender_manifest(b: &BlenderParams) -> BlenderManifest {
    BlenderManifest {
        mode: b.mode,
        rep: b.rep,
        dims: b.dims.clone(),
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        if let Some(g) = &self.generator {
            let channels = g.layout().total_channels();
            for (name, shape, data) in g.weights().named_tensors(g.z_dim(), channels) {
                out.push((format!("generator/{name}"), shape, data.to_vec()));
            }
            out.push(("generator/w_mean".into(), vec![g.z_dim()], g.w_mean().to_vec()));
        }
        if let Some(m) = &self.region_model {
            out.push(("region_model/centroids".into(), vec![m.k, m.channels], m.centroids.clone()));
            out.push(("region_model/feature_mean".into(), vec![m.channels], m.standardization.mean.clone()));
            out.push(("region_model/feature_std".into(), vec![m.channels], m.standardization.std.clone()));
        }
        if let Some(t) = &self.tree {
            for (name, node) in &t.nodes {
                if let Some(a) = &node.params.align {
                    blender_tensors(&format!("blenders/{name}/align"), a, &mut out);
                }
                blender_tensors(&format!("blenders/{name}/fuse"), &node.params.fuse, &mut out);
            }
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION.to_string(),
            generator: self.generator.as_ref().map(|g| GeneratorManifest {
                layout: g.layout().clone(),
                seed: g.seed(),
                z_dim: g.z_dim(),
                test_oracle: g.test_oracle().clone(),
                checksum: g.checksum(),
            }),
            region_model: self.region_model.as_ref().map(|m| RegionModelManifest {
                k: m.k,
                channels: m.channels,
                regions: m.regions.clone(),
                cluster_labels: m.cluster_labels.clone(),
                softmin_tau: m.softmin_tau,
            }),
            tree: self.tree.as_ref().map(|t| TreeManifest {
                topology: t.topology.clone(),
                layout: t.layout.clone(),
                training_order: t.training_order.clone(),
                nodes: t
                    .nodes
                    .iter()
                    .map(|(k, n)| {
                        (
                            k.clone(),
                            NodeManifest {
                                region_pair: n.params.region_pair.clone(),
                                align: n.params.align.as_ref().map(blender_manifest),
                                fuse: blender_manifest(&n.params.fuse),
                            },
                        )
                    })
                    .collect(),
            }),
            configs: self.configs.clone(),
            seeds: self.seeds.clone(),
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, _)| TensorEntry {
                    file: blob_file(&name),
                    name,
                    dtype: "f32".into(),
                    shape,
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        fs::create_dir_all(dir)?;
        for ((name, shape, data), entry) in self.tensors().iter().zip(&manifest.tensors) {
            let bytes = encode_blob(name, shape, data)?;
            let path = dir.join(&entry.file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::checkpoint("manifest.json", e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::checkpoint("manifest.json", e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                "manifest.json",
                format!("format version {} is not {FORMAT_VERSION}", manifest.format_version),
            ));
        }
        let mut store = TensorStore::read(dir, &manifest.tensors)?;

        let generator = match &manifest.generator {
            None => None,
            Some(gm) => {
                let mut t = |n: &str| store.take(&format!("generator/{n}"));
                let weights = GeneratorWeights {
                    map_w1: t("map_w1")?,
                    map_b1: t("map_b1")?,
                    map_w2: t("map_w2")?,
                    map_b2: t("map_b2")?,
                    affine_w: t("affine_w")?,
                    affine_b: t("affine_b")?,
                    base_colors: t("base_colors")?,
                    appearance_colors: t("appearance_colors")?,
                };
                let meta = GeneratorMeta {
                    layout: gm.layout.clone(),
                    seed: gm.seed,
                    z_dim: gm.z_dim,
                    w_mean: t("w_mean")?,
                    test_oracle: gm.test_oracle.clone(),
                };
                let g = ToyGenerator::from_parts(meta, weights)?;
                if g.checksum() != gm.checksum {
                    return Err(Error::checkpoint("generator", "weights do not match the recorded checksum"));
                }
                Some(g)
            }
        };

        let region_model = match &manifest.region_model {
            None => None,
            Some(rm) => Some(RegionModel {
                k: rm.k,
                channels: rm.channels,
                centroids: store.take("region_model/centroids")?,
                cluster_labels: rm.cluster_labels.clone(),
                regions: rm.regions.clone(),
                standardization: Standardization {
                    mean: store.take("region_model/feature_mean")?,
                    std: store.take("region_model/feature_std")?,
                },
                softmin_tau: rm.softmin_tau,
            }),
        };

        let tree = match &manifest.tree {
            None => None,
            Some(tm) => {
                let mut tree = build_tree(&tm.topology, &tm.layout, None, 0)?;
                let expected: BTreeSet<&String> = tree.nodes.keys().collect();
                let listed: BTreeSet<&String> = tm.nodes.keys().collect();
                if expected != listed {
                    return Err(Error::checkpoint("tree", "node list does not match the topology"));
                }
                for (name, nm) in &tm.nodes {
                    let mut blender = |kind: &str, bm: &BlenderManifest| -> Result<BlenderParams> {
                        let prefix = format!("blenders/{name}/{kind}");
                        let mut b = BlenderParams {
                            layout: tm.layout.clone(),
                            mode: bm.mode,
                            rep: bm.rep,
                            dims: bm.dims.clone(),
                            theta: Vec::new(),
                        };
                        for (t, _, _) in b.tensor_layout() {
                            b.theta.extend(store.take(&format!("{prefix}/{t}"))?);
                        }
                        if b.theta.len() != BlenderParams::expected_params(&b.dims) {
                            return Err(Error::checkpoint(prefix, "parameter count does not match dims"));
                        }
                        Ok(b)
                    };
                    let align = nm.align.as_ref().map(|a| blender("align", a)).transpose()?;
                    let fuse = blender("fuse", &nm.fuse)?;
                    let node = tree.nodes.get_mut(name).expect("checked above");
                    node.params = FusionNetParams {
                        node: name.clone(),
                        region_pair: nm.region_pair.clone(),
                        align,
                        fuse,
                    };
                }
                tree.training_order = tm.training_order.clone();
                Some(tree)
            }
        };
        store.finish()?;
        Ok(Checkpoint {
            generator,
            region_model,
            tree,
            configs: manifest.configs,
            seeds: manifest.seeds,
        })
    }

    pub fn require_generator(&self) -> Result<&ToyGenerator> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::checkpoint("generator", "checkpoint holds no generator"))
    }

    pub fn require_region_model(&self) -> Result<&RegionModel> {
        self.region_model
            .as_ref()
            .ok_or_else(|| Error::checkpoint("region_model", "checkpoint holds no region model"))
    }

    pub fn require_tree(&self) -> Result<&FusionTree> {
        self.tree
            .as_ref()
            .ok_or_else(|| Error::checkpoint("tree", "checkpoint holds no tree"))
    }
}

pub fn encode_blob(name: &str, shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::checkpoint(name, "shape does not match the data length"));
    }
    let mut out = Vec::with_capacity(32 + name.len() + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        let f = *v as f32;
        if f as f64 != *v {
            return Err(Error::checkpoint(name, format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    name: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(self.name, "blob is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a blob, checking it against the name and shape the manifest
/// expects.
pub fn decode_blob(name: &str, shape: &[usize], bytes: &[u8]) -> Result<Vec<f64>> {
    let mut r = Reader { name, bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::checkpoint(name, "bad magic bytes"));
    }
    let len = r.u32()? as usize;
    let stored = r.take(len)?;
    if stored != name.as_bytes() {
        return Err(Error::checkpoint(name, format!("blob holds tensor {}", String::from_utf8_lossy(stored))));
    }
    if r.take(1)?[0] != DTYPE_F32 {
        return Err(Error::checkpoint(name, "unsupported dtype"));
    }
    let rank = r.u32()? as usize;
    let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if dims != shape {
        return Err(Error::checkpoint(name, format!("shape {dims:?} differs from manifest {shape:?}")));
    }
    let count: usize = dims.iter().product();
    let data = r.take(count * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(name, "trailing bytes after tensor data"));
    }
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

struct TensorStore {
    tensors: BTreeMap<String, Vec<f64>>,
}

impl TensorStore {
    fn read(dir: &Path, entries: &[TensorEntry]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for e in entries {
            if e.dtype != "f32" {
                return Err(Error::checkpoint(&e.name, format!("unsupported dtype {}", e.dtype)));
            }
            let path: PathBuf = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::checkpoint(&e.name, format!("cannot read {}: {err}", e.file)))?;
            let data = decode_blob(&e.name, &e.shape, &bytes)?;
            if tensors.insert(e.name.clone(), data).is_some() {
                return Err(Error::checkpoint(&e.name, "tensor listed more than once"));
            }
        }
        Ok(TensorStore { tensors })
    }

    fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::checkpoint(name, "tensor missing from the manifest"))
    }

    fn finish(self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(extra) => Err(Error::checkpoint(extra, "tensor is not used by any component")),
            None => Ok(()),
        }
    }
}
