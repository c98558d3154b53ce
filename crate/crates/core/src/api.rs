//! Wire types shared by the compose service, its client and the CLI, plus
//! the resolution of wire requests into tree compositions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::ToyGenerator;
use crate::hierarchy::{CompositionRequest, FusionTree, Topology};
use crate::image_io;
use crate::segmentation::{HardMask, RegionModel};
use crate::style_space::{sample_z, LayerLayout, SamplerConfig, StyleCode, DEFAULT_TRUNCATION_PSI};

/// A style code on the wire: explicit layers, a seed shorthand, or the id
/// returned by `/sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodeSpec {
    Layers(Vec<Vec<f64>>),
    Code {
        layers: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout: Option<String>,
    },
    Seed {
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        psi: Option<f64>,
    },
    Id {
        code_id: String,
    },
}

impl CodeSpec {
    pub fn seed(seed: u64) -> Self {
        CodeSpec::Seed { seed, psi: None }
    }
}

impl From<&StyleCode> for CodeSpec {
    fn from(s: &StyleCode) -> Self {
        CodeSpec::Layers(s.layers.clone())
    }
}

/// An edit direction: flat over all channels or per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionVector {
    Flat(Vec<f64>),
    Layers(Vec<Vec<f64>>),
}

impl DirectionVector {
    pub fn flatten(&self, layout: &LayerLayout, field: &str) -> Result<Vec<f64>> {
        let flat = match self {
            DirectionVector::Flat(v) => v.clone(),
            DirectionVector::Layers(l) => {
                let s = StyleCode {
                    layout: layout.name.clone(),
                    layers: l.clone(),
                };
                s.check(layout).map_err(|e| malformed(field, e))?;
                s.flatten()
            }
        };
        if flat.len() != layout.total_channels() {
            return Err(Error::MalformedCode {
                field: field.into(),
                message: format!("direction has {} entries, expected {}", flat.len(), layout.total_channels()),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedCode {
                field: field.into(),
                message: "direction has non-finite entries".into(),
            });
        }
        Ok(flat)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionRef {
    Id { direction_id: String },
    Inline { vector: DirectionVector },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBlock {
    #[serde(flatten)]
    pub direction: DirectionRef,
    pub strength: f64,
    pub regions: BTreeSet<String>,
}

/// `regions` holds one code per region, or per bypassed node for the
/// subtree it replaces. `global` fills every node without an entry in
/// `globals`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeRequest {
    pub regions: BTreeMap<String, CodeSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub globals: BTreeMap<String, CodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<CodeSpec>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub bypass: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditBlock>,
}

/// Row-major run lengths, alternating outside/inside and starting outside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: usize,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn encode(size: usize, mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut n = 0u32;
        for &m in mask {
            if m != current {
                runs.push(n);
                n = 0;
                current = m;
            }
            n += 1;
        }
        runs.push(n);
        RleMask { size, runs }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for (i, &n) in self.runs.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, n as usize));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeResponse {
    pub image_png: String,
    pub s_final: StyleCode,
    pub masks: BTreeMap<String, RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub seed: u64,
    #[serde(default)]
    pub psi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub code_id: String,
    pub seed: u64,
    pub psi: f64,
    pub code: StyleCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub name: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub has_global: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutResponse {
    pub layout: LayerLayout,
    pub image_size: usize,
    pub regions: Vec<String>,
    pub topology: Topology,
    pub nodes: Vec<NodeInfo>,
    pub bypassable: Vec<String>,
    pub directions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ErrorBody {
    pub fn from_error(e: &Error) -> Self {
        let field = match e {
            Error::Request { field, .. } | Error::MalformedCode { field, .. } => Some(field.clone()),
            _ => None,
        };
        ErrorBody {
            error: e.to_string(),
            field,
        }
    }
}

fn malformed(field: &str, e: Error) -> Error {
    Error::MalformedCode {
        field: field.into(),
        message: match e {
            Error::Shape(m) => m,
            other => other.to_string(),
        },
    }
}

pub fn check_psi(psi: f64) -> Result<()> {
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::request("psi", format!("truncation psi {psi} is outside (0, 1]")));
    }
    Ok(())
}

pub fn sample_code(generator: &ToyGenerator, seed: u64, psi: f64) -> Result<StyleCode> {
    check_psi(psi)?;
    let config = SamplerConfig {
        seed,
        truncation_psi: psi,
        z_dim: generator.z_dim(),
    };
    let z = sample_z(&config, 1)?;
    generator.map_to_style(&z[0], psi)
}

fn code_hash(s: &StyleCode) -> String {
    let mut h = Sha256::new();
    h.update(s.layout.as_bytes());
    for v in s.layers.iter().flatten() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// `s{seed}-p{psi bits}-{content hash}`; the id alone is enough to
/// regenerate and verify the code.
pub fn code_id(seed: u64, psi: f64, s: &StyleCode) -> String {
    format!("s{seed}-p{:016x}-{}", psi.to_bits(), code_hash(s))
}

pub fn sample(generator: &ToyGenerator, req: &SampleRequest) -> Result<SampleResponse> {
    let psi = req.psi.unwrap_or(DEFAULT_TRUNCATION_PSI);
    let code = sample_code(generator, req.seed, psi)?;
    Ok(SampleResponse {
        code_id: code_id(req.seed, psi, &code),
        seed: req.seed,
        psi,
        code,
    })
}

fn parse_code_id(id: &str) -> Option<(u64, f64, &str)> {
    let rest = id.strip_prefix('s')?;
    let (seed, rest) = rest.split_once("-p")?;
    let (bits, hash) = rest.split_once('-')?;
    if bits.len() != 16 {
        return None;
    }
    Some((seed.parse().ok()?, f64::from_bits(u64::from_str_radix(bits, 16).ok()?), hash))
}

pub fn resolve_code(generator: &ToyGenerator, spec: &CodeSpec, field: &str) -> Result<StyleCode> {
    let layout = generator.layout();
    match spec {
        CodeSpec::Layers(layers) | CodeSpec::Code { layers, layout: None } => {
            let s = StyleCode {
                layout: layout.name.clone(),
                layers: layers.clone(),
            };
            s.check(layout).map_err(|e| malformed(field, e))?;
            Ok(s)
        }
        CodeSpec::Code {
            layers,
            layout: Some(name),
        } => {
            if name != &layout.name {
                return Err(Error::MalformedCode {
                    field: field.into(),
                    message: format!("code is for layout {name}, generator uses {}", layout.name),
                });
            }
            resolve_code(generator, &CodeSpec::Layers(layers.clone()), field)
        }
        CodeSpec::Seed { seed, psi } => {
            let psi = psi.unwrap_or(DEFAULT_TRUNCATION_PSI);
            check_psi(psi).map_err(|_| Error::request(format!("{field}.psi"), format!("truncation psi {psi} is outside (0, 1]")))?;
            sample_code(generator, *seed, psi)
        }
        CodeSpec::Id { code_id: id } => {
            let unknown = || Error::request(field, format!("unknown code_id {id}"));
            let (seed, psi, hash) = parse_code_id(id).ok_or_else(unknown)?;
            if check_psi(psi).is_err() {
                return Err(unknown());
            }
            let s = sample_code(generator, seed, psi)?;
            if code_hash(&s) != hash {
                return Err(unknown());
            }
            Ok(s)
        }
    }
}

/// Direction vectors addressed by id, loaded from `<id>.json` files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Directions {
    pub vectors: BTreeMap<String, DirectionVector>,
}

impl Directions {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let text = std::fs::read_to_string(&path)?;
            let v = DirectionVector::from_json(&text)
                .map_err(|e| Error::input(format!("direction {}: {e}", path.display())))?;
            vectors.insert(id, v);
        }
        Ok(Directions { vectors })
    }

    pub fn ids(&self) -> Vec<String> {
        self.vectors.keys().cloned().collect()
    }
}

/// Everything a composition needs; immutable once built.
#[derive(Debug, Clone)]
pub struct ComposeContext {
    pub generator: ToyGenerator,
    pub region_model: RegionModel,
    pub tree: FusionTree,
    pub directions: Directions,
}

fn rename_field(e: Error) -> Error {
    let wire = |f: String| match f.as_str() {
        "region_codes" => "regions".to_string(),
        "global_codes" => "globals".to_string(),
        _ => f,
    };
    match e {
        Error::Request { field, message } => Error::Request {
            field: wire(field),
            message,
        },
        Error::MalformedCode { field, message } => Error::MalformedCode {
            field: wire(field),
            message,
        },
        other => other,
    }
}

impl ComposeContext {
    pub fn new(generator: ToyGenerator, region_model: RegionModel, tree: FusionTree, directions: Directions) -> Result<Self> {
        if tree.layout != *generator.layout() {
            return Err(Error::config("tree and generator use different layouts"));
        }
        if tree.regions.iter().any(|r| !region_model.regions.contains(r)) {
            return Err(Error::config("tree regions are not covered by the region model"));
        }
        Ok(ComposeContext {
            generator,
            region_model,
            tree,
            directions,
        })
    }

    pub fn layout(&self) -> LayoutResponse {
        let tree = &self.tree;
        LayoutResponse {
            layout: tree.layout.clone(),
            image_size: crate::generator::IMAGE_SIZE,
            regions: tree.regions.clone(),
            topology: tree.topology.clone(),
            nodes: tree
                .bfs_order()
                .into_iter()
                .map(|name| {
                    let n = &tree.nodes[&name];
                    NodeInfo {
                        left: n.params.region_pair.left.clone(),
                        right: n.params.region_pair.right.clone(),
                        has_global: n.params.has_global(),
                        name,
                    }
                })
                .collect(),
            bypassable: tree.bypassable(),
            directions: self.directions.ids(),
        }
    }

    /// Turns a wire request into a tree composition. Edits add
    /// `strength * direction` to the codes of the target regions.
    pub fn resolve(&self, req: &ComposeRequest) -> Result<CompositionRequest> {
        let tree = &self.tree;
        let g = &self.generator;
        for b in &req.bypass {
            if !tree.nodes.contains_key(b) {
                return Err(Error::request("bypass", format!("unknown node {b}")));
            }
        }
        for name in req.regions.keys() {
            if !tree.regions.contains(name) && !tree.nodes.contains_key(name) {
                return Err(Error::request(format!("regions.{name}"), "unknown region or node"));
            }
            if tree.nodes.contains_key(name) && !req.bypass.contains(name) {
                return Err(Error::request(format!("regions.{name}"), "node codes are only accepted for bypassed nodes"));
            }
        }
        for name in req.globals.keys() {
            match tree.nodes.get(name) {
                None => return Err(Error::request(format!("globals.{name}"), "unknown node")),
                Some(n) if !n.params.has_global() => {
                    return Err(Error::request(format!("globals.{name}"), "node takes no global code"))
                }
                _ => {}
            }
        }
        let mut region_codes = BTreeMap::new();
        for (name, spec) in &req.regions {
            region_codes.insert(name.clone(), resolve_code(g, spec, &format!("regions.{name}"))?);
        }
        let mut global_codes = BTreeMap::new();
        let shared = req.global.as_ref().map(|s| resolve_code(g, s, "global")).transpose()?;
        for (name, node) in &tree.nodes {
            if !node.params.has_global() {
                continue;
            }
            if let Some(spec) = req.globals.get(name) {
                global_codes.insert(name.clone(), resolve_code(g, spec, &format!("globals.{name}"))?);
            } else if let Some(s) = &shared {
                global_codes.insert(name.clone(), s.clone());
            }
        }
        if let Some(edit) = &req.edit {
            self.apply_edit(edit, &req.bypass, &mut region_codes)?;
        }
        Ok(CompositionRequest {
            region_codes,
            global_codes,
            bypass: req.bypass.clone(),
        })
    }

    fn apply_edit(&self, edit: &EditBlock, bypass: &BTreeSet<String>, codes: &mut BTreeMap<String, StyleCode>) -> Result<()> {
        let layout = &self.tree.layout;
        if !edit.strength.is_finite() {
            return Err(Error::request("edit.strength", "strength must be finite"));
        }
        if edit.regions.is_empty() {
            return Err(Error::request("edit.regions", "an edit needs at least one target region"));
        }
        let direction = match &edit.direction {
            DirectionRef::Id { direction_id } => self
                .directions
                .vectors
                .get(direction_id)
                .ok_or_else(|| Error::request("edit.direction_id", format!("unknown direction {direction_id}")))?
                .flatten(layout, "edit.direction_id")?,
            DirectionRef::Inline { vector } => vector.flatten(layout, "edit.vector")?,
        };
        for r in &edit.regions {
            if !self.tree.regions.contains(r) {
                return Err(Error::request("edit.regions", format!("unknown region {r}")));
            }
            if let Some(b) = bypass.iter().find(|b| self.tree.slot_regions(b).is_ok_and(|rs| rs.contains(r))) {
                return Err(Error::request("edit.regions", format!("region {r} lies under bypassed node {b}")));
            }
            let code = codes
                .get_mut(r)
                .ok_or_else(|| Error::request(format!("regions.{r}"), format!("missing code for region {r}")))?;
            let flat: Vec<f64> = code.flatten().iter().zip(&direction).map(|(s, d)| s + edit.strength * d).collect();
            *code = StyleCode::unflatten(&flat, layout)?;
        }
        Ok(())
    }

    pub fn hard_masks(&self, s: &StyleCode) -> Result<BTreeMap<String, RleMask>> {
        let acts = self.generator.activations(s)?;
        let hard: HardMask = self.region_model.assign_from_activations(&acts)?;
        Ok(self
            .region_model
            .regions
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), RleMask::encode(hard.res, &hard.region(i))))
            .collect())
    }

    pub fn compose(&self, req: &ComposeRequest) -> Result<ComposeResponse> {
        let comp = self.resolve(req)?;
        let (s_final, image) = self.tree.compose(&self.generator, &comp).map_err(rename_field)?;
        Ok(ComposeResponse {
            image_png: image_io::to_base64(&image_io::image_png(&image)?),
            masks: self.hard_masks(&s_final)?,
            s_final,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_tree;
    use crate::segmentation::{fit_region_model, Labeling, SegmentConfig};
    use proptest::prelude::*;

    fn context() -> ComposeContext {
        let g = ToyGenerator::build(1);
        let config = SegmentConfig {
            num_images: 4,
            sample_points: Some(600),
            ..SegmentConfig::default()
        };
        let m = fit_region_model(&g, &config, &Labeling::Auto).unwrap();
        let tree = build_tree(&Topology::toy(), g.layout(), Some(2), 3).unwrap();
        ComposeContext::new(g, m, tree, Directions::default()).unwrap()
    }

    fn all_seed(ctx: &ComposeContext, seed: u64) -> ComposeRequest {
        ComposeRequest {
            regions: ctx.tree.regions.iter().map(|r| (r.clone(), CodeSpec::seed(seed))).collect(),
            global: Some(CodeSpec::seed(seed)),
            ..Default::default()
        }
    }

    #[test]
    fn code_spec_forms_parse() {
        let seed: CodeSpec = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(seed, CodeSpec::seed(4));
        let psi: CodeSpec = serde_json::from_str(r#"{"seed": 4, "psi": 0.5}"#).unwrap();
        assert_eq!(psi, CodeSpec::Seed { seed: 4, psi: Some(0.5) });
        let layers: CodeSpec = serde_json::from_str("[[1.0], [2.0, 3.0]]").unwrap();
        assert_eq!(layers, CodeSpec::Layers(vec![vec![1.0], vec![2.0, 3.0]]));
        let id: CodeSpec = serde_json::from_str(r#"{"code_id": "x"}"#).unwrap();
        assert!(matches!(id, CodeSpec::Id { .. }));
        let code: CodeSpec = serde_json::from_str(r#"{"layout": "toy-6", "layers": [[1.0]]}"#).unwrap();
        assert!(matches!(code, CodeSpec::Code { layout: Some(_), .. }));
    }

    #[test]
    fn sample_ids_resolve_and_verify() {
        let g = ToyGenerator::build(1);
        let a = sample(&g, &SampleRequest { seed: 9, psi: None }).unwrap();
        assert_eq!(a.psi, 0.7);
        let b = sample(&g, &SampleRequest { seed: 9, psi: Some(0.7) }).unwrap();
        assert_eq!(a, b);
        let c = sample(&g, &SampleRequest { seed: 10, psi: None }).unwrap();
        assert_ne!(a.code_id, c.code_id);
        let back = resolve_code(&g, &CodeSpec::Id { code_id: a.code_id.clone() }, "x").unwrap();
        assert_eq!(back, a.code);
        let forged = a.code_id.replace("s9-", "s8-");
        assert!(matches!(
            resolve_code(&g, &CodeSpec::Id { code_id: forged }, "x"),
            Err(Error::Request { .. })
        ));
        for psi in [0.0, 1.5, -0.2, f64::NAN] {
            assert!(sample(&g, &SampleRequest { seed: 1, psi: Some(psi) }).is_err());
        }
        assert!(sample(&g, &SampleRequest { seed: 1, psi: Some(1.0) }).is_ok());
    }

    #[test]
    fn identity_over_the_wire_types() {
        let ctx = context();
        let resp = ctx.compose(&all_seed(&ctx, 5)).unwrap();
        let s = sample_code(&ctx.generator, 5, 0.7).unwrap();
        assert!(resp.s_final.max_abs_diff(&s) <= 1e-12);
        // Masks partition the image.
        let masks: Vec<Vec<bool>> = resp.masks.values().map(|m| m.decode()).collect();
        let n = masks[0].len();
        assert_eq!(n, resp.masks.values().next().unwrap().size.pow(2));
        for p in 0..n {
            assert_eq!(masks.iter().filter(|m| m[p]).count(), 1);
        }
        assert_eq!(ctx.compose(&all_seed(&ctx, 5)).unwrap(), resp);
    }

    #[test]
    fn request_errors_name_fields() {
        let ctx = context();
        let field = |req: &ComposeRequest| match ctx.compose(req) {
            Err(Error::Request { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut r = all_seed(&ctx, 1);
        r.regions.insert("sky".into(), CodeSpec::seed(1));
        assert_eq!(field(&r), "regions.sky");
        let mut r = all_seed(&ctx, 1);
        r.regions.remove("stripe");
        assert_eq!(field(&r), "regions");
        let mut r = all_seed(&ctx, 1);
        r.global = None;
        assert_eq!(field(&r), "globals");
        let mut r = all_seed(&ctx, 1);
        r.bypass.insert("nope".into());
        assert_eq!(field(&r), "bypass");
        let mut r = all_seed(&ctx, 1);
        r.globals.insert("leaf".into(), CodeSpec::seed(1));
        assert_eq!(field(&r), "globals.leaf");
        let mut r = all_seed(&ctx, 1);
        r.regions.insert("disc".into(), CodeSpec::Seed { seed: 1, psi: Some(2.0) });
        assert_eq!(field(&r), "regions.disc.psi");

        let mut r = all_seed(&ctx, 1);
        r.regions.insert("disc".into(), CodeSpec::Layers(vec![vec![0.0; 3]]));
        assert!(matches!(ctx.compose(&r), Err(Error::MalformedCode { field, .. }) if field == "regions.disc"));
    }

    #[test]
    fn bypass_takes_a_subtree_code() {
        let ctx = context();
        let mut r = all_seed(&ctx, 2);
        r.regions.remove("stripe");
        r.regions.remove("background");
        r.regions.insert("bg-split".into(), CodeSpec::seed(7));
        r.bypass.insert("bg-split".into());
        let resp = ctx.compose(&r).unwrap();

        let mut direct = all_seed(&ctx, 2);
        direct.regions.insert("stripe".into(), CodeSpec::seed(7));
        direct.regions.insert("background".into(), CodeSpec::seed(7));
        direct.globals.insert("bg-split".into(), CodeSpec::seed(7));
        // Equal inputs and global make the bypassed subtree an identity.
        assert!(resp.s_final.max_abs_diff(&ctx.compose(&direct).unwrap().s_final) <= 1e-12);

        let mut bad = r.clone();
        bad.bypass.clear();
        assert!(matches!(ctx.compose(&bad), Err(Error::Request { field, .. }) if field == "regions.bg-split"));
    }

    #[test]
    fn edits_follow_route_edit() {
        let ctx = context();
        let layout = &ctx.tree.layout;
        let d: Vec<f64> = (0..layout.total_channels()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut r = all_seed(&ctx, 3);
        r.edit = Some(EditBlock {
            direction: DirectionRef::Inline {
                vector: DirectionVector::Flat(d.clone()),
            },
            strength: 2.0,
            regions: BTreeSet::from(["stripe".to_string()]),
        });
        let resp = ctx.compose(&r).unwrap();
        let base = sample_code(&ctx.generator, 3, 0.7).unwrap();
        let edited = StyleCode::unflatten(
            &base.flatten().iter().zip(&d).map(|(a, b)| a + 2.0 * b).collect::<Vec<_>>(),
            layout,
        )
        .unwrap();
        let (s, _) = ctx
            .tree
            .route_edit(&ctx.generator, &base, &edited, &BTreeSet::from(["stripe".to_string()]))
            .unwrap();
        assert_eq!(resp.s_final, s);

        let mut zero = r.clone();
        zero.edit.as_mut().unwrap().strength = 0.0;
        assert_eq!(ctx.compose(&zero).unwrap(), ctx.compose(&all_seed(&ctx, 3)).unwrap());

        let mut unknown = r.clone();
        unknown.edit.as_mut().unwrap().direction = DirectionRef::Id {
            direction_id: "smile".into(),
        };
        assert!(matches!(ctx.compose(&unknown), Err(Error::Request { field, .. }) if field == "edit.direction_id"));
    }

    #[test]
    fn edit_block_json() {
        let e: EditBlock =
            serde_json::from_str(r#"{"direction_id": "hue", "strength": 1.5, "regions": ["disc"]}"#).unwrap();
        assert_eq!(e.direction, DirectionRef::Id { direction_id: "hue".into() });
        let e: EditBlock = serde_json::from_str(r#"{"vector": [0.5, 1.0], "strength": 1, "regions": []}"#).unwrap();
        assert_eq!(
            e.direction,
            DirectionRef::Inline {
                vector: DirectionVector::Flat(vec![0.5, 1.0])
            }
        );
    }

    proptest! {
        #[test]
        fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = RleMask::encode(0, &bits);
            prop_assert_eq!(m.decode(), bits.clone());
            prop_assert_eq!(m.runs.iter().map(|&n| n as usize).sum::<usize>(), bits.len());
        }
    }
}
