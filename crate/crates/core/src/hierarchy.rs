//! Binary trees of fusion nodes: topology, sequential training, composition
//! with bypass, and edit routing.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_net::{FusionNetParams, RegionPair};
use crate::generator::{Image, ToyGenerator};
use crate::losses::Side;
use crate::objective::Ancestor;
use crate::segmentation::RegionModel;
use crate::style_space::{LayerLayout, StyleCode};
use crate::training::{train_node, TrainConfig, TrainLog};

pub const ROOT_NAME: &str = "root";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyNode {
    Leaf(String),
    Node(InnerNode),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerNode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub left: Box<TopologyNode>,
    pub right: Box<TopologyNode>,
}

/// `{"root": {"left": "disc", "right": {"left": "stripe", "right": "background"}}}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub root: TopologyNode,
}

fn node(name: &str, left: TopologyNode, right: TopologyNode) -> TopologyNode {
    TopologyNode::Node(InnerNode {
        name: Some(name.to_string()),
        left: Box::new(left),
        right: Box::new(right),
    })
}

fn leaf(name: &str) -> TopologyNode {
    TopologyNode::Leaf(name.to_string())
}

impl TopologyNode {
    pub fn regions(&self) -> Vec<String> {
        match self {
            TopologyNode::Leaf(r) => vec![r.clone()],
            TopologyNode::Node(n) => {
                let mut v = n.left.regions();
                v.extend(n.right.regions());
                v
            }
        }
    }
}

impl Topology {
    /// Disc against the rest, then stripe against background.
    pub fn toy() -> Self {
        Topology {
            root: node(ROOT_NAME, leaf("disc"), node("bg-split", leaf("stripe"), leaf("background"))),
        }
    }

    /// The five-node face hierarchy.
    pub fn faces() -> Self {
        Topology {
            root: node(
                "all",
                node("face", node("skin,mouth", leaf("skin"), leaf("mouth")), leaf("eyes")),
                node(
                    "bg,hair,clothes",
                    node("bg,clothes", leaf("background"), leaf("clothes")),
                    leaf("hair"),
                ),
            ),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let t: Topology = serde_json::from_str(json).map_err(|e| Error::config(format!("tree topology: {e}")))?;
        if matches!(t.root, TopologyNode::Leaf(_)) {
            return Err(Error::config("the tree root must be an internal node"));
        }
        Ok(t)
    }

    pub fn regions(&self) -> Vec<String> {
        self.root.regions()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "name")]
pub enum Child {
    Leaf(String),
    Node(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub params: FusionNetParams,
    pub left: Child,
    pub right: Child,
    pub parent: Option<(String, Side)>,
}

impl TreeNode {
    pub fn child(&self, side: Side) -> &Child {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTree {
    pub topology: Topology,
    pub layout: LayerLayout,
    pub root: String,
    pub nodes: BTreeMap<String, TreeNode>,
    /// Regions in left-to-right leaf order.
    pub regions: Vec<String>,
    pub training_order: Vec<String>,
}

/// Instantiates an untrained tree. Nodes get seeds `seed + i` in breadth-first
/// order; `align_layers = None` builds nodes without a global input.
pub fn build_tree(topology: &Topology, layout: &LayerLayout, align_layers: Option<usize>, seed: u64) -> Result<FusionTree> {
    let regions = topology.regions();
    let mut seen = BTreeSet::new();
    for r in &regions {
        if r.is_empty() {
            return Err(Error::config("region names must be nonempty"));
        }
        if !seen.insert(r.clone()) {
            return Err(Error::config(format!("region {r} appears more than once")));
        }
    }
    let TopologyNode::Node(root) = &topology.root else {
        return Err(Error::config("the tree root must be an internal node"));
    };
    let root_name = root.name.clone().unwrap_or_else(|| ROOT_NAME.to_string());
    let mut nodes = BTreeMap::new();
    let mut queue = VecDeque::from([(root, root_name.clone(), None::<(String, Side)>)]);
    let mut index = 0u64;
    while let Some((inner, name, parent)) = queue.pop_front() {
        if name.is_empty() || seen.contains(&name) || nodes.contains_key(&name) {
            return Err(Error::config(format!("node name {name:?} is empty or already used")));
        }
        let child = |t: &TopologyNode| -> Child {
            match t {
                TopologyNode::Leaf(r) => Child::Leaf(r.clone()),
                TopologyNode::Node(n) => Child::Node(n.name.clone().unwrap_or_else(|| t.regions().join(","))),
            }
        };
        let left = child(&inner.left);
        let right = child(&inner.right);
        let pair = RegionPair {
            left: inner.left.regions(),
            right: inner.right.regions(),
        };
        let params = FusionNetParams::new(name.clone(), pair, layout, align_layers, seed.wrapping_add(index))?;
        index += 1;
        for (side, t, c) in [(Side::Left, &inner.left, &left), (Side::Right, &inner.right, &right)] {
            if let (TopologyNode::Node(n), Child::Node(cn)) = (t.as_ref(), c) {
                queue.push_back((n, cn.clone(), Some((name.clone(), side))));
            }
        }
        nodes.insert(
            name,
            TreeNode {
                params,
                left,
                right,
                parent,
            },
        );
    }
    Ok(FusionTree {
        topology: topology.clone(),
        layout: layout.clone(),
        root: root_name,
        nodes,
        regions,
        training_order: Vec::new(),
    })
}

/// The codes for one composition. A bypassed node takes its code from
/// `region_codes` under the node's own name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionRequest {
    pub region_codes: BTreeMap<String, StyleCode>,
    #[serde(default)]
    pub global_codes: BTreeMap<String, StyleCode>,
    #[serde(default)]
    pub bypass: BTreeSet<String>,
}

impl FusionTree {
    /// Internal nodes, root first, breadth-first.
    pub fn bfs_order(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([self.root.clone()]);
        while let Some(name) = queue.pop_front() {
            let n = &self.nodes[&name];
            for c in [&n.left, &n.right] {
                if let Child::Node(c) = c {
                    queue.push_back(c.clone());
                }
            }
            out.push(name);
        }
        out
    }

    pub fn node(&self, name: &str) -> Result<&TreeNode> {
        self.nodes
            .get(name)
            .ok_or_else(|| Error::request("node", format!("unknown node {name}")))
    }

    pub fn has_global(&self) -> bool {
        self.nodes.values().any(|n| n.params.has_global())
    }

    /// Frozen ancestors of `name`, nearest first.
    pub fn ancestors(&self, name: &str) -> Result<Vec<Ancestor>> {
        let mut out = Vec::new();
        let mut cur = self.node(name)?;
        while let Some((parent, side)) = &cur.parent {
            let p = self.node(parent)?;
            out.push(Ancestor {
                net: p.params.clone(),
                side: *side,
            });
            cur = p;
        }
        Ok(out)
    }

    /// Regions under a slot: a region name or an internal node name.
    pub fn slot_regions(&self, slot: &str) -> Result<Vec<String>> {
        if self.regions.iter().any(|r| r == slot) {
            return Ok(vec![slot.to_string()]);
        }
        let n = self.node(slot)?;
        let mut v = n.params.region_pair.left.clone();
        v.extend(n.params.region_pair.right.iter().cloned());
        Ok(v)
    }

    /// Sequentially trains every node, root first, each with its ancestors
    /// frozen. `configs` may hold one entry per node or a `"*"` fallback.
    pub fn train(
        &mut self,
        configs: &BTreeMap<String, TrainConfig>,
        generator: &ToyGenerator,
        region_model: &RegionModel,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for name in self.bfs_order() {
            let config = configs
                .get(&name)
                .or_else(|| configs.get("*"))
                .ok_or_else(|| Error::config(format!("no training config for node {name}")))?;
            log.extend(self.train_one(&name, generator, region_model, config)?);
        }
        Ok(log)
    }

    /// Trains one node with its ancestors frozen; the ancestors should
    /// already be trained.
    pub fn train_one(
        &mut self,
        name: &str,
        generator: &ToyGenerator,
        region_model: &RegionModel,
        config: &TrainConfig,
    ) -> Result<TrainLog> {
        let ancestors = self.ancestors(name)?;
        let node = self.nodes.get_mut(name).expect("ancestors() checked the name");
        let log = train_node(&mut node.params, ancestors, generator, region_model, config)?;
        self.training_order.retain(|n| n != name);
        self.training_order.push(name.to_string());
        Ok(log)
    }

    fn check_request(&self, req: &CompositionRequest) -> Result<()> {
        for name in &req.bypass {
            self.node(name).map_err(|_| Error::request("bypass", format!("unknown node {name}")))?;
        }
        for name in req.region_codes.keys() {
            if !self.regions.contains(name) && !self.nodes.contains_key(name) {
                return Err(Error::request("region_codes", format!("unknown region or node {name}")));
            }
        }
        for (name, code) in req.global_codes.iter().chain(&req.region_codes) {
            code.check(&self.layout)
                .map_err(|e| Error::MalformedCode {
                    field: name.clone(),
                    message: e.to_string(),
                })?;
        }
        for name in req.global_codes.keys() {
            let n = self.node(name).map_err(|_| Error::request("global_codes", format!("unknown node {name}")))?;
            if !n.params.has_global() {
                return Err(Error::request("global_codes", format!("node {name} takes no global code")));
            }
        }
        Ok(())
    }

    fn eval(&self, slot: &Child, req: &CompositionRequest) -> Result<Vec<f64>> {
        match slot {
            Child::Leaf(r) => req
                .region_codes
                .get(r)
                .map(|c| c.flatten())
                .ok_or_else(|| Error::request("region_codes", format!("missing code for region {r}"))),
            Child::Node(name) => {
                if req.bypass.contains(name) {
                    return req
                        .region_codes
                        .get(name)
                        .map(|c| c.flatten())
                        .ok_or_else(|| Error::request("region_codes", format!("bypassed node {name} needs a code")));
                }
                let n = self.node(name)?;
                let left = self.eval(&n.left, req)?;
                let right = self.eval(&n.right, req)?;
                let global = if n.params.has_global() {
                    Some(
                        req.global_codes
                            .get(name)
                            .map(|c| c.flatten())
                            .ok_or_else(|| Error::request("global_codes", format!("missing global code for node {name}")))?,
                    )
                } else {
                    None
                };
                Ok(n.params.forward_flat(&left, &right, global.as_deref()).res)
            }
        }
    }

    /// Post-order evaluation of the tree; returns the fused code.
    pub fn compose_code(&self, req: &CompositionRequest) -> Result<StyleCode> {
        self.check_request(req)?;
        let flat = self.eval(&Child::Node(self.root.clone()), req)?;
        StyleCode::unflatten(&flat, &self.layout)
    }

    pub fn compose(&self, generator: &ToyGenerator, req: &CompositionRequest) -> Result<(StyleCode, Image)> {
        let s = self.compose_code(req)?;
        let image = generator.synthesize(&s)?;
        Ok((s, image))
    }

    /// Flat-code composition with one code per region (leaf order) and one
    /// global shared by every node.
    pub(crate) fn compose_flat(&self, region_codes: &[&[f64]], global: &[f64]) -> Vec<f64> {
        self.eval_flat(&Child::Node(self.root.clone()), region_codes, global)
    }

    fn eval_flat(&self, slot: &Child, codes: &[&[f64]], global: &[f64]) -> Vec<f64> {
        match slot {
            Child::Leaf(r) => {
                let i = self.regions.iter().position(|x| x == r).expect("leaf regions are indexed");
                codes[i].to_vec()
            }
            Child::Node(name) => {
                let n = &self.nodes[name];
                let left = self.eval_flat(&n.left, codes, global);
                let right = self.eval_flat(&n.right, codes, global);
                let g = n.params.has_global().then_some(global);
                n.params.forward_flat(&left, &right, g).res
            }
        }
    }

    /// `s_edited` on the target regions' leaves, `s_base` on every other leaf
    /// and on every global input.
    pub fn edit_request(&self, s_base: &StyleCode, s_edited: &StyleCode, targets: &BTreeSet<String>) -> Result<CompositionRequest> {
        if targets.is_empty() {
            return Err(Error::request("regions", "an edit needs at least one target region"));
        }
        if let Some(bad) = targets.iter().find(|t| !self.regions.contains(t)) {
            return Err(Error::request("regions", format!("unknown region {bad}")));
        }
        Ok(CompositionRequest {
            region_codes: self
                .regions
                .iter()
                .map(|r| (r.clone(), if targets.contains(r) { s_edited } else { s_base }.clone()))
                .collect(),
            global_codes: self
                .nodes
                .iter()
                .filter(|(_, n)| n.params.has_global())
                .map(|(k, _)| (k.clone(), s_base.clone()))
                .collect(),
            bypass: BTreeSet::new(),
        })
    }

    pub fn route_edit(
        &self,
        generator: &ToyGenerator,
        s_base: &StyleCode,
        s_edited: &StyleCode,
        targets: &BTreeSet<String>,
    ) -> Result<(StyleCode, Image)> {
        self.compose(generator, &self.edit_request(s_base, s_edited, targets)?)
    }

    /// Nodes that may be bypassed: every internal node.
    pub fn bypassable(&self) -> Vec<String> {
        self.bfs_order()
    }
}
