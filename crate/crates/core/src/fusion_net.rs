//! Two chained blenders: the align blender pulls both inputs toward a global
//! code on the coarse layers, the fuse blender merges the aligned codes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blender::{BlendCache, BlendMode, BlenderParams, FusionCoefficient};
use crate::error::{Error, Result};
use crate::style_space::{LayerLayout, StyleCode};

/// Coarse layers the align blender may touch in the toy layout (geometry).
pub const TOY_ALIGN_LAYERS: usize = 2;

/// The regions controlled by each input of a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPair {
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl RegionPair {
    pub fn new(left: &[&str], right: &[&str]) -> Self {
        RegionPair {
            left: left.iter().map(|s| s.to_string()).collect(),
            right: right.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNetParams {
    pub node: String,
    pub region_pair: RegionPair,
    /// `None` for the variant without a global code.
    pub align: Option<BlenderParams>,
    pub fuse: BlenderParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutputs {
    pub s1_aligned: StyleCode,
    pub s2_aligned: StyleCode,
    pub s_result: StyleCode,
    pub q_align1: FusionCoefficient,
    pub q_align2: FusionCoefficient,
    pub q_fuse: FusionCoefficient,
}

/// Flat forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct FusionForward {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub sa: Option<Vec<f64>>,
    pub s1a: Vec<f64>,
    pub s2a: Vec<f64>,
    pub qa1: Vec<f64>,
    pub qa2: Vec<f64>,
    pub res: Vec<f64>,
    pub qf: Vec<f64>,
    ca1: Option<BlendCache>,
    ca2: Option<BlendCache>,
    cf: BlendCache,
}

/// Upstream gradients arriving at a node's outputs.
#[derive(Debug, Clone, Default)]
pub(crate) struct FusionUpstream {
    pub d_res: Option<Vec<f64>>,
    pub d_s1a: Option<Vec<f64>>,
    pub d_s2a: Option<Vec<f64>>,
    pub d_qa1: Option<Vec<f64>>,
    pub d_qa2: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct FusionGrads {
    pub align: Vec<f64>,
    pub fuse: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub sa: Vec<f64>,
}

pub(crate) fn theta_checksum(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in theta {
        h.update((*v as f32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl FusionNetParams {
    /// Fresh toy-scale node. `align_layers = None` builds the variant without
    /// an align blender.
    pub fn new(
        node: impl Into<String>,
        region_pair: RegionPair,
        layout: &LayerLayout,
        align_layers: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let align = align_layers
            .map(|k| BlenderParams::toy(layout, BlendMode::AlignRestricted { k }, seed.wrapping_mul(2).wrapping_add(1)))
            .transpose()?;
        let fuse = BlenderParams::toy(layout, BlendMode::Full, seed.wrapping_mul(2).wrapping_add(2))?;
        Ok(FusionNetParams {
            node: node.into(),
            region_pair,
            align,
            fuse,
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.fuse.layout
    }

    pub fn has_global(&self) -> bool {
        self.align.is_some()
    }

    /// SHA-256 over both blenders' parameters.
    pub fn checksum(&self) -> String {
        let mut all = self.align.as_ref().map(|a| a.theta.clone()).unwrap_or_default();
        all.extend(&self.fuse.theta);
        theta_checksum(&all)
    }

    pub fn forward(&self, s1: &StyleCode, s2: &StyleCode, s_align: Option<&StyleCode>) -> Result<FusionOutputs> {
        let layout = self.layout();
        for (s, what) in [(s1, "s1"), (s2, "s2")] {
            s.check(layout).map_err(|e| Error::shape(format!("{what}: {e}")))?;
        }
        let sa = match (&self.align, s_align) {
            (Some(_), Some(sa)) => {
                sa.check(layout).map_err(|e| Error::shape(format!("s_align: {e}")))?;
                Some(sa.flatten())
            }
            (Some(_), None) => return Err(Error::input(format!("node `{}` needs a global code", self.node))),
            (None, Some(_)) => {
                return Err(Error::input(format!("node `{}` takes no global code", self.node)))
            }
            (None, None) => None,
        };
        let fw = self.forward_flat(&s1.flatten(), &s2.flatten(), sa.as_deref());
        let code = |v: &[f64]| StyleCode::unflatten(v, layout);
        let coef = |v: &[f64]| FusionCoefficient {
            layers: code(v).expect("layout-sized").layers,
        };
        Ok(FusionOutputs {
            s1_aligned: code(&fw.s1a)?,
            s2_aligned: code(&fw.s2a)?,
            s_result: code(&fw.res)?,
            q_align1: coef(&fw.qa1),
            q_align2: coef(&fw.qa2),
            q_fuse: coef(&fw.qf),
        })
    }

    pub(crate) fn forward_flat(&self, s1: &[f64], s2: &[f64], sa: Option<&[f64]>) -> FusionForward {
        let n = s1.len();
        let (s1a, qa1, ca1, s2a, qa2, ca2) = match (&self.align, sa) {
            (Some(al), Some(sa)) => {
                let (s1a, qa1, ca1) = al.align_flat(s1, sa);
                let (s2a, qa2, ca2) = al.align_flat(s2, sa);
                (s1a, qa1, Some(ca1), s2a, qa2, Some(ca2))
            }
            _ => (s1.to_vec(), vec![0.0; n], None, s2.to_vec(), vec![0.0; n], None),
        };
        let (res, qf, cf) = self.fuse.blend_flat(&s1a, &s2a);
        FusionForward {
            s1: s1.to_vec(),
            s2: s2.to_vec(),
            sa: sa.map(|v| v.to_vec()),
            s1a,
            s2a,
            qa1,
            qa2,
            res,
            qf,
            ca1,
            ca2,
            cf,
        }
    }

    pub(crate) fn backward(&self, fw: &FusionForward, up: &FusionUpstream) -> FusionGrads {
        let n = fw.s1.len();
        let mut g = FusionGrads {
            align: vec![0.0; self.align.as_ref().map_or(0, |a| a.param_count())],
            fuse: vec![0.0; self.fuse.param_count()],
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            sa: vec![0.0; n],
        };
        let mut ds1a = up.d_s1a.clone().unwrap_or_else(|| vec![0.0; n]);
        let mut ds2a = up.d_s2a.clone().unwrap_or_else(|| vec![0.0; n]);
        if let Some(dres) = &up.d_res {
            self.fuse
                .blend_backward(&fw.cf, &fw.s1a, &fw.s2a, &fw.qf, dres, None, &mut g.fuse, &mut ds1a, &mut ds2a);
        }
        match (&self.align, &fw.sa, &fw.ca1, &fw.ca2) {
            (Some(al), Some(sa), Some(c1), Some(c2)) => {
                al.align_backward(c1, &fw.s1, sa, &fw.qa1, &ds1a, up.d_qa1.as_deref(), &mut g.align, &mut g.s1, &mut g.sa);
                al.align_backward(c2, &fw.s2, sa, &fw.qa2, &ds2a, up.d_qa2.as_deref(), &mut g.align, &mut g.s2, &mut g.sa);
            }
            _ => {
                g.s1 = ds1a;
                g.s2 = ds2a;
            }
        }
        g
    }
}
