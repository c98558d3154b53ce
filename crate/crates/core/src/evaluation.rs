//! Locality and alignment metrics for trained trees and single nodes, and the
//! ablation harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_net::{FusionNetParams, RegionPair, TOY_ALIGN_LAYERS};
use crate::generator::{SceneRegion, ToyGenerator, IMAGE_SIZE};
use crate::hierarchy::FusionTree;
use crate::segmentation::RegionModel;
use crate::style_space::{LayerLayout, DEFAULT_TRUNCATION_PSI};
use crate::training::{train_node, CodeStream, LossCounters, TrainConfig};

/// Anything that fuses one code per slot (plus a global code) into one code.
pub trait Composer {
    fn layout(&self) -> &LayerLayout;
    /// Slot names and the regions each slot controls.
    fn slots(&self) -> Vec<(String, Vec<String>)>;
    fn compose_slots(&self, codes: &[&[f64]], global: &[f64]) -> Vec<f64>;
}

impl Composer for FusionTree {
    fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    fn slots(&self) -> Vec<(String, Vec<String>)> {
        self.regions.iter().map(|r| (r.clone(), vec![r.clone()])).collect()
    }

    fn compose_slots(&self, codes: &[&[f64]], global: &[f64]) -> Vec<f64> {
        self.compose_flat(codes, global)
    }
}

impl Composer for FusionNetParams {
    fn layout(&self) -> &LayerLayout {
        FusionNetParams::layout(self)
    }

    fn slots(&self) -> Vec<(String, Vec<String>)> {
        vec![
            ("left".to_string(), self.region_pair.left.clone()),
            ("right".to_string(), self.region_pair.right.clone()),
        ]
    }

    fn compose_slots(&self, codes: &[&[f64]], global: &[f64]) -> Vec<f64> {
        let g = self.has_global().then_some(global);
        self.forward_flat(codes[0], codes[1], g).res
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n: usize,
    pub seed: u64,
    pub psi: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 100,
            seed: 0,
            psi: DEFAULT_TRUNCATION_PSI,
        }
    }
}

/// `|a and b| / |a or b|`, 1 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("masks differ in size"));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn scene_regions(regions: &[String]) -> Result<Vec<usize>> {
    regions
        .iter()
        .map(|r| {
            SceneRegion::from_name(r)
                .map(|s| s.index())
                .ok_or_else(|| Error::input(format!("region {r} has no oracle mask")))
        })
        .collect()
}

fn oracle_union(generator: &ToyGenerator, code: &[f64], regions: &[usize]) -> Vec<bool> {
    let masks = generator.oracle_masks_flat(code);
    (0..masks[0].len()).map(|p| regions.iter().any(|&r| masks[r][p])).collect()
}

fn slot_index(composer: &dyn Composer, slot: &str) -> Result<(usize, Vec<String>)> {
    composer
        .slots()
        .into_iter()
        .enumerate()
        .find(|(_, (name, _))| name == slot)
        .map(|(i, (_, regions))| (i, regions))
        .ok_or_else(|| Error::input(format!("unknown region {slot}")))
}

fn pixel_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>() / 3.0)
        .collect()
}

/// Mean IoU, per slot, between oracle masks of the composition and of the
/// global code's own image.
pub fn alignment_iou(generator: &ToyGenerator, composer: &dyn Composer, config: &EvalConfig) -> Result<Vec<f64>> {
    let slots = composer.slots();
    let regions: Vec<Vec<usize>> = slots.iter().map(|(_, r)| scene_regions(r)).collect::<Result<_>>()?;
    let stream = CodeStream::new(config.seed);
    let mut sums = vec![0.0; slots.len()];
    for t in 0..config.n {
        let codes = stream.codes(generator, t as u64, slots.len() + 1, config.psi)?;
        let refs: Vec<&[f64]> = codes[..slots.len()].iter().map(|c| c.as_slice()).collect();
        let global = &codes[slots.len()];
        let out = composer.compose_slots(&refs, global);
        for (sum, r) in sums.iter_mut().zip(&regions) {
            *sum += mask_iou(&oracle_union(generator, &out, r), &oracle_union(generator, global, r))?;
        }
    }
    Ok(sums.iter().map(|s| s / config.n.max(1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub in_region_diff: f64,
    pub out_region_diff: f64,
    pub empty_complement: bool,
}

impl LocalizationScore {
    pub fn ratio(&self) -> f64 {
        self.in_region_diff / self.out_region_diff.max(1e-12)
    }
}

/// Mean per-pixel change inside and outside a slot's mask (from the region
/// model on the base composition) when only that slot's code is resampled.
pub fn localization_score(
    generator: &ToyGenerator,
    composer: &dyn Composer,
    region_model: &RegionModel,
    slot: &str,
    config: &EvalConfig,
) -> Result<LocalizationScore> {
    if config.n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let (index, regions) = slot_index(composer, slot)?;
    let region_ids = region_model.region_indices(&regions)?;
    let k = composer.slots().len();
    let stream = CodeStream::new(config.seed);
    let (mut in_sum, mut in_count, mut out_sum, mut out_count) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..config.n {
        let codes = stream.codes(generator, t as u64, k + 2, config.psi)?;
        let global = &codes[k];
        let mut refs: Vec<&[f64]> = codes[..k].iter().map(|c| c.as_slice()).collect();
        let base = composer.compose_slots(&refs, global);
        refs[index] = &codes[k + 1];
        let altered = composer.compose_slots(&refs, global);
        let mask = region_model.assign_from_activations(&generator.activations_flat(&base))?;
        let diff = pixel_diff(&generator.image_flat(&base).data, &generator.image_flat(&altered).data);
        for (d, label) in diff.iter().zip(&mask.labels) {
            if region_ids.contains(label) {
                in_sum += d;
                in_count += 1;
            } else {
                out_sum += d;
                out_count += 1;
            }
        }
    }
    Ok(LocalizationScore {
        in_region_diff: if in_count == 0 { 0.0 } else { in_sum / in_count as f64 },
        out_region_diff: if out_count == 0 { 0.0 } else { out_sum / out_count as f64 },
        empty_complement: out_count == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapMode {
    AveragedComplement,
    FixedComplement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub size: usize,
    pub data: Vec<f64>,
    pub region: String,
    pub n: usize,
    pub seed: u64,
    pub mode: HeatmapMode,
}

impl Heatmap {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Fraction of the heatmap mass inside `mask` (0 for an empty map).
    pub fn concentration(&self, mask: &[bool]) -> Result<f64> {
        if mask.len() != self.data.len() {
            return Err(Error::shape("mask does not match the heatmap"));
        }
        let total = self.total();
        if total <= 0.0 {
            return Ok(0.0);
        }
        Ok(self.data.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>() / total)
    }
}

/// Position holding the fixed complement code.
const FIXED_COMPLEMENT: u64 = u64::MAX;

/// Average per-pixel change between compositions that differ only in one
/// slot's code. Every other slot, and the global input, share one complement
/// code that is either fixed or resampled per trial.
pub fn locality_heatmap(
    generator: &ToyGenerator,
    composer: &dyn Composer,
    slot: &str,
    mode: HeatmapMode,
    config: &EvalConfig,
) -> Result<Heatmap> {
    if config.n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let (index, _) = slot_index(composer, slot)?;
    let k = composer.slots().len();
    let stream = CodeStream::new(config.seed);
    let fixed = stream.codes(generator, FIXED_COMPLEMENT, 1, config.psi)?.remove(0);
    let mut data = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for t in 0..config.n {
        let mut codes = stream.codes(generator, t as u64, 3, config.psi)?;
        let complement = match mode {
            HeatmapMode::FixedComplement => fixed.clone(),
            HeatmapMode::AveragedComplement => codes.pop().unwrap_or_default(),
        };
        let mut refs: Vec<&[f64]> = vec![complement.as_slice(); k];
        refs[index] = &codes[0];
        let a = composer.compose_slots(&refs, &complement);
        refs[index] = &codes[1];
        let b = composer.compose_slots(&refs, &complement);
        let diff = pixel_diff(&generator.image_flat(&a).data, &generator.image_flat(&b).data);
        for (h, d) in data.iter_mut().zip(diff) {
            *h += d / config.n as f64;
        }
    }
    Ok(Heatmap {
        size: IMAGE_SIZE,
        data,
        region: slot.to_string(),
        n: config.n,
        seed: config.seed,
        mode,
    })
}

/// The fixed-complement heatmap and its mass share inside the slot's oracle
/// mask in the complement code's own image.
pub fn heatmap_concentration(
    generator: &ToyGenerator,
    composer: &dyn Composer,
    slot: &str,
    config: &EvalConfig,
) -> Result<(Heatmap, f64)> {
    let (_, regions) = slot_index(composer, slot)?;
    let h = locality_heatmap(generator, composer, slot, HeatmapMode::FixedComplement, config)?;
    let fixed = CodeStream::new(config.seed).codes(generator, FIXED_COMPLEMENT, 1, config.psi)?.remove(0);
    let mask = oracle_union(generator, &fixed, &scene_regions(&regions)?);
    let c = h.concentration(&mask)?;
    Ok((h, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: String,
    pub iou: f64,
    pub localization: LocalizationScore,
    pub ratio: f64,
    pub heatmap_mass_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub mean_ratio: f64,
    pub slots: Vec<SlotReport>,
}

pub fn evaluate(
    generator: &ToyGenerator,
    composer: &dyn Composer,
    region_model: &RegionModel,
    config: &EvalConfig,
) -> Result<EvalReport> {
    Ok(evaluate_with_heatmaps(generator, composer, region_model, config)?.0)
}

/// [`evaluate`], also returning the fixed-complement heatmap of every slot.
pub fn evaluate_with_heatmaps(
    generator: &ToyGenerator,
    composer: &dyn Composer,
    region_model: &RegionModel,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<Heatmap>)> {
    let ious = alignment_iou(generator, composer, config)?;
    let mut slots = Vec::new();
    let mut heatmaps = Vec::new();
    for ((name, _), iou) in composer.slots().into_iter().zip(ious) {
        let localization = localization_score(generator, composer, region_model, &name, config)?;
        let (heatmap, heatmap_mass_in) = heatmap_concentration(generator, composer, &name, config)?;
        heatmaps.push(heatmap);
        slots.push(SlotReport {
            slot: name,
            iou,
            ratio: localization.ratio(),
            localization,
            heatmap_mass_in,
        });
    }
    let k = slots.len().max(1) as f64;
    let report = EvalReport {
        mean_iou: slots.iter().map(|s| s.iou).sum::<f64>() / k,
        mean_ratio: slots.iter().map(|s| s.ratio).sum::<f64>() / k,
        slots,
    };
    Ok((report, heatmaps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoGlobal,
    NoStage1,
    NoStage2,
    NoStage3,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoGlobal,
        AblationVariant::NoStage1,
        AblationVariant::NoStage2,
        AblationVariant::NoStage3,
    ];

    /// The training config and whether the node keeps its global input.
    pub fn apply(self, base: &TrainConfig) -> (TrainConfig, bool) {
        let mut c = base.clone();
        let mut global = true;
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoGlobal => global = false,
            AblationVariant::NoStage1 => c.steps[0] = 0,
            AblationVariant::NoStage2 => c.steps[1] = 0,
            AblationVariant::NoStage3 => c.steps[2] = 0,
        }
        (c, global)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Seed of the node's initial parameters.
    pub node_seed: u64,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub report: EvalReport,
    pub counters: LossCounters,
    pub node: FusionNetParams,
}

/// The toy root node: disc against everything else.
pub fn ablation_node(layout: &LayerLayout, global: bool, seed: u64) -> Result<FusionNetParams> {
    FusionNetParams::new(
        "root",
        RegionPair::new(&["disc"], &["stripe", "background"]),
        layout,
        global.then_some(TOY_ALIGN_LAYERS),
        seed,
    )
}

/// Trains a single toy root node under `variant` and evaluates it.
pub fn run_ablation(
    variant: AblationVariant,
    generator: &ToyGenerator,
    region_model: &RegionModel,
    config: &AblationConfig,
) -> Result<AblationResult> {
    let (train, global) = variant.apply(&config.train);
    let mut node = ablation_node(generator.layout(), global, config.node_seed)?;
    let log = train_node(&mut node, vec![], generator, region_model, &train)?;
    let report = evaluate(generator, &node, region_model, &config.eval)?;
    Ok(AblationResult {
        variant,
        report,
        counters: log.counters,
        node,
    })
}
