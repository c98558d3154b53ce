//! Region discovery by clustering generator activations, hard and soft region
//! masks, and the channel-region correlation matrix that drives fusion-loss
//! weights.

mod soft;
pub mod upsample;
pub mod ward;

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{round_f32, ActivationStack, SceneRegion, ToyGenerator, IMAGE_SIZE};
use crate::style_space::{sample_z, LayerLayout, SamplerConfig};

pub(crate) use soft::{MaskCache, MaskProjector};
pub use upsample::Bilinear;
pub use ward::Clustering;

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_TAU: f64 = 1.0;

/// Upsampled, concatenated activations: `res x res` pixels of `channels`
/// values, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepPixelGrid {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DeepPixelGrid {
    pub fn pixels(&self) -> usize {
        self.res * self.res
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(channels: usize) -> Self {
        Standardization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and standard deviation over every pixel of `grids`,
    /// with the deviation floored at [`STD_FLOOR`].
    pub fn fit(grids: &[DeepPixelGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::input("no grids to standardize"))?;
        let c = first.channels;
        let mut sum = vec![0.0; c];
        let mut count = 0.0;
        for g in grids {
            if g.channels != c {
                return Err(Error::shape("grids disagree on channel count"));
            }
            for p in 0..g.pixels() {
                for (s, v) in sum.iter_mut().zip(g.pixel(p)) {
                    *s += v;
                }
            }
            count += g.pixels() as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mut var = vec![0.0; c];
        for g in grids {
            for p in 0..g.pixels() {
                for ((v, x), m) in var.iter_mut().zip(g.pixel(p)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, grid: &DeepPixelGrid) -> Result<DeepPixelGrid> {
        if grid.channels != self.mean.len() {
            return Err(Error::shape(format!(
                "grid has {} channels, standardization has {}",
                grid.channels,
                self.mean.len()
            )));
        }
        let mut out = grid.clone();
        for px in out.data.chunks_mut(grid.channels) {
            for ((x, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}

/// Upsamples every layer to the largest resolution and concatenates the
/// channels in layer order, without standardization.
pub fn raw_feature_stack(acts: &ActivationStack) -> Result<DeepPixelGrid> {
    if acts.layers.is_empty() {
        return Err(Error::input("empty activation stack"));
    }
    let res = acts.layers.iter().map(|l| l.res).max().unwrap();
    let channels: usize = acts.layers.iter().map(|l| l.channels).sum();
    let n = res * res;
    let mut data = vec![0.0; n * channels];
    let mut plane = vec![0.0; n];
    let mut offset = 0;
    for layer in &acts.layers {
        let up = Bilinear::new(layer.res, res);
        for c in 0..layer.channels {
            up.apply_into(layer.channel(c), &mut plane);
            for (p, v) in plane.iter().enumerate() {
                data[p * channels + offset + c] = *v;
            }
        }
        offset += layer.channels;
    }
    Ok(DeepPixelGrid { res, channels, data })
}

/// The standardized DeepPixel representation used for clustering and masks.
pub fn build_feature_stack(acts: &ActivationStack, standardization: &Standardization) -> Result<DeepPixelGrid> {
    standardization.apply(&raw_feature_stack(acts)?)
}

/// Per-pixel region indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMask {
    pub res: usize,
    pub labels: Vec<usize>,
}

impl HardMask {
    pub fn region(&self, region: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == region).collect()
    }

    /// Builds a mask from the generator's oracle, ordering regions as in
    /// `regions`.
    pub fn from_oracle(masks: &[Vec<bool>; 3], regions: &[String]) -> Result<Self> {
        let mut index = [usize::MAX; 3];
        for (i, name) in regions.iter().enumerate() {
            let r = SceneRegion::from_name(name)
                .ok_or_else(|| Error::input(format!("`{name}` is not a toy scene region")))?;
            index[r.index()] = i;
        }
        if index.contains(&usize::MAX) {
            return Err(Error::input("region list does not cover the toy scene"));
        }
        let labels = (0..masks[0].len())
            .map(|p| {
                let k = (0..3).find(|&k| masks[k][p]).expect("oracle masks partition the image");
                index[k]
            })
            .collect();
        Ok(HardMask { res: IMAGE_SIZE, labels })
    }
}

/// Per-region soft masks, region-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMasks {
    pub res: usize,
    pub regions: usize,
    pub data: Vec<f64>,
}

impl SoftMasks {
    pub fn region(&self, r: usize) -> &[f64] {
        let n = self.res * self.res;
        &self.data[r * n..(r + 1) * n]
    }

    /// Sum of the masks of several regions.
    pub fn union(&self, regions: &[usize]) -> Vec<f64> {
        let n = self.res * self.res;
        let mut out = vec![0.0; n];
        for &r in regions {
            for (o, v) in out.iter_mut().zip(self.region(r)) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionModel {
    pub k: usize,
    pub channels: usize,
    /// `k x channels`, in standardized feature space.
    pub centroids: Vec<f64>,
    /// Region index of every cluster.
    pub cluster_labels: Vec<usize>,
    pub regions: Vec<String>,
    pub standardization: Standardization,
    pub softmin_tau: f64,
}

impl RegionModel {
    pub fn region_index(&self, name: &str) -> Result<usize> {
        self.regions
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::input(format!("unknown region `{name}`")))
    }

    pub fn region_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.region_index(n)).collect()
    }

    fn check_grid(&self, grid: &DeepPixelGrid) -> Result<()> {
        if grid.channels != self.channels {
            return Err(Error::shape(format!(
                "grid has {} channels, region model expects {}",
                grid.channels, self.channels
            )));
        }
        Ok(())
    }

    fn sq_distances(&self, px: &[f64], out: &mut [f64]) {
        for (j, d) in out.iter_mut().enumerate() {
            let c = &self.centroids[j * self.channels..(j + 1) * self.channels];
            *d = px.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }

    /// Nearest centroid per pixel, mapped to its region. Ties go to the
    /// lowest cluster index.
    pub fn assign_regions(&self, grid: &DeepPixelGrid) -> Result<HardMask> {
        self.check_grid(grid)?;
        let mut d = vec![0.0; self.k];
        let labels = (0..grid.pixels())
            .map(|p| {
                self.sq_distances(grid.pixel(p), &mut d);
                let mut best = 0;
                for j in 1..self.k {
                    if d[j] < d[best] {
                        best = j;
                    }
                }
                self.cluster_labels[best]
            })
            .collect();
        Ok(HardMask { res: grid.res, labels })
    }

    /// Softmin over squared centroid distances at temperature `softmin_tau`,
    /// summed per region.
    pub fn soft_region_masks(&self, grid: &DeepPixelGrid) -> Result<SoftMasks> {
        self.check_grid(grid)?;
        let n = grid.pixels();
        let nr = self.regions.len();
        let mut data = vec![0.0; nr * n];
        let mut d = vec![0.0; self.k];
        for p in 0..n {
            self.sq_distances(grid.pixel(p), &mut d);
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            let mut total = 0.0;
            for v in d.iter_mut() {
                *v = (-(*v - min) / self.softmin_tau).exp();
                total += *v;
            }
            for (j, v) in d.iter().enumerate() {
                data[self.cluster_labels[j] * n + p] += v / total;
            }
        }
        Ok(SoftMasks { res: grid.res, regions: nr, data })
    }

    pub fn assign_from_activations(&self, acts: &ActivationStack) -> Result<HardMask> {
        self.assign_regions(&build_feature_stack(acts, &self.standardization)?)
    }

    pub fn soft_from_activations(&self, acts: &ActivationStack) -> Result<SoftMasks> {
        self.soft_region_masks(&build_feature_stack(acts, &self.standardization)?)
    }

    /// Labels in the JSON form `{"0": "disc", ...}`.
    pub fn labeling(&self) -> BTreeMap<String, String> {
        self.cluster_labels
            .iter()
            .enumerate()
            .map(|(j, &r)| (j.to_string(), self.regions[r].clone()))
            .collect()
    }
}

/// Gathers pixels from `grids` (optionally a seeded subsample), collapses
/// exact duplicates into weights, and clusters them with Ward linkage. The
/// returned labels cover every pixel of every grid: clustered pixels keep
/// their Ward cluster, the rest take the nearest centroid.
pub fn fit_clusters(grids: &[DeepPixelGrid], k: usize, subsample: Option<(usize, u64)>) -> Result<ClusterFit> {
    let first = grids.first().ok_or_else(|| Error::input("no grids to cluster"))?;
    let c = first.channels;
    if grids.iter().any(|g| g.channels != c) {
        return Err(Error::shape("grids disagree on channel count"));
    }
    let offsets: Vec<usize> = grids
        .iter()
        .scan(0, |acc, g| {
            let o = *acc;
            *acc += g.pixels();
            Some(o)
        })
        .collect();
    let total: usize = grids.iter().map(|g| g.pixels()).sum();
    let locate = |i: usize| {
        let g = offsets.partition_point(|&o| o <= i) - 1;
        (g, i - offsets[g])
    };
    let chosen: Vec<usize> = match subsample {
        Some((m, seed)) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, total, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };

    let mut unique: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut point_of = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let (g, p) = locate(i);
        let px = grids[g].pixel(p);
        let key: Vec<u64> = px.iter().map(|v| v.to_bits()).collect();
        let next = weights.len();
        let u = *unique.entry(key).or_insert(next);
        if u == next {
            points.extend_from_slice(px);
            weights.push(0.0);
        }
        weights[u] += 1.0;
        point_of.push(u);
    }
    if k > weights.len() {
        return Err(Error::input(format!(
            "k = {k} exceeds the {} distinct points",
            weights.len()
        )));
    }
    let clustering = ward::fit_points(&points, c, &weights, k)?;

    let mut labels: Vec<Vec<usize>> = grids.iter().map(|g| vec![usize::MAX; g.pixels()]).collect();
    for (&i, &u) in chosen.iter().zip(&point_of) {
        let (g, p) = locate(i);
        labels[g][p] = clustering.labels[u];
    }
    for (g, grid) in grids.iter().enumerate() {
        for p in 0..grid.pixels() {
            if labels[g][p] == usize::MAX {
                labels[g][p] = nearest(&clustering.centroids, c, grid.pixel(p));
            }
        }
    }
    Ok(ClusterFit {
        clustering,
        sampled: chosen.into_iter().map(locate).collect(),
        labels,
    })
}

fn nearest(centroids: &[f64], c: usize, px: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, cent) in centroids.chunks(c).enumerate() {
        let d: f64 = px.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[derive(Debug, Clone)]
pub struct ClusterFit {
    pub clustering: Clustering,
    /// `(grid, pixel)` of every clustered sample.
    pub sampled: Vec<(usize, usize)>,
    /// Cluster of every pixel of every grid.
    pub labels: Vec<Vec<usize>>,
}

/// Merges clusters into regions. `labeling[j]` names the region of cluster
/// `j`; regions are ordered by `region_order` when given, otherwise by first
/// appearance.
pub fn label_clusters(
    clustering: &Clustering,
    labeling: &BTreeMap<usize, String>,
    region_order: Option<&[String]>,
    standardization: Standardization,
    softmin_tau: f64,
) -> Result<RegionModel> {
    if !(softmin_tau > 0.0) {
        return Err(Error::config("softmin temperature must be positive"));
    }
    let mut regions: Vec<String> = region_order.map(|r| r.to_vec()).unwrap_or_default();
    let mut cluster_labels = Vec::with_capacity(clustering.k);
    for j in 0..clustering.k {
        let name = labeling
            .get(&j)
            .ok_or_else(|| Error::config(format!("cluster {j} has no region label")))?;
        let idx = match regions.iter().position(|r| r == name) {
            Some(i) => i,
            None if region_order.is_none() => {
                regions.push(name.clone());
                regions.len() - 1
            }
            None => return Err(Error::config(format!("label `{name}` is not a known region"))),
        };
        cluster_labels.push(idx);
    }
    for (i, r) in regions.iter().enumerate() {
        if !cluster_labels.contains(&i) {
            return Err(Error::config(format!("region `{r}` has no cluster")));
        }
    }
    // Checkpoints store f32.
    let mut centroids = clustering.centroids.clone();
    round_f32(&mut centroids);
    let mut standardization = standardization;
    round_f32(&mut standardization.mean);
    round_f32(&mut standardization.std);
    Ok(RegionModel {
        k: clustering.k,
        channels: clustering.dim,
        centroids,
        cluster_labels,
        regions,
        standardization,
        softmin_tau,
    })
}

/// Parses a labeling config of the form `{"0": "disc", "1": "disc", ...}`.
pub fn parse_labeling(json: &str) -> Result<BTreeMap<usize, String>> {
    let raw: BTreeMap<String, String> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|k| (k, v))
                .map_err(|_| Error::config(format!("cluster key `{k}` is not an integer")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub num_images: usize,
    pub k: usize,
    /// Pixels drawn for Ward clustering; `None` clusters every pixel.
    pub sample_points: Option<usize>,
    pub seed: u64,
    pub truncation_psi: f64,
    pub softmin_tau: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            num_images: 32,
            k: 6,
            sample_points: Some(4096),
            seed: 0,
            truncation_psi: 0.7,
            softmin_tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Labeling {
    /// Majority overlap with the generator's oracle masks.
    Auto,
    Manual(BTreeMap<usize, String>),
}

pub fn toy_region_names() -> Vec<String> {
    SceneRegion::ALL.iter().map(|r| r.name().to_string()).collect()
}

/// Fits a region model on freshly sampled images of `generator`.
pub fn fit_region_model(generator: &ToyGenerator, config: &SegmentConfig, labeling: &Labeling) -> Result<RegionModel> {
    if config.num_images == 0 {
        return Err(Error::config("num_images must be positive"));
    }
    let sampler = SamplerConfig::new(config.seed).with_psi(config.truncation_psi);
    let codes: Vec<_> = sample_z(&sampler, config.num_images)?
        .iter()
        .map(|z| generator.map_to_style(z, config.truncation_psi))
        .collect::<Result<_>>()?;
    let raw: Vec<DeepPixelGrid> = codes
        .iter()
        .map(|s| raw_feature_stack(&generator.activations(s)?))
        .collect::<Result<_>>()?;
    let standardization = Standardization::fit(&raw)?;
    let grids: Vec<DeepPixelGrid> = raw.iter().map(|g| standardization.apply(g)).collect::<Result<_>>()?;
    let fit = fit_clusters(
        &grids,
        config.k,
        config.sample_points.map(|m| (m, config.seed ^ 0xc105_7e45)),
    )?;

    match labeling {
        Labeling::Manual(map) => label_clusters(&fit.clustering, map, None, standardization, config.softmin_tau),
        Labeling::Auto => {
            let oracle: Vec<[Vec<bool>; 3]> = codes
                .iter()
                .map(|s| generator.oracle_masks(s))
                .collect::<Result<_>>()?;
            let mut votes = vec![[0usize; 3]; config.k];
            for &(g, p) in &fit.sampled {
                let region = (0..3).find(|&r| oracle[g][r][p]).unwrap();
                votes[fit.labels[g][p]][region] += 1;
            }
            let names = toy_region_names();
            let map: BTreeMap<usize, String> = votes
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let mut best = 0;
                    for r in 1..3 {
                        if v[r] > v[best] {
                            best = r;
                        }
                    }
                    (j, names[best].clone())
                })
                .collect();
            label_clusters(&fit.clustering, &map, Some(&names), standardization, config.softmin_tau)
        }
    }
}

/// Fraction of pixels whose assigned region matches the generator's oracle.
pub fn oracle_agreement(
    generator: &ToyGenerator,
    model: &RegionModel,
    codes: &[crate::style_space::StyleCode],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in codes {
        let mask = model.assign_from_activations(&generator.activations(s)?)?;
        let oracle = HardMask::from_oracle(&generator.oracle_masks(s)?, &model.regions)?;
        hits += mask.labels.iter().zip(&oracle.labels).filter(|(a, b)| a == b).count();
        total += mask.labels.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Channel-by-region share of squared activation mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub regions: usize,
    pub channels: usize,
    /// `regions x channels`, row-major.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.channels + c]
    }
}

/// Correlation matrix from unstandardized, upsampled activation grids and
/// matching hard masks.
pub fn correlation_from_grids(grids: &[DeepPixelGrid], masks: &[HardMask], regions: usize) -> Result<CorrelationMatrix> {
    if regions == 0 {
        return Err(Error::input("correlation matrix needs at least one region"));
    }
    if grids.is_empty() || grids.len() != masks.len() {
        return Err(Error::shape("need one mask per activation grid"));
    }
    let c = grids[0].channels;
    let mut raw = vec![0.0; regions * c];
    let mut pixels = 0.0;
    for (g, m) in grids.iter().zip(masks) {
        if g.channels != c || g.res != m.res || m.labels.len() != g.pixels() {
            return Err(Error::shape("mask resolution does not match the activations"));
        }
        for p in 0..g.pixels() {
            let k = m.labels[p];
            if k >= regions {
                return Err(Error::input(format!("mask label {k} out of range")));
            }
            let row = &mut raw[k * c..(k + 1) * c];
            for (r, a) in row.iter_mut().zip(g.pixel(p)) {
                *r += a * a;
            }
        }
        pixels += g.pixels() as f64;
    }
    Ok(normalize_mass(raw, pixels, regions, c))
}

fn normalize_mass(mut raw: Vec<f64>, pixels: f64, regions: usize, c: usize) -> CorrelationMatrix {
    for v in raw.iter_mut() {
        *v /= pixels;
    }
    let mut values = raw.clone();
    for ch in 0..c {
        let mass: f64 = (0..regions).map(|k| raw[k * c + ch]).sum();
        for k in 0..regions {
            values[k * c + ch] = if mass < 1e-12 {
                1.0 / regions as f64
            } else {
                raw[k * c + ch] / mass
            };
        }
    }
    CorrelationMatrix { regions, channels: c, values }
}

/// Same as [`correlation_from_grids`] over the raw feature stacks of `acts`,
/// without materializing the stacks.
pub fn correlation_matrix(acts: &[ActivationStack], masks: &[HardMask], regions: usize) -> Result<CorrelationMatrix> {
    if regions == 0 {
        return Err(Error::input("correlation matrix needs at least one region"));
    }
    if acts.is_empty() || acts.len() != masks.len() {
        return Err(Error::shape("need one mask per activation stack"));
    }
    let c: usize = acts[0].layers.iter().map(|l| l.channels).sum();
    let res = acts[0].layers.iter().map(|l| l.res).max().unwrap_or(0);
    let mut raw = vec![0.0; regions * c];
    let mut plane = vec![0.0; res * res];
    for (stack, m) in acts.iter().zip(masks) {
        let stack_c: usize = stack.layers.iter().map(|l| l.channels).sum();
        if stack_c != c || m.res != res || m.labels.len() != res * res {
            return Err(Error::shape("mask resolution does not match the activations"));
        }
        if let Some(bad) = m.labels.iter().find(|&&k| k >= regions) {
            return Err(Error::input(format!("mask label {bad} out of range")));
        }
        let mut offset = 0;
        let mut acc = vec![0.0; regions];
        for layer in &stack.layers {
            let up = Bilinear::new(layer.res, res);
            for ch in 0..layer.channels {
                up.apply_into(layer.channel(ch), &mut plane);
                acc.fill(0.0);
                for (v, &k) in plane.iter().zip(&m.labels) {
                    acc[k] += v * v;
                }
                for (k, a) in acc.iter().enumerate() {
                    raw[k * c + offset + ch] += a;
                }
            }
            offset += layer.channels;
        }
    }
    Ok(normalize_mass(raw, (acts.len() * res * res) as f64, regions, c))
}

/// `w(c) = 2 max(M_R(c), 0.5) - 1` over all style channels, where `M_R` sums
/// the rows of the given regions. tRGB channels get weight 0.
pub fn region_weights(m: &CorrelationMatrix, regions: &[usize], layout: &LayerLayout) -> Result<Vec<f64>> {
    if let Some(&bad) = regions.iter().find(|&&r| r >= m.regions) {
        return Err(Error::input(format!("unknown region index {bad}")));
    }
    if m.channels != layout.feature_channels() {
        return Err(Error::shape("correlation matrix does not match the layout's feature channels"));
    }
    let mut out = Vec::with_capacity(layout.total_channels());
    let mut feature = 0;
    for (&w, &trgb) in layout.widths.iter().zip(&layout.trgb) {
        for _ in 0..w {
            if trgb {
                out.push(0.0);
            } else {
                let share: f64 = regions.iter().map(|&r| m.get(r, feature)).sum();
                out.push(2.0 * share.max(0.5) - 1.0);
                feature += 1;
            }
        }
    }
    Ok(out)
}
