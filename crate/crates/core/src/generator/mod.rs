//! Deterministic procedural generator standing in for a pretrained
//! style-based GAN.
//!
//! The scene is a disc drawn over a horizontal stripe over a vertical
//! background gradient. Layers 0 and 1 of the style code place the shapes;
//! appearance channels of layers 2 to 5 tint one region each. Everything is
//! smooth in the style code and comes with an analytic backward pass.

mod render;
mod scene;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::style_space::{LatentCode, LayerLayout, StyleCode, DEFAULT_Z_DIM};

pub use render::{ActivationStack, FeatureMap, Image};
pub use scene::SceneParams;
pub(crate) use scene::Scene;

pub const IMAGE_SIZE: usize = 64;
pub const FEATURE_RESOLUTIONS: [usize; 4] = [8, 16, 32, 64];
pub const MAPPING_HIDDEN: usize = 32;
pub const MEAN_SAMPLES: usize = 10_000;

/// Ground-truth regions of the toy scene, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneRegion {
    Disc,
    Stripe,
    Background,
}

impl SceneRegion {
    pub const ALL: [SceneRegion; 3] = [SceneRegion::Disc, SceneRegion::Stripe, SceneRegion::Background];

    pub fn name(self) -> &'static str {
        match self {
            SceneRegion::Disc => "disc",
            SceneRegion::Stripe => "stripe",
            SceneRegion::Background => "background",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

/// Scene parameter driven by a group of geometry channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryRole {
    DiscX,
    DiscY,
    DiscRadius,
    StripeY,
    StripeHeight,
}

/// The seeded channel-to-role assignment. Recorded for test oracles only;
/// training never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenAssignment {
    /// Role of each channel of layers 0 and 1 (flat indices 0..16).
    pub geometry: Vec<GeometryRole>,
    /// Region tinted by each channel of layers 2 to 5 (flat indices 16..40).
    pub appearance: Vec<SceneRegion>,
}

impl HiddenAssignment {
    pub const GEOMETRY_CHANNELS: usize = 16;

    /// Flat indices of the appearance channels assigned to `region`.
    pub fn appearance_channels(&self, region: SceneRegion) -> Vec<usize> {
        self.appearance
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region)
            .map(|(i, _)| i + Self::GEOMETRY_CHANNELS)
            .collect()
    }

    pub fn region_of(&self, channel: usize) -> Option<SceneRegion> {
        channel
            .checked_sub(Self::GEOMETRY_CHANNELS)
            .and_then(|i| self.appearance.get(i).copied())
    }
}

/// Frozen weights of the generator. All values are representable as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    pub map_w1: Vec<f64>,
    pub map_b1: Vec<f64>,
    pub map_w2: Vec<f64>,
    pub map_b2: Vec<f64>,
    pub affine_w: Vec<f64>,
    pub affine_b: Vec<f64>,
    /// Pre-sigmoid base colors: disc, stripe, background top, background bottom.
    pub base_colors: Vec<f64>,
    /// Two RGB vectors per appearance channel; the second is used only by the
    /// bottom of the background gradient.
    pub appearance_colors: Vec<f64>,
}

impl GeneratorWeights {
    pub fn named_tensors(&self, z_dim: usize, channels: usize) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("map_w1", vec![MAPPING_HIDDEN, z_dim], &self.map_w1[..]),
            ("map_b1", vec![MAPPING_HIDDEN], &self.map_b1[..]),
            ("map_w2", vec![z_dim, MAPPING_HIDDEN], &self.map_w2[..]),
            ("map_b2", vec![z_dim], &self.map_b2[..]),
            ("affine_w", vec![channels, z_dim], &self.affine_w[..]),
            ("affine_b", vec![channels], &self.affine_b[..]),
            ("base_colors", vec![4, 3], &self.base_colors[..]),
            (
                "appearance_colors",
                vec![self.appearance_colors.len() / 6, 6],
                &self.appearance_colors[..],
            ),
        ]
    }
}

/// Metadata persisted in the generator manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub layout: LayerLayout,
    pub seed: u64,
    pub z_dim: usize,
    pub w_mean: Vec<f64>,
    pub test_oracle: HiddenAssignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    layout: LayerLayout,
    seed: u64,
    z_dim: usize,
    w_mean: Vec<f64>,
    weights: GeneratorWeights,
    assignment: HiddenAssignment,
}

/// `(resolution, channels)` of each feature layer, in activation order.
pub(crate) fn feature_shapes(layout: &LayerLayout) -> Vec<(usize, usize)> {
    layout
        .widths
        .iter()
        .zip(&layout.trgb)
        .filter(|(_, t)| !**t)
        .zip(FEATURE_RESOLUTIONS)
        .map(|((w, _), r)| (r, *w))
        .collect()
}

pub(crate) fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn shuffled_roles<T: Copy>(rng: &mut ChaCha8Rng, counts: &[(T, usize)]) -> Vec<T> {
    let mut v: Vec<T> = counts
        .iter()
        .flat_map(|&(t, n)| std::iter::repeat_n(t, n))
        .collect();
    v.shuffle(rng);
    v
}

impl ToyGenerator {
    /// Builds the generator deterministically from `seed`.
    pub fn build(seed: u64) -> Self {
        let layout = LayerLayout::toy();
        let z_dim = DEFAULT_Z_DIM;
        let channels = layout.total_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut geometry = shuffled_roles(
            &mut rng,
            &[
                (GeometryRole::DiscX, 3),
                (GeometryRole::DiscY, 3),
                (GeometryRole::DiscRadius, 2),
            ],
        );
        geometry.extend(shuffled_roles(
            &mut rng,
            &[(GeometryRole::StripeY, 4), (GeometryRole::StripeHeight, 4)],
        ));
        let per_layer = [[3, 3, 2], [2, 3, 3], [2, 1, 1], [1, 1, 2]];
        let mut appearance = Vec::new();
        for counts in per_layer {
            appearance.extend(shuffled_roles(
                &mut rng,
                &[
                    (SceneRegion::Disc, counts[0]),
                    (SceneRegion::Stripe, counts[1]),
                    (SceneRegion::Background, counts[2]),
                ],
            ));
        }
        let assignment = HiddenAssignment { geometry, appearance };

        let mut weights = GeneratorWeights {
            map_w1: gaussian(&mut rng, MAPPING_HIDDEN * z_dim, (2.0 / z_dim as f64).sqrt()),
            map_b1: gaussian(&mut rng, MAPPING_HIDDEN, 0.1),
            map_w2: gaussian(&mut rng, z_dim * MAPPING_HIDDEN, (1.0 / MAPPING_HIDDEN as f64).sqrt()),
            map_b2: gaussian(&mut rng, z_dim, 0.1),
            affine_w: gaussian(&mut rng, channels * z_dim, (1.0 / z_dim as f64).sqrt()),
            affine_b: vec![0.0; channels],
            base_colors: gaussian(&mut rng, 12, 1.2),
            appearance_colors: gaussian(&mut rng, (channels - HiddenAssignment::GEOMETRY_CHANNELS) * 6, 0.9),
        };
        round_f32(&mut weights.map_w1);
        round_f32(&mut weights.map_b1);
        round_f32(&mut weights.map_w2);
        round_f32(&mut weights.map_b2);

        let mut gen = ToyGenerator {
            layout,
            seed,
            z_dim,
            w_mean: vec![0.0; z_dim],
            weights,
            assignment,
        };

        // Mean intermediate code and per-channel affine normalization, both
        // estimated from the same seeded sample.
        let mut zrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_3ea7);
        let ws: Vec<Vec<f64>> = (0..MEAN_SAMPLES)
            .map(|_| {
                let z: Vec<f64> = (0..z_dim).map(|_| StandardNormal.sample(&mut zrng)).collect();
                gen.intermediate_untruncated(&z)
            })
            .collect();
        let mut w_mean = vec![0.0; z_dim];
        for w in &ws {
            for (m, v) in w_mean.iter_mut().zip(w) {
                *m += v;
            }
        }
        for m in &mut w_mean {
            *m /= MEAN_SAMPLES as f64;
        }
        round_f32(&mut w_mean);
        gen.w_mean = w_mean;

        let mut sum = vec![0.0; channels];
        let mut sum_sq = vec![0.0; channels];
        for w in &ws {
            for c in 0..channels {
                let row = &gen.weights.affine_w[c * z_dim..(c + 1) * z_dim];
                let v: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        for c in 0..channels {
            let mean = sum[c] / MEAN_SAMPLES as f64;
            let std = (sum_sq[c] / MEAN_SAMPLES as f64 - mean * mean).max(1e-12).sqrt();
            for a in &mut gen.weights.affine_w[c * z_dim..(c + 1) * z_dim] {
                *a /= std;
            }
            gen.weights.affine_b[c] = -mean / std;
        }
        round_f32(&mut gen.weights.affine_w);
        round_f32(&mut gen.weights.affine_b);
        round_f32(&mut gen.weights.base_colors);
        round_f32(&mut gen.weights.appearance_colors);
        gen
    }

    pub fn from_parts(meta: GeneratorMeta, weights: GeneratorWeights) -> Result<Self> {
        let layout = meta.layout;
        layout.validate()?;
        if layout != LayerLayout::toy() {
            return Err(Error::shape(format!(
                "the toy generator only supports layout `toy-6`, got `{}`",
                layout.name
            )));
        }
        let channels = layout.total_channels();
        let z = meta.z_dim;
        let expect = [
            ("map_w1", weights.map_w1.len(), MAPPING_HIDDEN * z),
            ("map_b1", weights.map_b1.len(), MAPPING_HIDDEN),
            ("map_w2", weights.map_w2.len(), z * MAPPING_HIDDEN),
            ("map_b2", weights.map_b2.len(), z),
            ("affine_w", weights.affine_w.len(), channels * z),
            ("affine_b", weights.affine_b.len(), channels),
            ("base_colors", weights.base_colors.len(), 12),
            ("appearance_colors", weights.appearance_colors.len(), (channels - 16) * 6),
            ("w_mean", meta.w_mean.len(), z),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::shape(format!("generator tensor `{name}` has {got} values, expected {want}")));
            }
        }
        if meta.test_oracle.geometry.len() != 16 || meta.test_oracle.appearance.len() != channels - 16 {
            return Err(Error::shape("hidden assignment does not match the toy layout"));
        }
        Ok(ToyGenerator {
            layout,
            seed: meta.seed,
            z_dim: z,
            w_mean: meta.w_mean,
            weights,
            assignment: meta.test_oracle,
        })
    }

    pub fn meta(&self) -> GeneratorMeta {
        GeneratorMeta {
            layout: self.layout.clone(),
            seed: self.seed,
            z_dim: self.z_dim,
            w_mean: self.w_mean.clone(),
            test_oracle: self.assignment.clone(),
        }
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn w_mean(&self) -> &[f64] {
        &self.w_mean
    }

    pub fn weights(&self) -> &GeneratorWeights {
        &self.weights
    }

    /// Hidden channel assignment, for test oracles.
    pub fn test_oracle(&self) -> &HiddenAssignment {
        &self.assignment
    }

    /// SHA-256 over the little-endian `f32` encoding of all weights and the
    /// mean code.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, data) in self.weights.named_tensors(self.z_dim, self.layout.total_channels()) {
            h.update(name.as_bytes());
            for v in data {
                h.update((*v as f32).to_le_bytes());
            }
        }
        for v in &self.w_mean {
            h.update((*v as f32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn intermediate_untruncated(&self, z: &[f64]) -> Vec<f64> {
        let zd = self.z_dim;
        let hidden: Vec<f64> = (0..MAPPING_HIDDEN)
            .map(|i| {
                let row = &self.weights.map_w1[i * zd..(i + 1) * zd];
                leaky(row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.weights.map_b1[i])
            })
            .collect();
        (0..zd)
            .map(|i| {
                let row = &self.weights.map_w2[i * MAPPING_HIDDEN..(i + 1) * MAPPING_HIDDEN];
                row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + self.weights.map_b2[i]
            })
            .collect()
    }

    /// The truncated intermediate code `w_mean + psi * (w - w_mean)`.
    pub fn intermediate(&self, z: &LatentCode, psi: f64) -> Result<Vec<f64>> {
        if z.values.len() != self.z_dim {
            return Err(Error::shape(format!(
                "latent has dimension {}, generator expects {}",
                z.values.len(),
                self.z_dim
            )));
        }
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("latent has non-finite entries"));
        }
        let w = self.intermediate_untruncated(&z.values);
        Ok(w.iter()
            .zip(&self.w_mean)
            .map(|(w, m)| m + psi * (w - m))
            .collect())
    }

    pub fn map_to_style(&self, z: &LatentCode, psi: f64) -> Result<StyleCode> {
        let w = self.intermediate(z, psi)?;
        let zd = self.z_dim;
        let flat: Vec<f64> = (0..self.layout.total_channels())
            .map(|c| {
                let row = &self.weights.affine_w[c * zd..(c + 1) * zd];
                row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + self.weights.affine_b[c]
            })
            .collect();
        StyleCode::unflatten(&flat, &self.layout)
    }

    fn flat_checked(&self, s: &StyleCode) -> Result<Vec<f64>> {
        if s.layout != self.layout.name {
            return Err(Error::shape(format!(
                "code uses layout `{}`, generator uses `{}`",
                s.layout, self.layout.name
            )));
        }
        s.check(&self.layout)?;
        Ok(s.flatten())
    }

    pub fn synthesize(&self, s: &StyleCode) -> Result<Image> {
        let flat = self.flat_checked(s)?;
        Ok(self.image_flat(&flat))
    }

    pub fn activations(&self, s: &StyleCode) -> Result<ActivationStack> {
        let flat = self.flat_checked(s)?;
        Ok(self.activations_flat(&flat))
    }

    pub fn scene_params(&self, s: &StyleCode) -> Result<SceneParams> {
        let flat = self.flat_checked(s)?;
        Ok(self.scene(&flat).params())
    }

    /// Binary disc, stripe and background masks, each `64 * 64` row-major.
    pub fn oracle_masks(&self, s: &StyleCode) -> Result<[Vec<bool>; 3]> {
        let flat = self.flat_checked(s)?;
        Ok(self.oracle_masks_flat(&flat))
    }

    pub(crate) fn scene(&self, s: &[f64]) -> Scene {
        Scene::decode(s, &self.assignment, &self.weights)
    }

    pub(crate) fn image_flat(&self, s: &[f64]) -> Image {
        render::render_image(&self.scene(s))
    }

    pub(crate) fn activations_flat(&self, s: &[f64]) -> ActivationStack {
        render::render_activations(&self.scene(s), &self.assignment)
    }

    pub(crate) fn oracle_masks_flat(&self, s: &[f64]) -> [Vec<bool>; 3] {
        render::oracle_masks(&self.scene(s))
    }

    /// Gradient of a scalar with respect to the flat style code, given its
    /// gradients with respect to the image and/or the activations.
    pub(crate) fn backward_flat(
        &self,
        s: &[f64],
        d_image: Option<&[f64]>,
        d_acts: Option<&[Vec<f64>]>,
    ) -> Vec<f64> {
        let scene = self.scene(s);
        let mut grad = scene::SceneGrad::default();
        if let Some(di) = d_image {
            render::image_backward(&scene, di, &mut grad);
        }
        if let Some(da) = d_acts {
            render::activations_backward(&scene, &self.assignment, da, &mut grad);
        }
        scene.backward(s, &grad, &self.assignment, &self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style_space::{sample_z, SamplerConfig};

    fn gen() -> ToyGenerator {
        ToyGenerator::build(3)
    }

    fn codes(g: &ToyGenerator, seed: u64, n: usize) -> Vec<StyleCode> {
        sample_z(&SamplerConfig::new(seed), n)
            .unwrap()
            .iter()
            .map(|z| g.map_to_style(z, 0.7).unwrap())
            .collect()
    }

    #[test]
    fn build_is_deterministic() {
        let a = ToyGenerator::build(11);
        let b = ToyGenerator::build(11);
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), ToyGenerator::build(12).checksum());
    }

    #[test]
    fn weights_are_f32_representable() {
        let g = gen();
        for (_, _, data) in g.weights.named_tensors(g.z_dim, 40) {
            assert!(data.iter().all(|&v| v as f32 as f64 == v));
        }
    }

    #[test]
    fn affines_are_roughly_standardized() {
        let g = gen();
        let zs = sample_z(&SamplerConfig::new(99), 2000).unwrap();
        let flat: Vec<Vec<f64>> = zs.iter().map(|z| g.map_to_style(z, 1.0).unwrap().flatten()).collect();
        for c in 0..40 {
            let mean = flat.iter().map(|s| s[c]).sum::<f64>() / 2000.0;
            let var = flat.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / 2000.0;
            assert!(mean.abs() < 0.15, "channel {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.15, "channel {c} std {}", var.sqrt());
        }
    }

    #[test]
    fn psi_zero_collapses_to_mean_style() {
        let g = gen();
        let zs = sample_z(&SamplerConfig::new(1), 3).unwrap();
        let a = g.map_to_style(&zs[0], 0.0).unwrap();
        for z in &zs[1..] {
            assert_eq!(g.map_to_style(z, 0.0).unwrap(), a);
        }
        assert_ne!(g.map_to_style(&zs[0], 1.0).unwrap(), g.map_to_style(&zs[0], 0.7).unwrap());
    }

    #[test]
    fn truncation_is_linear_in_the_intermediate_code() {
        let g = gen();
        let z = &sample_z(&SamplerConfig::new(5), 1).unwrap()[0];
        let half = g.intermediate(z, 0.5).unwrap();
        let full = g.intermediate(z, 1.0).unwrap();
        for ((h, f), m) in half.iter().zip(&full).zip(g.w_mean()) {
            assert!((h - (m + f) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_dimension_is_checked() {
        let g = gen();
        let z = LatentCode { values: vec![0.0; 3] };
        assert!(matches!(g.map_to_style(&z, 0.7), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let g = gen();
        let layout = LayerLayout::new("other", vec![8, 8], vec![false, false]).unwrap();
        let s = StyleCode::zeros(&layout);
        assert!(matches!(g.synthesize(&s), Err(Error::Shape(_))));
    }

    #[test]
    fn synthesize_is_deterministic_and_in_range() {
        let g = gen();
        for s in codes(&g, 2, 5) {
            let a = g.synthesize(&s).unwrap();
            let b = g.synthesize(&s).unwrap();
            assert_eq!(a, b);
            assert!(a.data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn activation_stack_shapes() {
        let g = gen();
        let s = &codes(&g, 2, 1)[0];
        let acts = g.activations(s).unwrap();
        assert_eq!(acts.layers.len(), 4);
        for (fm, res) in acts.layers.iter().zip(FEATURE_RESOLUTIONS) {
            assert_eq!(fm.res, res);
            assert_eq!(fm.channels, 8);
            assert_eq!(fm.data.len(), 8 * res * res);
            assert!(fm.data.iter().all(|v| v.is_finite()));
        }
        assert_eq!(acts, g.activations(s).unwrap());
    }

    #[test]
    fn background_channels_do_not_touch_disc_pixels() {
        let g = gen();
        let bg = g.test_oracle().appearance_channels(SceneRegion::Background);
        for s in codes(&g, 4, 10) {
            let mut t = s.flatten();
            for &c in &bg {
                t[c] += 1.5;
            }
            let t = StyleCode::unflatten(&t, g.layout()).unwrap();
            let a = g.synthesize(&s).unwrap();
            let b = g.synthesize(&t).unwrap();
            let disc = &g.oracle_masks(&s).unwrap()[0];
            let mut checked = 0;
            for p in 0..IMAGE_SIZE * IMAGE_SIZE {
                if disc[p] {
                    checked += 1;
                    for ch in 0..3 {
                        assert!((a.data[p * 3 + ch] - b.data[p * 3 + ch]).abs() <= 1e-6);
                    }
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn geometry_depends_only_on_layers_zero_and_one() {
        let g = gen();
        let cs = codes(&g, 6, 2);
        let mut mixed = cs[1].clone();
        mixed.layers[0] = cs[0].layers[0].clone();
        mixed.layers[1] = cs[0].layers[1].clone();
        let a = g.scene_params(&cs[0]).unwrap();
        let b = g.scene_params(&mixed).unwrap();
        assert_eq!(a.disc_center, b.disc_center);
        assert_eq!(a.disc_radius, b.disc_radius);
        assert_eq!(a.stripe_y, b.stripe_y);
        assert_eq!(a.stripe_height, b.stripe_height);
        assert_eq!(g.oracle_masks(&cs[0]).unwrap(), g.oracle_masks(&mixed).unwrap());
    }

    #[test]
    fn geometry_channels_move_the_disc_monotonically() {
        let g = gen();
        let s = codes(&g, 8, 1).remove(0);
        for (c, role) in g.test_oracle().geometry.iter().enumerate() {
            let mut prev = None;
            for step in -4..=4 {
                let mut t = s.flatten();
                t[c] += step as f64 * 0.5;
                let p = g.scene_params(&StyleCode::unflatten(&t, g.layout()).unwrap()).unwrap();
                let v = match role {
                    GeometryRole::DiscX => p.disc_center[0],
                    GeometryRole::DiscY => p.disc_center[1],
                    GeometryRole::DiscRadius => p.disc_radius,
                    GeometryRole::StripeY => p.stripe_y,
                    GeometryRole::StripeHeight => p.stripe_height,
                };
                if let Some(pv) = prev {
                    assert!(v > pv, "channel {c} ({role:?}) not increasing");
                }
                prev = Some(v);
            }
        }
    }

    #[test]
    fn scene_params_are_finite_for_extreme_codes() {
        let g = gen();
        for v in [-1e6, -30.0, 0.0, 30.0, 1e6] {
            let s = StyleCode::unflatten(&[v; 40], g.layout()).unwrap();
            let p = g.scene_params(&s).unwrap();
            assert!(p.disc_radius > 0.0 && p.stripe_height > 0.0);
            assert!(p.disc_center.iter().all(|x| x.is_finite()));
            assert!(g.synthesize(&s).unwrap().data.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn oracle_masks_partition_the_image() {
        let g = gen();
        for s in codes(&g, 9, 10) {
            let m = g.oracle_masks(&s).unwrap();
            for p in 0..IMAGE_SIZE * IMAGE_SIZE {
                assert_eq!(m.iter().filter(|mask| mask[p]).count(), 1);
            }
        }
    }

    #[test]
    fn disc_area_matches_analytic_area() {
        let g = gen();
        let mut checked = 0;
        for s in codes(&g, 10, 40) {
            let p = g.scene_params(&s).unwrap();
            let [cx, cy] = p.disc_center;
            let r = p.disc_radius;
            let inside = cx - r >= 0.0 && cx + r <= 64.0 && cy - r >= 0.0 && cy + r <= 64.0;
            if r < 8.0 || !inside {
                continue;
            }
            checked += 1;
            let area = g.oracle_masks(&s).unwrap()[0].iter().filter(|&&b| b).count() as f64;
            let want = std::f64::consts::PI * r * r;
            assert!((area - want).abs() <= 0.1 * want, "area {area} vs {want}");
        }
        assert!(checked > 10);
    }

    #[test]
    fn moving_the_disc_shifts_the_mask_centroid() {
        let g = gen();
        let s = codes(&g, 12, 1).remove(0);
        let scene = g.scene(&s.flatten());
        let centroid = |sc: &Scene| {
            let m = &render::oracle_masks(sc)[0];
            let (mut sx, mut n) = (0.0, 0.0);
            for (p, &b) in m.iter().enumerate() {
                if b {
                    sx += (p % IMAGE_SIZE) as f64 + 0.5;
                    n += 1.0;
                }
            }
            sx / n
        };
        let mut moved = scene.clone();
        moved.cx += 5.0;
        let shift = centroid(&moved) - centroid(&scene);
        assert!((shift - 5.0).abs() <= 0.5, "shift {shift}");
    }

    fn fd_check(g: &ToyGenerator, s: &[f64], f: impl Fn(&[f64]) -> f64, analytic: &[f64]) {
        let h = 1e-5;
        for c in 0..s.len() {
            let mut p = s.to_vec();
            p[c] += h;
            let mut m = s.to_vec();
            m[c] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - analytic[c]).abs() / fd.abs().max(analytic[c].abs()).max(1e-6);
            assert!(err < 1e-4, "channel {c}: fd {fd} analytic {}", analytic[c]);
        }
        let _ = g;
    }

    #[test]
    fn image_pixel_gradients_match_finite_differences() {
        let g = gen();
        for (i, s) in codes(&g, 13, 3).into_iter().enumerate() {
            let flat = s.flatten();
            let scene = g.scene(&flat);
            // One pixel inside the disc edge band, one in the background.
            let edge_x = (scene.cx + scene.r + 0.4).clamp(0.5, 63.5) as usize;
            let pixels = [(scene.cy as usize).min(63) * 64 + edge_x.min(63), (i * 997 + 5) % 4096];
            for &pix in &pixels {
                for ch in 0..3 {
                    let idx = pix * 3 + ch;
                    let mut d = vec![0.0; 64 * 64 * 3];
                    d[idx] = 1.0;
                    let grad = g.backward_flat(&flat, Some(&d), None);
                    fd_check(&g, &flat, |x| g.image_flat(x).data[idx], &grad);
                }
            }
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let g = gen();
        let s = codes(&g, 14, 1).remove(0).flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acts = g.activations_flat(&s);
        let probes: Vec<Vec<f64>> = acts
            .layers
            .iter()
            .map(|fm| gaussian(&mut rng, fm.data.len(), 1.0))
            .collect();
        let f = |x: &[f64]| {
            g.activations_flat(x)
                .layers
                .iter()
                .zip(&probes)
                .map(|(fm, p)| fm.data.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let grad = g.backward_flat(&s, None, Some(&probes));
        fd_check(&g, &s, f, &grad);
    }
}
