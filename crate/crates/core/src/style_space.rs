//! Style-space data model: layer layouts, latent samples and per-layer style
//! codes.
//!
//! A [`StyleCode`] is stored per layer. Hot loops elsewhere work on the
//! flattened form; [`StyleCode::flatten`] and [`StyleCode::unflatten`] are an
//! exact bijection for any valid layout.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATION_PSI: f64 = 0.7;
pub const DEFAULT_Z_DIM: usize = 16;

/// Channel widths and tRGB flags of every generator input layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub name: String,
    pub widths: Vec<usize>,
    pub trgb: Vec<bool>,
}

impl LayerLayout {
    pub fn new(name: impl Into<String>, widths: Vec<usize>, trgb: Vec<bool>) -> Result<Self> {
        let layout = LayerLayout {
            name: name.into(),
            widths,
            trgb,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// The 6-layer layout of the toy generator: four feature layers of 8
    /// channels followed by two tRGB layers of 4.
    pub fn toy() -> Self {
        LayerLayout {
            name: "toy-6".to_string(),
            widths: vec![8, 8, 8, 8, 4, 4],
            trgb: vec![false, false, false, false, true, true],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::shape("layout must have at least one layer"));
        }
        if self.widths.len() != self.trgb.len() {
            return Err(Error::shape(format!(
                "layout `{}` has {} widths but {} tRGB flags",
                self.name,
                self.widths.len(),
                self.trgb.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::shape(format!("layout `{}` has a zero-width layer", self.name)));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    /// |S|, the total number of style channels.
    pub fn total_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Flat index range of layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let start: usize = self.widths[..l].iter().sum();
        start..start + self.widths[l]
    }

    /// Number of channels that modulate feature (non-tRGB) layers.
    pub fn feature_channels(&self) -> usize {
        self.widths
            .iter()
            .zip(&self.trgb)
            .filter(|(_, &t)| !t)
            .map(|(w, _)| w)
            .sum()
    }

    /// Whether flat channel `c` belongs to a tRGB layer.
    pub fn is_trgb_channel(&self, c: usize) -> bool {
        let mut start = 0;
        for (w, &t) in self.widths.iter().zip(&self.trgb) {
            if c < start + w {
                return t;
            }
            start += w;
        }
        false
    }
}

/// A sample from the standard Gaussian latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

/// A point in style space, stored per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub layout: String,
    pub layers: Vec<Vec<f64>>,
}

impl StyleCode {
    pub fn zeros(layout: &LayerLayout) -> Self {
        StyleCode {
            layout: layout.name.clone(),
            layers: layout.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Checks that the code conforms to `layout` and has finite entries.
    pub fn check(&self, layout: &LayerLayout) -> Result<()> {
        if self.layers.len() != layout.num_layers() {
            return Err(Error::shape(format!(
                "code has {} layers, layout `{}` has {}",
                self.layers.len(),
                layout.name,
                layout.num_layers()
            )));
        }
        for (l, (layer, &w)) in self.layers.iter().zip(&layout.widths).enumerate() {
            if layer.len() != w {
                return Err(Error::shape(format!(
                    "layer {l} has {} channels, expected {w}",
                    layer.len()
                )));
            }
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(Error::shape(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn unflatten(values: &[f64], layout: &LayerLayout) -> Result<Self> {
        if values.len() != layout.total_channels() {
            return Err(Error::shape(format!(
                "flat code has length {}, layout `{}` needs {}",
                values.len(),
                layout.name,
                layout.total_channels()
            )));
        }
        let layers = (0..layout.num_layers())
            .map(|l| values[layout.layer_range(l)].to_vec())
            .collect();
        Ok(StyleCode {
            layout: layout.name.clone(),
            layers,
        })
    }

    pub fn max_abs_diff(&self, other: &StyleCode) -> f64 {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    #[serde(default = "default_psi")]
    pub truncation_psi: f64,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
}

fn default_psi() -> f64 {
    DEFAULT_TRUNCATION_PSI
}

fn default_z_dim() -> usize {
    DEFAULT_Z_DIM
}

impl SamplerConfig {
    pub fn new(seed: u64) -> Self {
        SamplerConfig {
            seed,
            truncation_psi: DEFAULT_TRUNCATION_PSI,
            z_dim: DEFAULT_Z_DIM,
        }
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.truncation_psi = psi;
        self
    }
}

/// Draws `n` standard-normal latent codes. The result is a pure function of
/// `(seed, n, z_dim)`.
pub fn sample_z(config: &SamplerConfig, n: usize) -> Result<Vec<LatentCode>> {
    if n == 0 {
        return Err(Error::input("empty sampling request (n = 0)"));
    }
    if config.z_dim == 0 {
        return Err(Error::input("z_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok((0..n)
        .map(|_| LatentCode {
            values: (0..config.z_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect())
}

/// Maps a latent sample to style space through the generator's frozen mapping
/// network, truncation and per-layer affines.
pub fn map_to_style(
    z: &LatentCode,
    config: &SamplerConfig,
    generator: &crate::generator::ToyGenerator,
) -> Result<StyleCode> {
    generator.map_to_style(z, config.truncation_psi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_preserves_layer_order() {
        let layout = LayerLayout::new("t", vec![2, 3], vec![false, false]).unwrap();
        let s = StyleCode {
            layout: "t".into(),
            layers: vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]],
        };
        assert_eq!(s.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(StyleCode::unflatten(&s.flatten(), &layout).unwrap(), s);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let layout = LayerLayout::new("t", vec![2, 3], vec![false, false]).unwrap();
        let err = StyleCode::unflatten(&[0.0; 4], &layout).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn toy_layout_dimensions() {
        let l = LayerLayout::toy();
        assert_eq!(l.total_channels(), 40);
        assert_eq!(l.feature_channels(), 32);
        assert_eq!(l.max_width(), 8);
        assert_eq!(l.layer_range(4), 32..36);
        assert!(l.is_trgb_channel(35));
        assert!(!l.is_trgb_channel(31));
    }

    #[test]
    fn layout_validation() {
        assert!(LayerLayout::new("x", vec![], vec![]).is_err());
        assert!(LayerLayout::new("x", vec![2], vec![false, true]).is_err());
        assert!(LayerLayout::new("x", vec![0], vec![false]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_seed_dependent() {
        let a = sample_z(&SamplerConfig::new(7), 2).unwrap();
        let b = sample_z(&SamplerConfig::new(7), 2).unwrap();
        assert_eq!(a, b);
        let c = sample_z(&SamplerConfig::new(8), 1).unwrap();
        assert_ne!(a[0], c[0]);
        assert!(matches!(sample_z(&SamplerConfig::new(7), 0), Err(Error::Input(_))));
    }

    #[test]
    fn samples_are_standard_normal() {
        let zs = sample_z(&SamplerConfig::new(7), 10_000).unwrap();
        for d in 0..DEFAULT_Z_DIM {
            let mean = zs.iter().map(|z| z.values[d]).sum::<f64>() / zs.len() as f64;
            assert!(mean.abs() < 0.05, "coordinate {d} mean {mean}");
        }
    }

    #[test]
    fn check_rejects_non_finite() {
        let layout = LayerLayout::toy();
        let mut s = StyleCode::zeros(&layout);
        assert!(s.check(&layout).is_ok());
        s.layers[2][1] = f64::NAN;
        assert!(s.check(&layout).is_err());
    }

    proptest::proptest! {
        #[test]
        fn flatten_roundtrip(values in proptest::collection::vec(-10.0f64..10.0, 40)) {
            let layout = LayerLayout::toy();
            let s = StyleCode::unflatten(&values, &layout).unwrap();
            proptest::prop_assert_eq!(s.flatten(), values);
        }
    }
}
