//! Differentiable soft masks straight from activations.
//!
//! The softmin over squared distances only depends on `2 x . mu_j - |mu_j|^2`
//! because `|x|^2` is shared by every cluster. That term is linear in the
//! activations, so each layer is projected onto the centroids at its native
//! resolution and only the `k` projections are upsampled.

use super::{Bilinear, HardMask, RegionModel, SoftMasks};
use crate::generator::ActivationStack;

#[derive(Debug, Clone)]
struct LayerProjection {
    res: usize,
    channels: usize,
    up: Bilinear,
    /// `k x channels`: `mu_jc / sigma_c`.
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MaskProjector {
    k: usize,
    regions: usize,
    cluster_labels: Vec<usize>,
    layers: Vec<LayerProjection>,
    bias: Vec<f64>,
    tau: f64,
    out_res: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct MaskCache {
    /// Pixel-major cluster probabilities.
    probs: Vec<f64>,
}

impl MaskProjector {
    /// `shapes` lists `(resolution, channels)` per feature layer.
    pub fn new(model: &RegionModel, shapes: &[(usize, usize)]) -> Self {
        let out_res = shapes.iter().map(|s| s.0).max().unwrap_or(0);
        let c = model.channels;
        let std = &model.standardization;
        let mut bias = vec![0.0; model.k];
        for (j, b) in bias.iter_mut().enumerate() {
            let mu = &model.centroids[j * c..(j + 1) * c];
            let shift: f64 = (0..c).map(|ch| std.mean[ch] * mu[ch] / std.std[ch]).sum();
            let norm: f64 = mu.iter().map(|v| v * v).sum();
            *b = -2.0 * shift - norm;
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        for &(res, channels) in shapes {
            let mut weights = vec![0.0; model.k * channels];
            for j in 0..model.k {
                for ch in 0..channels {
                    weights[j * channels + ch] = model.centroids[j * c + offset + ch] / std.std[offset + ch];
                }
            }
            layers.push(LayerProjection {
                res,
                channels,
                up: Bilinear::new(res, out_res),
                weights,
            });
            offset += channels;
        }
        MaskProjector {
            k: model.k,
            regions: model.regions.len(),
            cluster_labels: model.cluster_labels.clone(),
            layers,
            bias,
            tau: model.softmin_tau,
            out_res,
        }
    }

    /// Cluster-major logits `2 x . mu_j - |mu_j|^2` (before the temperature).
    fn scores(&self, acts: &ActivationStack) -> Vec<f64> {
        let n = self.out_res * self.out_res;
        let mut scores: Vec<f64> = self.bias.iter().flat_map(|b| std::iter::repeat_n(*b, n)).collect();
        let mut proj = Vec::new();
        for (layer, fm) in self.layers.iter().zip(&acts.layers) {
            debug_assert_eq!(fm.res, layer.res);
            let m = layer.res * layer.res;
            for j in 0..self.k {
                proj.clear();
                proj.resize(m, 0.0);
                for ch in 0..layer.channels {
                    let w = layer.weights[j * layer.channels + ch];
                    for (p, a) in proj.iter_mut().zip(fm.channel(ch)) {
                        *p += w * a;
                    }
                }
                layer.up.add_scaled_into(&proj, 2.0, &mut scores[j * n..(j + 1) * n]);
            }
        }
        scores
    }

    pub fn forward(&self, acts: &ActivationStack) -> (SoftMasks, MaskCache) {
        let n = self.out_res * self.out_res;
        let scores = self.scores(acts);
        let mut probs = vec![0.0; n * self.k];
        let mut data = vec![0.0; self.regions * n];
        for p in 0..n {
            let max = (0..self.k).map(|j| scores[j * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let row = &mut probs[p * self.k..(p + 1) * self.k];
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((scores[j * n + p] - max) / self.tau).exp();
                total += *v;
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v /= total;
                data[self.cluster_labels[j] * n + p] += *v;
            }
        }
        (
            SoftMasks {
                res: self.out_res,
                regions: self.regions,
                data,
            },
            MaskCache { probs },
        )
    }

    /// Nearest-centroid regions; equal to `RegionModel::assign_regions` up to
    /// rounding in exact ties.
    pub fn hard(&self, acts: &ActivationStack) -> HardMask {
        let n = self.out_res * self.out_res;
        let scores = self.scores(acts);
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for j in 1..self.k {
                    if scores[j * n + p] > scores[best * n + p] {
                        best = j;
                    }
                }
                self.cluster_labels[best]
            })
            .collect();
        HardMask { res: self.out_res, labels }
    }

    /// The hard mask implied by a forward pass: the most probable cluster.
    pub fn hard_from_cache(&self, cache: &MaskCache) -> HardMask {
        let labels = cache
            .probs
            .chunks(self.k)
            .map(|row| {
                let mut best = 0;
                for j in 1..self.k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                self.cluster_labels[best]
            })
            .collect();
        HardMask { res: self.out_res, labels }
    }

    /// Maps region-major mask gradients to per-layer, channel-major
    /// activation gradients.
    pub fn backward(&self, cache: &MaskCache, d_masks: &[f64]) -> Vec<Vec<f64>> {
        let n = self.out_res * self.out_res;
        let mut dscore = vec![0.0; self.k * n];
        for p in 0..n {
            let probs = &cache.probs[p * self.k..(p + 1) * self.k];
            let mut dot = 0.0;
            for (j, q) in probs.iter().enumerate() {
                dot += q * d_masks[self.cluster_labels[j] * n + p];
            }
            for (j, q) in probs.iter().enumerate() {
                let dp = d_masks[self.cluster_labels[j] * n + p];
                dscore[j * n + p] = 2.0 * q * (dp - dot) / self.tau;
            }
        }
        self.layers
            .iter()
            .map(|layer| {
                let m = layer.res * layer.res;
                let mut d = vec![0.0; layer.channels * m];
                for j in 0..self.k {
                    let dproj = layer.up.transpose(&dscore[j * n..(j + 1) * n]);
                    for ch in 0..layer.channels {
                        let w = layer.weights[j * layer.channels + ch];
                        for (dv, g) in d[ch * m..(ch + 1) * m].iter_mut().zip(&dproj) {
                            *dv += w * g;
                        }
                    }
                }
                d
            })
            .collect()
    }
}
