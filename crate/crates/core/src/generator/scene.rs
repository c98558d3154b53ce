//! Analytic decode from a flat style code to scene parameters.

use serde::{Deserialize, Serialize};

use super::{GeneratorWeights, GeometryRole, HiddenAssignment, SceneRegion};

/// Number of feature (non-tRGB) channels; each carries an amplitude.
pub(crate) const AMP_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub disc_center: [f64; 2],
    pub disc_radius: f64,
    pub disc_color: [f64; 3],
    pub stripe_y: f64,
    pub stripe_height: f64,
    pub stripe_color: [f64; 3],
    pub background_color_top: [f64; 3],
    pub background_color_bottom: [f64; 3],
}

/// Decoded scene including pre-sigmoid colors and per-channel amplitudes.
#[derive(Debug, Clone)]
pub(crate) struct Scene {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub sy: f64,
    pub sh: f64,
    /// Pre-sigmoid colors: disc, stripe, background top, background bottom.
    pub colors: [[f64; 3]; 4],
    /// `1 + 0.25 tanh(s_c)` for every feature channel.
    pub amp: Vec<f64>,
}

/// Gradient of a scalar with respect to the fields of [`Scene`].
#[derive(Debug, Clone)]
pub(crate) struct SceneGrad {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub sy: f64,
    pub sh: f64,
    pub colors: [[f64; 3]; 4],
    pub amp: Vec<f64>,
}

impl Default for SceneGrad {
    fn default() -> Self {
        SceneGrad {
            cx: 0.0,
            cy: 0.0,
            r: 0.0,
            sy: 0.0,
            sh: 0.0,
            colors: [[0.0; 3]; 4],
            amp: vec![0.0; AMP_CHANNELS],
        }
    }
}

fn role_index(role: GeometryRole) -> usize {
    match role {
        GeometryRole::DiscX => 0,
        GeometryRole::DiscY => 1,
        GeometryRole::DiscRadius => 2,
        GeometryRole::StripeY => 3,
        GeometryRole::StripeHeight => 4,
    }
}

/// Offset, amplitude and slope of each geometry parameter as a function of
/// its pooled channel sum `u`: `offset + amp * tanh(slope * u)`.
const GEOMETRY_MAP: [(f64, f64, f64); 5] = [
    (32.0, 16.0, 1.2),
    (32.0, 16.0, 1.2),
    (12.0, 4.0, 1.0),
    (32.0, 18.0, 1.2),
    (12.0, 4.0, 1.0),
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pooled(s: &[f64], assignment: &HiddenAssignment) -> ([f64; 5], [f64; 5]) {
    let mut u = [0.0; 5];
    let mut n = [0.0f64; 5];
    for (c, &role) in assignment.geometry.iter().enumerate() {
        u[role_index(role)] += s[c];
        n[role_index(role)] += 1.0;
    }
    let mut scale = [0.0; 5];
    for i in 0..5 {
        scale[i] = 1.0 / n[i].sqrt();
        u[i] *= scale[i];
    }
    (u, scale)
}

fn color_slot(region: SceneRegion) -> usize {
    match region {
        SceneRegion::Disc => 0,
        SceneRegion::Stripe => 1,
        SceneRegion::Background => 2,
    }
}

impl Scene {
    pub fn decode(s: &[f64], assignment: &HiddenAssignment, weights: &GeneratorWeights) -> Scene {
        let (u, _) = pooled(s, assignment);
        let mut geo = [0.0; 5];
        for i in 0..5 {
            let (o, a, k) = GEOMETRY_MAP[i];
            geo[i] = o + a * (k * u[i]).tanh();
        }
        let mut colors = [[0.0; 3]; 4];
        for (slot, color) in colors.iter_mut().enumerate() {
            color.copy_from_slice(&weights.base_colors[slot * 3..slot * 3 + 3]);
        }
        for (i, &region) in assignment.appearance.iter().enumerate() {
            let t = s[i + HiddenAssignment::GEOMETRY_CHANNELS].tanh();
            let v = &weights.appearance_colors[i * 6..i * 6 + 6];
            let slot = color_slot(region);
            for ch in 0..3 {
                colors[slot][ch] += t * v[ch];
            }
            if region == SceneRegion::Background {
                for ch in 0..3 {
                    colors[3][ch] += t * v[3 + ch];
                }
            }
        }
        let amp = s[..AMP_CHANNELS].iter().map(|v| 1.0 + 0.25 * v.tanh()).collect();
        Scene {
            cx: geo[0],
            cy: geo[1],
            r: geo[2],
            sy: geo[3],
            sh: geo[4],
            colors,
            amp,
        }
    }

    pub fn params(&self) -> SceneParams {
        let rgb = |c: &[f64; 3]| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])];
        SceneParams {
            disc_center: [self.cx, self.cy],
            disc_radius: self.r,
            disc_color: rgb(&self.colors[0]),
            stripe_y: self.sy,
            stripe_height: self.sh,
            stripe_color: rgb(&self.colors[1]),
            background_color_top: rgb(&self.colors[2]),
            background_color_bottom: rgb(&self.colors[3]),
        }
    }

    /// Chain rule from scene gradients to the flat style code.
    pub fn backward(
        &self,
        s: &[f64],
        grad: &SceneGrad,
        assignment: &HiddenAssignment,
        weights: &GeneratorWeights,
    ) -> Vec<f64> {
        let mut ds = vec![0.0; s.len()];
        let (u, scale) = pooled(s, assignment);
        let dgeo = [grad.cx, grad.cy, grad.r, grad.sy, grad.sh];
        let mut du = [0.0; 5];
        for i in 0..5 {
            let (_, a, k) = GEOMETRY_MAP[i];
            let t = (k * u[i]).tanh();
            du[i] = dgeo[i] * a * k * (1.0 - t * t) * scale[i];
        }
        for (c, &role) in assignment.geometry.iter().enumerate() {
            ds[c] += du[role_index(role)];
        }
        for (i, &region) in assignment.appearance.iter().enumerate() {
            let c = i + HiddenAssignment::GEOMETRY_CHANNELS;
            let t = s[c].tanh();
            let v = &weights.appearance_colors[i * 6..i * 6 + 6];
            let slot = color_slot(region);
            let mut dt = 0.0;
            for ch in 0..3 {
                dt += grad.colors[slot][ch] * v[ch];
            }
            if region == SceneRegion::Background {
                for ch in 0..3 {
                    dt += grad.colors[3][ch] * v[3 + ch];
                }
            }
            ds[c] += dt * (1.0 - t * t);
        }
        for c in 0..AMP_CHANNELS {
            let t = s[c].tanh();
            ds[c] += grad.amp[c] * 0.25 * (1.0 - t * t);
        }
        ds
    }
}
