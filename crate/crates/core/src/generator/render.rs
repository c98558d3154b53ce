//! Rasterization of a decoded scene into an image and feature maps, with the
//! matching backward passes.

use serde::{Deserialize, Serialize};

use super::scene::{Scene, SceneGrad};
use super::{HiddenAssignment, FEATURE_RESOLUTIONS, IMAGE_SIZE};

/// Width in pixels of the outward edge transition of each shape.
const EDGE_WIDTH: f64 = 1.0;
/// Share of squared activation energy given to disc, stripe and background
/// by the two coarse feature layers, at native resolution. The disc share is
/// above one half because upsampling bleeds disc energy outward.
const ENERGY_SHARE: [[f64; 3]; 2] = [[0.58, 0.21, 0.21], [0.54, 0.23, 0.23]];
const ENERGY_EPS: f64 = 1e-6;

/// An RGB image, row-major, channel-last, values in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// One feature layer, channel-major (`c * res * res + y * res + x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.res * self.res;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStack {
    pub layers: Vec<FeatureMap>,
}

/// One-sided smootherstep: 1 inside (`d <= 0`), falling to 0 over
/// `EDGE_WIDTH` outside. Returns the value and its derivative.
fn edge(d: f64) -> (f64, f64) {
    if d <= 0.0 {
        (1.0, 0.0)
    } else if d >= EDGE_WIDTH {
        (0.0, 0.0)
    } else {
        let t = d / EDGE_WIDTH;
        let s = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
        let ds = 30.0 * t * t * (t - 1.0) * (t - 1.0) / EDGE_WIDTH;
        (1.0 - s, -ds)
    }
}

#[derive(Debug, Clone, Copy)]
struct Vis {
    x: f64,
    y: f64,
    ad: f64,
    as_: f64,
    dad: f64,
    das: f64,
    v: [f64; 3],
}

fn disc_distance(scene: &Scene, x: f64, y: f64) -> f64 {
    let dx = x - scene.cx;
    let dy = y - scene.cy;
    (dx * dx + dy * dy - scene.r * scene.r) / (2.0 * scene.r)
}

fn stripe_distance(scene: &Scene, y: f64) -> f64 {
    let dy = y - scene.sy;
    (dy * dy - scene.sh * scene.sh / 4.0) / scene.sh
}

fn vis_at(scene: &Scene, x: f64, y: f64) -> Vis {
    let (ad, dad) = edge(disc_distance(scene, x, y));
    let (as_, das) = edge(stripe_distance(scene, y));
    Vis {
        x,
        y,
        ad,
        as_,
        dad,
        das,
        v: [ad, (1.0 - ad) * as_, (1.0 - ad) * (1.0 - as_)],
    }
}

fn vis_backward(scene: &Scene, p: &Vis, dv: [f64; 3], grad: &mut SceneGrad) {
    if p.dad != 0.0 {
        let dalpha = dv[0] - p.as_ * dv[1] - (1.0 - p.as_) * dv[2];
        let g = dalpha * p.dad;
        let dx = p.x - scene.cx;
        let dy = p.y - scene.cy;
        let rho2 = dx * dx + dy * dy;
        grad.cx -= g * dx / scene.r;
        grad.cy -= g * dy / scene.r;
        grad.r += g * (-rho2 / (2.0 * scene.r * scene.r) - 0.5);
    }
    if p.das != 0.0 {
        let dalpha = (1.0 - p.ad) * (dv[1] - dv[2]);
        let g = dalpha * p.das;
        let dy = p.y - scene.sy;
        grad.sy -= g * 2.0 * dy / scene.sh;
        grad.sh += g * (-dy * dy / (scene.sh * scene.sh) - 0.25);
    }
}

fn grid(scene: &Scene, res: usize) -> Vec<Vis> {
    let step = IMAGE_SIZE as f64 / res as f64;
    let mut out = Vec::with_capacity(res * res);
    for i in 0..res {
        let y = (i as f64 + 0.5) * step;
        for j in 0..res {
            out.push(vis_at(scene, (j as f64 + 0.5) * step, y));
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn background_weight(y: f64) -> f64 {
    y / IMAGE_SIZE as f64
}

pub(crate) fn render_image(scene: &Scene) -> Image {
    let pts = grid(scene, IMAGE_SIZE);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    let [pd, ps, pt, pb] = &scene.colors;
    for p in &pts {
        let ty = background_weight(p.y);
        for ch in 0..3 {
            let bg = pt[ch] * (1.0 - ty) + pb[ch] * ty;
            data.push(sigmoid(p.v[0] * pd[ch] + p.v[1] * ps[ch] + p.v[2] * bg));
        }
    }
    Image { size: IMAGE_SIZE, data }
}

pub(crate) fn image_backward(scene: &Scene, d_image: &[f64], grad: &mut SceneGrad) {
    let pts = grid(scene, IMAGE_SIZE);
    let [pd, ps, pt, pb] = scene.colors;
    for (i, p) in pts.iter().enumerate() {
        let ty = background_weight(p.y);
        let mut dv = [0.0; 3];
        for ch in 0..3 {
            let g = d_image[i * 3 + ch];
            if g == 0.0 {
                continue;
            }
            let bg = pt[ch] * (1.0 - ty) + pb[ch] * ty;
            let out = sigmoid(p.v[0] * pd[ch] + p.v[1] * ps[ch] + p.v[2] * bg);
            let gp = g * out * (1.0 - out);
            grad.colors[0][ch] += p.v[0] * gp;
            grad.colors[1][ch] += p.v[1] * gp;
            grad.colors[2][ch] += p.v[2] * (1.0 - ty) * gp;
            grad.colors[3][ch] += p.v[2] * ty * gp;
            dv[0] += gp * pd[ch];
            dv[1] += gp * ps[ch];
            dv[2] += gp * bg;
        }
        vis_backward(scene, p, dv, grad);
    }
}

/// Energy-balanced region contrast used by the coarse layers: each region
/// holds a fixed share of the squared mass regardless of its area.
fn balanced(pts: &[Vis], res: usize, layer: usize) -> ([f64; 3], [f64; 3]) {
    let mut total = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            total[k] += p.v[k];
        }
    }
    let cells = (res * res) as f64;
    let mut a = [0.0; 3];
    for k in 0..3 {
        a[k] = (ENERGY_SHARE[layer][k] * cells / (total[k] + ENERGY_EPS)).sqrt();
    }
    (a, total)
}

fn appearance_region(assignment: &HiddenAssignment, flat: usize) -> usize {
    assignment.region_of(flat).expect("fine layers carry appearance channels").index()
}

pub(crate) fn render_activations(scene: &Scene, assignment: &HiddenAssignment) -> ActivationStack {
    let mut layers = Vec::with_capacity(FEATURE_RESOLUTIONS.len());
    for (l, &res) in FEATURE_RESOLUTIONS.iter().enumerate() {
        let pts = grid(scene, res);
        let n = res * res;
        let channels = 8;
        let mut data = vec![0.0; channels * n];
        if l < 2 {
            let (a, _) = balanced(&pts, res, l);
            let f: Vec<f64> = pts
                .iter()
                .map(|p| p.v[0] * a[0] + p.v[1] * a[1] + p.v[2] * a[2])
                .collect();
            for c in 0..channels {
                let h = scene.amp[l * channels + c];
                for (d, fv) in data[c * n..(c + 1) * n].iter_mut().zip(&f) {
                    *d = h * fv;
                }
            }
        } else {
            for c in 0..channels {
                let flat = l * channels + c;
                let h = scene.amp[flat];
                let k = appearance_region(assignment, flat);
                for (d, p) in data[c * n..(c + 1) * n].iter_mut().zip(&pts) {
                    *d = h * p.v[k];
                }
            }
        }
        layers.push(FeatureMap { res, channels, data });
    }
    ActivationStack { layers }
}

pub(crate) fn activations_backward(
    scene: &Scene,
    assignment: &HiddenAssignment,
    d_acts: &[Vec<f64>],
    grad: &mut SceneGrad,
) {
    for (l, &res) in FEATURE_RESOLUTIONS.iter().enumerate() {
        let d = &d_acts[l];
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        let pts = grid(scene, res);
        let n = res * res;
        let channels = 8;
        let mut dv = vec![[0.0; 3]; n];
        if l < 2 {
            let (a, total) = balanced(&pts, res, l);
            let mut df = vec![0.0; n];
            for c in 0..channels {
                let flat = l * channels + c;
                let h = scene.amp[flat];
                let dc = &d[c * n..(c + 1) * n];
                let mut dh = 0.0;
                for (p, (&g, pt)) in dc.iter().zip(&pts).enumerate() {
                    let f = pt.v[0] * a[0] + pt.v[1] * a[1] + pt.v[2] * a[2];
                    dh += g * f;
                    df[p] += g * h;
                }
                grad.amp[flat] += dh;
            }
            let mut dtotal = [0.0; 3];
            for (p, pt) in pts.iter().enumerate() {
                for k in 0..3 {
                    dv[p][k] += df[p] * a[k];
                    dtotal[k] += df[p] * pt.v[k];
                }
            }
            for k in 0..3 {
                dtotal[k] *= -0.5 * a[k] / (total[k] + ENERGY_EPS);
            }
            for v in dv.iter_mut() {
                for k in 0..3 {
                    v[k] += dtotal[k];
                }
            }
        } else {
            for c in 0..channels {
                let flat = l * channels + c;
                let h = scene.amp[flat];
                let k = appearance_region(assignment, flat);
                let dc = &d[c * n..(c + 1) * n];
                let mut dh = 0.0;
                for (p, (&g, pt)) in dc.iter().zip(&pts).enumerate() {
                    dh += g * pt.v[k];
                    dv[p][k] += g * h;
                }
                grad.amp[flat] += dh;
            }
        }
        for (p, pt) in pts.iter().enumerate() {
            vis_backward(scene, pt, dv[p], grad);
        }
    }
}

pub(crate) fn oracle_masks(scene: &Scene) -> [Vec<bool>; 3] {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    for i in 0..IMAGE_SIZE {
        let y = i as f64 + 0.5;
        let in_stripe = stripe_distance(scene, y) <= 0.0;
        for j in 0..IMAGE_SIZE {
            let x = j as f64 + 0.5;
            let p = i * IMAGE_SIZE + j;
            if disc_distance(scene, x, y) <= 0.0 {
                masks[0][p] = true;
            } else if in_stripe {
                masks[1][p] = true;
            } else {
                masks[2][p] = true;
            }
        }
    }
    masks
}
