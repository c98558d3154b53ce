//! The latent blender: a shared per-layer network `D` that maps two style
//! codes to a per-channel fusion coefficient, and the interpolation it drives.
//!
//! Each layer is encoded as a token `[up(sA^l), up(sB^l), v(l) x rep, r(l) x rep]`
//! where `up` replicates every channel up to the widest layer, `v(l)` is the
//! one-hot layer indicator and `r(l)` the tRGB bit. The network output is
//! squashed by a sigmoid and max-pooled back to the layer width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::round_f32;
use crate::style_space::{LayerLayout, StyleCode};

pub const DEFAULT_REP: usize = 10;
/// Hidden sizes of `D` for the toy layout; the output size is the widest layer.
pub const TOY_HIDDEN: [usize; 4] = [64, 64, 64, 8];
pub const FINAL_BIAS_INIT: f64 = -2.0;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BlendMode {
    Full,
    /// Only layers `0..k` are blended; later layers are copied from the
    /// first input.
    AlignRestricted { k: usize },
}

/// `2 * max_width + (layers + 1) * rep`.
pub fn token_length(layers: usize, max_width: usize, rep: usize) -> usize {
    2 * max_width + (layers + 1) * rep
}

fn check_layout(layout: &LayerLayout) -> Result<()> {
    layout.validate()?;
    let mw = layout.max_width();
    if let Some(w) = layout.widths.iter().find(|&&w| mw % w != 0) {
        return Err(Error::shape(format!("layer width {w} does not divide the widest layer ({mw})")));
    }
    Ok(())
}

/// Encodes layer `l` of two codes as the network input.
pub fn layer_token(sa: &[f64], sb: &[f64], l: usize, layout: &LayerLayout, rep: usize) -> Result<Vec<f64>> {
    if l >= layout.num_layers() {
        return Err(Error::input(format!(
            "layer index {l} out of range for {} layers",
            layout.num_layers()
        )));
    }
    let w = layout.widths[l];
    if sa.len() != w || sb.len() != w {
        return Err(Error::shape(format!("layer {l} slices must have length {w}")));
    }
    check_layout(layout)?;
    let mut token = vec![0.0; token_length(layout.num_layers(), layout.max_width(), rep)];
    fill_token(&mut token, sa, sb, l, layout, rep);
    Ok(token)
}

fn fill_token(token: &mut [f64], sa: &[f64], sb: &[f64], l: usize, layout: &LayerLayout, rep: usize) {
    let mw = layout.max_width();
    let g = mw / sa.len();
    for i in 0..mw {
        token[i] = sa[i / g];
        token[mw + i] = sb[i / g];
    }
    let ind = 2 * mw;
    for v in &mut token[ind..] {
        *v = 0.0;
    }
    for v in &mut token[ind + l * rep..ind + (l + 1) * rep] {
        *v = 1.0;
    }
    if layout.trgb[l] {
        let r = ind + layout.num_layers() * rep;
        for v in &mut token[r..r + rep] {
            *v = 1.0;
        }
    }
}

/// Per-layer fusion coefficients in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionCoefficient {
    pub layers: Vec<Vec<f64>>,
}

impl FusionCoefficient {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    fn from_flat(q: &[f64], layout: &LayerLayout) -> Self {
        FusionCoefficient {
            layers: (0..layout.num_layers()).map(|l| q[layout.layer_range(l)].to_vec()).collect(),
        }
    }

    pub fn constant(layout: &LayerLayout, v: f64) -> Self {
        FusionCoefficient {
            layers: layout.widths.iter().map(|&w| vec![v; w]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlenderParams {
    pub layout: LayerLayout,
    pub mode: BlendMode,
    pub rep: usize,
    /// `[token length, hidden..., max_width]`.
    pub dims: Vec<usize>,
    /// All weights and biases, layer by layer: `W_i` (out x in) then `b_i`.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    layer: usize,
    /// Input of every dense layer plus the final sigmoid output.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    argmax: Vec<usize>,
}

/// Everything the backward pass of one coefficient evaluation needs.
#[derive(Debug, Clone)]
pub(crate) struct BlendCache {
    layers: Vec<LayerCache>,
}

impl BlenderParams {
    pub fn new(layout: LayerLayout, mode: BlendMode, rep: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        check_layout(&layout)?;
        if rep == 0 {
            return Err(Error::config("indicator repetition must be positive"));
        }
        if let BlendMode::AlignRestricted { k } = mode {
            if k > layout.num_layers() {
                return Err(Error::config(format!("alignment restricted to {k} layers of {}", layout.num_layers())));
            }
        }
        let mut dims = vec![token_length(layout.num_layers(), layout.max_width(), rep)];
        dims.extend_from_slice(hidden);
        dims.push(layout.max_width());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::new();
        let last = dims.len() - 2;
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let gain = if i == last { 0.5 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            theta.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            let b = if i == last { FINAL_BIAS_INIT } else { 0.0 };
            theta.extend(std::iter::repeat_n(b, fan_out));
        }
        round_f32(&mut theta);
        Ok(BlenderParams {
            layout,
            mode,
            rep,
            dims,
            theta,
        })
    }

    /// Adds N(0, 0.1²) noise to every parameter, for gradient checks away from init.
    #[cfg(test)]
    pub(crate) fn jitter(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.1).expect("finite std");
        for v in &mut self.theta {
            *v += dist.sample(&mut rng);
        }
    }

    /// The toy-scale network `[86, 64, 64, 64, 8, 8]`.
    pub fn toy(layout: &LayerLayout, mode: BlendMode, seed: u64) -> Result<Self> {
        Self::new(layout.clone(), mode, DEFAULT_REP, &TOY_HIDDEN, seed)
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// `(name, shape, offset)` of every weight and bias tensor.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        for i in 0..self.dims.len() - 1 {
            let (fi, fo) = (self.dims[i], self.dims[i + 1]);
            out.push((format!("w{i}"), vec![fo, fi], off));
            off += fi * fo;
            out.push((format!("b{i}"), vec![fo], off));
            off += fo;
        }
        out
    }

    pub fn expected_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn blended_layers(&self) -> usize {
        match self.mode {
            BlendMode::Full => self.layout.num_layers(),
            BlendMode::AlignRestricted { k } => k,
        }
    }

    fn check_code(&self, s: &StyleCode, what: &str) -> Result<()> {
        s.check(&self.layout).map_err(|e| Error::shape(format!("{what}: {e}")))
    }

    fn run_layer(&self, token: Vec<f64>, l: usize) -> LayerCache {
        let n = self.dims.len() - 1;
        let mut acts = vec![token];
        let mut pre = Vec::with_capacity(n);
        let mut off = 0;
        for i in 0..n {
            let (fi, fo) = (self.dims[i], self.dims[i + 1]);
            let w = &self.theta[off..off + fi * fo];
            let b = &self.theta[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let x = acts.last().unwrap();
            let z: Vec<f64> = (0..fo)
                .map(|o| w[o * fi..(o + 1) * fi].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o])
                .collect();
            let a: Vec<f64> = if i + 1 == n {
                z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
            } else {
                z.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        let out = acts.last().unwrap();
        let width = self.layout.widths[l];
        let g = self.layout.max_width() / width;
        let argmax = (0..width)
            .map(|c| {
                let mut best = c * g;
                for i in c * g + 1..(c + 1) * g {
                    if out[i] > out[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        LayerCache { layer: l, acts, pre, argmax }
    }

    /// Flat coefficient; zero on layers this blender does not fuse.
    pub(crate) fn coefficient_flat(&self, sa: &[f64], sb: &[f64]) -> (Vec<f64>, BlendCache) {
        let mut q = vec![0.0; self.layout.total_channels()];
        let mut layers = Vec::with_capacity(self.blended_layers());
        let tlen = self.dims[0];
        for l in 0..self.blended_layers() {
            let range = self.layout.layer_range(l);
            let mut token = vec![0.0; tlen];
            fill_token(&mut token, &sa[range.clone()], &sb[range.clone()], l, &self.layout, self.rep);
            let cache = self.run_layer(token, l);
            let out = cache.acts.last().unwrap();
            for (c, &i) in cache.argmax.iter().enumerate() {
                q[range.start + c] = out[i];
            }
            layers.push(cache);
        }
        (q, BlendCache { layers })
    }

    /// Backpropagates `dq` into `dtheta` and the two code inputs.
    pub(crate) fn coefficient_backward(
        &self,
        cache: &BlendCache,
        dq: &[f64],
        dtheta: &mut [f64],
        dsa: &mut [f64],
        dsb: &mut [f64],
    ) {
        let n = self.dims.len() - 1;
        let offsets: Vec<usize> = self.tensor_layout().iter().step_by(2).map(|t| t.2).collect();
        let mw = self.layout.max_width();
        for lc in &cache.layers {
            let range = self.layout.layer_range(lc.layer);
            let out = lc.acts.last().unwrap();
            let mut dz = vec![0.0; self.dims[n]];
            let mut any = false;
            for (c, &i) in lc.argmax.iter().enumerate() {
                let g = dq[range.start + c];
                if g != 0.0 {
                    dz[i] += g * out[i] * (1.0 - out[i]);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            for i in (0..n).rev() {
                let (fi, fo) = (self.dims[i], self.dims[i + 1]);
                let off = offsets[i];
                let x = &lc.acts[i];
                for o in 0..fo {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    for (dw, xv) in dtheta[off + o * fi..off + (o + 1) * fi].iter_mut().zip(x) {
                        *dw += g * xv;
                    }
                    dtheta[off + fi * fo + o] += g;
                }
                let w = &self.theta[off..off + fi * fo];
                let mut dx = vec![0.0; fi];
                for o in 0..fo {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    for (d, wv) in dx.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                        *d += g * wv;
                    }
                }
                if i > 0 {
                    for (d, &z) in dx.iter_mut().zip(&lc.pre[i - 1]) {
                        if z <= 0.0 {
                            *d *= LEAK;
                        }
                    }
                }
                dz = dx;
            }
            let g = mw / range.len();
            for i in 0..mw {
                dsa[range.start + i / g] += dz[i];
                dsb[range.start + i / g] += dz[mw + i];
            }
        }
    }

    pub fn fusion_coefficient(&self, sa: &StyleCode, sb: &StyleCode) -> Result<FusionCoefficient> {
        self.check_code(sa, "first code")?;
        self.check_code(sb, "second code")?;
        let (q, _) = self.coefficient_flat(&sa.flatten(), &sb.flatten());
        Ok(FusionCoefficient::from_flat(&q, &self.layout))
    }

    /// Coefficient and blended code `q * sA + (1 - q) * sB`.
    pub fn blend(&self, sa: &StyleCode, sb: &StyleCode) -> Result<(StyleCode, FusionCoefficient)> {
        let q = self.fusion_coefficient(sa, sb)?;
        Ok((fuse(sa, sb, &q)?, q))
    }

    /// Injects `s_align` into the first `k` layers of `s`:
    /// `q * s_align + (1 - q) * s`, with later layers copied from `s` and
    /// reported as `q = 0`.
    pub fn align_blend(&self, s: &StyleCode, s_align: &StyleCode) -> Result<(StyleCode, FusionCoefficient)> {
        if !matches!(self.mode, BlendMode::AlignRestricted { .. }) {
            return Err(Error::config("align_blend needs an align-restricted blender"));
        }
        self.check_code(s, "code")?;
        self.check_code(s_align, "alignment code")?;
        let (sf, q, _) = self.align_flat(&s.flatten(), &s_align.flatten());
        Ok((StyleCode::unflatten(&sf, &self.layout)?, FusionCoefficient::from_flat(&q, &self.layout)))
    }

    pub(crate) fn blend_flat(&self, sa: &[f64], sb: &[f64]) -> (Vec<f64>, Vec<f64>, BlendCache) {
        let (q, cache) = self.coefficient_flat(sa, sb);
        let out = (0..q.len()).map(|i| lerp(q[i], sa[i], sb[i])).collect();
        (out, q, cache)
    }

    pub(crate) fn align_flat(&self, s: &[f64], s_align: &[f64]) -> (Vec<f64>, Vec<f64>, BlendCache) {
        let (q, cache) = self.coefficient_flat(s, s_align);
        let k_end = self.fused_channels();
        let out = (0..q.len())
            .map(|i| if i < k_end { lerp(q[i], s_align[i], s[i]) } else { s[i] })
            .collect();
        (out, q, cache)
    }

    /// Number of leading flat channels this blender fuses.
    pub(crate) fn fused_channels(&self) -> usize {
        (0..self.blended_layers()).map(|l| self.layout.widths[l]).sum()
    }

    /// Backward of [`Self::blend_flat`]. `dq_extra` is any loss gradient taken
    /// directly on `q`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn blend_backward(
        &self,
        cache: &BlendCache,
        sa: &[f64],
        sb: &[f64],
        q: &[f64],
        dout: &[f64],
        dq_extra: Option<&[f64]>,
        dtheta: &mut [f64],
        dsa: &mut [f64],
        dsb: &mut [f64],
    ) {
        let mut dq = dq_extra.map_or_else(|| vec![0.0; q.len()], |d| d.to_vec());
        for i in 0..q.len() {
            dq[i] += dout[i] * (sa[i] - sb[i]);
            dsa[i] += dout[i] * q[i];
            dsb[i] += dout[i] * (1.0 - q[i]);
        }
        self.coefficient_backward(cache, &dq, dtheta, dsa, dsb);
    }

    /// Backward of [`Self::align_flat`].
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn align_backward(
        &self,
        cache: &BlendCache,
        s: &[f64],
        s_align: &[f64],
        q: &[f64],
        dout: &[f64],
        dq_extra: Option<&[f64]>,
        dtheta: &mut [f64],
        ds: &mut [f64],
        ds_align: &mut [f64],
    ) {
        let k_end = self.fused_channels();
        let mut dq = dq_extra.map_or_else(|| vec![0.0; q.len()], |d| d.to_vec());
        for i in 0..q.len() {
            if i < k_end {
                dq[i] += dout[i] * (s_align[i] - s[i]);
                ds_align[i] += dout[i] * q[i];
                ds[i] += dout[i] * (1.0 - q[i]);
            } else {
                dq[i] = 0.0;
                ds[i] += dout[i];
            }
        }
        self.coefficient_backward(cache, &dq, dtheta, ds, ds_align);
    }
}

/// `q * a + (1 - q) * b`, returning `a` exactly when the inputs agree.
#[inline]
pub(crate) fn lerp(q: f64, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        q * a + (1.0 - q) * b
    }
}

/// Per-channel interpolation `q * sA + (1 - q) * sB`.
pub fn fuse(sa: &StyleCode, sb: &StyleCode, q: &FusionCoefficient) -> Result<StyleCode> {
    if sa.layers.len() != sb.layers.len() || sa.layers.len() != q.layers.len() {
        return Err(Error::shape("codes and coefficient disagree on layer count"));
    }
    let mut layers = Vec::with_capacity(sa.layers.len());
    for (l, ((a, b), qv)) in sa.layers.iter().zip(&sb.layers).zip(&q.layers).enumerate() {
        if a.len() != b.len() || a.len() != qv.len() {
            return Err(Error::shape(format!("layer {l} lengths differ")));
        }
        layers.push(
            a.iter()
                .zip(b)
                .zip(qv)
                .map(|((&a, &b), &q)| lerp(q, a, b))
                .collect(),
        );
    }
    Ok(StyleCode {
        layout: sa.layout.clone(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layout() -> LayerLayout {
        LayerLayout::toy()
    }

    fn random_code(rng: &mut ChaCha8Rng) -> StyleCode {
        let v: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        StyleCode::unflatten(&v, &layout()).unwrap()
    }

    #[test]
    fn token_lengths() {
        assert_eq!(token_length(18, 512, 10), 1214);
        assert_eq!(token_length(6, 8, 10), 86);
    }

    #[test]
    fn token_layout_and_indicator_bits() {
        let l = layout();
        let sa = [1.0, 2.0, 3.0, 4.0];
        let sb = [5.0, 6.0, 7.0, 8.0];
        let t = layer_token(&sa, &sb, 4, &l, 10).unwrap();
        assert_eq!(t.len(), 86);
        assert_eq!(&t[..8], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        assert_eq!(&t[8..16], &[5.0, 5.0, 6.0, 6.0, 7.0, 7.0, 8.0, 8.0]);
        let ind = &t[16..76];
        assert_eq!(ind.iter().filter(|&&v| v == 1.0).count(), 10);
        assert!(ind[40..50].iter().all(|&v| v == 1.0));
        assert!(t[76..].iter().all(|&v| v == 1.0));

        let t0 = layer_token(&[0.0; 8], &[0.0; 8], 0, &l, 10).unwrap();
        assert_eq!(t0[16..].iter().filter(|&&v| v == 1.0).count(), 10);
        assert!(layer_token(&[0.0; 8], &[0.0; 8], 6, &l, 10).is_err());
    }

    #[test]
    fn toy_network_shape() {
        let p = BlenderParams::toy(&layout(), BlendMode::Full, 0).unwrap();
        assert_eq!(p.dims, vec![86, 64, 64, 64, 8, 8]);
        assert_eq!(p.param_count(), BlenderParams::expected_params(&p.dims));
        // Parameter count depends on the widest layer, not on |S|.
        let wider = LayerLayout::new("w", vec![8, 8, 8, 8, 8, 4], vec![false, false, false, false, false, true]).unwrap();
        assert_eq!(BlenderParams::toy(&wider, BlendMode::Full, 0).unwrap().param_count(), p.param_count());
    }

    #[test]
    fn coefficients_are_in_the_open_unit_interval() {
        let p = BlenderParams::toy(&layout(), BlendMode::Full, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = p.fusion_coefficient(&random_code(&mut rng), &random_code(&mut rng)).unwrap();
        for (l, layer) in q.layers.iter().enumerate() {
            assert_eq!(layer.len(), layout().widths[l]);
            assert!(layer.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let mean = q.flatten().iter().sum::<f64>() / 40.0;
        assert!(mean < 0.3, "initial q should start near keep-own-code, got {mean}");
    }

    #[test]
    fn fuse_examples() {
        let l = LayerLayout::new("t", vec![2], vec![false]).unwrap();
        let sa = StyleCode::unflatten(&[1.0, 2.0], &l).unwrap();
        let sb = StyleCode::unflatten(&[3.0, 4.0], &l).unwrap();
        let q = FusionCoefficient { layers: vec![vec![0.25, 0.75]] };
        assert_eq!(fuse(&sa, &sb, &q).unwrap().layers[0], vec![2.5, 2.5]);
        assert_eq!(fuse(&sa, &sb, &FusionCoefficient::constant(&l, 1.0)).unwrap(), sa);
        assert_eq!(fuse(&sa, &sb, &FusionCoefficient::constant(&l, 0.0)).unwrap(), sb);
    }

    #[test]
    fn align_blend_copies_late_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_code(&mut rng);
        let a = random_code(&mut rng);
        let b = random_code(&mut rng);
        let p = BlenderParams::toy(&layout(), BlendMode::AlignRestricted { k: 2 }, 2).unwrap();
        let (out, q) = p.align_blend(&s, &a).unwrap();
        for l in 2..6 {
            assert_eq!(out.layers[l], s.layers[l]);
            assert!(q.layers[l].iter().all(|&v| v == 0.0));
        }
        let mut a2 = a.clone();
        for l in 2..6 {
            a2.layers[l] = b.layers[l].clone();
        }
        assert_eq!(p.align_blend(&s, &a2).unwrap().0, out);

        let p0 = BlenderParams::toy(&layout(), BlendMode::AlignRestricted { k: 0 }, 2).unwrap();
        assert_eq!(p0.align_blend(&s, &a).unwrap().0, s);
        let full = BlenderParams::toy(&layout(), BlendMode::Full, 2).unwrap();
        assert!(matches!(full.align_blend(&s, &a), Err(Error::Config(_))));
    }

    #[test]
    fn blend_of_equal_codes_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BlenderParams::toy(&layout(), BlendMode::Full, 5).unwrap();
        for _ in 0..20 {
            let s = random_code(&mut rng);
            assert_eq!(p.blend(&s, &s).unwrap().0, s);
        }
    }

    #[test]
    fn blend_is_convex_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlenderParams::toy(&layout(), BlendMode::Full, 6).unwrap();
        let (a, b) = (random_code(&mut rng), random_code(&mut rng));
        let (out, _) = p.blend(&a, &b).unwrap();
        assert_eq!(p.blend(&a, &b).unwrap().0, out);
        for ((o, x), y) in out.flatten().iter().zip(a.flatten()).zip(b.flatten()) {
            assert!(*o >= x.min(y) - 1e-12 && *o <= x.max(y) + 1e-12);
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let p = BlenderParams::toy(&layout(), BlendMode::Full, 0).unwrap();
        let other = LayerLayout::new("t", vec![8], vec![false]).unwrap();
        let s = StyleCode::zeros(&other);
        assert!(matches!(p.blend(&s, &s), Err(Error::Shape(_))));
    }

    fn fd_theta(p: &BlenderParams, f: &dyn Fn(&BlenderParams) -> f64, idx: usize) -> f64 {
        let h = 1e-6;
        let mut a = p.clone();
        a.theta[idx] += h;
        let mut b = p.clone();
        b.theta[idx] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn sum_of_q_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = BlenderParams::toy(&layout(), BlendMode::Full, 9).unwrap();
        p.jitter(9);
        let (a, b) = (random_code(&mut rng).flatten(), random_code(&mut rng).flatten());
        let f = |pp: &BlenderParams| pp.coefficient_flat(&a, &b).0.iter().sum::<f64>();
        let (q, cache) = p.coefficient_flat(&a, &b);
        let mut dtheta = vec![0.0; p.param_count()];
        let (mut da, mut db) = (vec![0.0; 40], vec![0.0; 40]);
        p.coefficient_backward(&cache, &vec![1.0; q.len()], &mut dtheta, &mut da, &mut db);
        for idx in 0..86 * 64 {
            if idx % 37 != 0 {
                continue;
            }
            let fd = fd_theta(&p, &f, idx);
            assert!(rel(fd, dtheta[idx]) < 1e-3, "w0[{idx}] fd {fd} analytic {}", dtheta[idx]);
        }
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for mode in [BlendMode::Full, BlendMode::AlignRestricted { k: 2 }] {
            let mut p = BlenderParams::toy(&layout(), mode, 11).unwrap();
            p.jitter(11);
            let (a, b) = (random_code(&mut rng).flatten(), random_code(&mut rng).flatten());
            let probe: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |pp: &BlenderParams, a: &[f64], b: &[f64]| {
                let out = match mode {
                    BlendMode::Full => pp.blend_flat(a, b).0,
                    BlendMode::AlignRestricted { .. } => pp.align_flat(a, b).0,
                };
                out.iter().zip(&probe).map(|(x, y)| x * y).sum::<f64>()
            };
            let (out, q, cache) = match mode {
                BlendMode::Full => p.blend_flat(&a, &b),
                BlendMode::AlignRestricted { .. } => p.align_flat(&a, &b),
            };
            assert_eq!(out.len(), 40);
            let mut dtheta = vec![0.0; p.param_count()];
            let (mut da, mut db) = (vec![0.0; 40], vec![0.0; 40]);
            match mode {
                BlendMode::Full => p.blend_backward(&cache, &a, &b, &q, &probe, None, &mut dtheta, &mut da, &mut db),
                BlendMode::AlignRestricted { .. } => {
                    p.align_backward(&cache, &a, &b, &q, &probe, None, &mut dtheta, &mut da, &mut db)
                }
            }
            for idx in (0..p.param_count()).step_by(97) {
                let fd = fd_theta(&p, &|pp| run(pp, &a, &b), idx);
                assert!(rel(fd, dtheta[idx]) < 1e-3, "{mode:?} theta[{idx}] fd {fd} analytic {}", dtheta[idx]);
            }
            let h = 1e-6;
            for c in 0..40 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[c] += h;
                am[c] -= h;
                let fd = (run(&p, &ap, &b) - run(&p, &am, &b)) / (2.0 * h);
                assert!(rel(fd, da[c]) < 1e-3, "{mode:?} dsa[{c}] fd {fd} analytic {}", da[c]);
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[c] += h;
                bm[c] -= h;
                let fd = (run(&p, &a, &bp) - run(&p, &a, &bm)) / (2.0 * h);
                assert!(rel(fd, db[c]) < 1e-3, "{mode:?} dsb[{c}] fd {fd} analytic {}", db[c]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn fuse_is_identity_on_equal_inputs(
            v in proptest::collection::vec(-5.0f64..5.0, 40),
            q in proptest::collection::vec(0.0f64..1.0, 40),
        ) {
            let l = layout();
            let s = StyleCode::unflatten(&v, &l).unwrap();
            let q = FusionCoefficient::from_flat(&q, &l);
            proptest::prop_assert_eq!(fuse(&s, &s, &q).unwrap(), s);
        }
    }
}
