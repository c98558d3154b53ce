//! The per-sample training objective of one node, with analytic gradients
//! with respect to both blenders.
//!
//! A child node's codes are routed through its frozen ancestors before they
//! are rendered, so its image losses see what the partial hierarchy produces.

use crate::error::{Error, Result};
use crate::fusion_net::{FusionForward, FusionNetParams, FusionUpstream, RegionPair};
use crate::generator::{feature_shapes, Image, ToyGenerator};
use crate::losses::{
    align_reg_loss, local_term_grad, mask_loss_grad, perturb_flat, total_loss, weighted_norm_grad, LossComponents,
    LossConfig, Side,
};
use crate::segmentation::{
    correlation_matrix, region_weights, MaskCache, MaskProjector, RegionModel, SoftMasks,
};

/// A frozen node above the one being trained. `side` is the input slot the
/// trained node's output feeds.
#[derive(Debug, Clone)]
pub struct Ancestor {
    pub net: FusionNetParams,
    pub side: Side,
}

/// Flat codes for one training sample. `siblings` holds one code per
/// ancestor, nearest first, for the slot the routed code does not occupy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s_align: Vec<f64>,
    pub s_rnd: Vec<f64>,
    pub siblings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub components: LossComponents,
    pub total: f64,
    /// Empty when the node has no align blender.
    pub grad_align: Vec<f64>,
    pub grad_fuse: Vec<f64>,
}

struct Routed {
    code: Vec<f64>,
    path: Vec<FusionForward>,
}

struct View {
    routed: Routed,
    masks: SoftMasks,
    cache: MaskCache,
}

pub struct Objective<'a> {
    generator: &'a ToyGenerator,
    projector: MaskProjector,
    regions: usize,
    left: Vec<usize>,
    right: Vec<usize>,
    ancestors: Vec<Ancestor>,
    config: LossConfig,
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

fn add_into(acc: &mut Vec<f64>, x: &[f64]) {
    if acc.is_empty() {
        acc.extend_from_slice(x);
    } else {
        axpy(acc, 1.0, x);
    }
}

impl<'a> Objective<'a> {
    pub fn new(
        generator: &'a ToyGenerator,
        model: &RegionModel,
        pair: &RegionPair,
        ancestors: Vec<Ancestor>,
        config: LossConfig,
    ) -> Result<Self> {
        config.validate()?;
        let left = model.region_indices(&pair.left)?;
        let right = model.region_indices(&pair.right)?;
        if left.is_empty() || right.is_empty() || left.iter().any(|r| right.contains(r)) {
            return Err(Error::config("a node needs two disjoint, nonempty region sets"));
        }
        let shapes = feature_shapes(generator.layout());
        if model.channels != shapes.iter().map(|s| s.1).sum::<usize>() {
            return Err(Error::shape("region model does not match the generator's feature channels"));
        }
        Ok(Objective {
            generator,
            projector: MaskProjector::new(model, &shapes),
            regions: model.regions.len(),
            left,
            right,
            ancestors,
            config,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn ancestors(&self) -> &[Ancestor] {
        &self.ancestors
    }

    fn lift(&self, x: &[f64], sample: &TrainingSample) -> Routed {
        let mut cur = x.to_vec();
        let mut path = Vec::with_capacity(self.ancestors.len());
        for (anc, sib) in self.ancestors.iter().zip(&sample.siblings) {
            let sa = anc.net.align.as_ref().map(|_| sample.s_align.as_slice());
            let fw = match anc.side {
                Side::Left => anc.net.forward_flat(&cur, sib, sa),
                Side::Right => anc.net.forward_flat(sib, &cur, sa),
            };
            cur = fw.res.clone();
            path.push(fw);
        }
        Routed { code: cur, path }
    }

    fn unlift(&self, routed: &Routed, d_code: Vec<f64>) -> Vec<f64> {
        let mut d = d_code;
        for (anc, fw) in self.ancestors.iter().zip(&routed.path).rev() {
            let up = FusionUpstream {
                d_res: Some(d),
                ..Default::default()
            };
            let g = anc.net.backward(fw, &up);
            d = match anc.side {
                Side::Left => g.s1,
                Side::Right => g.s2,
            };
        }
        d
    }

    fn view(&self, x: &[f64], sample: &TrainingSample) -> View {
        let routed = self.lift(x, sample);
        let acts = self.generator.activations_flat(&routed.code);
        let (masks, cache) = self.projector.forward(&acts);
        View { routed, masks, cache }
    }

    fn image(&self, x: &[f64], sample: &TrainingSample) -> (Routed, Image) {
        let routed = self.lift(x, sample);
        let image = self.generator.image_flat(&routed.code);
        (routed, image)
    }

    /// Region-major mask gradient from gradients on the two unions.
    fn spread(&self, d_left: &[f64], d_right: &[f64]) -> Vec<f64> {
        let n = d_left.len();
        let mut d = vec![0.0; self.regions * n];
        for &r in &self.left {
            d[r * n..(r + 1) * n].copy_from_slice(d_left);
        }
        for &r in &self.right {
            d[r * n..(r + 1) * n].copy_from_slice(d_right);
        }
        d
    }

    /// Fusion-loss weights for one side, measured on the unrouted image of
    /// `code`.
    fn weights(&self, code: &[f64], side: Side) -> Result<Vec<f64>> {
        let acts = self.generator.activations_flat(code);
        let hard = self.projector.hard(&acts);
        let m = correlation_matrix(&[acts], &[hard], self.regions)?;
        let regions = match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        };
        region_weights(&m, regions, self.generator.layout())
    }

    /// True when the alignment image leaves either side of the node empty.
    pub fn is_degenerate(&self, sample: &TrainingSample) -> bool {
        let target = self.view(&sample.s_align, sample);
        self.degenerate_target(&target)
    }

    fn degenerate_target(&self, target: &View) -> bool {
        let hard = self.projector.hard_from_cache(&target.cache);
        let count = |set: &[usize]| hard.labels.iter().filter(|l| set.contains(l)).count();
        count(&self.left) == 0 || count(&self.right) == 0
    }

    fn check(&self, node: &FusionNetParams, sample: &TrainingSample) -> Result<()> {
        let n = self.generator.layout().total_channels();
        if node.layout() != self.generator.layout() {
            return Err(Error::shape("node layout does not match the generator"));
        }
        let codes = [&sample.s1, &sample.s2, &sample.s_align, &sample.s_rnd];
        if codes.iter().chain(sample.siblings.iter().collect::<Vec<_>>().iter()).any(|c| c.len() != n) {
            return Err(Error::shape("sample code length does not match the layout"));
        }
        if sample.siblings.len() != self.ancestors.len() {
            return Err(Error::input("need one sibling code per ancestor"));
        }
        Ok(())
    }

    /// Loss and gradients of one sample at `stage`. `None` marks a
    /// degenerate sample.
    pub fn evaluate(&self, node: &FusionNetParams, sample: &TrainingSample, stage: u8) -> Result<Option<SampleEval>> {
        self.check(node, sample)?;
        if !(1..=3).contains(&stage) {
            return Err(Error::input(format!("unknown stage {stage}")));
        }
        // Stage 2 never looks at the alignment image.
        if stage == 2 {
            return self.stage2(node, sample);
        }
        let target = self.view(&sample.s_align, sample);
        if self.degenerate_target(&target) {
            return Ok(None);
        }
        if stage == 1 {
            self.stage1(node, sample, &target)
        } else {
            self.stage3(node, sample)
        }
    }

    fn align_reg(&self, node: &FusionNetParams, fw: &FusionForward, lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let n = fw.qa1.len();
        let fused = node.align.as_ref().map_or(0, |a| a.fused_channels());
        let value = align_reg_loss(&fw.qa1, &fw.qa2, fused);
        let mut d = vec![0.0; n];
        if fused > 0 {
            for v in &mut d[..fused] {
                *v = lambda / (2 * fused) as f64;
            }
        }
        (value, d.clone(), d)
    }

    fn stage1(&self, node: &FusionNetParams, sample: &TrainingSample, target: &View) -> Result<Option<SampleEval>> {
        if node.align.is_none() {
            return Err(Error::input("stage 1 trains the align blender, which this node lacks"));
        }
        let c = &self.config;
        let fw = node.forward_flat(&sample.s1, &sample.s2, Some(&sample.s_align));
        let a_left = target.masks.union(&self.left);
        let a_right = target.masks.union(&self.right);

        let mut mask = 0.0;
        let mut d_aligned = Vec::new();
        for x in [&fw.s1a, &fw.s2a] {
            let v = self.view(x, sample);
            let m_left = v.masks.union(&self.left);
            let m_right = v.masks.union(&self.right);
            let Some((value, gl, gr)) = mask_loss_grad((&m_left, &m_right), (&a_left, &a_right)) else {
                return Ok(None);
            };
            mask += 0.5 * value;
            let scale = 0.5 * c.lambda_mask;
            let gl: Vec<f64> = gl.iter().map(|g| g * scale).collect();
            let gr: Vec<f64> = gr.iter().map(|g| g * scale).collect();
            let d_acts = self.projector.backward(&v.cache, &self.spread(&gl, &gr));
            let d_code = self.generator.backward_flat(&v.routed.code, None, Some(&d_acts));
            d_aligned.push(self.unlift(&v.routed, d_code));
        }
        let mut d_s2a = d_aligned.pop().unwrap_or_default();
        let mut d_s1a = d_aligned.pop().unwrap_or_default();

        let (reg, d_qa1, d_qa2) = self.align_reg(node, &fw, c.lambda_align_reg_stage1);

        let w1 = self.weights(&sample.s1, Side::Left)?;
        let w2 = self.weights(&sample.s2, Side::Right)?;
        let (f1, g1) = weighted_norm_grad(&fw.s1a, &sample.s1, &w1);
        let (f2, g2) = weighted_norm_grad(&fw.s2a, &sample.s2, &w2);
        axpy(&mut d_s1a, c.lambda_fusion.left, &g1);
        axpy(&mut d_s2a, c.lambda_fusion.right, &g2);

        let g = node.backward(
            &fw,
            &FusionUpstream {
                d_res: None,
                d_s1a: Some(d_s1a),
                d_s2a: Some(d_s2a),
                d_qa1: Some(d_qa1),
                d_qa2: Some(d_qa2),
            },
        );
        let components = LossComponents {
            mask: Some(mask),
            local: None,
            align_reg: Some(reg),
            fusion: Some([f1, f2]),
        };
        Ok(Some(SampleEval {
            total: total_loss(1, &components, c)?,
            components,
            grad_align: g.align,
            grad_fuse: vec![0.0; node.fuse.param_count()],
        }))
    }

    fn stage2(&self, node: &FusionNetParams, sample: &TrainingSample) -> Result<Option<SampleEval>> {
        let c = &self.config;
        let sa = node.align.as_ref().map(|_| sample.s_align.as_slice());
        let fw = node.forward_flat(&sample.s1, &sample.s2, sa);
        let w1 = self.weights(&fw.s1a, Side::Left)?;
        let w2 = self.weights(&fw.s2a, Side::Right)?;
        let (f1, g1) = weighted_norm_grad(&fw.res, &fw.s1a, &w1);
        let (f2, g2) = weighted_norm_grad(&fw.res, &fw.s2a, &w2);
        let mut d_res = vec![0.0; fw.res.len()];
        axpy(&mut d_res, c.lambda_fusion.left, &g1);
        axpy(&mut d_res, c.lambda_fusion.right, &g2);
        // The aligned codes are targets here, so only the fuse gradient is kept.
        let g = node.backward(
            &fw,
            &FusionUpstream {
                d_res: Some(d_res),
                ..Default::default()
            },
        );
        let components = LossComponents {
            fusion: Some([f1, f2]),
            ..Default::default()
        };
        Ok(Some(SampleEval {
            total: total_loss(2, &components, c)?,
            components,
            grad_align: vec![0.0; g.align.len()],
            grad_fuse: g.fuse,
        }))
    }

    fn stage3(&self, node: &FusionNetParams, sample: &TrainingSample) -> Result<Option<SampleEval>> {
        let c = &self.config;
        let sa = node.align.as_ref().map(|_| sample.s_align.as_slice());
        let t1 = perturb_flat(&sample.s1, &sample.s_rnd, c.epsilon);
        let t2 = perturb_flat(&sample.s2, &sample.s_rnd, c.epsilon);
        let fw = node.forward_flat(&sample.s1, &sample.s2, sa);
        let fw1 = node.forward_flat(&t1, &sample.s2, sa);
        let fw2 = node.forward_flat(&sample.s1, &t2, sa);

        let vr = self.view(&fw.res, sample);
        let image_r = self.generator.image_flat(&vr.routed.code);
        let (r1, image_1) = self.image(&fw1.res, sample);
        let (r2, image_2) = self.image(&fw2.res, sample);
        let m_left = vr.masks.union(&self.left);
        let m_right = vr.masks.union(&self.right);
        // Term 0 keeps the right region fixed under a left perturbation.
        let (Some(l0), Some(l1)) = (
            local_term_grad(&image_r.data, &image_1.data, &m_right),
            local_term_grad(&image_r.data, &image_2.data, &m_left),
        ) else {
            return Ok(None);
        };
        let (k0, k1) = (c.lambda_local.right, c.lambda_local.left);
        let mut d_ir = vec![0.0; image_r.data.len()];
        axpy(&mut d_ir, k0, &l0.d_result);
        axpy(&mut d_ir, k1, &l1.d_result);
        let d_i1: Vec<f64> = l0.d_other.iter().map(|v| k0 * v).collect();
        let d_i2: Vec<f64> = l1.d_other.iter().map(|v| k1 * v).collect();
        let d_mr: Vec<f64> = l0.d_mask.iter().map(|v| k0 * v).collect();
        let d_ml: Vec<f64> = l1.d_mask.iter().map(|v| k1 * v).collect();
        let d_acts = self.projector.backward(&vr.cache, &self.spread(&d_ml, &d_mr));
        let d_code = self.generator.backward_flat(&vr.routed.code, Some(&d_ir), Some(&d_acts));
        let mut d_res = self.unlift(&vr.routed, d_code);
        let d_res1 = self.unlift(&r1, self.generator.backward_flat(&r1.code, Some(&d_i1), None));
        let d_res2 = self.unlift(&r2, self.generator.backward_flat(&r2.code, Some(&d_i2), None));

        let (reg, d_qa1, d_qa2) = self.align_reg(node, &fw, c.lambda_align_reg_stage3);

        let w1 = self.weights(&sample.s1, Side::Left)?;
        let w2 = self.weights(&sample.s2, Side::Right)?;
        let (f1, g1) = weighted_norm_grad(&fw.res, &sample.s1, &w1);
        let (f2, g2) = weighted_norm_grad(&fw.res, &sample.s2, &w2);
        axpy(&mut d_res, c.lambda_fusion.left, &g1);
        axpy(&mut d_res, c.lambda_fusion.right, &g2);

        let has_align = node.align.is_some();
        let g = node.backward(
            &fw,
            &FusionUpstream {
                d_res: Some(d_res),
                d_qa1: has_align.then_some(d_qa1),
                d_qa2: has_align.then_some(d_qa2),
                ..Default::default()
            },
        );
        let mut grad_align = g.align;
        let mut grad_fuse = g.fuse;
        for (fwp, d) in [(&fw1, d_res1), (&fw2, d_res2)] {
            let gp = node.backward(
                fwp,
                &FusionUpstream {
                    d_res: Some(d),
                    ..Default::default()
                },
            );
            add_into(&mut grad_align, &gp.align);
            add_into(&mut grad_fuse, &gp.fuse);
        }
        let components = LossComponents {
            mask: None,
            local: Some([l0.value, l1.value]),
            align_reg: Some(reg),
            fusion: Some([f1, f2]),
        };
        Ok(Some(SampleEval {
            total: total_loss(3, &components, c)?,
            components,
            grad_align,
            grad_fuse,
        }))
    }
}
