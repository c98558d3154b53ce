//! The training losses and the stage-dependent total.
//!
//! Each loss comes as a plain evaluation and a `*_grad` variant returning the
//! analytic gradient with respect to its differentiable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style_space::StyleCode;

/// A weight that may differ between the two sides of a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "SideRepr", into = "SideRepr")]
pub struct SideWeights {
    pub left: f64,
    pub right: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SideRepr {
    Same(f64),
    Split { left: f64, right: f64 },
}

impl From<SideRepr> for SideWeights {
    fn from(r: SideRepr) -> Self {
        match r {
            SideRepr::Same(v) => SideWeights { left: v, right: v },
            SideRepr::Split { left, right } => SideWeights { left, right },
        }
    }
}

impl From<SideWeights> for SideRepr {
    fn from(w: SideWeights) -> Self {
        if w.left == w.right {
            SideRepr::Same(w.left)
        } else {
            SideRepr::Split {
                left: w.left,
                right: w.right,
            }
        }
    }
}

impl SideWeights {
    pub fn same(v: f64) -> Self {
        SideWeights { left: v, right: v }
    }

    pub fn get(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_mask: f64,
    pub lambda_local: SideWeights,
    pub lambda_align_reg_stage1: f64,
    pub lambda_align_reg_stage3: f64,
    pub lambda_fusion: SideWeights,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::regular()
    }
}

impl LossConfig {
    pub fn regular() -> Self {
        LossConfig {
            lambda_mask: 30_000.0,
            lambda_local: SideWeights::same(15_000.0),
            lambda_align_reg_stage1: 6.0,
            lambda_align_reg_stage3: 1.0,
            lambda_fusion: SideWeights::same(375.0),
            epsilon: 0.1,
        }
    }

    /// Stronger fusion and localization weights for the `favored` side.
    pub fn favored(favored: Side) -> Self {
        let split = |hi: f64, lo: f64| match favored {
            Side::Left => SideWeights { left: hi, right: lo },
            Side::Right => SideWeights { left: lo, right: hi },
        };
        LossConfig {
            lambda_local: split(20_000.0, 10_000.0),
            lambda_fusion: split(500.0, 250.0),
            ..Self::regular()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mask,
            self.lambda_local.left,
            self.lambda_local.right,
            self.lambda_align_reg_stage1,
            self.lambda_align_reg_stage3,
            self.lambda_fusion.left,
            self.lambda_fusion.right,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Checks that `favored` strictly dominates on fusion and localization.
    pub fn validate_favored(&self, favored: Side) -> Result<()> {
        self.validate()?;
        let other = favored.other();
        if !(self.lambda_fusion.get(favored) > self.lambda_fusion.get(other)
            && self.lambda_local.get(favored) > self.lambda_local.get(other))
        {
            return Err(Error::config("the favored side must have strictly larger fusion and local weights"));
        }
        Ok(())
    }

    pub fn align_reg(&self, stage: u8) -> f64 {
        if stage == 1 {
            self.lambda_align_reg_stage1
        } else {
            self.lambda_align_reg_stage3
        }
    }
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// Normalized L1 disagreement between result masks and alignment masks.
/// `None` when both alignment masks are empty.
pub fn mask_loss(result: (&[f64], &[f64]), align: (&[f64], &[f64])) -> Option<f64> {
    mask_loss_grad(result, align).map(|(v, _, _)| v)
}

pub fn mask_loss_grad(result: (&[f64], &[f64]), align: (&[f64], &[f64])) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let denom: f64 = align.0.iter().zip(align.1).map(|(a, b)| (a + b).abs()).sum();
    if denom <= 0.0 {
        return None;
    }
    let term = |r: &[f64], a: &[f64]| {
        let diff: Vec<f64> = r.iter().zip(a).map(|(x, y)| x - y).collect();
        let grad = diff.iter().map(|d| d.signum() * (*d != 0.0) as u8 as f64 / denom).collect::<Vec<_>>();
        (l1(&diff), grad)
    };
    let (v1, g1) = term(result.0, align.0);
    let (v2, g2) = term(result.1, align.1);
    Some(((v1 + v2) / denom, g1, g2))
}

/// `s + eps * (s_rnd - s)`.
pub fn perturb(s: &StyleCode, s_rnd: &StyleCode, eps: f64) -> Result<StyleCode> {
    if s.layers.len() != s_rnd.layers.len() || s.layers.iter().zip(&s_rnd.layers).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("perturbation codes disagree on layout"));
    }
    Ok(StyleCode {
        layout: s.layout.clone(),
        layers: s
            .layers
            .iter()
            .zip(&s_rnd.layers)
            .map(|(a, b)| perturb_flat(a, b, eps))
            .collect(),
    })
}

pub(crate) fn perturb_flat(s: &[f64], s_rnd: &[f64], eps: f64) -> Vec<f64> {
    s.iter().zip(s_rnd).map(|(a, b)| a + eps * (b - a)).collect()
}

/// Gradient of one localization term with respect to the result image, the
/// perturbed image and the mask.
#[derive(Debug, Clone)]
pub struct LocalTermGrad {
    pub value: f64,
    pub d_result: Vec<f64>,
    pub d_other: Vec<f64>,
    pub d_mask: Vec<f64>,
}

/// `||m * (a - b)||_2 / ||m||_1`, with `m` broadcast over the color channels
/// of channel-last images. `None` for an empty mask.
pub fn local_term_grad(a: &[f64], b: &[f64], mask: &[f64]) -> Option<LocalTermGrad> {
    let area = l1(mask);
    if area <= 0.0 {
        return None;
    }
    let ch = a.len() / mask.len();
    let mut sq = 0.0;
    for (p, m) in mask.iter().enumerate() {
        for c in 0..ch {
            let v = m * (a[p * ch + c] - b[p * ch + c]);
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    let value = norm / area;
    let mut d_result = vec![0.0; a.len()];
    let mut d_mask: Vec<f64> = mask.iter().map(|m| -m.signum() * norm / (area * area)).collect();
    if norm > 0.0 {
        for (p, m) in mask.iter().enumerate() {
            for c in 0..ch {
                let i = p * ch + c;
                let diff = a[i] - b[i];
                d_result[i] = m * m * diff / (norm * area);
                d_mask[p] += m * diff * diff / (norm * area);
            }
        }
    }
    let d_other = d_result.iter().map(|v| -v).collect();
    Some(LocalTermGrad {
        value,
        d_result,
        d_other,
        d_mask,
    })
}

/// The two localization terms: `[||m2 (I - I~1)|| / |m2|, ||m1 (I - I~2)|| / |m1|]`.
/// The first protects the right region from the left code, the second the
/// left region from the right code. Empty masks give `None` for their term.
pub fn localization_loss(result: &[f64], tilde1: &[f64], tilde2: &[f64], m1: &[f64], m2: &[f64]) -> [Option<f64>; 2] {
    [
        local_term_grad(result, tilde1, m2).map(|g| g.value),
        local_term_grad(result, tilde2, m1).map(|g| g.value),
    ]
}

/// Mean of the align coefficients over the fused leading channels of both
/// branches.
pub fn align_reg_loss(q1: &[f64], q2: &[f64], fused: usize) -> f64 {
    if fused == 0 {
        return 0.0;
    }
    (q1[..fused].iter().sum::<f64>() + q2[..fused].iter().sum::<f64>()) / (2 * fused) as f64
}

/// `||w * (a - b)||_2` and its gradient with respect to `a`.
pub fn weighted_norm_grad(a: &[f64], b: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let v: Vec<f64> = a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let grad = if norm > 0.0 {
        v.iter().zip(w).map(|(x, w)| w * x / norm).collect()
    } else {
        vec![0.0; a.len()]
    };
    (norm, grad)
}

/// `||w1 (s_result - s1)||_2 + ||w2 (s_result - s2)||_2` on flattened codes.
pub fn fusion_loss(s_result: &[f64], s1: &[f64], s2: &[f64], w1: &[f64], w2: &[f64]) -> Result<f64> {
    let n = s_result.len();
    if [s1.len(), s2.len(), w1.len(), w2.len()].iter().any(|&l| l != n) {
        return Err(Error::shape("fusion loss inputs differ in length"));
    }
    Ok(weighted_norm_grad(s_result, s1, w1).0 + weighted_norm_grad(s_result, s2, w2).0)
}

/// Per-sample loss values. Two-sided losses keep their sides separate so the
/// favored configuration can weight them differently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mask: Option<f64>,
    /// `[protects right, protects left]`.
    pub local: Option<[f64; 2]>,
    pub align_reg: Option<f64>,
    /// `[left term, right term]`.
    pub fusion: Option<[f64; 2]>,
}

impl LossComponents {
    pub fn fusion_value(&self) -> Option<f64> {
        self.fusion.map(|f| f[0] + f[1])
    }

    pub fn local_value(&self) -> Option<f64> {
        self.local.map(|l| l[0] + l[1])
    }
}

/// Losses that contribute at each stage.
pub fn active_losses(stage: u8) -> Result<&'static [&'static str]> {
    match stage {
        1 => Ok(&["mask", "align_reg", "fusion"]),
        2 => Ok(&["fusion"]),
        3 => Ok(&["local", "align_reg", "fusion"]),
        _ => Err(Error::input(format!("unknown stage {stage}"))),
    }
}

pub fn total_loss(stage: u8, c: &LossComponents, config: &LossConfig) -> Result<f64> {
    let missing = |name: &str| Error::input(format!("stage {stage} needs the {name} loss"));
    let fusion = c.fusion.ok_or_else(|| missing("fusion"))?;
    let fusion = config.lambda_fusion.left * fusion[0] + config.lambda_fusion.right * fusion[1];
    match stage {
        1 => {
            let mask = c.mask.ok_or_else(|| missing("mask"))?;
            let reg = c.align_reg.ok_or_else(|| missing("align_reg"))?;
            Ok(config.lambda_mask * mask + config.lambda_align_reg_stage1 * reg + fusion)
        }
        2 => Ok(fusion),
        3 => {
            let local = c.local.ok_or_else(|| missing("local"))?;
            let reg = c.align_reg.ok_or_else(|| missing("align_reg"))?;
            // The first term protects the right region, so it carries the
            // right side's weight.
            Ok(config.lambda_local.right * local[0]
                + config.lambda_local.left * local[1]
                + config.lambda_align_reg_stage3 * reg
                + fusion)
        }
        _ => Err(Error::input(format!("unknown stage {stage}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style_space::LayerLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regular_defaults() {
        let c = LossConfig::regular();
        assert_eq!(c.lambda_mask, 30_000.0);
        assert_eq!(c.lambda_local, SideWeights::same(15_000.0));
        assert_eq!((c.lambda_align_reg_stage1, c.lambda_align_reg_stage3), (6.0, 1.0));
        assert_eq!(c.lambda_fusion, SideWeights::same(375.0));
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(LossConfig::default(), c);
    }

    #[test]
    fn favored_weights_and_validation() {
        let c = LossConfig::favored(Side::Left);
        assert_eq!(c.lambda_fusion, SideWeights { left: 500.0, right: 250.0 });
        assert_eq!(c.lambda_local, SideWeights { left: 20_000.0, right: 10_000.0 });
        assert!(c.validate_favored(Side::Left).is_ok());
        assert!(c.validate_favored(Side::Right).is_err());
        assert!(LossConfig::regular().validate_favored(Side::Left).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::regular();
        c.epsilon = 1.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::regular();
        c.lambda_mask = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn side_weights_serialize_compactly() {
        let c = LossConfig::favored(Side::Right);
        let json = serde_json::to_value(c).unwrap();
        assert_eq!(json["lambda_mask"], 30_000.0);
        assert_eq!(json["lambda_fusion"]["right"], 500.0);
        let regular = serde_json::to_value(LossConfig::regular()).unwrap();
        assert_eq!(regular["lambda_fusion"], 375.0);
        let back: LossConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mask_loss_examples() {
        let a = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(mask_loss((&a, &b), (&a, &b)), Some(0.0));
        // Swapped disjoint masks of areas 2 and 3.
        assert_eq!(mask_loss((&b, &a), (&a, &b)), Some(2.0));
        // Region 1 differs on exactly one pixel.
        let a2 = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(mask_loss((&a2, &b), (&a, &b)), Some(1.0 / 5.0));
        let z = vec![0.0; 5];
        assert_eq!(mask_loss((&a, &b), (&z, &z)), None);
    }

    #[test]
    fn perturb_examples() {
        let l = LayerLayout::new("t", vec![1], vec![false]).unwrap();
        let s = StyleCode::unflatten(&[2.0], &l).unwrap();
        let r = StyleCode::unflatten(&[4.0], &l).unwrap();
        assert_eq!(perturb(&s, &r, 0.0).unwrap(), s);
        assert_eq!(perturb(&s, &r, 1.0).unwrap(), r);
        assert!((perturb(&s, &r, 0.1).unwrap().layers[0][0] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn localization_examples() {
        let img = vec![0.5; 12];
        let m = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(localization_loss(&img, &img, &img, &m, &m), [Some(0.0), Some(0.0)]);

        // Differences outside the right mask leave the first term at zero.
        let mut other = img.clone();
        other[3] = 0.9;
        let m2 = vec![1.0, 0.0, 0.0, 0.0];
        assert_eq!(localization_loss(&img, &other, &img, &m, &m2)[0], Some(0.0));

        // Single-pixel mask with a (0.3, 0, 0) difference.
        let mut t = img.clone();
        t[0] = 0.2;
        let got = localization_loss(&img, &t, &img, &m, &m2)[0].unwrap();
        assert!((got - 0.3).abs() < 1e-12);

        let empty = vec![0.0; 4];
        assert_eq!(localization_loss(&img, &t, &img, &m, &empty)[0], None);
    }

    #[test]
    fn align_reg_examples() {
        assert_eq!(align_reg_loss(&[0.0; 4], &[0.0; 4], 2), 0.0);
        assert_eq!(align_reg_loss(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], 2), 1.0);
        assert!((align_reg_loss(&[0.2, 0.2], &[0.4, 0.4], 2) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fusion_examples() {
        let r = vec![0.0, 0.0];
        assert_eq!(fusion_loss(&r, &r, &r, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let s1 = vec![-3.0, -4.0];
        let s2 = vec![7.0, 1.0];
        assert_eq!(fusion_loss(&r, &s1, &s2, &[0.0; 2], &[0.0; 2]).unwrap(), 0.0);
        assert_eq!(fusion_loss(&r, &s1, &s2, &[1.0, 0.0], &[0.0; 2]).unwrap(), 3.0);
        assert!(fusion_loss(&r, &s1, &[0.0], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let c = LossConfig::regular();
        let stage2 = LossComponents {
            fusion: Some([0.4, 0.0]),
            ..Default::default()
        };
        assert_eq!(total_loss(2, &stage2, &c).unwrap(), 150.0);
        let zeros = LossComponents {
            mask: None,
            local: Some([0.0; 2]),
            align_reg: Some(0.0),
            fusion: Some([0.0; 2]),
        };
        assert_eq!(total_loss(3, &zeros, &c).unwrap(), 0.0);
        let stage1 = LossComponents {
            mask: Some(0.01),
            local: None,
            align_reg: Some(0.1),
            fusion: Some([0.2, 0.0]),
        };
        assert!((total_loss(1, &stage1, &c).unwrap() - 375.6).abs() < 1e-9);
        assert!(matches!(total_loss(1, &stage2, &c), Err(Error::Input(_))));
        assert!(total_loss(4, &zeros, &c).is_err());
    }

    #[test]
    fn active_loss_sets() {
        assert_eq!(active_losses(1).unwrap(), &["mask", "align_reg", "fusion"]);
        assert_eq!(active_losses(2).unwrap(), &["fusion"]);
        assert!(!active_losses(3).unwrap().contains(&"mask"));
    }

    #[test]
    fn local_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 6;
        let a: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let g = local_term_grad(&a, &b, &m).unwrap();
        let f = |a: &[f64], b: &[f64], m: &[f64]| local_term_grad(a, b, m).unwrap().value;
        let h = 1e-6;
        for i in 0..n * 3 {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[i] += h;
            am[i] -= h;
            assert!(((f(&ap, &b, &m) - f(&am, &b, &m)) / (2.0 * h) - g.d_result[i]).abs() < 1e-7);
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            assert!(((f(&a, &bp, &m) - f(&a, &bm, &m)) / (2.0 * h) - g.d_other[i]).abs() < 1e-7);
        }
        for p in 0..n {
            let (mut mp, mut mm) = (m.clone(), m.clone());
            mp[p] += h;
            mm[p] -= h;
            assert!(((f(&a, &b, &mp) - f(&a, &b, &mm)) / (2.0 * h) - g.d_mask[p]).abs() < 1e-7);
        }
    }

    #[test]
    fn mask_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r1: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let r2: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let a1: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let a2: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, g1, g2) = mask_loss_grad((&r1, &r2), (&a1, &a2)).unwrap();
        let h = 1e-7;
        for i in 0..8 {
            let (mut p, mut m) = (r1.clone(), r1.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (mask_loss((&p, &r2), (&a1, &a2)).unwrap() - mask_loss((&m, &r2), (&a1, &a2)).unwrap()) / (2.0 * h);
            assert!((fd - g1[i]).abs() < 1e-6);
            let (mut p, mut m) = (r2.clone(), r2.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (mask_loss((&r1, &p), (&a1, &a2)).unwrap() - mask_loss((&r1, &m), (&a1, &a2)).unwrap()) / (2.0 * h);
            assert!((fd - g2[i]).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn pixel_permutations_leave_losses_unchanged(
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let mk = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
            let (m1, m2, a1, a2) = (mk(&mut rng, n), mk(&mut rng, n), mk(&mut rng, n), mk(&mut rng, n));
            let (i0, i1, i2) = (mk(&mut rng, 3 * n), mk(&mut rng, 3 * n), mk(&mut rng, 3 * n));
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pm = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<f64>>();
            let pi = |v: &[f64]| perm.iter().flat_map(|&p| v[3 * p..3 * p + 3].to_vec()).collect::<Vec<f64>>();
            let before = mask_loss((&m1, &m2), (&a1, &a2)).unwrap();
            let after = mask_loss((&pm(&m1), &pm(&m2)), (&pm(&a1), &pm(&a2))).unwrap();
            proptest::prop_assert!((before - after).abs() < 1e-12);
            let lb = localization_loss(&i0, &i1, &i2, &m1, &m2);
            let la = localization_loss(&pi(&i0), &pi(&i1), &pi(&i2), &pm(&m1), &pm(&m2));
            for k in 0..2 {
                proptest::prop_assert!((lb[k].unwrap() - la[k].unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_are_non_negative(v in proptest::collection::vec(-3.0f64..3.0, 12), w in proptest::collection::vec(0.0f64..1.0, 8)) {
            let f = fusion_loss(&v[..4], &v[4..8], &v[8..], &w[..4], &w[4..]).unwrap();
            proptest::prop_assert!(f >= 0.0);
            let m: Vec<f64> = w.iter().map(|x| x.abs()).collect();
            let ml = mask_loss((&m[..4], &m[4..]), (&m[4..], &m[..4])).unwrap_or(0.0);
            proptest::prop_assert!(ml >= 0.0);
        }
    }
}
