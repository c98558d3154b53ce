//! Three-stage training of one node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_net::FusionNetParams;
use crate::generator::{round_f32, ToyGenerator};
use crate::losses::{active_losses, LossComponents, LossConfig, Side};
use crate::objective::{Ancestor, Objective, TrainingSample};
use crate::segmentation::RegionModel;
use crate::style_space::{LatentCode, DEFAULT_TRUNCATION_PSI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrainMode {
    Regular,
    Short,
    Favored { favored: Side },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub truncation_psi: f64,
    pub losses: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale step counts.
    pub fn toy() -> Self {
        TrainConfig {
            mode: TrainMode::Regular,
            steps: [1500, 3000, 3000],
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            truncation_psi: DEFAULT_TRUNCATION_PSI,
            losses: LossConfig::regular(),
        }
    }

    /// Full-length schedule: 5000/10000/10000 steps.
    pub fn full_regular() -> Self {
        TrainConfig {
            steps: [5000, 10_000, 10_000],
            ..Self::toy()
        }
    }

    pub fn short(n1: usize, n2: usize) -> Self {
        TrainConfig {
            mode: TrainMode::Short,
            steps: [n1, n2, 0],
            ..Self::toy()
        }
    }

    pub fn favored(favored: Side) -> Self {
        TrainConfig {
            mode: TrainMode::Favored { favored },
            losses: LossConfig::favored(favored),
            ..Self::toy()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: [usize; 3]) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TrainMode::Short if self.steps[2] != 0 => {
                return Err(Error::config("short mode has no stage 3; its step count must be 0"))
            }
            TrainMode::Favored { favored } => self.losses.validate_favored(favored)?,
            _ => self.losses.validate()?,
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.truncation_psi > 0.0 && self.truncation_psi <= 1.0) {
            return Err(Error::config("truncation_psi must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Align,
    Fuse,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u8,
    pub steps: usize,
    pub partition: Partition,
    pub losses: Vec<String>,
}

pub fn stage_schedule(config: &TrainConfig) -> Result<Vec<StageSpec>> {
    config.validate()?;
    let partitions = [Partition::Align, Partition::Fuse, Partition::Both];
    let stages = if config.mode == TrainMode::Short { 2 } else { 3 };
    (0..stages)
        .map(|i| {
            let stage = i as u8 + 1;
            Ok(StageSpec {
                stage,
                steps: config.steps[i],
                partition: partitions[i],
                losses: active_losses(stage)?.iter().map(|s| s.to_string()).collect(),
            })
        })
        .collect()
}

/// Deterministic source of training codes: every position owns its own
/// ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeStream {
    pub seed: u64,
}

impl CodeStream {
    pub fn new(seed: u64) -> Self {
        CodeStream { seed }
    }

    /// `count` style codes drawn at `position`.
    pub fn codes(&self, generator: &ToyGenerator, position: u64, count: usize, psi: f64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(position);
        (0..count)
            .map(|_| {
                let z = LatentCode {
                    values: (0..generator.z_dim()).map(|_| StandardNormal.sample(&mut rng)).collect(),
                };
                Ok(generator.map_to_style(&z, psi)?.flatten())
            })
            .collect()
    }
}

/// `(s1, s2, s_align, s_rnd)` at one stream position.
pub fn sample_quadruple(
    stream: &CodeStream,
    position: u64,
    psi: f64,
    generator: &ToyGenerator,
) -> Result<[Vec<f64>; 4]> {
    if !(psi >= 0.0 && psi <= 1.0) {
        return Err(Error::input(format!("truncation psi {psi} outside [0, 1]")));
    }
    let mut c = stream.codes(generator, position, 4, psi)?;
    let rnd = c.pop().unwrap_or_default();
    let align = c.pop().unwrap_or_default();
    let s2 = c.pop().unwrap_or_default();
    let s1 = c.pop().unwrap_or_default();
    Ok([s1, s2, align, rnd])
}

fn training_sample(
    stream: &CodeStream,
    position: u64,
    psi: f64,
    generator: &ToyGenerator,
    ancestors: usize,
) -> Result<TrainingSample> {
    let mut codes = stream.codes(generator, position, 4 + ancestors, psi)?;
    let siblings = codes.split_off(4);
    let mut it = codes.into_iter();
    let mut next = || it.next().unwrap_or_default();
    Ok(TrainingSample {
        s1: next(),
        s2: next(),
        s_align: next(),
        s_rnd: next(),
        siblings,
    })
}

/// Adam with parameters kept f32-representable after every step.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        round_f32(theta);
    }
}

/// How many times each loss was evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounters {
    pub mask: u64,
    pub local: u64,
    pub align_reg: u64,
    pub fusion: u64,
}

impl LossCounters {
    fn record(&mut self, c: &LossComponents) {
        self.mask += c.mask.is_some() as u64;
        self.local += c.local.is_some() as u64;
        self.align_reg += c.align_reg.is_some() as u64;
        self.fusion += c.fusion.is_some() as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub node: String,
    pub stage: u8,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<f64>,
    /// `None` when every sample of the batch was degenerate.
    pub total: Option<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub counters: LossCounters,
    pub degenerate: u64,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.counters.mask += other.counters.mask;
        self.counters.local += other.counters.local;
        self.counters.align_reg += other.counters.align_reg;
        self.counters.fusion += other.counters.fusion;
        self.degenerate += other.degenerate;
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains `node` in place through every stage of the schedule. Ancestors stay
/// frozen; the generator and region model are only read.
pub fn train_node(
    node: &mut FusionNetParams,
    ancestors: Vec<Ancestor>,
    generator: &ToyGenerator,
    region_model: &RegionModel,
    config: &TrainConfig,
) -> Result<TrainLog> {
    let schedule = stage_schedule(config)?;
    let objective = Objective::new(generator, region_model, &node.region_pair, ancestors, config.losses)?;
    let stream = CodeStream::new(config.seed);
    let n_anc = objective.ancestors().len();
    let mut adam_align = node.align.as_ref().map(|a| Adam::new(a.param_count(), config.learning_rate));
    let mut adam_fuse = Adam::new(node.fuse.param_count(), config.learning_rate);
    let mut log = TrainLog::default();

    for spec in &schedule {
        // Without an align blender the first stage has nothing to train.
        if spec.partition == Partition::Align && node.align.is_none() {
            continue;
        }
        for step in 0..spec.steps {
            let mut evals = Vec::with_capacity(config.batch_size);
            let mut skipped = 0;
            for b in 0..config.batch_size {
                let position = ((spec.stage as u64) << 48) | (step * config.batch_size + b) as u64;
                let sample = training_sample(&stream, position, config.truncation_psi, generator, n_anc)?;
                match objective.evaluate(node, &sample, spec.stage)? {
                    Some(e) => {
                        log.counters.record(&e.components);
                        evals.push(e);
                    }
                    None => skipped += 1,
                }
            }
            log.degenerate += skipped as u64;
            let total = mean_of(evals.iter().map(|e| Some(e.total)));
            if let Some(t) = total {
                if !t.is_finite() {
                    return Err(Error::Numerical(format!(
                        "node {} stage {} step {step}: loss is {t}",
                        node.node, spec.stage
                    )));
                }
                let scale = 1.0 / evals.len() as f64;
                let average = |pick: fn(&crate::objective::SampleEval) -> &Vec<f64>| {
                    let mut g = vec![0.0; pick(&evals[0]).len()];
                    for e in &evals {
                        for (a, v) in g.iter_mut().zip(pick(e)) {
                            *a += scale * v;
                        }
                    }
                    g
                };
                if matches!(spec.partition, Partition::Align | Partition::Both) {
                    if let (Some(al), Some(adam)) = (node.align.as_mut(), adam_align.as_mut()) {
                        adam.step(&mut al.theta, &average(|e| &e.grad_align));
                    }
                }
                if matches!(spec.partition, Partition::Fuse | Partition::Both) {
                    adam_fuse.step(&mut node.fuse.theta, &average(|e| &e.grad_fuse));
                }
            }
            log.records.push(StepRecord {
                node: node.node.clone(),
                stage: spec.stage,
                step,
                mask: mean_of(evals.iter().map(|e| e.components.mask)),
                local: mean_of(evals.iter().map(|e| e.components.local_value())),
                align_reg: mean_of(evals.iter().map(|e| e.components.align_reg)),
                fusion: mean_of(evals.iter().map(|e| e.components.fusion_value())),
                total,
                skipped,
            });
        }
    }
    Ok(log)
}
