use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stylemix_client::Client;
use stylemix_core::api::{CodeSpec, ComposeContext, ComposeRequest, ComposeResponse, DirectionRef, DirectionVector, Directions, EditBlock, SampleRequest};
use stylemix_core::checkpoint::Checkpoint;
use stylemix_core::evaluation::{evaluate_with_heatmaps, run_ablation, AblationConfig, AblationVariant, EvalConfig};
use stylemix_core::fusion_net::TOY_ALIGN_LAYERS;
use stylemix_core::generator::ToyGenerator;
use stylemix_core::hierarchy::{build_tree, Topology};
use stylemix_core::image_io;
use stylemix_core::segmentation::{fit_region_model, parse_labeling, Labeling, SegmentConfig};
use stylemix_core::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "stylemix", version, about = "Region-wise style-code fusion on a toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the toy generator and write it as a checkpoint.
    GenInit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the region model by clustering deep features.
    Segment {
        #[arg(long)]
        generator: PathBuf,
        /// Segmentation config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manual cluster labels, `{"0": "disc", ...}`.
        #[arg(long)]
        labeling: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every node of a fusion tree, or a single node.
    Train(TrainArgs),
    /// Compose an image from a request JSON.
    Compose {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        outputs: ExtraOutputs,
    },
    /// Apply an edit direction to chosen regions of a base code.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        /// Base code JSON: layer arrays, a saved code or `{"seed": n}`.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        strength: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        regions: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        outputs: ExtraOutputs,
    },
    /// Sample a style code.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        psi: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disentanglement metrics and heatmaps, optionally with ablations.
    Eval(EvalArgs),
    /// Start the compose service.
    Serve {
        #[arg(long, alias = "tree")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        directions: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint with generator, region model and tree.
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    regions_model: Option<PathBuf>,
    /// Directory of `<id>.json` edit directions.
    #[arg(long)]
    directions: Option<PathBuf>,
    /// Use a running compose service instead of a local checkpoint.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Debug, Args)]
struct ExtraOutputs {
    /// Write the fused code as JSON.
    #[arg(long)]
    code_out: Option<PathBuf>,
    /// Write the run-length encoded region masks as JSON.
    #[arg(long)]
    masks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Checkpoint holding the generator (and usually the region model).
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    regions_model: Option<PathBuf>,
    /// Existing tree checkpoint to continue from.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Topology JSON; the toy tree when omitted.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// A training config, or a map from node name (or `*`) to configs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step counts of all three stages, e.g. `20,40,40`.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Train only this node.
    #[arg(long)]
    node: Option<String>,
    /// Write the training log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    regions_model: Option<PathBuf>,
    /// Evaluation config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also train and evaluate every ablation variant of the root node.
    #[arg(long)]
    ablations: bool,
    /// Training config for the ablations.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

/// An error in how the command was invoked rather than in running it.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Merges checkpoints; later sources override earlier ones per component.
fn merge(paths: &[Option<&PathBuf>]) -> anyhow::Result<Checkpoint> {
    let mut out = Checkpoint::default();
    for path in paths.iter().flatten() {
        let c = load(path)?;
        out.generator = c.generator.or(out.generator);
        out.region_model = c.region_model.or(out.region_model);
        out.tree = c.tree.or(out.tree);
        out.configs.extend(c.configs);
        out.seeds.extend(c.seeds);
    }
    Ok(out)
}

fn local_context(model: &ModelArgs) -> anyhow::Result<ComposeContext> {
    if model.tree.is_none() {
        return Err(usage("--tree is required unless --server is given"));
    }
    let c = merge(&[model.tree.as_ref(), model.generator.as_ref(), model.regions_model.as_ref()])?;
    let directions = match &model.directions {
        Some(d) => Directions::load_dir(d)?,
        None => Directions::default(),
    };
    Ok(ComposeContext::new(
        c.require_generator()?.clone(),
        c.require_region_model()?.clone(),
        c.require_tree()?.clone(),
        directions,
    )?)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn compose_any(model: &ModelArgs, req: ComposeRequest) -> anyhow::Result<ComposeResponse> {
    match &model.server {
        Some(url) => Ok(runtime()?.block_on(Client::new(url.clone()).compose(&req))?),
        None => Ok(local_context(model)?.compose(&req)?),
    }
}

fn write_outputs(resp: &ComposeResponse, out: &Path, extra: &ExtraOutputs) -> anyhow::Result<()> {
    image_io::write_png(out, &image_io::from_base64(&resp.image_png)?)?;
    if let Some(p) = &extra.code_out {
        write_json(p, &resp.s_final)?;
    }
    if let Some(p) = &extra.masks_out {
        write_json(p, &resp.masks)?;
    }
    Ok(())
}

fn steps(s: &Option<Vec<usize>>) -> anyhow::Result<Option<[usize; 3]>> {
    match s {
        None => Ok(None),
        Some(v) => <[usize; 3]>::try_from(v.as_slice())
            .map(Some)
            .map_err(|_| usage("--steps takes three comma-separated counts")),
    }
}

fn train_configs(args: &TrainArgs, inherited: &BTreeMap<String, TrainConfig>) -> anyhow::Result<BTreeMap<String, TrainConfig>> {
    let mut configs = match &args.config {
        None if !inherited.is_empty() => inherited.clone(),
        None => BTreeMap::from([("*".to_string(), TrainConfig::toy())]),
        Some(path) => {
            let value: serde_json::Value = read_json(path)?;
            let per_node = value.as_object().is_some_and(|m| !m.is_empty() && m.values().all(|v| v.is_object()));
            if per_node {
                serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?
            } else {
                BTreeMap::from([(
                    "*".to_string(),
                    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?,
                )])
            }
        }
    };
    let steps = steps(&args.steps)?;
    for c in configs.values_mut() {
        if let Some(seed) = args.seed {
            c.seed = seed;
        }
        if let Some(s) = steps {
            c.steps = s;
        }
        c.validate()?;
    }
    Ok(configs)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    if args.generator.is_none() && args.tree.is_none() {
        return Err(usage("train needs --generator or --tree"));
    }
    let mut ckpt = merge(&[args.tree.as_ref(), args.generator.as_ref(), args.regions_model.as_ref()])?;
    let generator = ckpt.require_generator()?.clone();
    let model = ckpt.require_region_model()?.clone();
    let configs = train_configs(&args, &ckpt.configs)?;
    let seed = args.seed.unwrap_or(0);
    let mut tree = match (ckpt.tree.take(), &args.topology) {
        (Some(t), None) => t,
        (_, topo) => {
            let topology = match topo {
                Some(p) => Topology::from_json(&std::fs::read_to_string(p)?)?,
                None => Topology::toy(),
            };
            ckpt.seeds.insert("tree".into(), seed);
            build_tree(&topology, generator.layout(), Some(TOY_ALIGN_LAYERS), seed)?
        }
    };
    let log = match &args.node {
        None => tree.train(&configs, &generator, &model)?,
        Some(name) => {
            let config = configs
                .get(name)
                .or_else(|| configs.get("*"))
                .ok_or_else(|| usage(format!("no training config for node {name}")))?;
            if !tree.nodes.contains_key(name) {
                return Err(usage(format!("unknown node {name}")));
            }
            tree.train_one(name, &generator, &model, config)?
        }
    };
    eprintln!("trained {} steps; {}", log.records.len(), serde_json::to_string(&log.counters)?);
    if let Some(p) = &args.log {
        std::fs::write(p, log.to_jsonl())?;
    }
    ckpt.configs = configs;
    ckpt.tree = Some(tree);
    ckpt.save(&args.out)?;
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let ckpt = merge(&[Some(&args.tree), args.regions_model.as_ref()])?;
    let generator: &ToyGenerator = ckpt.require_generator()?;
    let model = ckpt.require_region_model()?;
    let tree = ckpt.require_tree()?;
    let mut config: EvalConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    let (report, heatmaps) = evaluate_with_heatmaps(generator, tree, model, &config)?;
    for h in &heatmaps {
        image_io::write_png(&args.out.join(format!("heatmap_{}.png", h.region)), &image_io::heatmap_png(h.size, &h.data)?)?;
    }
    write_json(&args.out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    if args.ablations {
        let mut train: TrainConfig = match &args.train_config {
            Some(p) => read_json(p)?,
            None => TrainConfig::toy(),
        };
        if let Some(s) = steps(&args.steps)? {
            train.steps = s;
        }
        train.seed = config.seed;
        let ab = AblationConfig {
            train,
            node_seed: config.seed,
            eval: config,
        };
        let mut results = BTreeMap::new();
        for v in AblationVariant::ALL {
            let r = run_ablation(v, generator, model, &ab)?;
            let key = serde_json::to_value(v)?.as_str().unwrap_or_default().to_string();
            results.insert(key, serde_json::json!({ "report": r.report, "counters": r.counters }));
        }
        write_json(&args.out.join("ablations.json"), &results)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenInit { seed, out } => {
            let g = ToyGenerator::build(seed);
            eprintln!("generator checksum {}", g.checksum());
            Checkpoint {
                generator: Some(g),
                seeds: BTreeMap::from([("generator".to_string(), seed)]),
                ..Default::default()
            }
            .save(&out)?;
        }
        Command::Segment {
            generator,
            config,
            labeling,
            seed,
            out,
        } => {
            let mut ckpt = load(&generator)?;
            let g = ckpt.require_generator()?.clone();
            let mut config: SegmentConfig = match &config {
                Some(p) => read_json(p)?,
                None => SegmentConfig::default(),
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let labeling = match &labeling {
                Some(p) => Labeling::Manual(parse_labeling(&std::fs::read_to_string(p)?)?),
                None => Labeling::Auto,
            };
            let model = fit_region_model(&g, &config, &labeling)?;
            eprintln!("cluster labels {:?}", model.labeling());
            ckpt.seeds.insert("segment".into(), config.seed);
            ckpt.region_model = Some(model);
            ckpt.save(&out)?;
        }
        Command::Train(args) => train(args)?,
        Command::Compose {
            model,
            request,
            out,
            outputs,
        } => {
            let req: ComposeRequest = read_json(&request)?;
            write_outputs(&compose_any(&model, req)?, &out, &outputs)?;
        }
        Command::Edit {
            model,
            base,
            direction,
            strength,
            regions,
            out,
            outputs,
        } => {
            let base: CodeSpec = read_json(&base)?;
            let vector: DirectionVector = read_json(&direction)?;
            let all_regions = match &model.server {
                Some(url) => runtime()?.block_on(Client::new(url.clone()).layout())?.regions,
                None => local_context(&model)?.tree.regions.clone(),
            };
            let req = ComposeRequest {
                regions: all_regions.into_iter().map(|r| (r, base.clone())).collect(),
                global: Some(base),
                edit: Some(EditBlock {
                    direction: DirectionRef::Inline { vector },
                    strength,
                    regions: regions.into_iter().collect::<BTreeSet<_>>(),
                }),
                ..Default::default()
            };
            write_outputs(&compose_any(&model, req)?, &out, &outputs)?;
        }
        Command::Sample { model, seed, psi, out } => {
            let req = SampleRequest { seed, psi };
            let resp = match &model.server {
                Some(url) => runtime()?.block_on(Client::new(url.clone()).sample(seed, psi))?,
                None => {
                    let c = merge(&[model.tree.as_ref(), model.generator.as_ref()])?;
                    if c.generator.is_none() {
                        return Err(usage("sample needs --generator, --tree or --server"));
                    }
                    stylemix_core::api::sample(c.require_generator()?, &req)?
                }
            };
            match out {
                Some(p) => write_json(&p, &resp)?,
                None => println!("{}", serde_json::to_string(&resp)?),
            }
        }
        Command::Eval(args) => eval(args)?,
        Command::Serve {
            checkpoint,
            port,
            host,
            directions,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| usage(format!("bad address {host}:{port}: {e}")))?;
            let _ = tracing_subscriber::fmt()
                .with_writer(std::io::stderr)
                .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
                .try_init();
            runtime()?.block_on(stylemix_service::serve(stylemix_service::ServeConfig {
                addr,
                checkpoint,
                directions,
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
