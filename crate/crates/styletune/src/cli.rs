//! Command-line pipelines over the library: pretrain, finetune, swap,
//! generate, grid, edit, sweep-swap, verify. Every output-producing
//! subcommand echoes its fully resolved configuration as `config.json` in
//! the output directory, and is re-runnable from that file alone
//! (`--config`); explicit flags override file values.

use crate::checkpoint::Checkpoint;
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::freeze::FreezePlan;
use crate::generator::{NoiseMode, StyleCode, BASE_RESOLUTION};
use crate::latent::{self, EditSpec};
use crate::swap::{self, Side, SwapPlan};
use crate::tensor::Tensor;
use crate::train::{self, RunConfig, RunMode};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "styletune", version, about = "Desk-scale style-based GAN fine-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a source model on a toy or folder dataset
    Pretrain(TrainArgs),
    /// Fine-tune a target model from a source checkpoint
    Finetune(TrainArgs),
    /// Merge two checkpoints at a resolution boundary
    Swap(SwapArgs),
    /// Synthesize images from a checkpoint for a list of z seeds
    Generate(GenerateArgs),
    /// Render a seeds-by-checkpoints comparison grid
    Grid(GridArgs),
    /// Extrapolate a latent edit and render it on a target checkpoint
    Edit(EditArgs),
    /// Run swap over every ladder boundary, one grid per boundary
    #[command(name = "sweep-swap")]
    SweepSwap(SweepArgs),
    /// Check run-directory invariants: freeze, round-trip, swap identities
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    w_dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// none | freezeg | freezesg
    #[arg(long)]
    freeze_mode: Option<String>,
    #[arg(long)]
    freeze_blocks: Option<usize>,
    #[arg(long)]
    freeze_d_blocks: Option<usize>,
    #[arg(long)]
    lambda_structure: Option<f64>,
    #[arg(long)]
    structure_layers: Option<usize>,
    /// toy_source | toy_target | folder
    #[arg(long)]
    dataset_kind: Option<String>,
    #[arg(long)]
    dataset_path: Option<PathBuf>,
    #[arg(long)]
    dataset_count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force reproducible seeding (default). `--deterministic false` draws a
    /// fresh seed when none is given.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Source checkpoint (finetune)
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SwapArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Boundary resolution (blocks below it come from the source)
    #[arg(long)]
    boundary: Option<usize>,
    /// source | target
    #[arg(long)]
    mapping_from: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SwapConfig {
    source: PathBuf,
    target: PathBuf,
    boundary: usize,
    mapping_from: Side,
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated z seeds
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GenerateConfig {
    ckpt: PathBuf,
    seeds: Vec<u64>,
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated checkpoint stems, one column each
    #[arg(long, value_delimiter = ',')]
    ckpt: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GridConfig {
    ckpts: Vec<PathBuf>,
    seeds: Vec<u64>,
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target checkpoint the edited codes are rendered on
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Latent file holding the fixed base code w_s
    #[arg(long)]
    base: Option<PathBuf>,
    /// Latent file holding the edited/optimized code w
    #[arg(long)]
    edited: Option<PathBuf>,
    /// Derive the edit direction from this checkpoint's own samples
    /// (eye-darkness scorer) instead of latent files
    #[arg(long)]
    derive: Option<PathBuf>,
    /// Extrapolation strength; repeatable
    #[arg(long, action = clap::ArgAction::Append)]
    alpha: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EditConfig {
    ckpt: PathBuf,
    #[serde(default)]
    base: Option<PathBuf>,
    #[serde(default)]
    edited: Option<PathBuf>,
    #[serde(default)]
    derive: Option<PathBuf>,
    alphas: Vec<f64>,
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    mapping_from: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SweepConfig {
    source: PathBuf,
    target: PathBuf,
    mapping_from: Side,
    seeds: Vec<u64>,
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run directory to check
    #[arg(long)]
    run: PathBuf,
}

/// Entry point: parse argv, dispatch, map failures to exit codes
/// (2 config/arguments, 3 checkpoint, 4 runtime).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("bad arguments");
            eprintln!("error[config]: {line}");
            return 2;
        }
    };
    let outcome = match cli.cmd {
        Command::Pretrain(a) => cmd_train(RunMode::Pretrain, a),
        Command::Finetune(a) => cmd_train(RunMode::Finetune, a),
        Command::Swap(a) => cmd_swap(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Edit(a) => cmd_edit(a),
        Command::SweepSwap(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            e.exit_code()
        }
    }
}

fn read_json_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

fn write_json_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text)?;
    Ok(())
}

fn cmd_train(mode: RunMode, a: TrainArgs) -> Result<i32> {
    let mut cfg: RunConfig = match &a.config {
        Some(path) => read_json_config(path)?,
        None => {
            let mut c = RunConfig::default();
            if mode == RunMode::Finetune {
                c.dataset.kind = DatasetKind::ToyTarget;
                c.dataset.seed = 1;
                c.dataset.flip = true;
            }
            c
        }
    };
    cfg.mode = mode;
    if let Some(r) = a.resolution {
        cfg.model.resolution = r;
        cfg.dataset.resolution = r;
    }
    if let Some(v) = a.w_dim {
        cfg.model.w_dim = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr_g {
        cfg.lr_g = v;
    }
    if let Some(v) = a.lr_d {
        cfg.lr_d = v;
    }
    if let Some(v) = a.deterministic {
        cfg.deterministic = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    } else if !cfg.deterministic && a.config.is_none() {
        cfg.seed = rand::random();
    }
    if let Some(v) = &a.freeze_mode {
        cfg.freeze_mode = v.parse()?;
    }
    if let Some(v) = a.freeze_blocks {
        cfg.freeze_blocks = v;
    }
    if let Some(v) = a.freeze_d_blocks {
        cfg.freeze_d_blocks = v;
    }
    if let Some(v) = a.lambda_structure {
        cfg.structure.weight = v;
    }
    if let Some(v) = a.structure_layers {
        cfg.structure.layers = v;
    }
    if let Some(v) = &a.dataset_kind {
        cfg.dataset.kind = v.parse()?;
    }
    if let Some(v) = &a.dataset_path {
        cfg.dataset.path = Some(v.clone());
    }
    if let Some(v) = a.dataset_count {
        cfg.dataset.count = v;
    }
    if let Some(v) = &a.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &a.source {
        cfg.source_checkpoint = Some(v.clone());
    }
    cfg.validate()?;
    train::run(&cfg).map_err(promote_training_errors)?;
    println!("run complete: {}", cfg.out_dir.display());
    Ok(0)
}

/// I/O and numeric failures inside a training loop count as runtime training
/// failures for exit-code purposes.
fn promote_training_errors(e: Error) -> Error {
    match e {
        Error::Io(inner) => Error::Training(format!("io failure during run: {inner}")),
        other => other,
    }
}

fn cmd_swap(a: SwapArgs) -> Result<i32> {
    let mut cfg: SwapConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => SwapConfig {
            source: PathBuf::new(),
            target: PathBuf::new(),
            boundary: 0,
            mapping_from: Side::Target,
            out: PathBuf::from("swap-out"),
        },
    };
    if let Some(v) = a.source {
        cfg.source = v;
    }
    if let Some(v) = a.target {
        cfg.target = v;
    }
    if let Some(v) = a.boundary {
        cfg.boundary = v;
    }
    if let Some(v) = &a.mapping_from {
        cfg.mapping_from = parse_side(v)?;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if cfg.source.as_os_str().is_empty() || cfg.target.as_os_str().is_empty() {
        return Err(Error::Config("swap needs --source and --target".into()));
    }
    if cfg.boundary == 0 {
        return Err(Error::Config("swap needs --boundary".into()));
    }
    let source = Checkpoint::load(&cfg.source)?;
    let target = Checkpoint::load(&cfg.target)?;
    let plan = SwapPlan {
        boundary_resolution: cfg.boundary,
        mapping_from: cfg.mapping_from,
    };
    let swapped = swap::swap(&source, &target, &plan)?;
    write_json_config(&cfg.out, &cfg)?;
    std::fs::write(
        cfg.out.join("swap_plan.json"),
        serde_json::to_string_pretty(&plan)?,
    )?;
    swapped.save(&cfg.out.join("swapped.ckpt"))?;
    let report = swap::diff(&swapped, &target)?;
    let changed = report.iter().filter(|(_, d)| *d > 0.0).count();
    println!(
        "swapped at boundary {}: {} of {} tensors from source -> {}",
        plan.boundary_resolution,
        changed,
        report.len(),
        cfg.out.join("swapped.ckpt").display()
    );
    Ok(0)
}

fn parse_side(s: &str) -> Result<Side> {
    match s.to_ascii_lowercase().as_str() {
        "source" => Ok(Side::Source),
        "target" => Ok(Side::Target),
        other => Err(Error::InvalidArgument(format!(
            "unknown side '{other}' (expected source|target)"
        ))),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<i32> {
    let mut cfg: GenerateConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => GenerateConfig {
            ckpt: PathBuf::new(),
            seeds: vec![0, 1, 2, 3],
            out: PathBuf::from("generate-out"),
        },
    };
    if let Some(v) = a.ckpt {
        cfg.ckpt = v;
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if cfg.ckpt.as_os_str().is_empty() {
        return Err(Error::Config("generate needs --ckpt".into()));
    }
    let ckpt = Checkpoint::load(&cfg.ckpt)?;
    let gen = ckpt.to_generator()?;
    write_json_config(&cfg.out, &cfg)?;
    for &seed in &cfg.seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = Tensor::<f32>::randn(&[1, gen.config().w_dim], &mut rng);
        let w = gen.map_latent_batch(&z)?;
        let trace = gen.synthesize_batch(&w, NoiseMode::Deterministic)?;
        let r = gen.config().resolution;
        let img = crate::data::to_rgb8(&Tensor::new(&[3, r, r], trace.image.data().to_vec()));
        img.save(cfg.out.join(format!("seed_{seed}.png")))?;
    }
    println!("wrote {} images to {}", cfg.seeds.len(), cfg.out.display());
    Ok(0)
}

fn cmd_grid(a: GridArgs) -> Result<i32> {
    let mut cfg: GridConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => GridConfig {
            ckpts: Vec::new(),
            seeds: vec![0, 1, 2, 3],
            out: PathBuf::from("grid-out"),
        },
    };
    if !a.ckpt.is_empty() {
        cfg.ckpts = a.ckpt;
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if cfg.ckpts.is_empty() {
        return Err(Error::Config("grid needs --ckpt".into()));
    }
    let ckpts: Vec<Checkpoint> = cfg
        .ckpts
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<_>>()?;
    write_json_config(&cfg.out, &cfg)?;
    let path = cfg.out.join("grid.png");
    train::generate_grid(&ckpts, &cfg.seeds, &path)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_edit(a: EditArgs) -> Result<i32> {
    let mut cfg: EditConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => EditConfig {
            ckpt: PathBuf::new(),
            base: None,
            edited: None,
            derive: None,
            alphas: vec![0.0, 0.5, 1.0, 2.0],
            out: PathBuf::from("edit-out"),
        },
    };
    if let Some(v) = a.ckpt {
        cfg.ckpt = v;
    }
    if let Some(v) = a.base {
        cfg.base = Some(v);
    }
    if let Some(v) = a.edited {
        cfg.edited = Some(v);
    }
    if let Some(v) = a.derive {
        cfg.derive = Some(v);
    }
    if !a.alpha.is_empty() {
        cfg.alphas = a.alpha;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if cfg.ckpt.as_os_str().is_empty() {
        return Err(Error::Config("edit needs --ckpt".into()));
    }
    let target = Checkpoint::load(&cfg.ckpt)?;
    let spec = match (&cfg.base, &cfg.edited, &cfg.derive) {
        (Some(b), Some(e), _) => EditSpec {
            base: StyleCode {
                w: latent::load_latent(b)?,
            },
            edited: StyleCode {
                w: latent::load_latent(e)?,
            },
            alpha: 1.0,
        },
        (_, _, derive) => {
            // derive from the given checkpoint's samples (default: the target)
            let src = match derive {
                Some(p) => Checkpoint::load(p)?,
                None => target.clone(),
            };
            let gen = src.to_generator()?;
            latent::derive_attribute_direction(&gen, 64, 424242, &latent::eye_darkness_score)?
        }
    };
    write_json_config(&cfg.out, &cfg)?;
    latent::save_latent(&cfg.out.join("base.lat"), &spec.base.w)?;
    latent::save_latent(&cfg.out.join("edited.lat"), &spec.edited.w)?;
    for &alpha in &cfg.alphas {
        let w_prime = latent::extrapolate(&EditSpec {
            alpha,
            ..spec.clone()
        })?;
        let trace = latent::cross_apply(&w_prime, &target, NoiseMode::Deterministic)?;
        let r = target.config.resolution;
        let img = crate::data::to_rgb8(&Tensor::new(&[3, r, r], trace.image.data().to_vec()));
        img.save(cfg.out.join(format!("alpha_{alpha:+.2}.png")))?;
        latent::save_latent(&cfg.out.join(format!("alpha_{alpha:+.2}.lat")), &w_prime.w)?;
    }
    println!(
        "wrote {} edited renders to {}",
        cfg.alphas.len(),
        cfg.out.display()
    );
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    let mut cfg: SweepConfig = match &a.config {
        Some(p) => read_json_config(p)?,
        None => SweepConfig {
            source: PathBuf::new(),
            target: PathBuf::new(),
            mapping_from: Side::Target,
            seeds: vec![0, 1, 2, 3],
            out: PathBuf::from("sweep-out"),
        },
    };
    if let Some(v) = a.source {
        cfg.source = v;
    }
    if let Some(v) = a.target {
        cfg.target = v;
    }
    if let Some(v) = &a.mapping_from {
        cfg.mapping_from = parse_side(v)?;
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if cfg.source.as_os_str().is_empty() || cfg.target.as_os_str().is_empty() {
        return Err(Error::Config("sweep-swap needs --source and --target".into()));
    }
    let source = Checkpoint::load(&cfg.source)?;
    let target = Checkpoint::load(&cfg.target)?;
    write_json_config(&cfg.out, &cfg)?;
    let boundaries = SwapPlan::boundaries(&target.config);
    for boundary in boundaries {
        let plan = SwapPlan {
            boundary_resolution: boundary,
            mapping_from: cfg.mapping_from,
        };
        let swapped = swap::swap(&source, &target, &plan)?;
        let dir = cfg.out.join(format!("boundary_{boundary}"));
        std::fs::create_dir_all(&dir)?;
        swapped.save(&dir.join("swapped.ckpt"))?;
        train::generate_grid(
            &[source.clone(), swapped, target.clone()],
            &cfg.seeds,
            &dir.join("grid.png"),
        )?;
        println!("boundary {boundary}: wrote {}", dir.display());
    }
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let run_dir = &a.run;
    let cfg: RunConfig = read_json_config(&run_dir.join("config.json"))?;
    let plan: FreezePlan = read_json_config(&run_dir.join("freeze_plan.json"))?;
    let snapshots = run_dir.join("snapshots");
    let first = Checkpoint::load(&snapshots.join("step_0.ckpt"))?;
    let last = Checkpoint::load(&snapshots.join(format!("step_{}.ckpt", cfg.steps)))?;
    let mut failures = 0;

    // 1. frozen parameters bit-identical between first and last snapshot
    let ok = {
        let fm = first.tensor_map();
        let lm = last.tensor_map();
        plan.frozen_names.iter().all(|n| {
            matches!((fm.get(n.as_str()), lm.get(n.as_str())), (Some(a), Some(b)) if a.bit_eq(b))
        })
    };
    println!(
        "verify frozen-parameters ({} names): {}",
        plan.frozen_names.len(),
        if ok { "PASS" } else { "FAIL" }
    );
    failures += usize::from(!ok);

    // 2. checkpoint round-trip is the identity
    let tmp = run_dir.join("verify_roundtrip.ckpt");
    last.save(&tmp)?;
    let reloaded = Checkpoint::load(&tmp)?;
    let (jp, bp) = crate::checkpoint::pair_paths(&tmp);
    let _ = std::fs::remove_file(jp);
    let _ = std::fs::remove_file(bp);
    let ok = last.same_table(&reloaded)
        && last
            .tensors
            .iter()
            .zip(&reloaded.tensors)
            .all(|((_, x), (_, y))| x.bit_eq(y));
    println!("verify checkpoint-roundtrip: {}", if ok { "PASS" } else { "FAIL" });
    failures += usize::from(!ok);

    // 3. swap identities against itself
    let id_target = swap::swap(
        &last,
        &last,
        &SwapPlan {
            boundary_resolution: BASE_RESOLUTION,
            mapping_from: Side::Target,
        },
    )?;
    let id_source = swap::swap(
        &last,
        &last,
        &SwapPlan {
            boundary_resolution: cfg.model.resolution * 2,
            mapping_from: Side::Source,
        },
    )?;
    let ok = [id_target, id_source].iter().all(|c| {
        c.tensors
            .iter()
            .zip(&last.tensors)
            .all(|((_, x), (_, y))| x.bit_eq(y))
    });
    println!("verify swap-identities: {}", if ok { "PASS" } else { "FAIL" });
    failures += usize::from(!ok);

    if failures == 0 {
        println!("verify: all invariants hold");
        Ok(0)
    } else {
        println!("verify: {failures} invariant(s) violated");
        Ok(1)
    }
}
