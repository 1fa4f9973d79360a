//! Training loops: pretraining a source model on the toy source domain, and
//! fine-tuning a target model initialized from a source checkpoint under a
//! freeze plan and/or structure loss, with a frozen copy of the source
//! generator providing the per-resolution RGB references.
//!
//! Every run owns its models on one training worker. A run directory holds
//! `config.json` (the fully resolved configuration), `log.jsonl` (one loss
//! line per step), and `snapshots/step_{N}.ckpt` pairs. Runs are bit-for-bit
//! reproducible from their emitted config.

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetKind, DatasetSpec};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::freeze::{self, FreezeMode, FreezePlan};
use crate::generator::{Generator, ModelConfig, NoiseMode};
use crate::objectives::{
    self, adversarial_literal, adversarial_losses_graph, generator_objective_graph,
    r1_penalty_graph, structure_loss_graph, StructureLossConfig,
};
use crate::optim::Adam;
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Pretrain,
    Finetune,
}

/// Fully resolved training configuration; echoed to the run directory as
/// `config.json` and sufficient to reproduce the run bit-for-bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub freeze_mode: FreezeMode,
    pub freeze_blocks: usize,
    pub freeze_d_blocks: usize,
    pub structure: StructureLossConfig,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub ema_decay: Option<f64>,
    pub snapshot_interval: usize,
    pub dataset: DatasetSpec,
    pub source_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            mode: RunMode::Pretrain,
            steps: 2000,
            batch: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            seed: 0,
            freeze_mode: FreezeMode::None,
            freeze_blocks: 2,
            freeze_d_blocks: 0,
            structure: StructureLossConfig {
                layers: 3,
                weight: 0.0,
            },
            r1_gamma: 1.0,
            r1_interval: 16,
            ema_decay: None,
            snapshot_interval: 0,
            dataset: DatasetSpec {
                kind: DatasetKind::ToySource,
                count: 1000,
                seed: 0,
                path: None,
                resolution: model.resolution,
                flip: false,
            },
            model,
            source_checkpoint: None,
            out_dir: PathBuf::from("runs/out"),
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be > 0".into()));
        }
        if self.model.mbstd && self.batch < 2 {
            return Err(Error::Config(
                "batch must be >= 2 while minibatch-stddev is on".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        self.dataset.validate()?;
        if self.dataset.resolution != self.model.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} != model resolution {}",
                self.dataset.resolution, self.model.resolution
            )));
        }
        let n_blocks = self.model.num_blocks();
        if self.structure.layers == 0 || self.structure.layers > n_blocks {
            return Err(Error::Config(format!(
                "structure layers must be in 1..={n_blocks}"
            )));
        }
        if self.structure.weight < 0.0 {
            return Err(Error::Config("structure weight must be >= 0".into()));
        }
        if self.r1_gamma < 0.0 {
            return Err(Error::Config("r1 gamma must be >= 0".into()));
        }
        if self.r1_interval == 0 {
            return Err(Error::Config("r1 interval must be >= 1".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0 < d && d < 1.0) {
                return Err(Error::Config(format!("ema decay must be in (0,1), got {d}")));
            }
        }
        if self.mode == RunMode::Finetune && self.source_checkpoint.is_none() {
            return Err(Error::Config(
                "finetune needs a source checkpoint".into(),
            ));
        }
        Ok(())
    }
}

/// One `log.jsonl` line; field order is the serialization order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub structure_loss: f64,
    pub r1_penalty: f64,
    pub per_layer: Vec<f64>,
    pub d_acc: f64,
    pub adv_literal: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-step noise seed derived from the run seed.
pub fn noise_seed(run_seed: u64, step: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(step as u64 + 1))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run a training job according to its mode.
pub fn run(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    match cfg.mode {
        RunMode::Pretrain => pretrain(cfg),
        RunMode::Finetune => {
            let path = cfg.source_checkpoint.as_ref().expect("validated");
            let source = Checkpoint::load(path)?;
            finetune(cfg, &source)
        }
    }
}

/// Train a source model from random initialization.
pub fn pretrain(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.mode != RunMode::Pretrain {
        return Err(Error::Config("pretrain called with finetune config".into()));
    }
    let mut init_rng = stream_rng(cfg.seed, 0);
    let gen = Generator::<f32>::init(cfg.model.clone(), &mut init_rng)?;
    let disc = Discriminator::<f32>::init(cfg.model.clone(), &mut init_rng)?;
    train_loop(cfg, gen, disc, None)
}

/// Fine-tune a target model initialized from the source checkpoint, keeping
/// a frozen copy of the source generator for the structure loss.
pub fn finetune(cfg: &RunConfig, source_ckpt: &Checkpoint) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.mode != RunMode::Finetune {
        return Err(Error::Config("finetune called with pretrain config".into()));
    }
    source_ckpt.ensure_matches(&cfg.model)?;
    let gen = source_ckpt.to_generator()?;
    let disc = source_ckpt.to_discriminator()?;
    let source_gen = source_ckpt.to_generator()?;
    train_loop(cfg, gen, disc, Some(source_gen))
}

fn named_grads(
    g: &crate::autodiff::Graph<f32>,
    loss: crate::autodiff::Var,
    params: &[crate::autodiff::Var],
    names: &[String],
) -> HashMap<String, Tensor<f32>> {
    let grads = g.grad(loss, params);
    names
        .iter()
        .zip(grads)
        .filter_map(|(n, gv)| gv.map(|v| (n.clone(), g.value(v))))
        .collect()
}

fn train_loop(
    cfg: &RunConfig,
    mut gen: Generator<f32>,
    mut disc: Discriminator<f32>,
    source: Option<Generator<f32>>,
) -> Result<Checkpoint> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out.join("snapshots"))?;
    std::fs::create_dir_all(out.join("grids"))?;
    let mut cfg_file = std::fs::File::create(out.join("config.json"))?;
    serde_json::to_writer_pretty(&mut cfg_file, cfg)?;
    cfg_file.write_all(b"\n")?;

    let dataset = Dataset::load(&cfg.dataset)?;
    std::fs::write(
        out.join("dataset.json"),
        serde_json::to_string_pretty(&dataset.manifest_json())?,
    )?;

    let gen_names: Vec<String> = gen.list_parameters().into_iter().map(|(n, _)| n).collect();
    let disc_names: Vec<String> = disc.list_parameters().into_iter().map(|(n, _)| n).collect();
    let plan = freeze::build_plan(
        cfg.freeze_mode,
        cfg.freeze_blocks,
        cfg.freeze_d_blocks,
        &gen_names,
        &disc_names,
    )?;
    std::fs::write(out.join("freeze_plan.json"), serde_json::to_string_pretty(&plan)?)?;
    let all_names: std::collections::HashSet<String> =
        gen_names.iter().chain(disc_names.iter()).cloned().collect();
    let mut opt_g = Adam::new(cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_d = Adam::new(cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2);
    freeze::apply_plan(&plan, &mut opt_g, &all_names)?;
    freeze::apply_plan(&plan, &mut opt_d, &all_names)?;

    // Baseline copies of the frozen tensors for the post-step assertion.
    let frozen_set = plan.frozen_set();
    let snapshot_frozen = |gen: &Generator<f32>, disc: &Discriminator<f32>| {
        let mut frozen: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut grab = |name: String, t: &Tensor<f32>| {
            if frozen_set.contains(&name) {
                frozen.push((name, t.clone()));
            }
        };
        gen.visit(&mut |n, t| grab(n, t));
        disc.visit(&mut |n, t| grab(n, t));
        frozen
    };
    let frozen_baseline = snapshot_frozen(&gen, &disc);

    let source_baseline: Option<Vec<(String, Tensor<f32>)>> =
        source.as_ref().map(|s| s.list_parameters());

    let mut ema = cfg.ema_decay.map(|_| gen.clone());

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("log.jsonl"))?);
    let mut rng_data = stream_rng(cfg.seed, 1);
    let mut rng_z = stream_rng(cfg.seed, 2);

    save_snapshot(out, 0, &gen, &disc, ema.as_ref())?;

    for step in 0..cfg.steps {
        let z = Tensor::<f32>::randn(&[cfg.batch, cfg.model.w_dim], &mut rng_z);
        let noise = gen.sample_noise(cfg.batch, NoiseMode::Random(noise_seed(cfg.seed, step)));

        // Target generator forward, with gradients (reused for the G step).
        let gg = crate::autodiff::Graph::<f32>::new();
        let gbound = gen.bind(&gg, true);
        let zc = gg.constant(z.clone());
        let w_t = gen.map_latent_graph(&gg, zc, &gbound)?;
        let trace = gen.synthesize_graph(&gg, w_t, &noise, &gbound)?;
        let fakes = gg.value(trace.image);

        // Discriminator step on detached fakes vs real target images.
        let reals = dataset.batch(cfg.batch, &mut rng_data);
        let gd = crate::autodiff::Graph::<f32>::new();
        let dbound = disc.bind(&gd, true);
        let fake_leaf = gd.constant(fakes.clone());
        let fake_logits = disc.discriminate_graph(&gd, fake_leaf, &dbound)?;
        let apply_r1 = cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0;
        let real_leaf = if apply_r1 {
            gd.variable(reals.clone())
        } else {
            gd.constant(reals.clone())
        };
        let real_logits = disc.discriminate_graph(&gd, real_leaf, &dbound)?;
        let (d_loss_v, _) = adversarial_losses_graph(&gd, real_logits, fake_logits);
        let r1_v = if apply_r1 {
            r1_penalty_graph(&gd, real_logits, real_leaf, cfg.r1_gamma)
        } else {
            gd.constant(Tensor::scalar(0.0))
        };
        // Lazy regularization: scale by the interval when applied.
        let d_total = gd.add(d_loss_v, gd.scale(r1_v, cfg.r1_interval as f32));
        let d_grads = named_grads(&gd, d_total, &dbound.params, &disc_names);
        opt_d.begin_step();
        disc.visit_mut(&mut |name, p| {
            if let Some(grad) = d_grads.get(&name) {
                opt_d.update(&name, p, grad);
            }
        });

        let d_loss = gd.scalar_value(d_loss_v) as f64;
        let r1_value = gd.scalar_value(r1_v) as f64;
        let (real_vals, fake_vals) = (gd.value(real_logits), gd.value(fake_logits));
        let correct = real_vals.data().iter().filter(|&&v| v > 0.0).count()
            + fake_vals.data().iter().filter(|&&v| v < 0.0).count();
        let d_acc = correct as f64 / (2 * cfg.batch) as f64;
        let adv_lit = adversarial_literal(&real_vals, &fake_vals);

        // Generator step against the just-updated discriminator.
        let dbound_g = disc.bind(&gg, false);
        let fake_logits_g = disc.discriminate_graph(&gg, trace.image, &dbound_g)?;
        let g_adv_v = gg.mean_all(gg.softplus(gg.neg(fake_logits_g)));
        let (structure_total, per_layer) = match &source {
            Some(src) => {
                let w_s = src.map_latent_batch(&z)?;
                let src_trace = src.synthesize_batch_with(&w_s, &noise)?;
                let (total_v, per_v) = structure_loss_graph(
                    &gg,
                    &src_trace.rgb_outputs,
                    &trace.rgb_outputs,
                    &cfg.structure,
                )?;
                let per: Vec<f64> = per_v.iter().map(|&v| gg.scalar_value(v) as f64).collect();
                (Some(total_v), per)
            }
            None => (None, Vec::new()),
        };
        let g_total = match structure_total {
            Some(total_v) if cfg.structure.weight > 0.0 => {
                generator_objective_graph(&gg, g_adv_v, total_v, &cfg.structure)
            }
            _ => g_adv_v,
        };
        let g_grads = named_grads(&gg, g_total, &gbound.params, &gen_names);
        opt_g.begin_step();
        gen.visit_mut(&mut |name, p| {
            if let Some(grad) = g_grads.get(&name) {
                opt_g.update(&name, p, grad);
            }
        });

        if let (Some(ema_gen), Some(decay)) = (&mut ema, cfg.ema_decay) {
            let live = gen.list_parameters();
            let mut idx = 0;
            let d = decay as f32;
            ema_gen.visit_mut(&mut |_, p| {
                let (_, src) = &live[idx];
                for (e, v) in p.data_mut().iter_mut().zip(src.data()) {
                    *e = d * *e + (1.0 - d) * v;
                }
                idx += 1;
            });
        }

        // Post-step enforcement: frozen tensors must be bit-identical.
        check_frozen(&frozen_baseline, &gen, &disc, step)?;

        let structure_value = per_layer[..cfg.structure.layers.min(per_layer.len())]
            .iter()
            .sum::<f64>();
        let line = LogLine {
            step,
            d_loss,
            g_adv_loss: gg.scalar_value(g_adv_v) as f64,
            structure_loss: structure_value,
            r1_penalty: r1_value,
            per_layer,
            d_acc,
            adv_literal: adv_lit,
        };
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n")?;

        let after = step + 1;
        if (cfg.snapshot_interval > 0 && after % cfg.snapshot_interval == 0) || after == cfg.steps {
            log.flush()?;
            save_snapshot(out, after, &gen, &disc, ema.as_ref())?;
        }
    }
    log.flush()?;

    // The source generator must not have moved during the run.
    if let (Some(src), Some(baseline)) = (&source, &source_baseline) {
        for ((name, now), (_, before)) in src.list_parameters().iter().zip(baseline) {
            if !now.bit_eq(before) {
                return Err(Error::Training(format!(
                    "source generator tensor {name} changed during fine-tuning"
                )));
            }
        }
    }

    Ok(Checkpoint::from_models(&gen, Some(&disc)))
}

fn check_frozen(
    baseline: &[(String, Tensor<f32>)],
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    step: usize,
) -> Result<()> {
    if baseline.is_empty() {
        return Ok(());
    }
    let mut current: HashMap<String, Tensor<f32>> = HashMap::new();
    gen.visit(&mut |n, t| {
        current.insert(n, t.clone());
    });
    disc.visit(&mut |n, t| {
        current.insert(n, t.clone());
    });
    for (name, before) in baseline {
        match current.get(name) {
            Some(now) if now.bit_eq(before) => {}
            _ => {
                return Err(Error::Training(format!(
                    "frozen parameter {name} changed at step {step}"
                )));
            }
        }
    }
    Ok(())
}

fn save_snapshot(
    out: &Path,
    step: usize,
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    ema: Option<&Generator<f32>>,
) -> Result<()> {
    let ckpt = Checkpoint::from_models(gen, Some(disc));
    ckpt.save(&out.join("snapshots").join(format!("step_{step}.ckpt")))?;
    if let Some(e) = ema {
        Checkpoint::from_models(e, None)
            .save(&out.join("snapshots").join(format!("step_{step}_ema.ckpt")))?;
    }
    Ok(())
}

/// Render a comparison grid: rows are seeds, columns are checkpoints, with
/// the same z per row across all columns. Deterministic (zero) noise.
pub fn generate_grid(ckpts: &[Checkpoint], z_seeds: &[u64], out_path: &Path) -> Result<()> {
    if ckpts.is_empty() || z_seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "grid needs at least one checkpoint and one seed".into(),
        ));
    }
    let res = ckpts[0].config.resolution;
    let w_dim = ckpts[0].config.w_dim;
    for c in ckpts {
        if c.config.resolution != res || c.config.w_dim != w_dim {
            return Err(Error::IncompatibleCheckpoint(format!(
                "grid checkpoints disagree on resolution/w_dim: {}x{} vs {}x{}",
                res, w_dim, c.config.resolution, c.config.w_dim
            )));
        }
    }
    let gens: Vec<Generator<f32>> = ckpts
        .iter()
        .map(|c| c.to_generator())
        .collect::<Result<_>>()?;
    let mut canvas =
        image::RgbImage::new((ckpts.len() * res) as u32, (z_seeds.len() * res) as u32);
    for (row, &seed) in z_seeds.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = Tensor::<f32>::randn(&[1, w_dim], &mut rng);
        for (col, gen) in gens.iter().enumerate() {
            let w = gen.map_latent_batch(&z)?;
            let trace = gen.synthesize_batch(&w, NoiseMode::Deterministic)?;
            let img =
                crate::data::to_rgb8(&Tensor::new(&[3, res, res], trace.image.data().to_vec()));
            for y in 0..res {
                for x in 0..res {
                    canvas.put_pixel(
                        (col * res + x) as u32,
                        (row * res + y) as u32,
                        *img.get_pixel(x as u32, y as u32),
                    );
                }
            }
        }
    }
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    canvas.save(out_path)?;
    Ok(())
}

/// Median-free drift summary: mean structure metric between the two
/// generators' outputs over `n_codes` shared z codes (deterministic noise).
pub fn eval_structure_drift(
    source: &Generator<f32>,
    target: &Generator<f32>,
    n_codes: usize,
    seed: u64,
) -> Result<f64> {
    if source.config().w_dim != target.config().w_dim
        || source.config().resolution != target.config().resolution
    {
        return Err(Error::IncompatibleCheckpoint(
            "drift evaluation needs matching generator configs".into(),
        ));
    }
    let w_dim = source.config().w_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let chunk = 32usize;
    let mut acc = 0.0f64;
    let mut done = 0usize;
    while done < n_codes {
        let b = chunk.min(n_codes - done);
        let z = Tensor::<f32>::randn(&[b, w_dim], &mut rng);
        let ws = source.map_latent_batch(&z)?;
        let wt = target.map_latent_batch(&z)?;
        let img_s = source.synthesize_batch(&ws, NoiseMode::Deterministic)?.image;
        let img_t = target.synthesize_batch(&wt, NoiseMode::Deterministic)?.image;
        let m = crate::data::structure_metric(&img_s, &img_t)?;
        acc += m * b as f64;
        done += b;
    }
    Ok(acc / n_codes as f64)
}

/// Reference the pretrain log for the discriminator-accuracy smoke oracle.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(out: &Path) -> RunConfig {
        let model = ModelConfig {
            resolution: 8,
            w_dim: 8,
            mapping_depth: 2,
            channel_max: 8,
            channel_floor: 4,
            mbstd: true,
            noise: true,
        };
        RunConfig {
            mode: RunMode::Pretrain,
            steps: 2,
            batch: 2,
            seed: 11,
            structure: StructureLossConfig {
                layers: 2,
                weight: 0.0,
            },
            dataset: DatasetSpec {
                kind: DatasetKind::ToySource,
                count: 8,
                seed: 1,
                path: None,
                resolution: 8,
                flip: false,
            },
            model,
            out_dir: out.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_step_pretrain_touches_every_parameter_with_gradients() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(&dir.path().join("run"));
        cfg.steps = 1;
        let final_ckpt = pretrain(&cfg).unwrap();
        let init = Checkpoint::load(&cfg.out_dir.join("snapshots/step_0.ckpt")).unwrap();
        let mut changed = 0usize;
        for ((name, a), (_, b)) in init.tensors.iter().zip(&final_ckpt.tensors) {
            if !a.bit_eq(b) {
                changed += 1;
            } else {
                // the only parameters allowed to sit still after one step are
                // noise scales whose gradient can be exactly zero
                assert!(
                    name.contains("noise") || name.contains("bias"),
                    "{name} did not move after one unfrozen step"
                );
            }
        }
        assert!(changed > 20, "only {changed} tensors moved");
    }

    #[test]
    fn pretrain_is_bit_deterministic_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = tiny_cfg(&dir.path().join("a"));
        let mut cfg_b = tiny_cfg(&dir.path().join("b"));
        cfg_b.out_dir = dir.path().join("b");
        let a = pretrain(&cfg_a).unwrap();
        let b = pretrain(&cfg_b).unwrap();
        for ((n, ta), (_, tb)) in a.tensors.iter().zip(&b.tensors) {
            assert!(ta.bit_eq(tb), "{n} differs between identical runs");
        }
        let la = std::fs::read(dir.path().join("a/log.jsonl")).unwrap();
        let lb = std::fs::read(dir.path().join("b/log.jsonl")).unwrap();
        assert_eq!(la, lb, "logs must be byte-identical");
    }

    #[test]
    fn finetune_structure_loss_starts_at_zero_and_freeze_holds() {
        let dir = tempfile::tempdir().unwrap();
        let mut pre = tiny_cfg(&dir.path().join("pre"));
        pre.steps = 2;
        let source = pretrain(&pre).unwrap();
        let source_path = dir.path().join("source.ckpt");
        source.save(&source_path).unwrap();

        let mut ft = tiny_cfg(&dir.path().join("ft"));
        ft.mode = RunMode::Finetune;
        ft.steps = 3;
        ft.freeze_mode = FreezeMode::FreezeSG;
        ft.freeze_blocks = 1;
        ft.structure = StructureLossConfig {
            layers: 2,
            weight: 1.0,
        };
        ft.dataset.kind = DatasetKind::ToyTarget;
        ft.source_checkpoint = Some(source_path);
        let final_ckpt = run(&ft).unwrap();

        let log = read_log(&ft.out_dir.join("log.jsonl")).unwrap();
        assert!(
            log[0].structure_loss <= 1e-12,
            "structure loss at step 0 was {}",
            log[0].structure_loss
        );
        assert_eq!(log[0].per_layer.len(), 2);
        assert!(log.iter().all(|l| l.structure_loss.is_finite()));

        // frozen names bit-identical between the source and the final model
        let plan: FreezePlan = serde_json::from_str(
            &std::fs::read_to_string(ft.out_dir.join("freeze_plan.json")).unwrap(),
        )
        .unwrap();
        assert!(!plan.is_empty());
        let src_map = source.tensor_map();
        let final_map = final_ckpt.tensor_map();
        for name in &plan.frozen_names {
            assert!(
                src_map[name.as_str()].bit_eq(final_map[name.as_str()]),
                "{name} drifted despite FreezeSG"
            );
        }
        // something outside the plan did move
        assert!(final_ckpt
            .tensors
            .iter()
            .any(|(n, t)| !plan.frozen_names.contains(n) && !src_map[n.as_str()].bit_eq(t)));
    }

    #[test]
    fn run_config_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn grid_layout_matches_seed_and_checkpoint_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let model = ModelConfig {
            resolution: 8,
            w_dim: 8,
            mapping_depth: 1,
            channel_max: 8,
            channel_floor: 4,
            mbstd: false,
            noise: true,
        };
        let g1 = Generator::<f32>::init(model.clone(), &mut rng).unwrap();
        let g2 = Generator::<f32>::init(model, &mut rng).unwrap();
        let c1 = Checkpoint::from_models(&g1, None);
        let c2 = Checkpoint::from_models(&g2, None);
        let path = dir.path().join("grid.png");
        generate_grid(&[c1.clone(), c2], &[1, 2, 3], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 16);
        assert_eq!(img.height(), 24);

        // single checkpoint, single seed: the grid is exactly one synthesis
        let single = dir.path().join("single.png");
        generate_grid(&[c1.clone()], &[5], &single).unwrap();
        let img = image::open(&single).unwrap().to_rgb8();
        let gen = c1.to_generator().unwrap();
        let mut zr = ChaCha12Rng::seed_from_u64(5);
        let z = Tensor::<f32>::randn(&[1, 8], &mut zr);
        let w = gen.map_latent_batch(&z).unwrap();
        let trace = gen.synthesize_batch(&w, NoiseMode::Deterministic).unwrap();
        let expect =
            crate::data::to_rgb8(&Tensor::new(&[3, 8, 8], trace.image.data().to_vec()));
        assert_eq!(img.as_raw(), expect.as_raw());
    }

    #[test]
    fn drift_of_a_generator_against_itself_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(78);
        let model = ModelConfig {
            resolution: 8,
            w_dim: 8,
            mapping_depth: 1,
            channel_max: 8,
            channel_floor: 4,
            mbstd: false,
            noise: true,
        };
        let g = Generator::<f32>::init(model, &mut rng).unwrap();
        assert_eq!(eval_structure_drift(&g, &g, 8, 3).unwrap(), 0.0);
    }
}
