//! `lapsegan` command line: train, sample, interpolate, style-mix,
//! evaluate and inspect-dataset. All sampling subcommands are seeded and
//! byte-deterministic; evaluation writes a machine-readable JSON report.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lapsegan::checkpoint::Checkpoint;
use lapsegan::config::TrainingConfig;
use lapsegan::data;
use lapsegan::dsc::NoiseMode;
use lapsegan::export::save_sequence_grid;
use lapsegan::generator::{sample_latents, Generator};
use lapsegan::graph::Graph;
use lapsegan::metrics::{
    compute_fid, compute_fvd, inception_score, sample_eval_frame, Embedder, IdentityEmbedder,
    RandomProjectionEmbedder,
};
use lapsegan::nn::ParamBind;
use lapsegan::trainer;
use ndarray::{Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "lapsegan", version, about = "Two-domain time-lapse sequence GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    /// Flattened raw pixels (exact, for small resolutions).
    Identity,
    /// Seeded Gaussian random projection.
    RandomProjection,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an indexed dataset directory.
    Train {
        /// TOML run configuration; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root: <seq>/<bf|gfp>/<t>.png
        #[arg(long)]
        data: PathBuf,
        /// Output directory for logs, checkpoints and sample grids.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Render a grid of EMA-generator samples.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear interpolation between two latents in intermediate space.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Two-source style mixing with a chosen crossover stage.
    StyleMix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stages before this index take the first style; the rest take
        /// the second.
        #[arg(long)]
        crossover: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute FID/FVD/IS per domain against a real dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON metric report.
        #[arg(long)]
        out: PathBuf,
        /// Number of real and generated sequences each.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = EmbedderKind::RandomProjection)]
        embedder: EmbedderKind,
        /// Feature dimension for the random projection embedder.
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
    },
    /// Validate a dataset tree and print a JSON summary.
    InspectDataset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        window_length: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_checkpoint(path: &Path) -> Result<(TrainingConfig, Checkpoint<f64>)> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = Checkpoint::<f64>::load(path)?;
    let config = TrainingConfig::from_toml_str(&ck.config_toml)?;
    Ok((config, ck))
}

/// Rebuild the EMA generator stored in a checkpoint.
fn load_ema_generator(path: &Path) -> Result<(TrainingConfig, Generator<f64>)> {
    let (config, ck) = load_checkpoint(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gen = Generator::new(config.generator.clone(), &mut rng)?;
    let ema: BTreeMap<String, ArrayD<f64>> = ck.section("ema")?.iter().cloned().collect();
    trainer::load_params(&mut gen, &ema)?;
    Ok((config, gen))
}

/// Stack per-step image pairs along the batch axis so each interpolation
/// step renders as one grid row pair.
fn stack_pairs(g: &Graph<f64>, pairs: &[lapsegan::generator::ImagePair]) -> (ArrayD<f64>, ArrayD<f64>) {
    let views_bf: Vec<_> = pairs.iter().map(|p| g.value(p.bf).view()).collect();
    let views_gfp: Vec<_> = pairs.iter().map(|p| g.value(p.gfp).view()).collect();
    (
        ndarray::concatenate(Axis(0), &views_bf).unwrap(),
        ndarray::concatenate(Axis(0), &views_gfp).unwrap(),
    )
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, data, out, resume, seed, epochs, batch_size } => {
            let mut cfg = match config {
                Some(p) => TrainingConfig::load(&p)
                    .with_context(|| format!("loading config {}", p.display()))?,
                None => TrainingConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            cfg.validate()?;
            let index = data::index_dataset(&data, cfg.resolution(), cfg.generator.timesteps)?;
            log::info!(
                "dataset: {} sequences, {} windows",
                index.records.len(),
                index.count_windows()
            );
            let t = trainer::run_training::<f64>(cfg, &index, &out, resume.as_deref())?;
            log::info!("finished at step {}", t.step);
            Ok(())
        }
        Command::Sample { checkpoint, out, count, seed } => {
            let (config, gen) = load_ema_generator(&checkpoint)?;
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::frozen();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = g.constant(sample_latents(&mut rng, count, config.generator.latent_dim));
            let w = gen.map_latent(&mut g, &mut bind, z)?;
            let pair = gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Fresh(&mut rng))?;
            save_sequence_grid(&out, g.value(pair.bf), g.value(pair.gfp))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate { checkpoint, out, steps, seed } => {
            let (config, gen) = load_ema_generator(&checkpoint)?;
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::frozen();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z1 = g.constant(sample_latents(&mut rng, 1, config.generator.latent_dim));
            let z2 = g.constant(sample_latents(&mut rng, 1, config.generator.latent_dim));
            let pairs = gen.interpolate_latents(&mut g, &mut bind, z1, z2, steps)?;
            let (bf, gfp) = stack_pairs(&g, &pairs);
            save_sequence_grid(&out, &bf, &gfp)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::StyleMix { checkpoint, out, crossover, count, seed } => {
            let (config, gen) = load_ema_generator(&checkpoint)?;
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::frozen();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z1 = g.constant(sample_latents(&mut rng, count, config.generator.latent_dim));
            let z2 = g.constant(sample_latents(&mut rng, count, config.generator.latent_dim));
            let w1 = gen.map_latent(&mut g, &mut bind, z1)?;
            let w2 = gen.map_latent(&mut g, &mut bind, z2)?;
            let pair =
                gen.style_mix(&mut g, &mut bind, w1, w2, crossover, &mut NoiseMode::Fresh(&mut rng))?;
            save_sequence_grid(&out, g.value(pair.bf), g.value(pair.gfp))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, data, out, count, seed, embedder, embed_dim } => {
            let (config, gen) = load_ema_generator(&checkpoint)?;
            let report = evaluate(&config, &gen, &data, count, seed, embedder, embed_dim)?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, &json)
                .with_context(|| format!("writing report {}", out.display()))?;
            println!("{json}");
            Ok(())
        }
        Command::InspectDataset { data, resolution, window_length } => {
            let index = data::index_dataset(&data, resolution, window_length)?;
            let frames: usize = index.records.iter().map(|r| r.frame_paths_bf.len()).sum();
            let mut summary = BTreeMap::new();
            summary.insert("sequences".to_string(), serde_json::json!(index.records.len()));
            summary.insert("frames".to_string(), serde_json::json!(frames));
            summary.insert("windows".to_string(), serde_json::json!(index.count_windows()));
            summary.insert("resolution".to_string(), serde_json::json!(resolution));
            summary.insert("window_length".to_string(), serde_json::json!(window_length));
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

/// Softmax over embedder features so IS can be computed from any embedder.
fn softmax_rows(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn evaluate(
    config: &TrainingConfig,
    gen: &Generator<f64>,
    data_dir: &Path,
    count: usize,
    seed: u64,
    kind: EmbedderKind,
    embed_dim: usize,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let res = config.resolution();
    let t = config.generator.timesteps;
    let index = data::index_dataset(data_dir, res, t)?;
    let windows = index.count_windows();
    if windows == 0 {
        bail!("dataset {} has no windows of length {t}", data_dir.display());
    }
    let n = count.min(windows);
    if n < 2 {
        bail!("need at least 2 sequences per side, have {n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Real sequences: the first n windows of a seeded shuffle.
    let order = index.epoch_order(seed);
    let mut real_bf = Vec::with_capacity(n);
    let mut real_gfp = Vec::with_capacity(n);
    for &wid in order.iter().take(n) {
        let (bf, gfp) = data::load_window::<f64>(&index, wid, false)?;
        real_bf.push(bf.into_dyn());
        real_gfp.push(gfp.into_dyn());
    }

    // Generated sequences from the EMA generator, batched.
    let mut fake_bf = Vec::with_capacity(n);
    let mut fake_gfp = Vec::with_capacity(n);
    let batch = config.batch_size.clamp(1, 8);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(batch);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::frozen();
        let z = g.constant(sample_latents(&mut rng, b, config.generator.latent_dim));
        let w = gen.map_latent(&mut g, &mut bind, z)?;
        let pair = gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Fresh(&mut rng))?;
        for i in 0..b {
            fake_bf.push(g.value(pair.bf).index_axis(Axis(0), i).to_owned().into_dyn());
            fake_gfp.push(g.value(pair.gfp).index_axis(Axis(0), i).to_owned().into_dyn());
        }
        remaining -= b;
    }

    let embedder: Box<dyn Embedder> = match kind {
        EmbedderKind::Identity => Box::new(IdentityEmbedder { dim: res * res }),
        EmbedderKind::RandomProjection => {
            Box::new(RandomProjectionEmbedder::new(seed ^ 0xE7A1, res * res, embed_dim))
        }
    };

    let mut report = BTreeMap::new();
    report.insert("count".to_string(), serde_json::json!(n));
    report.insert("seed".to_string(), serde_json::json!(seed));
    report.insert("embed_dim".to_string(), serde_json::json!(embedder.feature_dim()));

    for (domain, real, fake) in
        [("bf", (&real_bf, &fake_bf)), ("gfp", (&real_gfp, &fake_gfp))].map(|(d, (r, f))| (d, r, f))
    {
        // FID on one uniformly sampled frame per sequence.
        let mut real_frames = Vec::with_capacity(n);
        let mut fake_frames = Vec::with_capacity(n);
        for i in 0..n {
            let (rf, _, _) = sample_eval_frame(&real[i], &real[i], &mut rng)?;
            let (ff, _, _) = sample_eval_frame(&fake[i], &fake[i], &mut rng)?;
            real_frames.push(rf);
            fake_frames.push(ff);
        }
        let fid = compute_fid(&real_frames, &fake_frames, embedder.as_ref())?;
        let fvd = compute_fvd(real, fake, embedder.as_ref())?;
        let mut feats = Array2::<f64>::zeros((n, embedder.feature_dim()));
        for (i, f) in fake_frames.iter().enumerate() {
            feats.row_mut(i).assign(&embedder.embed_image(f)?);
        }
        let is = inception_score(&softmax_rows(&feats).view())?;
        report.insert(format!("fid.{domain}"), serde_json::json!(fid));
        report.insert(format!("fvd.{domain}"), serde_json::json!(fvd));
        report.insert(format!("is.{domain}"), serde_json::json!(is));
    }
    Ok(report)
}
