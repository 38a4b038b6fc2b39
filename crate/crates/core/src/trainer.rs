//! The optimization loop: alternating discriminator/generator Adam steps
//! with lazy R1 and path-length regularization, CutMix consistency,
//! disordered-sequence negatives, the ADA controller, an EMA copy of the
//! generator, JSONL scalar logs and resumable checkpoints.

use crate::ada::{self, AdaState};
use crate::checkpoint::Checkpoint;
use crate::config::TrainingConfig;
use crate::data::{self, DatasetIndex};
use crate::discriminator::Discriminator;
use crate::dsc::NoiseMode;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::export;
use crate::generator::{sample_latents, Generator, ImagePair};
use crate::graph::Graph;
use crate::losses::{self, PlState};
use crate::nn::{ParamBind, ParamModule};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

/// Adam with per-parameter moments keyed by name, so state survives
/// checkpointing and parameter iteration order changes.
pub struct Adam<T: Elem> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam { beta1, beta2, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update from named gradients; parameters without a
    /// gradient entry are left untouched.
    pub fn step(
        &mut self,
        module: &mut dyn ParamModule<T>,
        grads: &HashMap<String, ArrayD<T>>,
        lr_for: &dyn Fn(&str) -> f64,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = self.eps;
        module.visit_mut(&mut |name, p| {
            let Some(gr) = grads.get(name) else { return };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let lr = lr_for(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(gr)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = m.to_f64() / c1;
                    let vh = v.to_f64() / c2;
                    *p = T::from_f64(p.to_f64() - lr * mh / (vh.sqrt() + eps));
                });
        });
    }

    pub fn export_moments(&self) -> (Vec<(String, ArrayD<T>)>, Vec<(String, ArrayD<T>)>) {
        (
            self.m.iter().map(|(k, a)| (k.clone(), a.clone())).collect(),
            self.v.iter().map(|(k, a)| (k.clone(), a.clone())).collect(),
        )
    }

    pub fn import_moments(
        &mut self,
        t: u64,
        m: Vec<(String, ArrayD<T>)>,
        v: Vec<(String, ArrayD<T>)>,
    ) {
        self.t = t;
        self.m = m.into_iter().collect();
        self.v = v.into_iter().collect();
    }
}

/// ema <- decay * ema + (1 - decay) * online, element-wise over the whole
/// parameter tree. Errors if the trees disagree.
pub fn ema_update<T: Elem>(
    ema: &mut BTreeMap<String, ArrayD<T>>,
    model: &dyn ParamModule<T>,
    decay: f64,
) -> Result<()> {
    let d = T::from_f64(decay);
    let mut missing = None;
    model.visit(&mut |name, p| {
        match ema.get_mut(name) {
            Some(e) if e.shape() == p.shape() => {
                ndarray::Zip::from(e).and(p).for_each(|e, &o| {
                    *e = d * *e + (T::one() - d) * o;
                });
            }
            _ => missing = Some(name.to_string()),
        }
    });
    match missing {
        Some(name) => Err(Error::invalid("ema_update", format!("parameter tree mismatch at {name}"))),
        None => Ok(()),
    }
}

pub fn snapshot_params<T: Elem>(model: &dyn ParamModule<T>) -> BTreeMap<String, ArrayD<T>> {
    model.named_values().into_iter().collect()
}

pub fn load_params<T: Elem>(
    model: &mut dyn ParamModule<T>,
    values: &BTreeMap<String, ArrayD<T>>,
) -> Result<()> {
    let mut missing = None;
    model.visit_mut(&mut |name, p| match values.get(name) {
        Some(v) if v.shape() == p.shape() => p.assign(v),
        _ => missing = Some(name.to_string()),
    });
    match missing {
        Some(name) => Err(Error::invalid("load_params", format!("missing or misshapen {name}"))),
        None => Ok(()),
    }
}

/// Scalars produced by one training step, serialized into the JSONL log.
#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
    pub pl: f64,
    pub pl_ema: f64,
    pub ada_p: f64,
    pub ada_r_t: f64,
    pub topk: usize,
}

pub struct Trainer<T: Elem> {
    pub config: TrainingConfig,
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub ema: BTreeMap<String, ArrayD<T>>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub pl: PlState,
    pub ada: AdaState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Planned total steps, used by the top-k schedule.
    pub total_steps: usize,
}

impl<T: Elem> Trainer<T> {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Generator::new(config.generator.clone(), &mut rng)?;
        let disc = Discriminator::new(config.discriminator.clone(), &mut rng)?;
        let ema = snapshot_params(&gen);
        let opt_g = Adam::new(config.adam_beta1, config.adam_beta2);
        let opt_d = Adam::new(config.adam_beta1, config.adam_beta2);
        let pl = PlState::new(config.losses.pl_ema_decay);
        let ada = config.ada;
        Ok(Trainer {
            total_steps: config.epochs.max(1) * 100,
            config,
            gen,
            disc,
            ema,
            opt_g,
            opt_d,
            pl,
            ada,
            rng,
            step: 0,
        })
    }

    fn assert_finite(&self, label: &str, components: &[(&str, f64)]) -> Result<()> {
        if components.iter().any(|(_, v)| !v.is_finite()) {
            let dump = components
                .iter()
                .map(|(k, v)| format!("{k} = {v}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::NonFiniteLoss {
                step: self.step,
                components: format!("{label}: {dump}"),
            });
        }
        Ok(())
    }

    /// Generate a fake batch with no gradient tracking.
    fn sample_fakes(&mut self, batch: usize) -> Result<(ArrayD<T>, ArrayD<T>)> {
        let mut g = Graph::<T>::new();
        let mut bind = ParamBind::frozen();
        let z = g.constant(sample_latents(&mut self.rng, batch, self.config.generator.latent_dim));
        let w = self.gen.map_latent(&mut g, &mut bind, z)?;
        let out = self
            .gen
            .synthesize(&mut g, &mut bind, w, &mut NoiseMode::Fresh(&mut self.rng))?;
        Ok((g.value(out.bf).clone(), g.value(out.gfp).clone()))
    }

    /// One discriminator update. Returns (d_loss, r1 value).
    pub fn discriminator_step(&mut self, bf: &ArrayD<T>, gfp: &ArrayD<T>) -> Result<(f64, f64)> {
        let lcfg = self.config.losses.clone();
        let batch = bf.shape()[0];
        let (h, w) = (bf.shape()[2], bf.shape()[3]);
        let (fake_bf, fake_gfp) = self.sample_fakes(batch)?;
        let p = self.ada.p;
        let (rbf, rgfp) = ada::apply_augmentation(bf, gfp, p, &mut self.rng)?;
        let (fbf, fgfp) = ada::apply_augmentation(&fake_bf, &fake_gfp, p, &mut self.rng)?;

        let mut g = Graph::<T>::new();
        let mut bind = ParamBind::trainable();
        let rb = g.leaf(rbf);
        let rg = g.leaf(rgfp);
        let real_pair = ImagePair { bf: rb, gfp: rg };
        let fake_pair = ImagePair { bf: g.constant(fbf), gfp: g.constant(fgfp) };
        let real_out = self.disc.discriminate(&mut g, &mut bind, real_pair)?;
        let fake_out = self.disc.discriminate(&mut g, &mut bind, fake_pair)?;
        let mut loss = losses::d_loss(&mut g, real_out, fake_out, lcfg.pixel_loss_weight);

        if self.rng.gen::<f64>() < lcfg.disordered_prob {
            let (dbf, dgfp, _) = losses::make_disordered(bf, gfp, &mut self.rng)?;
            let (dbf, dgfp) = ada::apply_augmentation(&dbf, &dgfp, p, &mut self.rng)?;
            let pair = ImagePair { bf: g.constant(dbf), gfp: g.constant(dgfp) };
            let out = self.disc.discriminate(&mut g, &mut bind, pair)?;
            let term = losses::d_fake_term(&mut g, out, lcfg.pixel_loss_weight);
            loss = g.add(loss, term);
        }

        if self.rng.gen::<f64>() < lcfg.cutmix_prob {
            let mask = losses::sample_cutmix_mask::<T, _>(&mut self.rng, h, w);
            let mixed = losses::cutmix_pair(&mut g, real_pair, fake_pair, &mask)?;
            let mix_out = self.disc.discriminate(&mut g, &mut bind, mixed)?;
            // Pixel head labels follow the mask: real inside the
            // rectangle, fake outside.
            let m = std::rc::Rc::new(mask.mask.clone());
            let inv = std::rc::Rc::new(mask.mask.mapv(|v| T::one() - v));
            let neg = g.neg(mix_out.pixel_map);
            let sp_real = g.softplus(neg);
            let sp_fake = g.softplus(mix_out.pixel_map);
            let a = g.mul_const(sp_real, m);
            let b = g.mul_const(sp_fake, inv);
            let adv = g.add(a, b);
            let adv = g.mean_all(adv);
            let adv = g.scale(adv, T::from_f64(lcfg.pixel_loss_weight));
            let cons = losses::consistency_loss(
                &mut g,
                mix_out.pixel_map,
                real_out.pixel_map,
                fake_out.pixel_map,
                &mask,
            );
            let cons = g.scale(cons, T::from_f64(lcfg.consistency_weight));
            loss = g.add(loss, adv);
            loss = g.add(loss, cons);
        }

        let mut r1_val = 0.0;
        if self.step % lcfg.r1_interval as u64 == 0 {
            let pen = losses::r1_penalty(&mut g, real_out.scalar, &[rb, rg], lcfg.r1_gamma)?;
            // Lazy scaling keeps the expected gradient magnitude.
            let pen = g.scale(pen, T::from_f64(lcfg.r1_interval as f64));
            r1_val = g.scalar_value(pen).to_f64();
            loss = g.add(loss, pen);
        }

        let d_loss = g.scalar_value(loss).to_f64();
        self.assert_finite("discriminator", &[("d_loss", d_loss), ("r1", r1_val)])?;

        let mut names: Vec<(String, crate::Var)> =
            bind.iter().map(|(n, v)| (n.clone(), *v)).collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        let vars: Vec<crate::Var> = names.iter().map(|(_, v)| *v).collect();
        let grad_vars = g.grad(loss, &vars);
        let grads: HashMap<String, ArrayD<T>> = names
            .iter()
            .zip(&grad_vars)
            .map(|((n, _), gv)| (n.clone(), g.value(*gv).clone()))
            .collect();
        let lr = self.config.lr_discriminator;
        self.opt_d.step(&mut self.disc, &grads, &|_| lr);

        // Controller signal from the (augmented) real logits.
        let logits: Vec<f64> = g.value(real_out.scalar).iter().map(|v| Elem::to_f64(*v)).collect();
        self.ada.overfitting_heuristic(&logits)?;
        self.ada.update_p(batch);
        Ok((d_loss, r1_val))
    }

    /// One generator update. Returns (g_loss, path-length value, k).
    pub fn generator_step(&mut self, batch: usize) -> Result<(f64, f64, usize)> {
        let lcfg = self.config.losses.clone();
        let mut g = Graph::<T>::new();
        let mut bind_g = ParamBind::trainable();
        let mut bind_d = ParamBind::frozen();
        let z = g.constant(sample_latents(&mut self.rng, batch, self.config.generator.latent_dim));
        let w = self.gen.map_latent(&mut g, &mut bind_g, z)?;
        let out = self
            .gen
            .synthesize(&mut g, &mut bind_g, w, &mut NoiseMode::Fresh(&mut self.rng))?;
        let fake_out = self.disc.discriminate(&mut g, &mut bind_d, out)?;
        let frac = lcfg.topk_fraction(self.step as usize, self.total_steps);
        let k = losses::topk_count(batch, frac);
        let mut loss = losses::g_loss(&mut g, fake_out, k, lcfg.pixel_loss_weight)?;

        let mut pl_val = 0.0;
        if self.step % lcfg.pl_interval as u64 == 0 {
            let (pen, next) = losses::path_length_penalty(&mut g, out, w, &self.pl, &mut self.rng)?;
            self.pl = next;
            let pen = g.scale(pen, T::from_f64(lcfg.pl_weight * lcfg.pl_interval as f64));
            pl_val = g.scalar_value(pen).to_f64();
            loss = g.add(loss, pen);
        }

        let g_loss = g.scalar_value(loss).to_f64();
        self.assert_finite("generator", &[("g_loss", g_loss), ("pl", pl_val)])?;

        let mut names: Vec<(String, crate::Var)> =
            bind_g.iter().map(|(n, v)| (n.clone(), *v)).collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        let vars: Vec<crate::Var> = names.iter().map(|(_, v)| *v).collect();
        let grad_vars = g.grad(loss, &vars);
        let grads: HashMap<String, ArrayD<T>> = names
            .iter()
            .zip(&grad_vars)
            .map(|((n, _), gv)| (n.clone(), g.value(*gv).clone()))
            .collect();
        let (lr_g, lr_map) = (self.config.lr_generator, self.config.lr_mapping);
        self.opt_g.step(&mut self.gen, &grads, &|name| {
            if name.starts_with("mapping.") {
                lr_map
            } else {
                lr_g
            }
        });
        ema_update(&mut self.ema, &self.gen, self.config.ema_decay)?;
        Ok((g_loss, pl_val, k))
    }

    /// One full alternation: discriminator update then generator update.
    pub fn train_step(&mut self, bf: &ArrayD<T>, gfp: &ArrayD<T>) -> Result<StepStats> {
        let (d_loss, r1) = self.discriminator_step(bf, gfp)?;
        let (g_loss, pl, topk) = self.generator_step(bf.shape()[0])?;
        let stats = StepStats {
            step: self.step,
            d_loss,
            g_loss,
            r1,
            pl,
            pl_ema: self.pl.ema,
            ada_p: self.ada.p,
            ada_r_t: self.ada.r_t,
            topk,
        };
        self.step += 1;
        Ok(stats)
    }

    /// A generator using the EMA parameter copy, for evaluation/sampling.
    pub fn ema_generator(&self) -> Result<Generator<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = Generator::new(self.config.generator.clone(), &mut rng)?;
        load_params(&mut gen, &self.ema)?;
        Ok(gen)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut sections = BTreeMap::new();
        sections.insert("generator".to_string(), self.gen.named_values());
        sections.insert(
            "ema".to_string(),
            self.ema.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        );
        sections.insert("discriminator".to_string(), self.disc.named_values());
        let (gm, gv) = self.opt_g.export_moments();
        let (dm, dv) = self.opt_d.export_moments();
        sections.insert("opt_g.m".to_string(), gm);
        sections.insert("opt_g.v".to_string(), gv);
        sections.insert("opt_d.m".to_string(), dm);
        sections.insert("opt_d.v".to_string(), dv);
        let config_toml =
            toml::to_string_pretty(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint {
            step: self.step,
            config_toml,
            sections,
            pl: self.pl,
            ada: self.ada,
            rng_word_pos: self.rng.get_word_pos(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let config = TrainingConfig::from_toml_str(&ck.config_toml)?;
        let mut trainer = Trainer::new(config)?;
        let as_map = |v: &Vec<(String, ArrayD<T>)>| -> BTreeMap<String, ArrayD<T>> {
            v.iter().cloned().collect()
        };
        load_params(&mut trainer.gen, &as_map(ck.section("generator")?))?;
        load_params(&mut trainer.disc, &as_map(ck.section("discriminator")?))?;
        trainer.ema = as_map(ck.section("ema")?);
        trainer.opt_g.import_moments(
            ck.step,
            ck.section("opt_g.m")?.clone(),
            ck.section("opt_g.v")?.clone(),
        );
        trainer.opt_d.import_moments(
            ck.step,
            ck.section("opt_d.m")?.clone(),
            ck.section("opt_d.v")?.clone(),
        );
        trainer.pl = ck.pl;
        trainer.ada = ck.ada;
        trainer.step = ck.step;
        trainer.rng.set_word_pos(ck.rng_word_pos);
        Ok(trainer)
    }

    /// Render a small EMA sample grid for progress monitoring.
    pub fn write_sample_grid(&self, path: &Path, count: usize, seed: u64) -> Result<()> {
        let gen = self.ema_generator()?;
        let mut g = Graph::<T>::new();
        let mut bind = ParamBind::frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = g.constant(sample_latents(&mut rng, count, self.config.generator.latent_dim));
        let w = gen.map_latent(&mut g, &mut bind, z)?;
        let out = gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Zero)?;
        export::save_sequence_grid(path, g.value(out.bf), g.value(out.gfp))
    }
}

/// Full training entry point. Writes the effective config, JSONL logs,
/// periodic checkpoints and sample grids into `out_dir`. With
/// `resume_from`, picks up exactly where the checkpoint left off.
pub fn run_training<T: Elem>(
    config: TrainingConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<Trainer<T>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer: Trainer<T> = match resume_from {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?)?,
        None => Trainer::new(config)?,
    };
    trainer.config.save(&out_dir.join("config.toml"))?;

    let windows = index.count_windows();
    let batch = trainer.config.batch_size;
    let ck_path = out_dir.join("checkpoint.bin");
    if trainer.step == 0 {
        trainer.to_checkpoint()?.save(&ck_path)?;
    }
    if trainer.config.epochs == 0 {
        return Ok(trainer);
    }
    if windows < batch {
        return Err(Error::invalid(
            "run_training",
            format!("dataset has {windows} windows, batch size is {batch}"),
        ));
    }
    let steps_per_epoch = windows / batch;
    trainer.total_steps = steps_per_epoch * trainer.config.epochs;

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let seed = trainer.config.seed;
    let mut global: u64 = 0;
    for epoch in 0..trainer.config.epochs {
        let order = index.epoch_order(seed.wrapping_add(epoch as u64));
        for chunk in order.chunks(batch).take(steps_per_epoch) {
            if global < trainer.step {
                global += 1;
                continue;
            }
            // Per-batch data RNG so resume does not shift augmentation.
            let mut data_rng =
                ChaCha8Rng::seed_from_u64(seed ^ global.wrapping_mul(0x9E3779B97F4A7C15));
            let (bf, gfp) = data::load_batch::<T>(index, chunk, &mut data_rng, true)?;
            let stats = trainer.train_step(&bf, &gfp)?;
            if stats.step % trainer.config.log_interval as u64 == 0 {
                let line = serde_json::to_string(&stats)
                    .map_err(|e| Error::invalid("run_training", e.to_string()))?;
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            }
            if trainer.step % trainer.config.checkpoint_interval as u64 == 0 {
                trainer.to_checkpoint()?.save(&ck_path)?;
            }
            if trainer.step % trainer.config.sample_interval as u64 == 0 {
                let grid = out_dir.join(format!("samples_{:06}.png", trainer.step));
                trainer.write_sample_grid(&grid, 2.min(batch), seed ^ trainer.step)?;
            }
            global += 1;
        }
    }
    trainer.to_checkpoint()?.save(&ck_path)?;
    let grid = out_dir.join(format!("samples_{:06}.png", trainer.step));
    trainer.write_sample_grid(&grid, 2.min(batch), seed ^ trainer.step)?;
    Ok(trainer)
}
