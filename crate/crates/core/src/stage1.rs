//! Adversarial training of the generator and the multi-task discriminator.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::io::save_grid;
use crate::data::{from_batch, to_batch, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{argmax_rows, d_loss_with_grads, g_loss_with_grads, Stage1LossReport};
use crate::models::{Discriminator, ExpressionCode, Generator, IdentityCode, ModelConfig, NoiseVector};
use crate::nn::{init_weights, zero_grad, Adam, AdamConfig, Mode, Real};

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    /// Generator updates per discriminator update once D is winning.
    pub g_per_d_late: usize,
    pub d_acc_threshold: f64,
    /// Steps in the rolling fake-detection accuracy window.
    pub window: usize,
    /// Optional L1 term between the synthesized and the input image; 0 is off.
    pub pixel_l1_weight: f64,
    /// Epoch interval between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            batch_size: 150,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 300,
            g_per_d_late: 2,
            d_acc_threshold: 0.75,
            window: 100,
            pixel_l1_weight: 0.0,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.d_acc_threshold > 0.0 && self.d_acc_threshold < 1.0) {
            return Err(invalid("d_acc_threshold must lie in (0, 1)"));
        }
        if self.g_per_d_late < 1 || self.window < 1 {
            return Err(invalid("g_per_d_late and window must be positive"));
        }
        if !(self.pixel_l1_weight >= 0.0) {
            return Err(invalid("pixel_l1_weight must be nonnegative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Counters and the schedule window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub d_update_count: u64,
    pub g_update_count: u64,
    pub rolling_d_fake_accuracy: f64,
    window: VecDeque<f64>,
}

impl TrainState {
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Late phase: a full window whose mean fake-detection accuracy exceeds
    /// the threshold.
    pub fn late_phase(&self, cfg: &Stage1Config) -> bool {
        self.window.len() >= cfg.window && self.rolling_d_fake_accuracy > cfg.d_acc_threshold
    }

    pub fn record_fake_accuracy(&mut self, acc: f64, window: usize) {
        self.window.push_back(acc);
        while self.window.len() > window {
            self.window.pop_front();
        }
        self.rolling_d_fake_accuracy = self.window.iter().sum::<f64>() / self.window.len() as f64;
    }
}

/// One minibatch with its sampled noise and target identities.
#[derive(Clone, Debug)]
pub struct Stage1Batch<T: Real> {
    pub images: ndarray::Array4<T>,
    pub y_e: Vec<usize>,
    pub y_id: Vec<usize>,
    pub z: NoiseVector<T>,
    pub identity: IdentityCode<T>,
    pub y_idx: Vec<usize>,
}

/// Images drawn uniformly with replacement, `z ~ N(0, I)`, target identities
/// uniform over `[0, N_i)`.
pub fn sample_batch<T: Real>(
    dataset: &Dataset,
    batch_size: usize,
    noise_dim: usize,
    rng: &mut impl Rng,
) -> Result<Stage1Batch<T>> {
    if dataset.is_empty() {
        return Err(invalid("cannot sample from an empty dataset"));
    }
    let picks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
    let refs: Vec<_> = picks.iter().map(|&i| &dataset.images[i]).collect();
    let images = to_batch(&refs);
    let y_e = refs.iter().map(|i| i.expr_label).collect();
    let y_id = refs.iter().map(|i| i.identity_label).collect();
    let z = NoiseVector::sample(batch_size, noise_dim, rng);
    let y_idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..dataset.n_identities)).collect();
    let identity = IdentityCode::one_hot(&y_idx, dataset.n_identities)?;
    Ok(Stage1Batch { images, y_e, y_id, z, identity, y_idx })
}

/// Discriminator objective on one batch; the synthesized images are treated
/// as constants. Returns the loss, its terms and the fraction of fakes the
/// discriminator assigns to the fake class.
pub fn d_objective<T: Real>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    batch: &Stage1Batch<T>,
    backward: bool,
) -> Result<(f64, Stage1LossReport, f64)> {
    let (code, _, _) = gen.encoder.forward(&batch.images, Mode::Train)?;
    let (fake, _) = gen.decoder.forward(&ExpressionCode(code), &batch.z, &batch.identity, Mode::Train)?;
    let (real_out, real_cache) = disc.forward(&batch.images, Mode::Train)?;
    let (fake_out, fake_cache) = disc.forward(&fake, Mode::Train)?;
    let (loss, report, g_real, g_fake) = d_loss_with_grads(&real_out, &batch.y_e, &batch.y_id, &fake_out)?;
    let fake_class = fake_out.fake_class();
    let caught = argmax_rows(&fake_out.expr_logits).iter().filter(|&&c| c == fake_class).count();
    if backward {
        disc.backward(&real_cache, &g_real.expr, &g_real.id, false);
        disc.backward(&fake_cache, &g_fake.expr, &g_fake.id, false);
    }
    Ok((loss, report, caught as f64 / fake_out.batch_size() as f64))
}

/// Generator objective: the discriminator should read each synthesized
/// image as the source expression and the target identity. Gradients flow
/// through the discriminator (whose own grads are left dirty) into the
/// decoder and encoder.
pub fn g_objective<T: Real>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    batch: &Stage1Batch<T>,
    pixel_l1_weight: f64,
    backward: bool,
) -> Result<(f64, Stage1LossReport, f64)> {
    let (code, _, enc_cache) = gen.encoder.forward(&batch.images, Mode::Train)?;
    let (fake, dec_cache) = gen.decoder.forward(&ExpressionCode(code), &batch.z, &batch.identity, Mode::Train)?;
    let (out, cache) = disc.forward(&fake, Mode::Train)?;
    let (loss, report, grads) = g_loss_with_grads(&out, &batch.y_e, &batch.y_idx)?;
    let mut pixel = 0.0;
    let diff = &fake - &batch.images;
    if pixel_l1_weight > 0.0 {
        pixel = diff.iter().map(|d| d.abs().as_f64()).sum::<f64>() / diff.len() as f64;
    }
    if backward {
        let mut dfake = disc.backward(&cache, &grads.expr, &grads.id, true).expect("requested");
        if pixel_l1_weight > 0.0 {
            let scale = T::c(pixel_l1_weight / diff.len() as f64);
            dfake.zip_mut_with(&diff, |g, &d| *g += d.signum() * scale);
        }
        let dcode = gen.decoder.backward(&dec_cache, &dfake);
        gen.encoder.backward(&enc_cache, &dcode);
    }
    Ok((loss + pixel_l1_weight * pixel, report, pixel))
}

/// The two networks with their optimizers.
#[derive(Clone, Debug)]
pub struct Stage1Models<T: Real> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
}

impl<T: Real> Stage1Models<T> {
    /// Fresh networks; generator and discriminator draw their initial
    /// weights from seeds derived from `seed`.
    pub fn new(cfg: &ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let mut gen = Generator::new(cfg)?;
        let mut disc = Discriminator::new(cfg)?;
        init_weights(&mut gen, seed, INIT_STD);
        init_weights(&mut disc, seed.wrapping_add(1), INIT_STD);
        Ok(Self { gen, disc, opt_g: Adam::new(adam), opt_d: Adam::new(adam) })
    }
}

/// What one call to [`train_step`] did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Discriminator terms from the D update, generator terms from the last
    /// G update.
    pub losses: Stage1LossReport,
    pub pixel_l1: f64,
    pub d_fake_accuracy: f64,
    /// Rolling accuracy the schedule was decided on (before this step).
    pub rolling_before: f64,
    pub window_full_before: bool,
    pub g_updates: usize,
}

fn finite(report: &Stage1LossReport, step: u64) -> Result<()> {
    for (name, v) in report.terms() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} = {v} at step {step}")));
        }
    }
    Ok(())
}

/// One discriminator update followed by one generator update, or
/// `g_per_d_late` of them once the discriminator's rolling fake-detection
/// accuracy is above the threshold. All updates use the same batch.
pub fn train_step<T: Real>(
    state: &mut TrainState,
    models: &mut Stage1Models<T>,
    batch: &Stage1Batch<T>,
    cfg: &Stage1Config,
) -> Result<StepReport> {
    let late = state.late_phase(cfg);
    let rolling_before = state.rolling_d_fake_accuracy;
    let window_full_before = state.window_len() >= cfg.window;

    zero_grad(&mut models.gen);
    zero_grad(&mut models.disc);
    let (_, d_report, acc) = d_objective(&mut models.gen, &mut models.disc, batch, true)?;
    finite(&d_report, state.step)?;
    models.opt_d.step(&mut models.disc)?;
    state.d_update_count += 1;

    let g_updates = if late { cfg.g_per_d_late } else { 1 };
    let mut g_report = Stage1LossReport::default();
    let mut pixel = 0.0;
    for _ in 0..g_updates {
        zero_grad(&mut models.gen);
        zero_grad(&mut models.disc);
        let (_, r, p) = g_objective(&mut models.gen, &mut models.disc, batch, cfg.pixel_l1_weight, true)?;
        finite(&r, state.step)?;
        models.opt_g.step(&mut models.gen)?;
        state.g_update_count += 1;
        g_report = r;
        pixel = p;
    }
    state.record_fake_accuracy(acc, cfg.window);
    let report = StepReport {
        step: state.step,
        losses: Stage1LossReport { g_expr: g_report.g_expr, g_id: g_report.g_id, ..d_report },
        pixel_l1: pixel,
        d_fake_accuracy: acc,
        rolling_before,
        window_full_before,
        g_updates,
    };
    state.step += 1;
    Ok(report)
}

/// How to initialize a stage-1 run.
#[derive(Clone, Debug, Default)]
pub enum Stage1Init {
    #[default]
    Fresh,
    /// Network weights from a prior run (pretraining); counters and
    /// optimizers start fresh.
    WarmStart(Checkpoint),
    /// Continue an interrupted run from its last checkpoint.
    Resume(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub models: Stage1Models<f32>,
    pub state: TrainState,
    pub checkpoint: Checkpoint,
    /// `(step, term, value)` rows, also written to `losses.csv`.
    pub loss_rows: Vec<(u64, String, f64)>,
    pub artifacts: Vec<PathBuf>,
}

pub const STAGE1_KIND: &str = "stage1";

fn checkpoint_config(model: &ModelConfig, cfg: &Stage1Config) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = model.to_map().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
    m.insert("train.seed".into(), cfg.seed.to_string());
    m.insert("train.batch_size".into(), cfg.batch_size.to_string());
    m
}

/// Model configuration stored in a stage-1 checkpoint.
pub fn model_config_of(ck: &Checkpoint) -> Result<ModelConfig> {
    let map = ck
        .config
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
        .collect();
    ModelConfig::from_map(&map)
}

pub fn save_stage1(models: &Stage1Models<f32>, state: &TrainState, rng: &ChaCha8Rng, cfg: &Stage1Config) -> Checkpoint {
    let mut config = checkpoint_config(&models.gen.config, cfg);
    config.insert("state.step".into(), state.step.to_string());
    config.insert("state.d_update_count".into(), state.d_update_count.to_string());
    config.insert("state.g_update_count".into(), state.g_update_count.to_string());
    config.insert("state.rng_word_pos".into(), rng.get_word_pos().to_string());
    let mut ck = Checkpoint::new(STAGE1_KIND, state.epoch as u64, config);
    ck.put_module("encoder", &models.gen.encoder);
    ck.put_module("decoder", &models.gen.decoder);
    ck.put_module("discriminator", &models.disc);
    ck.put_optimizer("opt_g", &models.opt_g);
    ck.put_optimizer("opt_d", &models.opt_d);
    let window: Vec<f64> = state.window.iter().copied().collect();
    ck.put("state/window", &ArrayD::from_shape_vec(IxDyn(&[window.len()]), window).expect("1-d"));
    ck
}

/// Rebuilds networks (and, for `with_training_state`, optimizers, counters
/// and the sampler position) from a stage-1 checkpoint.
pub fn load_stage1(
    ck: &Checkpoint,
    cfg: &Stage1Config,
    with_training_state: bool,
) -> Result<(Stage1Models<f32>, TrainState, ChaCha8Rng)> {
    if ck.kind != STAGE1_KIND {
        return Err(Error::Format(format!("expected a {STAGE1_KIND} checkpoint, got `{}`", ck.kind)));
    }
    let model = model_config_of(ck)?;
    let mut models = Stage1Models::new(&model, cfg.adam(), cfg.seed)?;
    ck.load_module("encoder", &mut models.gen.encoder)?;
    ck.load_module("decoder", &mut models.gen.decoder)?;
    ck.load_module("discriminator", &mut models.disc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::default();
    if with_training_state {
        ck.require_config(&checkpoint_config(&model, cfg))?;
        ck.load_optimizer("opt_g", &mut models.opt_g)?;
        ck.load_optimizer("opt_d", &mut models.opt_d)?;
        let num = |k: &str| -> Result<u128> {
            ck.config
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        state.epoch = ck.epoch as usize;
        state.step = num("state.step")? as u64;
        state.d_update_count = num("state.d_update_count")? as u64;
        state.g_update_count = num("state.g_update_count")? as u64;
        rng.set_word_pos(num("state.rng_word_pos")?);
        for v in ck.get::<f64>("state/window")?.iter() {
            state.record_fake_accuracy(*v, cfg.window);
        }
    }
    Ok((models, state, rng))
}

/// Real images in the first column, then one synthesized image per target
/// identity (at most eight).
pub fn sample_grid(gen: &Generator<f32>, dataset: &Dataset, rows: usize, seed: u64) -> Result<Vec<Vec<ndarray::Array3<f32>>>> {
    let n = rows.min(dataset.len());
    let step = (dataset.len() / n.max(1)).max(1);
    let picks: Vec<_> = (0..n).map(|i| &dataset.images[i * step]).collect();
    let x = to_batch::<f32>(&picks);
    let (code, _) = gen.encode(&x)?;
    let z = NoiseVector::sample(n, gen.config.noise_dim, &mut ChaCha8Rng::seed_from_u64(seed));
    let ids = dataset.n_identities.min(8);
    let mut out: Vec<Vec<_>> = (0..n).map(|i| vec![from_batch(&x, i)]).collect();
    for j in 0..ids {
        let fake = gen.decode(&code, &z, &IdentityCode::one_hot(&vec![j; n], dataset.n_identities)?)?;
        for (i, row) in out.iter_mut().enumerate() {
            row.push(from_batch(&fake, i));
        }
    }
    Ok(out)
}

fn loss_rows(r: &StepReport) -> Vec<(u64, String, f64)> {
    let mut rows: Vec<(u64, String, f64)> = r.losses.terms().iter().map(|(n, v)| (r.step, n.to_string(), *v)).collect();
    rows.push((r.step, "d_total".into(), r.losses.d_total()));
    rows.push((r.step, "g_total".into(), r.losses.g_total()));
    rows.push((r.step, "g_pixel_l1".into(), r.pixel_l1));
    rows.push((r.step, "d_fake_accuracy".into(), r.d_fake_accuracy));
    rows.push((r.step, "g_updates".into(), r.g_updates as f64));
    rows
}

/// Runs `epochs x ceil(N / batch_size)` steps. With an output directory,
/// writes `losses.csv`, `samples/epoch_<n>.png` every epoch and
/// `checkpoints/epoch_<n>.ckpt` periodically and at the end. A non-finite
/// loss aborts the run after saving `checkpoints/diagnostic_step_<n>.ckpt`.
pub fn train_stage1(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &Stage1Config,
    init: Stage1Init,
    out_dir: Option<&Path>,
) -> Result<Stage1Output> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty training set"));
    }
    if dataset.n_expressions != model.n_expressions || dataset.n_identities != model.n_identities {
        return Err(invalid(format!(
            "dataset has {} expressions and {} identities, model expects {} and {}",
            dataset.n_expressions, dataset.n_identities, model.n_expressions, model.n_identities
        )));
    }
    let (h, w, c) = dataset.image_dims();
    if (h, w, c) != (model.image_size, model.image_size, model.channels) {
        return Err(invalid(format!("images are {h}x{w}x{c}, model expects {0}x{0}x{1}", model.image_size, model.channels)));
    }

    let (mut models, mut state, mut rng) = match &init {
        Stage1Init::Fresh => (Stage1Models::new(model, cfg.adam(), cfg.seed)?, TrainState::default(), ChaCha8Rng::seed_from_u64(cfg.seed)),
        Stage1Init::WarmStart(ck) => load_stage1(ck, cfg, false)?,
        Stage1Init::Resume(ck) => load_stage1(ck, cfg, true)?,
    };
    if models.gen.config != *model {
        return Err(invalid("checkpoint architecture differs from the requested model configuration"));
    }

    let mut artifacts = Vec::new();
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            let path = dir.join("losses.csv");
            let resuming = matches!(init, Stage1Init::Resume(_)) && path.exists();
            let file = fs::OpenOptions::new().create(true).append(resuming).write(true).truncate(!resuming).open(&path)?;
            let mut wtr = BufWriter::new(file);
            if !resuming {
                writeln!(wtr, "step,term,value")?;
            }
            artifacts.push(path);
            Some(wtr)
        }
        None => None,
    };

    let steps = cfg.steps_per_epoch(dataset.len());
    let mut all_rows = Vec::new();
    while state.epoch < cfg.epochs {
        for _ in 0..steps {
            let batch = sample_batch::<f32>(dataset, cfg.batch_size, model.noise_dim, &mut rng)?;
            let report = match train_step(&mut state, &mut models, &batch, cfg) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join(format!("checkpoints/diagnostic_step_{}.ckpt", state.step));
                        save_stage1(&models, &state, &rng, cfg).save(&path)?;
                        log::error!("{e}; diagnostic snapshot at {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rows = loss_rows(&report);
            if let Some(wtr) = csv.as_mut() {
                for (s, n, v) in &rows {
                    writeln!(wtr, "{s},{n},{v}")?;
                }
            }
            all_rows.extend(rows);
        }
        state.epoch += 1;
        log::info!(
            "stage1 epoch {}/{} step {} d_acc {:.3} d/g updates {}/{}",
            state.epoch,
            cfg.epochs,
            state.step,
            state.rolling_d_fake_accuracy,
            state.d_update_count,
            state.g_update_count
        );
        if let Some(dir) = out_dir {
            if let Some(wtr) = csv.as_mut() {
                wtr.flush()?;
            }
            let grid = dir.join(format!("samples/epoch_{}.png", state.epoch));
            save_grid(&grid, &sample_grid(&models.gen, dataset, 4, cfg.seed)?)?;
            artifacts.push(grid);
            let last = state.epoch == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
                let path = dir.join(format!("checkpoints/epoch_{}.ckpt", state.epoch));
                save_stage1(&models, &state, &rng, cfg).save(&path)?;
                artifacts.push(path);
            }
        }
    }
    if let Some(mut wtr) = csv {
        wtr.flush()?;
    }
    let checkpoint = save_stage1(&models, &state, &rng, cfg);
    Ok(Stage1Output { models, state, checkpoint, loss_rows: all_rows, artifacts })
}

/// Path of the last `epoch_<n>.ckpt` under `<dir>/checkpoints`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir.join("checkpoints"))? {
        let p = entry?.path();
        let epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, p));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| invalid(format!("no epoch checkpoints under {}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::{named_params, param_hash};

    pub(crate) fn tiny_model(n_e: usize, n_i: usize) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            channels: 3,
            widths: [4, 4, 8, 8],
            code_dim: 8,
            noise_dim: 4,
            n_expressions: n_e,
            n_identities: n_i,
            d_hidden: 8,
            fusion_dim: 4,
            local_width: 4,
            fused_hidden: 8,
        }
    }

    fn toy_data() -> Dataset {
        generate_synthetic(2, 2, 50, 16, 3).unwrap().dataset
    }

    fn toy_cfg() -> Stage1Config {
        Stage1Config { batch_size: 50, epochs: 2, window: 4, checkpoint_every: 1, ..Default::default() }
    }

    #[test]
    fn batch_shapes() {
        let data = generate_synthetic(5, 4, 10, 16, 0).unwrap().dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch::<f32>(&data, 150, 50, &mut rng).unwrap();
        assert_eq!(b.images.dim(), (3, 150, 16, 16));
        assert_eq!((b.y_e.len(), b.y_id.len(), b.y_idx.len()), (150, 150, 150));
        assert_eq!(b.z.0.dim(), (150, 50));
        assert_eq!(b.identity.matrix().dim(), (150, 5));
        let empty = Dataset { images: vec![], n_expressions: 2, n_identities: 2 };
        assert!(sample_batch::<f32>(&empty, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn target_identity_and_noise_distribution() {
        let data = generate_synthetic(5, 2, 1, 16, 0).unwrap().dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let mut zs = Vec::new();
        for _ in 0..100 {
            let b = sample_batch::<f64>(&data, 1000, 1, &mut rng).unwrap();
            b.y_idx.iter().for_each(|&j| counts[j] += 1);
            zs.extend(b.z.0.iter().copied());
        }
        let n = 100_000.0;
        let sigma = (n * 0.2 * 0.8f64).sqrt();
        for c in counts {
            assert!((c as f64 - 0.2 * n).abs() < 3.0 * sigma, "{counts:?}");
        }
        let mean = zs.iter().sum::<f64>() / n;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt());
        // std of the sample variance of N(0,1) is sqrt(2/n)
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn toy_run_step_count_and_artifacts() {
        let data = toy_data();
        assert_eq!(data.len(), 200);
        let dir = tempfile::tempdir().unwrap();
        let out = train_stage1(&data, &tiny_model(2, 2), &toy_cfg(), Stage1Init::Fresh, Some(dir.path())).unwrap();
        assert_eq!(out.state.step, 8);
        assert_eq!(out.state.d_update_count, 8);
        for f in ["losses.csv", "samples/epoch_1.png", "samples/epoch_2.png", "checkpoints/epoch_1.ckpt", "checkpoints/epoch_2.ckpt"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), dir.path().join("checkpoints/epoch_2.ckpt"));
        let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert!(csv.starts_with("step,term,value\n"));
        assert_eq!(csv.lines().count(), 1 + out.loss_rows.len());

        // reload is bit-identical, and save -> load -> save keeps the bytes
        let ck = Checkpoint::load(&dir.path().join("checkpoints/epoch_2.ckpt")).unwrap();
        let (m, _, _) = load_stage1(&ck, &toy_cfg(), true).unwrap();
        assert_eq!(param_hash(&m.gen), param_hash(&out.models.gen));
        assert_eq!(param_hash(&m.disc), param_hash(&out.models.disc));
        let st = load_stage1(&ck, &toy_cfg(), true).unwrap();
        let again = save_stage1(&st.0, &st.1, &st.2, &toy_cfg());
        assert_eq!(again.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn deterministic_loss_trace() {
        let data = toy_data();
        let cfg = Stage1Config { epochs: 1, ..toy_cfg() };
        let a = train_stage1(&data, &tiny_model(2, 2), &cfg, Stage1Init::Fresh, None).unwrap();
        let b = train_stage1(&data, &tiny_model(2, 2), &cfg, Stage1Init::Fresh, None).unwrap();
        assert_eq!(a.loss_rows, b.loss_rows);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = toy_data();
        let full = train_stage1(&data, &tiny_model(2, 2), &toy_cfg(), Stage1Init::Fresh, None).unwrap();
        let half = train_stage1(&data, &tiny_model(2, 2), &Stage1Config { epochs: 1, ..toy_cfg() }, Stage1Init::Fresh, None)
            .unwrap();
        let resumed =
            train_stage1(&data, &tiny_model(2, 2), &toy_cfg(), Stage1Init::Resume(half.checkpoint), None).unwrap();
        assert_eq!(param_hash(&resumed.models.gen), param_hash(&full.models.gen));
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn all_networks_move_and_zero_lr_freezes_them() {
        let data = toy_data();
        let model = tiny_model(2, 2);
        let cfg = Stage1Config { epochs: 1, ..toy_cfg() };
        let init = Stage1Models::<f32>::new(&model, cfg.adam(), cfg.seed).unwrap();
        let out = train_stage1(&data, &model, &cfg, Stage1Init::Fresh, None).unwrap();
        let delta = |a: BTreeMap<String, ArrayD<f32>>, b: BTreeMap<String, ArrayD<f32>>| -> f64 {
            a.iter().map(|(k, v)| (v - &b[k]).mapv(|d| (d as f64).powi(2)).sum()).sum::<f64>().sqrt()
        };
        assert!(delta(named_params(&init.gen.encoder), named_params(&out.models.gen.encoder)) > 0.0);
        assert!(delta(named_params(&init.gen.decoder), named_params(&out.models.gen.decoder)) > 0.0);
        assert!(delta(named_params(&init.disc), named_params(&out.models.disc)) > 0.0);

        let frozen = Stage1Config { learning_rate: 0.0, ..cfg };
        let out = train_stage1(&data, &model, &frozen, Stage1Init::Fresh, None).unwrap();
        assert_eq!(named_params(&init.gen), named_params(&out.models.gen));
        assert_eq!(named_params(&init.disc), named_params(&out.models.disc));
    }

    #[test]
    fn schedule_switches_on_full_window_above_threshold() {
        let cfg = Stage1Config { window: 3, ..Default::default() };
        let mut s = TrainState::default();
        for _ in 0..2 {
            s.record_fake_accuracy(1.0, cfg.window);
            assert!(!s.late_phase(&cfg));
        }
        s.record_fake_accuracy(1.0, cfg.window);
        assert!(s.late_phase(&cfg));
        s.record_fake_accuracy(0.0, cfg.window);
        s.record_fake_accuracy(0.25, cfg.window);
        // window {1, 0, 0.25}
        assert!(!s.late_phase(&cfg));
        let exact = Stage1Config { d_acc_threshold: 0.75, window: 4, ..cfg };
        let mut s = TrainState::default();
        for a in [1.0, 1.0, 0.5, 0.5] {
            s.record_fake_accuracy(a, exact.window);
        }
        // exactly at the threshold stays early
        assert!(!s.late_phase(&exact));
    }

    fn grad_check_batch() -> (Stage1Models<f64>, Stage1Batch<f64>) {
        let data = generate_synthetic(2, 2, 2, 16, 1).unwrap().dataset;
        let model = tiny_model(2, 2);
        let models = Stage1Models::<f64>::new(&model, AdamConfig::default(), 5).unwrap();
        assert!(crate::nn::param_count(&models.gen) + crate::nn::param_count(&models.disc) <= 10_000);
        let batch = sample_batch::<f64>(&data, 6, model.noise_dim, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (models, batch)
    }

    #[test]
    fn d_objective_gradient() {
        let (Stage1Models { mut gen, mut disc, .. }, batch) = grad_check_batch();
        let r = crate::losses::grad_check(
            &mut disc,
            |d, bw| d_objective(&mut gen, d, &batch, bw).map(|(l, _, _)| l),
            1e-5,
            400,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4 && r.kinks_crossed * 100 <= r.coords_checked, "{r:?}");
    }

    #[test]
    fn g_objective_gradient() {
        let (Stage1Models { mut gen, mut disc, .. }, batch) = grad_check_batch();
        let r = crate::losses::grad_check(
            &mut gen,
            |g, bw| g_objective(g, &mut disc, &batch, 0.0, bw).map(|(l, _, _)| l),
            1e-5,
            400,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4 && r.kinks_crossed * 100 <= r.coords_checked, "{r:?}");
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let data = toy_data();
        assert!(train_stage1(&data, &tiny_model(3, 2), &toy_cfg(), Stage1Init::Fresh, None).is_err());
        let bad = Stage1Config { batch_size: 1, ..toy_cfg() };
        assert!(train_stage1(&data, &tiny_model(2, 2), &bad, Stage1Init::Fresh, None).is_err());
        let bad = Stage1Config { d_acc_threshold: 1.0, ..toy_cfg() };
        assert!(bad.validate().is_err());
    }
}
