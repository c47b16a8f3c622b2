//! Expression classification from a frozen encoder: four local classifiers
//! on the residue taps and one fused classifier over `[f(x); h1..h4]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{to_batch, Dataset, LabeledImage};
use crate::error::{invalid, shape, Error, Result};
use crate::losses::{argmax_rows, softmax_cross_entropy, stage2_total_loss, Stage2LossConfig};
use crate::models::{Encoder, FusedClassifier, LocalClassifier, ModelConfig, ResidueFeatures};
use crate::nn::tensor::hconcat;
use crate::nn::{freeze_all, init_weights, param_hash, zero_grad, Adam, AdamConfig, Mode, Module, Param};
use crate::stage1::{model_config_of, INIT_STD};

/// Inference-only encoder. Its parameters are frozen (the optimizer refuses
/// them) and their hash is recorded at construction.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    encoder: Encoder<f32>,
    config: ModelConfig,
    hash: String,
}

impl FrozenEncoder {
    pub fn new(mut encoder: Encoder<f32>, config: ModelConfig) -> Self {
        freeze_all(&mut encoder);
        let hash = param_hash(&encoder);
        Self { encoder, config, hash }
    }

    /// Reads the `encoder` section of a stage-1 (or stage-2) checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if !ck.has_section("encoder") {
            return Err(Error::Format("checkpoint has no encoder section".into()));
        }
        let config = model_config_of(ck)?;
        let mut encoder = Encoder::new("encoder", config.channels, config.image_size, config.widths, config.code_dim);
        ck.load_module("encoder", &mut encoder)?;
        Ok(Self::new(encoder, config))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    /// Hash recorded when the encoder was frozen.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn current_hash(&self) -> String {
        param_hash(&self.encoder)
    }

    pub fn encode(&self, x: &Array4<f32>) -> Result<(Array2<f32>, ResidueFeatures<f32>)> {
        self.encoder.infer(x)
    }
}

/// The five trainable classifiers of stage 2.
#[derive(Clone, Debug)]
pub struct Stage2Heads {
    pub locals: [LocalClassifier<f32>; 4],
    pub fused: FusedClassifier<f32>,
}

impl Stage2Heads {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let w = cfg.widths;
        let mut heads = Self {
            locals: [0, 1, 2, 3].map(|i| LocalClassifier::new(&format!("local{i}"), w[i], cfg)),
            fused: FusedClassifier::new(cfg),
        };
        init_weights(&mut heads, seed, INIT_STD);
        heads
    }

    /// Inference on precomputed encoder outputs. The local logits depend
    /// only on the taps.
    pub fn forward_features(
        &self,
        code: &Array2<f32>,
        taps: &ResidueFeatures<f32>,
    ) -> Result<(Array2<f32>, [Array2<f32>; 4])> {
        let mut logits = Vec::with_capacity(4);
        let mut parts = vec![code.view().to_owned()];
        for (local, tap) in self.locals.iter().zip(&taps.maps) {
            let (l, h) = local.infer(tap)?;
            logits.push(l);
            parts.push(h);
        }
        let input = self.fused_input(&parts)?;
        let (fused, _) = self.fused.forward(&input)?;
        Ok((fused, logits.try_into().expect("four locals")))
    }

    fn fused_input(&self, parts: &[Array2<f32>]) -> Result<Array2<f32>> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let input = hconcat(&views);
        if input.ncols() != self.fused.input_dim() {
            return Err(shape(format!("fused input has {} features, expected {}", input.ncols(), self.fused.input_dim())));
        }
        Ok(input)
    }
}

impl Module<f32> for Stage2Heads {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.locals.iter().for_each(|l| l.visit_params(f));
        self.fused.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.locals.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.fused.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f32>)) {
        self.locals.iter().for_each(|l| l.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        self.locals.iter_mut().for_each(|l| l.visit_buffers_mut(f));
    }
}

/// Fused and local logits for a batch; encoder outputs are computed once.
pub fn stage2_forward(
    encoder: &FrozenEncoder,
    heads: &Stage2Heads,
    x: &Array4<f32>,
) -> Result<(Array2<f32>, [Array2<f32>; 4])> {
    let (code, taps) = encoder.encode(x)?;
    heads.forward_features(&code, &taps)
}

/// Fused-head argmax; ties go to the lowest class index.
pub fn predict(encoder: &FrozenEncoder, heads: &Stage2Heads, x: &Array4<f32>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&stage2_forward(encoder, heads, x)?.0))
}

/// Predictions for a list of images, in chunks.
pub fn predict_images(encoder: &FrozenEncoder, heads: &Stage2Heads, images: &[&LabeledImage]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        out.extend(predict(encoder, heads, &to_batch(chunk))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub loss: Stage2LossConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 150,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            loss: Stage2LossConfig::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
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
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }
}

/// Per-term losses of one stage-2 step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2StepReport {
    pub local: [f64; 4],
    pub fused: f64,
    pub total: f64,
}

/// Weighted stage-2 loss on one batch of encoder outputs. With `backward`,
/// each head receives the gradient of its own weighted term; the hidden
/// vectors enter the fused head as constants.
pub fn stage2_objective(
    heads: &mut Stage2Heads,
    code: &Array2<f32>,
    taps: &ResidueFeatures<f32>,
    labels: &[usize],
    loss: &Stage2LossConfig,
    backward: bool,
) -> Result<Stage2StepReport> {
    let mut local = [0.0; 4];
    let mut parts = vec![code.clone()];
    for (i, (head, tap)) in heads.locals.iter_mut().zip(&taps.maps).enumerate() {
        let (logits, h, cache) = head.forward(tap, Mode::Train)?;
        let (l, g) = softmax_cross_entropy(&logits, labels)?;
        local[i] = l;
        if backward {
            head.backward(&cache, &(g * loss.lambdas[i] as f32));
        }
        parts.push(h);
    }
    let input = heads.fused_input(&parts)?;
    let (logits, cache) = heads.fused.forward(&input)?;
    let (fused, g) = softmax_cross_entropy(&logits, labels)?;
    if backward {
        heads.fused.backward(&cache, &(g * loss.lambdas[4] as f32));
    }
    let total = stage2_total_loss(local, fused, loss)?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite stage-2 loss {total}")));
    }
    Ok(Stage2StepReport { local, fused, total })
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub heads: Stage2Heads,
    /// `(step, term, value)` with terms `L1`..`L5` and `total`.
    pub loss_rows: Vec<(u64, String, f64)>,
    pub checkpoint: Checkpoint,
    pub artifacts: Vec<PathBuf>,
}

pub const STAGE2_KIND: &str = "stage2";

/// Trains the five classifiers for `epochs` passes over a shuffled training
/// set. The encoder hash is verified afterwards. With an output directory,
/// writes `losses.csv` and `fer_model.ckpt`.
pub fn train_stage2(
    encoder: &FrozenEncoder,
    train: &Dataset,
    cfg: &Stage2Config,
    out_dir: Option<&Path>,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let model = encoder.config().clone();
    if train.n_expressions != model.n_expressions {
        return Err(invalid(format!(
            "dataset has {} expressions, encoder was trained for {}",
            train.n_expressions, model.n_expressions
        )));
    }
    let mut heads = Stage2Heads::new(&model, cfg.seed);
    let mut opt = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<_> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|i| i.expr_label).collect();
            let (code, taps) = encoder.encode(&to_batch(&refs))?;
            zero_grad(&mut heads);
            let r = stage2_objective(&mut heads, &code, &taps, &labels, &cfg.loss, true)?;
            opt.step(&mut heads)?;
            for (i, l) in r.local.iter().enumerate() {
                rows.push((step, format!("L{}", i + 1), *l));
            }
            rows.push((step, "L5".into(), r.fused));
            rows.push((step, "total".into(), r.total));
            epoch_loss += r.total * chunk.len() as f64;
            step += 1;
        }
        log::info!("stage2 epoch {}/{} mean loss {:.4}", epoch + 1, cfg.epochs, epoch_loss / train.len() as f64);
    }
    if encoder.current_hash() != encoder.hash() {
        return Err(Error::Numeric("frozen encoder parameters changed during stage 2".into()));
    }
    let checkpoint = save_stage2(encoder, &heads, cfg);
    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("losses.csv");
        let mut w = BufWriter::new(fs::File::create(&path)?);
        writeln!(w, "step,term,value")?;
        for (s, n, v) in &rows {
            writeln!(w, "{s},{n},{v}")?;
        }
        w.flush()?;
        artifacts.push(path);
        let path = dir.join("fer_model.ckpt");
        checkpoint.save(&path)?;
        artifacts.push(path);
    }
    Ok(Stage2Output { heads, loss_rows: rows, checkpoint, artifacts })
}

/// Encoder plus all five classifiers in one archive.
pub fn save_stage2(encoder: &FrozenEncoder, heads: &Stage2Heads, cfg: &Stage2Config) -> Checkpoint {
    let mut config: BTreeMap<String, String> =
        encoder.config().to_map().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
    config.insert("encoder_hash".into(), encoder.hash().to_string());
    let l = cfg.loss.lambdas;
    config.insert("lambdas".into(), format!("{},{},{},{},{}", l[0], l[1], l[2], l[3], l[4]));
    let mut ck = Checkpoint::new(STAGE2_KIND, cfg.epochs as u64, config);
    ck.put_module("encoder", encoder.encoder());
    for (i, local) in heads.locals.iter().enumerate() {
        ck.put_module(&format!("local{i}"), local);
    }
    ck.put_module("fused", &heads.fused);
    ck
}

pub fn load_stage2(ck: &Checkpoint) -> Result<(FrozenEncoder, Stage2Heads)> {
    if ck.kind != STAGE2_KIND {
        return Err(Error::Format(format!("expected a {STAGE2_KIND} checkpoint, got `{}`", ck.kind)));
    }
    let encoder = FrozenEncoder::from_checkpoint(ck)?;
    let mut heads = Stage2Heads::new(encoder.config(), 0);
    for (i, local) in heads.locals.iter_mut().enumerate() {
        ck.load_module(&format!("local{i}"), local)?;
    }
    ck.load_module("fused", &mut heads.fused)?;
    Ok((encoder, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::{grad_norm_sq, named_params};
    use crate::stage1::{save_stage1, Stage1Models, TrainState};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            channels: 3,
            widths: [4, 4, 8, 8],
            code_dim: 8,
            noise_dim: 4,
            n_expressions: 3,
            n_identities: 2,
            d_hidden: 8,
            fusion_dim: 4,
            local_width: 4,
            fused_hidden: 8,
        }
    }

    fn frozen() -> FrozenEncoder {
        let cfg = tiny_model();
        let models = Stage1Models::<f32>::new(&cfg, AdamConfig::default(), 3).unwrap();
        let ck = save_stage1(&models, &TrainState::default(), &ChaCha8Rng::seed_from_u64(0), &Default::default());
        FrozenEncoder::from_checkpoint(&ck).unwrap()
    }

    fn data() -> Dataset {
        generate_synthetic(2, 3, 8, 16, 4).unwrap().dataset
    }

    #[test]
    fn frozen_encoder_contract() {
        let enc = frozen();
        let x = to_batch::<f32>(&data().images.iter().take(4).collect::<Vec<_>>());
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        let mut copy = enc.encoder().clone();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut copy), Err(Error::FrozenParameter(_))));
        let empty = Checkpoint::new("stage1", 0, BTreeMap::new());
        assert!(matches!(FrozenEncoder::from_checkpoint(&empty), Err(Error::Format(_))));
    }

    #[test]
    fn forward_shapes_and_dataflow() {
        let enc = frozen();
        let heads = Stage2Heads::new(enc.config(), 1);
        let x = to_batch::<f32>(&data().images.iter().take(5).collect::<Vec<_>>());
        let (fused, locals) = stage2_forward(&enc, &heads, &x).unwrap();
        assert_eq!(fused.dim(), (5, 3));
        assert!(locals.iter().all(|l| l.dim() == (5, 3)));
        let (code, taps) = enc.encode(&x).unwrap();
        let (fused0, locals0) = heads.forward_features(&code.mapv(|_| 0.0), &taps).unwrap();
        assert_ne!(fused0, fused);
        assert_eq!(locals0, locals);
        assert!(heads.forward_features(&code.slice(ndarray::s![.., ..4]).to_owned(), &taps).is_err());
    }

    #[test]
    fn ties_predict_class_zero() {
        let enc = frozen();
        let mut heads = Stage2Heads::new(enc.config(), 1);
        heads.fused.out.weight.value.fill(0.0);
        let x = to_batch::<f32>(&data().images.iter().take(3).collect::<Vec<_>>());
        assert_eq!(predict(&enc, &heads, &x).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn selector_weights_isolate_the_fused_head() {
        let enc = frozen();
        let d = data();
        let x = to_batch::<f32>(&d.images.iter().take(6).collect::<Vec<_>>());
        let labels: Vec<usize> = d.images.iter().take(6).map(|i| i.expr_label).collect();
        let (code, taps) = enc.encode(&x).unwrap();
        let mut heads = Stage2Heads::new(enc.config(), 1);
        let sel = Stage2LossConfig { lambdas: [0.0, 0.0, 0.0, 0.0, 1.0] };
        zero_grad(&mut heads);
        let r = stage2_objective(&mut heads, &code, &taps, &labels, &sel, true).unwrap();
        assert_eq!(r.total, r.fused);
        assert!(heads.locals.iter().all(|l| grad_norm_sq(l) == 0.0));
        assert!(grad_norm_sq(&heads.fused) > 0.0);

        // doubling lambda_i doubles local i's gradient
        let grad = |lambda: f64, heads: &mut Stage2Heads| {
            let cfg = Stage2LossConfig { lambdas: [lambda, 0.6, 0.4, 0.3, 1.0] };
            zero_grad(heads);
            stage2_objective(heads, &code, &taps, &labels, &cfg, true).unwrap();
            grad_norm_sq(&heads.locals[0]).sqrt()
        };
        let (g1, g2) = (grad(0.35, &mut heads.clone()), grad(0.7, &mut heads.clone()));
        assert!((g2 / g1 - 2.0).abs() < 1e-6, "{g1} {g2}");
    }

    #[test]
    fn training_keeps_encoder_and_logs_weighted_sum() {
        let enc = frozen();
        let before = enc.current_hash();
        let dir = tempfile::tempdir().unwrap();
        let cfg = Stage2Config { epochs: 2, batch_size: 10, ..Default::default() };
        let out = train_stage2(&enc, &data(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(enc.current_hash(), before);
        assert!(dir.path().join("fer_model.ckpt").is_file() && dir.path().join("losses.csv").is_file());
        let l = cfg.loss.lambdas;
        for step in out.loss_rows.chunks(6) {
            let v: Vec<f64> = step.iter().map(|r| r.2).collect();
            let sum = l[0] * v[0] + l[1] * v[1] + l[2] * v[2] + l[3] * v[3] + l[4] * v[4];
            assert!((sum - v[5]).abs() < 1e-9);
        }
        let (enc2, heads2) = load_stage2(&Checkpoint::load(&dir.path().join("fer_model.ckpt")).unwrap()).unwrap();
        assert_eq!(enc2.hash(), before);
        assert_eq!(named_params(&heads2), named_params(&out.heads));
    }
}
