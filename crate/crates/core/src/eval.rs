//! Subject-disjoint k-fold evaluation, linear probes, expression transfer and
//! report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::io::save_grid;
use crate::data::{augment, center_crop, from_batch, to_batch, Dataset, FactorOracle, FoldSpec, LabeledImage};
use crate::error::{invalid, Result};
use crate::losses::{argmax_rows, softmax_cross_entropy};
use crate::models::{Encoder, ExpressionCode, Generator, IdentityCode, ModelConfig, NoiseVector};
use crate::nn::{init_weights, zero_grad, Adam, AdamConfig, Linear, Mode};
use crate::stage1::{train_stage1, Stage1Config, Stage1Init, INIT_STD};
use crate::stage2::{predict_images, train_stage2, FrozenEncoder, Stage2Config};

/// Test-fold outcome of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold_index: usize,
    pub accuracy: f64,
    /// `confusion[[true, predicted]]`.
    pub confusion: Array2<u64>,
}

impl FoldResult {
    pub fn from_predictions(fold_index: usize, predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() || truth.is_empty() {
            return Err(invalid("predictions and labels must be nonempty and of equal length"));
        }
        let mut confusion = Array2::zeros((n_classes, n_classes));
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= n_classes || t >= n_classes {
                return Err(invalid(format!("class index out of range for {n_classes} classes")));
            }
            confusion[[t, p]] += 1;
        }
        let accuracy = confusion.diag().sum() as f64 / truth.len() as f64;
        Ok(Self { fold_index, accuracy, confusion })
    }

    pub fn total(&self) -> u64 {
        self.confusion.sum()
    }
}

/// Per-fold results of one method with their aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResults {
    pub method: String,
    pub setting: String,
    pub folds: Vec<FoldResult>,
}

impl MethodResults {
    /// Mean of the per-fold accuracies.
    pub fn mean(&self) -> f64 {
        self.folds.iter().map(|f| f.accuracy).sum::<f64>() / self.folds.len() as f64
    }

    /// Population standard deviation of the per-fold accuracies.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.folds.iter().map(|f| (f.accuracy - m).powi(2)).sum::<f64>() / self.folds.len() as f64).sqrt()
    }

    /// Correct predictions over all test images of all folds.
    pub fn pooled(&self) -> f64 {
        let correct: u64 = self.folds.iter().map(|f| f.confusion.diag().sum()).sum();
        let total: u64 = self.folds.iter().map(FoldResult::total).sum();
        correct as f64 / total as f64
    }

    pub fn confusion(&self) -> Array2<u64> {
        let mut acc = self.folds[0].confusion.clone();
        for f in &self.folds[1..] {
            acc += &f.confusion;
        }
        acc
    }
}

/// Settings for the plain CNN baseline: the encoder architecture with an
/// `N_e`-way output, trained with cross-entropy on raw images.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 150, adam: AdamConfig::default(), seed: 0 }
    }
}

pub fn train_baseline(train: &Dataset, model: &ModelConfig, cfg: &BaselineConfig) -> Result<Encoder<f32>> {
    if train.is_empty() || cfg.batch_size < 2 {
        return Err(invalid("baseline needs a nonempty training set and batch_size >= 2"));
    }
    let mut net = Encoder::new("baseline", model.channels, model.image_size, model.widths, train.n_expressions);
    init_weights(&mut net, cfg.seed, INIT_STD);
    let mut opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<_> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|i| i.expr_label).collect();
            let (logits, _, cache) = net.forward(&to_batch(&refs), Mode::Train)?;
            let (_, g) = softmax_cross_entropy(&logits, &labels)?;
            zero_grad(&mut net);
            net.backward(&cache, &g);
            opt.step(&mut net)?;
        }
    }
    Ok(net)
}

pub fn baseline_predict(net: &Encoder<f32>, images: &[&LabeledImage]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        out.extend(argmax_rows(&net.infer(&to_batch(chunk))?.0));
    }
    Ok(out)
}

/// Everything `run_kfold` needs besides the data.
#[derive(Clone, Debug)]
pub struct KfoldConfig {
    /// `n_identities` is replaced per fold by the number of training subjects.
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub baseline: BaselineConfig,
    /// Crop side for the 110-fold training augmentation (test images get
    /// the center crop). `None` trains on the images as they are.
    pub augment_crop: Option<usize>,
    /// Also train the raw-pixel CNN baseline on every fold.
    pub with_baseline: bool,
}

#[derive(Clone, Debug)]
pub struct KfoldReport {
    pub degan: MethodResults,
    pub baseline: Option<MethodResults>,
}

fn prepare(images: Vec<LabeledImage>, crop: Option<usize>, train: bool) -> Result<Vec<LabeledImage>> {
    match crop {
        None => Ok(images),
        Some(c) if train => Ok(images.iter().map(|i| augment(i, c)).collect::<Result<Vec<_>>>()?.concat()),
        Some(c) => images.iter().map(|i| center_crop(i, c)).collect(),
    }
}

/// Trains stage 1 and stage 2 (and optionally the baseline) on the other
/// folds and evaluates on each held-out fold in turn. Fold `i` uses seeds
/// offset by `i`, so reruns are identical.
pub fn run_kfold(dataset: &Dataset, folds: &FoldSpec, cfg: &KfoldConfig) -> Result<KfoldReport> {
    let mut degan = Vec::with_capacity(folds.k);
    let mut baseline = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (train_idx, test_idx) = folds.split(&dataset.images, fold)?;
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(invalid(format!("fold {fold} has an empty train or test side")));
        }
        let train = prepare(dataset.subset(&train_idx), cfg.augment_crop, true)?;
        let test = prepare(dataset.subset(&test_idx), cfg.augment_crop, false)?;
        let train = Dataset::with_dense_identities(train, dataset.n_expressions)?;
        let model = ModelConfig { n_identities: train.n_identities, ..cfg.model.clone() };
        let offset = fold as u64;
        let s1 = Stage1Config { seed: cfg.stage1.seed.wrapping_add(offset), ..cfg.stage1.clone() };
        let s2 = Stage2Config { seed: cfg.stage2.seed.wrapping_add(offset), ..cfg.stage2.clone() };
        log::info!("fold {}/{}: {} train, {} test images", fold + 1, folds.k, train.len(), test.len());

        let stage1 = train_stage1(&train, &model, &s1, Stage1Init::Fresh, None)?;
        let encoder = FrozenEncoder::new(stage1.models.gen.encoder, model.clone());
        let stage2 = train_stage2(&encoder, &train, &s2, None)?;
        let test_refs: Vec<&LabeledImage> = test.iter().collect();
        let truth: Vec<usize> = test.iter().map(|i| i.expr_label).collect();
        let pred = predict_images(&encoder, &stage2.heads, &test_refs)?;
        degan.push(FoldResult::from_predictions(fold, &pred, &truth, dataset.n_expressions)?);

        if cfg.with_baseline {
            let b = BaselineConfig { seed: cfg.baseline.seed.wrapping_add(offset), ..cfg.baseline.clone() };
            let net = train_baseline(&train, &model, &b)?;
            let pred = baseline_predict(&net, &test_refs)?;
            baseline.push(FoldResult::from_predictions(fold, &pred, &truth, dataset.n_expressions)?);
        }
    }
    let setting = format!("{}-fold subject-disjoint", folds.k);
    Ok(KfoldReport {
        degan: MethodResults { method: "DE-GAN".into(), setting: setting.clone(), folds: degan },
        baseline: cfg
            .with_baseline
            .then(|| MethodResults { method: "CNN(baseline)".into(), setting, folds: baseline }),
    })
}

/// Linear-probe accuracies on a representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub expr_probe_accuracy: f64,
    pub id_probe_accuracy: f64,
    pub chance_id: f64,
    pub chance_expr: f64,
}

/// Training settings of the softmax-regression probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 500, learning_rate: 0.01, weight_decay: 1e-4, seed: 0 }
    }
}

fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("nonempty");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
    ((train - &mean) / &std, (test - &mean) / &std)
}

/// Single affine layer plus softmax, trained full-batch with Adam on
/// standardized features. Returns the test accuracy.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || test_y.is_empty() {
        return Err(invalid("probe features and labels disagree in length"));
    }
    let mut seen = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(invalid("probe training set has a single class"));
    }
    let (train_x, test_x) = standardize(train_x, test_x);
    let mut probe = Linear::<f64>::new("probe", train_x.ncols(), n_classes);
    init_weights(&mut probe, cfg.seed, 0.01);
    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    for _ in 0..cfg.iterations {
        zero_grad(&mut probe);
        let (logits, cache) = probe.forward(&train_x)?;
        let (_, g) = softmax_cross_entropy(&logits, train_y)?;
        probe.backward(&cache, &g, false);
        let decay = &probe.weight.value * cfg.weight_decay;
        probe.weight.grad += &decay;
        opt.step(&mut probe)?;
    }
    let pred = argmax_rows(&probe.forward(&test_x)?.0);
    Ok(pred.iter().zip(test_y).filter(|(p, t)| p == t).count() as f64 / test_y.len() as f64)
}

/// Trains an expression probe and an identity probe on `features(train)`
/// and reports their accuracies on `features(test)`.
pub fn probe_features(
    train_x: &Array2<f64>,
    train: &[LabeledImage],
    test_x: &Array2<f64>,
    test: &[LabeledImage],
    n_expressions: usize,
    n_identities: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let labels = |s: &[LabeledImage], f: fn(&LabeledImage) -> usize| s.iter().map(f).collect::<Vec<_>>();
    let expr = linear_probe(
        train_x,
        &labels(train, |i| i.expr_label),
        test_x,
        &labels(test, |i| i.expr_label),
        n_expressions,
        cfg,
    )?;
    let id = linear_probe(
        train_x,
        &labels(train, |i| i.identity_label),
        test_x,
        &labels(test, |i| i.identity_label),
        n_identities,
        cfg,
    )?;
    Ok(ProbeReport {
        expr_probe_accuracy: expr,
        id_probe_accuracy: id,
        chance_id: 1.0 / n_identities as f64,
        chance_expr: 1.0 / n_expressions as f64,
    })
}

/// `f(x)` for every image, as `f64` rows.
pub fn encode_all(encoder: &FrozenEncoder, images: &[LabeledImage]) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        let refs: Vec<_> = chunk.iter().collect();
        rows.push(encoder.encode(&to_batch(&refs))?.0.mapv(f64::from));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).map_err(|e| invalid(e.to_string()))?)
}

/// Raw pixels flattened to one row per image.
pub fn flatten_pixels(images: &[LabeledImage]) -> Array2<f64> {
    let d = images[0].pixels.len();
    Array2::from_shape_fn((images.len(), d), |(r, c)| f64::from(images[r].pixels.as_slice().expect("standard layout")[c]))
}

fn label_counts(train: &[LabeledImage], test: &[LabeledImage]) -> Result<(usize, usize)> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid("probe sets must be nonempty"));
    }
    let all = train.iter().chain(test);
    let n_e = all.clone().map(|i| i.expr_label).max().unwrap() + 1;
    let n_i = all.map(|i| i.identity_label).max().unwrap() + 1;
    Ok((n_e, n_i))
}

/// Probes on `f(x)`. Identity labels of `test` must refer to identities
/// present in `train`; the caller chooses the split.
pub fn probe_disentanglement(
    encoder: &FrozenEncoder,
    train: &[LabeledImage],
    test: &[LabeledImage],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (n_e, n_i) = label_counts(train, test)?;
    probe_features(&encode_all(encoder, train)?, train, &encode_all(encoder, test)?, test, n_e, n_i, cfg)
}

/// The same probes on raw pixels: the leakage ceiling.
pub fn pixel_probe(train: &[LabeledImage], test: &[LabeledImage], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (n_e, n_i) = label_counts(train, test)?;
    probe_features(&flatten_pixels(train), train, &flatten_pixels(test), test, n_e, n_i, cfg)
}

/// Splits every `(subject, expression)` group so that every `holdout`-th
/// image goes to the test side; both sides then contain every identity.
pub fn within_subject_split(images: &[LabeledImage], holdout: usize) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut seen = std::collections::BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for img in images {
        let n = seen.entry((img.subject_id.clone(), img.expr_label)).or_insert(0usize);
        if *n % holdout.max(2) == holdout.max(2) - 1 {
            test.push(img.clone());
        } else {
            train.push(img.clone());
        }
        *n += 1;
    }
    (train, test)
}

/// `decode(encode(x), z(seed), one_hot(target))` with running statistics.
pub fn transfer_expression(gen: &Generator<f32>, x: &Array3<f32>, target_identity: usize, z_seed: u64) -> Result<Array3<f32>> {
    let n_i = gen.config.n_identities;
    if target_identity >= n_i {
        return Err(invalid(format!("identity {target_identity} out of range for {n_i} identities")));
    }
    let img = LabeledImage { pixels: x.clone(), expr_label: 0, identity_label: 0, subject_id: String::new() };
    let batch = to_batch::<f32>(&[&img]);
    let (code, _) = gen.encode(&batch)?;
    let z = NoiseVector::sample(1, gen.config.noise_dim, &mut ChaCha8Rng::seed_from_u64(z_seed));
    let out = gen.decode(&ExpressionCode(code.0), &z, &IdentityCode::one_hot(&[target_identity], n_i)?)?;
    Ok(from_batch(&out, 0))
}

/// Input next to its transfer to every identity (at most 16 columns).
pub fn transfer_grid(gen: &Generator<f32>, inputs: &[Array3<f32>], z_seed: u64) -> Result<Vec<Vec<Array3<f32>>>> {
    inputs
        .iter()
        .map(|x| {
            let mut row = vec![x.clone()];
            for j in 0..gen.config.n_identities.min(16) {
                row.push(transfer_expression(gen, x, j, z_seed)?);
            }
            Ok(row)
        })
        .collect()
}

/// Oracle agreement of transferred images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferReport {
    pub transfers: usize,
    /// Fraction whose oracle expression equals the source expression.
    pub expression_agreement: f64,
    /// Fraction whose oracle identity equals the requested identity.
    pub identity_agreement: f64,
}

/// Transfers `n` images, drawn in order from `images` with targets cycling
/// through all identities, and scores them with the factor oracle.
pub fn transfer_agreement(
    gen: &Generator<f32>,
    oracle: &FactorOracle,
    images: &[LabeledImage],
    n: usize,
    seed: u64,
) -> Result<TransferReport> {
    if images.is_empty() || n == 0 {
        return Err(invalid("need images and a positive transfer count"));
    }
    let n_i = gen.config.n_identities;
    let (mut expr_ok, mut id_ok) = (0, 0);
    for t in 0..n {
        let src = &images[t % images.len()];
        let target = (t + t / images.len()) % n_i;
        let out = transfer_expression(gen, &src.pixels, target, seed.wrapping_add(t as u64))?;
        let (e, id) = oracle.classify(&out);
        expr_ok += usize::from(e == src.expr_label);
        id_ok += usize::from(id == target);
    }
    Ok(TransferReport {
        transfers: n,
        expression_agreement: expr_ok as f64 / n as f64,
        identity_agreement: id_ok as f64 / n as f64,
    })
}

fn class_names(n: usize, names: Option<&[String]>) -> Vec<String> {
    match names {
        Some(v) if v.len() == n => v.to_vec(),
        _ => (0..n).map(|k| format!("expr_{k}")).collect(),
    }
}

/// Writes `accuracy.csv` (per-fold rows plus a mean/std summary row per
/// method), `confusion_<method>.csv` (summed over folds), `summary.txt`
/// (mean, std and pooled accuracy) and any image grids as PNG.
pub fn emit_report(
    out_dir: &Path,
    results: &[MethodResults],
    class_labels: Option<&[String]>,
    grids: &[(String, Vec<Vec<Array3<f32>>>)],
) -> Result<Vec<PathBuf>> {
    if results.is_empty() || results.iter().any(|r| r.folds.is_empty()) {
        return Err(invalid("no results to report"));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut csv = String::from("method,setting,fold,accuracy,std\n");
    let mut summary = String::from("method\tsetting\tfolds\tmean\tstd\tpooled\n");
    for r in results {
        for f in &r.folds {
            writeln!(csv, "{},{},{},{:.6},", r.method, r.setting, f.fold_index, f.accuracy).unwrap();
        }
        writeln!(csv, "{},{},mean,{:.6},{:.6}", r.method, r.setting, r.mean(), r.std()).unwrap();
        writeln!(summary, "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.method, r.setting, r.folds.len(), r.mean(), r.std(), r.pooled())
            .unwrap();

        let conf = r.confusion();
        let names = class_names(conf.nrows(), class_labels);
        let mut text = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(conf.rows()) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(text, "{name},{}", cells.join(",")).unwrap();
        }
        let slug = r
            .method
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_ascii_lowercase)
            .collect::<Vec<_>>()
            .join("_");
        let path = out_dir.join(format!("confusion_{slug}.csv"));
        fs::write(&path, text)?;
        written.push(path);
    }
    let path = out_dir.join("accuracy.csv");
    fs::write(&path, csv)?;
    written.insert(0, path);
    let path = out_dir.join("summary.txt");
    fs::write(&path, summary)?;
    written.push(path);
    for (name, rows) in grids {
        let path = out_dir.join(format!("{name}.png"));
        save_grid(&path, rows)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_folds};
    use crate::nn::AdamConfig;
    use crate::stage1::Stage1Models;

    fn tiny_model(n_e: usize, n_i: usize) -> ModelConfig {
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

    #[test]
    fn fold_result_accounting() {
        let r = FoldResult::from_predictions(3, &[0, 1, 1, 2, 2], &[0, 1, 2, 2, 0], 3).unwrap();
        assert_eq!(r.total(), 5);
        assert_eq!(r.confusion.sum_axis(Axis(1)).to_vec(), vec![2, 1, 2]);
        assert!((r.accuracy - 0.6).abs() < 1e-12);
        assert!(FoldResult::from_predictions(0, &[], &[], 3).is_err());
        assert!(FoldResult::from_predictions(0, &[3], &[0], 3).is_err());
    }

    #[test]
    fn aggregates() {
        let a = FoldResult::from_predictions(0, &[0, 0], &[0, 0], 2).unwrap();
        let b = FoldResult::from_predictions(1, &[0, 1, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        let m = MethodResults { method: "m".into(), setting: "s".into(), folds: vec![a, b] };
        assert!((m.mean() - 0.625).abs() < 1e-12);
        assert!((m.std() - 0.375).abs() < 1e-12);
        assert!((m.pooled() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kfold_small_run() {
        let data = generate_synthetic(4, 2, 4, 16, 0).unwrap().dataset;
        let folds = make_folds(&data.images, 2, 1).unwrap();
        let cfg = KfoldConfig {
            model: tiny_model(2, 4),
            stage1: Stage1Config { epochs: 1, batch_size: 8, window: 2, ..Default::default() },
            stage2: Stage2Config { epochs: 1, batch_size: 8, ..Default::default() },
            baseline: BaselineConfig { epochs: 1, batch_size: 8, ..Default::default() },
            augment_crop: None,
            with_baseline: true,
        };
        let a = run_kfold(&data, &folds, &cfg).unwrap();
        let b = run_kfold(&data, &folds, &cfg).unwrap();
        assert_eq!(a.degan, b.degan);
        assert_eq!(a.baseline, b.baseline);
        assert_eq!(a.degan.folds.len(), 2);
        for f in &a.degan.folds {
            let (_, test) = folds.split(&data.images, f.fold_index).unwrap();
            assert_eq!(f.total() as usize, test.len());
        }
        let mean = a.degan.folds.iter().map(|f| f.accuracy).sum::<f64>() / 2.0;
        assert_eq!(mean, a.degan.mean());
    }

    #[test]
    fn kfold_with_augmentation_uses_crops() {
        let data = generate_synthetic(2, 2, 1, 18, 0).unwrap().dataset;
        let folds = make_folds(&data.images, 2, 0).unwrap();
        let cfg = KfoldConfig {
            model: tiny_model(2, 1),
            stage1: Stage1Config { epochs: 1, batch_size: 64, window: 2, ..Default::default() },
            stage2: Stage2Config { epochs: 1, batch_size: 64, ..Default::default() },
            baseline: BaselineConfig::default(),
            augment_crop: Some(16),
            with_baseline: false,
        };
        let r = run_kfold(&data, &folds, &cfg).unwrap();
        assert!(r.baseline.is_none());
        assert_eq!(r.degan.folds.iter().map(FoldResult::total).sum::<u64>(), 4);
    }

    #[test]
    fn probes_and_pixel_control() {
        let train = generate_synthetic(5, 4, 10, 24, 1).unwrap().dataset.images;
        let test = generate_synthetic(5, 4, 4, 24, 2).unwrap().dataset.images;
        let pixels = pixel_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!(pixels.id_probe_accuracy > 0.9, "{pixels:?}");
        assert_eq!(pixels.chance_id, 0.2);
        assert_eq!(pixels.chance_expr, 0.25);

        let single: Vec<_> = train.iter().filter(|i| i.identity_label == 0 && i.expr_label == 0).cloned().collect();
        assert!(pixel_probe(&single, &test, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn probe_on_code_is_deterministic() {
        let cfg = tiny_model(2, 2);
        let models = Stage1Models::<f32>::new(&cfg, AdamConfig::default(), 0).unwrap();
        let enc = FrozenEncoder::new(models.gen.encoder.clone(), cfg);
        let data = generate_synthetic(2, 2, 6, 16, 0).unwrap().dataset.images;
        let (train, test) = within_subject_split(&data, 3);
        assert_eq!((train.len(), test.len()), (16, 8));
        let ids = |s: &[LabeledImage]| s.iter().map(|i| i.identity_label).collect::<std::collections::BTreeSet<_>>();
        assert_eq!(ids(&train), ids(&test));
        let a = probe_disentanglement(&enc, &train, &test, &ProbeConfig::default()).unwrap();
        let b = probe_disentanglement(&enc, &train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.id_probe_accuracy) && (0.0..=1.0).contains(&a.expr_probe_accuracy));
        assert_eq!(enc.current_hash(), enc.hash());
    }

    #[test]
    fn transfer_is_deterministic_and_checked() {
        let cfg = tiny_model(2, 3);
        let models = Stage1Models::<f32>::new(&cfg, AdamConfig::default(), 0).unwrap();
        let x = generate_synthetic(2, 2, 1, 16, 0).unwrap().dataset.images[0].pixels.clone();
        let a = transfer_expression(&models.gen, &x, 2, 7).unwrap();
        assert_eq!(a, transfer_expression(&models.gen, &x, 2, 7).unwrap());
        assert_eq!(a.dim(), (16, 16, 3));
        assert!(transfer_expression(&models.gen, &x, 3, 7).is_err());
        assert_eq!(transfer_grid(&models.gen, &[x], 0).unwrap()[0].len(), 4);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), &[], None, &[]).is_err());
        assert!(!dir.path().join("accuracy.csv").exists());
        let folds: Vec<_> = (0..10)
            .map(|i| FoldResult::from_predictions(i, &[0, 1, i % 2], &[0, 1, 1], 2).unwrap())
            .collect();
        let r = MethodResults { method: "DE-GAN".into(), setting: "10-fold".into(), folds };
        let names = vec!["happy".to_string(), "sad".to_string()];
        emit_report(dir.path(), &[r], Some(&names), &[("grid".into(), vec![vec![Array3::zeros((4, 4, 3))]])]).unwrap();
        let csv = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 10 + 1);
        assert!(csv.lines().last().unwrap().starts_with("DE-GAN,10-fold,mean,"));
        let conf = fs::read_to_string(dir.path().join("confusion_de_gan.csv")).unwrap();
        assert_eq!(conf, "true\\pred,happy,sad\nhappy,10,0\nsad,5,15\n");
        assert!(dir.path().join("grid.png").is_file() && dir.path().join("summary.txt").is_file());
    }
}
