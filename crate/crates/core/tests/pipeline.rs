use std::fs;

use degan_core::checkpoint::Checkpoint;
use degan_core::data::{generate_synthetic, make_folds, to_batch, LabeledImage};
use degan_core::eval::{emit_report, FoldResult, MethodResults};
use degan_core::models::ModelConfig;
use degan_core::nn::param_hash;
use degan_core::stage1::{latest_checkpoint, train_stage1, Stage1Config, Stage1Init};
use degan_core::stage2::{load_stage2, predict, predict_images, stage2_forward, train_stage2, FrozenEncoder, Stage2Config};

fn small_model(n_e: usize, n_i: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        widths: [4, 8, 8, 8],
        code_dim: 12,
        noise_dim: 4,
        n_expressions: n_e,
        n_identities: n_i,
        d_hidden: 16,
        fusion_dim: 4,
        local_width: 4,
        fused_hidden: 8,
        ..Default::default()
    }
}

#[test]
fn stage_handoff_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(3, 2, 6, 16, 2).unwrap().dataset;
    let model = small_model(2, 3);
    let s1 = Stage1Config { batch_size: 12, epochs: 2, checkpoint_every: 1, ..Default::default() };
    let out = train_stage1(&data, &model, &s1, Stage1Init::Fresh, Some(&dir.path().join("s1"))).unwrap();
    let path = latest_checkpoint(&dir.path().join("s1")).unwrap();
    assert!(path.ends_with("epoch_2.ckpt"));

    let frozen = FrozenEncoder::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(frozen.hash(), param_hash(&out.models.gen.encoder));
    assert_eq!(frozen.config(), &model);

    let s2 = Stage2Config { batch_size: 12, epochs: 2, ..Default::default() };
    let trained = train_stage2(&frozen, &data, &s2, Some(&dir.path().join("s2"))).unwrap();
    let csv = fs::read_to_string(dir.path().join("s2/losses.csv")).unwrap();
    // 36 images / 12 per batch = 3 steps per epoch, 6 terms per step
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 6);

    let (enc2, heads2) = load_stage2(&Checkpoint::load(&dir.path().join("s2/fer_model.ckpt")).unwrap()).unwrap();
    assert_eq!(enc2.hash(), frozen.hash());
    let refs: Vec<&LabeledImage> = data.images.iter().collect();
    let x = to_batch(&refs);
    assert_eq!(stage2_forward(&frozen, &trained.heads, &x).unwrap().0, stage2_forward(&enc2, &heads2, &x).unwrap().0);
}

#[test]
fn accuracy_agrees_with_independent_recount() {
    let data = generate_synthetic(4, 3, 4, 16, 8).unwrap().dataset;
    let model = small_model(3, 4);
    let s1 = Stage1Config { batch_size: 16, epochs: 1, ..Default::default() };
    let out = train_stage1(&data, &model, &s1, Stage1Init::Fresh, None).unwrap();
    let frozen = FrozenEncoder::new(out.models.gen.encoder, model);
    let s2 = Stage2Config { batch_size: 16, epochs: 3, ..Default::default() };
    let heads = train_stage2(&frozen, &data, &s2, None).unwrap().heads;

    let refs: Vec<&LabeledImage> = data.images.iter().collect();
    let truth: Vec<usize> = refs.iter().map(|i| i.expr_label).collect();
    let via_eval = FoldResult::from_predictions(0, &predict_images(&frozen, &heads, &refs).unwrap(), &truth, 3).unwrap();

    // one image at a time through the raw batch predictor, counted by hand
    let mut correct = 0;
    for img in &refs {
        let p = predict(&frozen, &heads, &to_batch(&[*img])).unwrap()[0];
        correct += usize::from(p == img.expr_label);
    }
    assert_eq!(via_eval.accuracy, correct as f64 / refs.len() as f64);
    assert_eq!(via_eval.total() as usize, refs.len());
}

#[test]
fn folds_partition_subjects_and_report_is_complete() {
    let data = generate_synthetic(10, 2, 2, 16, 0).unwrap().dataset;
    let folds = make_folds(&data.images, 10, 3).unwrap();
    let mut results = Vec::new();
    for f in 0..10 {
        let (train, test) = folds.split(&data.images, f).unwrap();
        let train_subjects: std::collections::BTreeSet<_> = train.iter().map(|&i| &data.images[i].subject_id).collect();
        assert!(test.iter().all(|&i| !train_subjects.contains(&data.images[i].subject_id)));
        let truth: Vec<usize> = test.iter().map(|&i| data.images[i].expr_label).collect();
        results.push(FoldResult::from_predictions(f, &vec![0; truth.len()], &truth, 2).unwrap());
    }
    let m = MethodResults { method: "constant".into(), setting: "10-fold".into(), folds: results };
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &[m.clone()], None, &[]).unwrap();
    let csv = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    let mean_field: f64 = csv.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((mean_field - m.mean()).abs() < 5e-7);
    assert_eq!(m.confusion().sum() as usize, data.len());
}
