//! Adversarial objectives written as minimized cross-entropies, the stage-2
//! weighted sum and a finite-difference gradient checker.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::models::DiscriminatorOutput;
use crate::nn::layers::trace_kinks;
use crate::nn::{zero_grad, Module, Param, Real};

/// Mean softmax cross-entropy over the rows of `logits` and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(f64, Array2<T>)> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(invalid(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::c(1.0 / n as f64);
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (r, (row, mut g)) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi = (v - max).exp();
            z += *gi;
        }
        total += (z.ln() - (row[labels[r]] - max)).as_f64();
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_n;
        }
        g[labels[r]] -= inv_n;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite cross-entropy {loss}")));
    }
    Ok((loss.max(0.0), grad))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// The five cross-entropy terms of the two adversarial objectives. Terms not
/// involved in a given loss are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1LossReport {
    pub d_real_expr: f64,
    pub d_real_id: f64,
    pub d_fake: f64,
    pub g_expr: f64,
    pub g_id: f64,
}

impl Stage1LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("d_real_expr", self.d_real_expr),
            ("d_real_id", self.d_real_id),
            ("d_fake", self.d_fake),
            ("g_expr", self.g_expr),
            ("g_id", self.g_id),
        ]
    }

    pub fn d_total(&self) -> f64 {
        self.d_real_expr + self.d_real_id + self.d_fake
    }

    pub fn g_total(&self) -> f64 {
        self.g_expr + self.g_id
    }
}

/// Gradients of a stage-1 loss with respect to discriminator logits.
#[derive(Clone, Debug)]
pub struct HeadGrads<T: Real> {
    pub expr: Array2<T>,
    pub id: Array2<T>,
}

/// Discriminator loss and the logit gradients for the real and fake batches.
pub fn d_loss_with_grads<T: Real>(
    real: &DiscriminatorOutput<T>,
    y_e: &[usize],
    y_id: &[usize],
    fake: &DiscriminatorOutput<T>,
) -> Result<(f64, Stage1LossReport, HeadGrads<T>, HeadGrads<T>)> {
    let (d_real_expr, g_re) = softmax_cross_entropy(&real.expr_logits, y_e)?;
    let (d_real_id, g_ri) = softmax_cross_entropy(&real.id_logits, y_id)?;
    if y_e.contains(&real.fake_class()) {
        return Err(invalid("expression label collides with the fake class"));
    }
    let fake_labels = vec![fake.fake_class(); fake.batch_size()];
    let (d_fake, g_fe) = softmax_cross_entropy(&fake.expr_logits, &fake_labels)?;
    let report = Stage1LossReport { d_real_expr, d_real_id, d_fake, ..Default::default() };
    Ok((
        report.d_total(),
        report,
        HeadGrads { expr: g_re, id: g_ri },
        HeadGrads { expr: g_fe, id: Array2::zeros(fake.id_logits.raw_dim()) },
    ))
}

pub fn d_loss<T: Real>(
    real: &DiscriminatorOutput<T>,
    y_e: &[usize],
    y_id: &[usize],
    fake: &DiscriminatorOutput<T>,
) -> Result<(f64, Stage1LossReport)> {
    d_loss_with_grads(real, y_e, y_id, fake).map(|(l, r, _, _)| (l, r))
}

/// Generator loss: the fake should be read as expression `y_e` of the target
/// identity `y_idx`.
pub fn g_loss_with_grads<T: Real>(
    fake: &DiscriminatorOutput<T>,
    y_e: &[usize],
    y_idx: &[usize],
) -> Result<(f64, Stage1LossReport, HeadGrads<T>)> {
    if y_e.contains(&fake.fake_class()) {
        return Err(invalid("expression label collides with the fake class"));
    }
    let (g_expr, ge) = softmax_cross_entropy(&fake.expr_logits, y_e)?;
    let (g_id, gi) = softmax_cross_entropy(&fake.id_logits, y_idx)?;
    let report = Stage1LossReport { g_expr, g_id, ..Default::default() };
    Ok((report.g_total(), report, HeadGrads { expr: ge, id: gi }))
}

pub fn g_loss<T: Real>(fake: &DiscriminatorOutput<T>, y_e: &[usize], y_idx: &[usize]) -> Result<(f64, Stage1LossReport)> {
    g_loss_with_grads(fake, y_e, y_idx).map(|(l, r, _)| (l, r))
}

/// Weights of the four local losses and the fused loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2LossConfig {
    pub lambdas: [f64; 5],
}

impl Default for Stage2LossConfig {
    fn default() -> Self {
        Self { lambdas: [0.7, 0.6, 0.4, 0.3, 1.0] }
    }
}

impl Stage2LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(invalid(format!("loss weights must be finite and nonnegative: {:?}", self.lambdas)));
        }
        Ok(())
    }
}

pub fn stage2_total_loss(local: [f64; 4], fused: f64, config: &Stage2LossConfig) -> Result<f64> {
    config.validate()?;
    if local.iter().chain(std::iter::once(&fused)).any(|l| !(*l >= 0.0)) {
        return Err(invalid("stage-2 losses must be nonnegative"));
    }
    let l = config.lambdas;
    Ok(l[0] * local[0] + l[1] * local[1] + l[2] * local[2] + l[3] * local[3] + l[4] * fused)
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Over the coordinates whose perturbations stay on one linear piece of
    /// every rectifier.
    pub max_rel_error: f64,
    /// `param[flat_index]` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    /// Coordinates skipped because `+-epsilon` flipped a rectifier.
    pub kinks_crossed: usize,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences.
///
/// `loss(model, backward)` must return the scalar loss and, when `backward`
/// is set, accumulate its gradient into the (already zeroed) parameter
/// grads. Frozen parameters are skipped. At most `max_coords` coordinates are
/// sampled (all of them if the model is smaller).
pub fn grad_check<M, F>(model: &mut M, mut loss: F, epsilon: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    zero_grad(model);
    let (base, base_pattern) = trace_kinks(|| loss(model, true));
    let base = base?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {base}")));
    }
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    model.visit_params(&mut |p: &Param<f64>| {
        if !p.is_frozen() {
            for (i, g) in p.grad.iter().enumerate() {
                coords.push((p.name.clone(), i, *g));
            }
        }
    });
    let picked: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: String::new(), coords_checked: picked.len(), kinks_crossed: 0 };
    for &c in &picked {
        let (name, idx, analytic) = &coords[c];
        let mut eval = |delta: f64, model: &mut M| -> Result<(f64, u64)> {
            nudge(model, name, *idx, delta);
            let (v, pattern) = trace_kinks(|| loss(model, false));
            nudge(model, name, *idx, -delta);
            let v = v?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at {name}[{idx}]")));
            }
            Ok((v, pattern))
        };
        let (plus, p_plus) = eval(epsilon, model)?;
        let (minus, p_minus) = eval(-epsilon, model)?;
        if p_plus != base_pattern || p_minus != base_pattern {
            report.kinks_crossed += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = format!("{name}[{idx}]");
        }
    }
    Ok(report)
}

fn nudge<M: Module<f64>>(model: &mut M, name: &str, idx: usize, delta: f64) {
    model.visit_params_mut(&mut |p: &mut Param<f64>| {
        if p.name == name {
            let v = p.value.iter_mut().nth(idx).expect("coordinate in range");
            *v += delta;
        }
    });
}
