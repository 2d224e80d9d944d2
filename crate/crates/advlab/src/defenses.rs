//! The three defended models and the approximator attack against the third.
//!
//! Adversarial training and distillation harden a plain MLP; both remain
//! ordinary differentiable networks, so an attacker who retrains the same
//! recipe gets a usable gradient source. The LLE-DNN prepends a neighborhood
//! embedding that exposes no gradients; attacking it in a white-box sense
//! means fitting a smooth approximator to the embedding and hoping the
//! composite transfers.

use crate::attacks::{cross_model_attack, fgsm, AttackReport, AttackSpec, Predictor};
use crate::dataset::{subsample, Dataset};
use crate::error::{ensure, Error, Result};
use crate::lle::{self, LleModel};
use crate::mlp::{
    forward, init_model, loss_and_gradients, stack, train_on, train_on_scaled, LayerSpec, MlpModel,
    OptState, TrainConfig, TrainOutcome,
};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use rand::RngCore;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    Standard,
    AdversarialTraining { eps: f64 },
    Distillation { temperature: f64 },
    LleDnn { k: usize, d: usize },
}

impl DefenseKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DefenseKind::Standard => "standard",
            DefenseKind::AdversarialTraining { .. } => "adversarial_training",
            DefenseKind::Distillation { .. } => "distillation",
            DefenseKind::LleDnn { .. } => "lle_dnn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseKind::Standard => {}
            DefenseKind::AdversarialTraining { eps } => {
                ensure!(eps > 0.0 && eps.is_finite(), "adversarial training needs eps > 0");
            }
            DefenseKind::Distillation { temperature } => {
                ensure!(
                    temperature > 1.0 && temperature.is_finite(),
                    "distillation needs temperature > 1, got {temperature}"
                );
            }
            DefenseKind::LleDnn { k, d } => {
                ensure!(k >= 1 && d >= 1, "lle_dnn needs k >= 1 and d >= 1");
            }
        }
        Ok(())
    }
}

/// Train with FGSM minibatch augmentation: every optimizer step sees each
/// drawn sample twice, clean and perturbed against the current weights, under
/// the original label. The seeded stream matches `train_on`'s (shuffle, then
/// one dropout seed per batch), so eps → 0 degenerates to plain training up
/// to the duplicated rows.
pub fn adversarial_train(
    specs: &[LayerSpec],
    data: &Dataset,
    cfg: &TrainConfig,
    eps: f64,
) -> Result<TrainOutcome> {
    ensure!(eps > 0.0 && eps.is_finite(), "adversarial_train: eps must be > 0, got {eps}");
    let mut model = init_model(specs, derive_seed(cfg.seed, 1))?;
    let mut opt = OptState::new(&model, cfg.optimizer);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let x = data.samples();
    let labels = data.labels();
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let xb = crate::mlp::gather_rows(x, chunk);
            let yb = crate::mlp::gather_rows(labels, chunk);
            let adv = fgsm(&model, &xb, &yb, eps)?;
            let mut xa = Matrix::zeros(2 * xb.rows(), xb.cols());
            let mut ya = Matrix::zeros(2 * yb.rows(), yb.cols());
            for i in 0..xb.rows() {
                xa.row_mut(i).copy_from_slice(xb.row(i));
                xa.row_mut(xb.rows() + i).copy_from_slice(adv.row(i));
                ya.row_mut(i).copy_from_slice(yb.row(i));
                ya.row_mut(yb.rows() + i).copy_from_slice(yb.row(i));
            }
            let dropout_seed = rng.next_u64();
            let (loss, grads, _) =
                loss_and_gradients(&model, &xa, &ya, cfg.dropout_keep, dropout_seed)?;
            opt.apply(&mut model, &grads);
            loss_sum += loss;
            batches += 1;
        }
        epoch_mean_loss.push(loss_sum / batches as f64);
    }
    Ok(TrainOutcome { model, epoch_mean_loss })
}

/// Defensive distillation: teacher trained at temperature T on hard labels,
/// student trained at T on the teacher's temperature-T output distributions,
/// student returned at temperature 1 for evaluation.
///
/// Both phases scale the loss by T. Softmax at temperature T divides logit
/// gradients by T, so the weight-space gradient of T·L matches what the same
/// network would see at temperature 1 — training stays stable at the
/// recipe's plain SGD learning rate, and the fitted logits come out roughly
/// T times larger, which is exactly the saturation the defense relies on at
/// evaluation time. The T² factor that makes distillation temperature-
/// invariant in the gradient-flow limit is too hot for discrete SGD here:
/// at T = 20 it multiplies every weight step by 400, saturates the tanh
/// layers within the first epochs, and both phases collapse to chance.
/// With no factor at all both phases are starved instead and the student
/// stalls in the mid-60s.
pub fn distill_train(
    teacher_specs: &[LayerSpec],
    student_specs: &[LayerSpec],
    data: &Dataset,
    cfg: &TrainConfig,
    temperature: f64,
) -> Result<MlpModel> {
    DefenseKind::Distillation { temperature }.validate()?;
    let t_out = teacher_specs.last().map(|s| s.out_dim);
    let s_out = student_specs.last().map(|s| s.out_dim);
    ensure!(
        t_out.is_some() && t_out == s_out,
        "distill_train: teacher and student output dims must match ({t_out:?} vs {s_out:?})"
    );

    let mut teacher = init_model(teacher_specs, derive_seed(cfg.seed, 1))?;
    teacher.set_temperature(temperature)?;
    let teacher = train_on_scaled(
        teacher,
        data.samples(),
        data.labels(),
        &TrainConfig { seed: derive_seed(cfg.seed, 2), ..*cfg },
        temperature,
    )?
    .model;

    let soft_labels = forward(&teacher, data.samples())?;

    let mut student = init_model(student_specs, derive_seed(cfg.seed, 3))?;
    student.set_temperature(temperature)?;
    let mut student = train_on_scaled(
        student,
        data.samples(),
        &soft_labels,
        &TrainConfig { seed: derive_seed(cfg.seed, 4), ..*cfg },
        temperature,
    )?
    .model;
    student.set_temperature(1.0)?;
    Ok(student)
}

// ---------------------------------------------------------------------------
// LLE-DNN
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LleDnnModel {
    pub lle: LleModel,
    pub classifier: MlpModel,
}

impl LleDnnModel {
    pub fn k(&self) -> usize {
        self.lle.k()
    }

    pub fn d(&self) -> usize {
        self.lle.d()
    }
}

/// Fit the embedding on (a stratified subset of) the training samples, then
/// train the classifier on embedded training data. `lle_train_size` caps the
/// number of embedding landmarks — the eigenproblem is O(n³), so desk-scale
/// runs fit the manifold on a few thousand points and map the rest through
/// the out-of-sample transform. `None` uses every training sample.
pub fn fit_lle_dnn(
    data: &Dataset,
    k: usize,
    d: usize,
    classifier_specs: &[LayerSpec],
    cfg: &TrainConfig,
    lle_train_size: Option<usize>,
) -> Result<LleDnnModel> {
    let first_in = classifier_specs.first().map(|s| s.in_dim);
    ensure!(
        first_in == Some(d),
        "fit_lle_dnn: classifier input dim {first_in:?} must equal embedding dim {d}"
    );
    let lle = match lle_train_size {
        Some(n) if n < data.len() => {
            let landmarks = subsample(data, n, derive_seed(cfg.seed, 20))?;
            lle::fit(landmarks.samples(), k, d, lle::DEFAULT_REG_SCALE)?
        }
        _ => lle::fit(data.samples(), k, d, lle::DEFAULT_REG_SCALE)?,
    };
    let embedded = lle::transform_batch(&lle, data.samples())?;
    let classifier = init_model(classifier_specs, derive_seed(cfg.seed, 21))?;
    let classifier = train_on(
        classifier,
        &embedded,
        data.labels(),
        &TrainConfig { seed: derive_seed(cfg.seed, 22), ..*cfg },
    )?
    .model;
    Ok(LleDnnModel { lle, classifier })
}

/// Embed, then classify. There is deliberately no input-gradient counterpart
/// to this function: the embedding step is a neighborhood computation with no
/// derivative to expose.
pub fn predict_lle_dnn(model: &LleDnnModel, x: &Matrix) -> Result<Matrix> {
    let embedded = lle::transform_batch(&model.lle, x)?;
    forward(&model.classifier, &embedded)
}

impl Predictor for LleDnnModel {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        predict_lle_dnn(self, x)
    }
}

/// Fit a regression network x ↦ transform(lle, x) on the training samples.
/// The final spec must be a linear layer of width d (trained under MSE);
/// stacking it with the LLE-DNN's classifier yields the differentiable
/// surrogate the white-box attack needs.
pub fn train_lle_approximator(
    model: &LleDnnModel,
    data: &Dataset,
    cfg: &TrainConfig,
    approx_specs: &[LayerSpec],
) -> Result<MlpModel> {
    let last = approx_specs
        .last()
        .ok_or_else(|| Error::Contract("approximator needs at least one layer".into()))?;
    ensure!(
        last.activation == crate::mlp::Activation::Linear,
        "approximator must end with a linear regression layer"
    );
    ensure!(
        last.out_dim == model.d(),
        "approximator output dim {} must equal embedding dim {}",
        last.out_dim,
        model.d()
    );
    let targets = lle::transform_batch(&model.lle, data.samples())?;
    let approx = init_model(approx_specs, derive_seed(cfg.seed, 1))?;
    Ok(train_on(
        approx,
        data.samples(),
        &targets,
        &TrainConfig { seed: derive_seed(cfg.seed, 2), ..*cfg },
    )?
    .model)
}

/// Mean squared error of the approximator against the true embedding, per
/// coordinate — the report number quantifying how approximable the transform
/// turned out to be.
pub fn approximator_mse(model: &LleDnnModel, approx: &MlpModel, data: &Dataset) -> Result<f64> {
    let truth = lle::transform_batch(&model.lle, data.samples())?;
    let pred = forward(approx, data.samples())?;
    let n = (truth.rows() * truth.cols()) as f64;
    let sum: f64 = truth.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n)
}

/// White-box attack on the LLE-DNN: compose approximator and classifier into
/// one differentiable surrogate, craft against it, score against the real
/// pipeline.
pub fn whitebox_attack_lle_dnn(
    model: &LleDnnModel,
    approximator: &MlpModel,
    data: &Dataset,
    spec: &AttackSpec,
) -> Result<AttackReport> {
    let surrogate = stack(approximator, &model.classifier)?;
    let mut report = cross_model_attack(&surrogate, model, data, spec)?;
    report.surrogate = "lle-approximator".to_string();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn lle_dnn_to_json_value(model: &LleDnnModel) -> serde_json::Value {
    serde_json::json!({
        "format_version": 1,
        "defense": "lle_dnn",
        "k": model.k(),
        "d": model.d(),
        "lle": lle::lle_to_json_value(&model.lle),
        "classifier": crate::mlp::model_to_json_value(&model.classifier),
    })
}

pub fn lle_dnn_from_json_value(value: serde_json::Value) -> Result<LleDnnModel> {
    let version = value.get("format_version").and_then(|v| v.as_u64());
    ensure_format(version == Some(1), format!("unsupported format_version {version:?}"))?;
    let defense = value.get("defense").and_then(|v| v.as_str());
    ensure_format(defense == Some("lle_dnn"), format!("not an lle_dnn document: {defense:?}"))?;
    let lle_doc = value
        .get("lle")
        .cloned()
        .ok_or_else(|| Error::Format("lle_dnn document missing 'lle'".into()))?;
    let clf_doc = value
        .get("classifier")
        .cloned()
        .ok_or_else(|| Error::Format("lle_dnn document missing 'classifier'".into()))?;
    let lle = lle::lle_from_json_value(lle_doc)?;
    let classifier = crate::mlp::model_from_json_value(clf_doc)?;
    ensure!(
        classifier.input_dim() == lle.d(),
        "lle_dnn document inconsistent: classifier input {} vs embedding dim {}",
        classifier.input_dim(),
        lle.d()
    );
    Ok(LleDnnModel { lle, classifier })
}

fn ensure_format(ok: bool, msg: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Format(msg))
    }
}
