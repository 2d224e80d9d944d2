//! Experiment runner: turns a JSON config into trained models, attack grids,
//! and resistance-table artifacts (CSV + JSON), with full provenance and
//! byte-reproducible output.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    craft_for_spec, evaluate_transfer, AttackNorm, AttackSpec, Crafted, L0Direction, Predictor,
};
use crate::dataset::{atomic_write, subsample, Dataset, DatasetSpec};
use crate::defenses::{
    adversarial_train, distill_train, fit_lle_dnn, lle_dnn_from_json_value, lle_dnn_to_json_value,
    train_lle_approximator, DefenseKind, LleDnnModel,
};
use crate::error::{ensure, Error, Result};
use crate::mlp::{
    classifier_specs, init_model, model_from_json_value, model_to_json_value, stack, train,
    Activation, LayerSpec, MlpModel, Optimizer, TrainConfig,
};
use crate::numerics::Matrix;
use crate::rng::derive_seed;

/// Pinned CSV schema for resistance tables. `runtime_s` is a placeholder
/// column (always 0.000): every emitted byte must be a function of config and
/// seed alone, so wall-clock readings go to stderr instead.
pub const TABLE_CSV_HEADER: &str =
    "defense,dataset,box,norm,clean_acc,adv_acc,mean_distortion,seed,runtime_s";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    BlackBox,
    WhiteBox,
}

impl BoxMode {
    pub fn tag(&self) -> &'static str {
        match self {
            BoxMode::BlackBox => "black_box",
            BoxMode::WhiteBox => "white_box",
        }
    }
}

fn default_attack_subset() -> usize {
    500
}

fn default_epoch_scale() -> f64 {
    1.0
}

fn default_lle_train_size() -> usize {
    3000
}

/// One experiment: a defense and a box mode evaluated against an attack grid
/// on one dataset. The optional knobs have desk-scale defaults and are
/// echoed into every report.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub defense: DefenseKind,
    pub attacks: Vec<AttackSpec>,
    pub box_mode: BoxMode,
    pub seed: u64,
    /// How many (stratified) test rows the attacks run on; 0 = all of them.
    #[serde(default = "default_attack_subset")]
    pub attack_subset: usize,
    /// Epoch multiplier on the per-defense recipes, for quick desk runs.
    #[serde(default = "default_epoch_scale")]
    pub epoch_scale: f64,
    /// Landmark count for LLE fits; 0 = the whole training split.
    #[serde(default = "default_lle_train_size")]
    pub lle_train_size: usize,
    /// Where artifacts go; None = return results without writing.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale base for the embedding-dimension sweep: the same MNIST
    /// subset as the table, but a landmark set cut to 403 points — one over
    /// the d + 2 floor of the largest canonical dimension (400). Refitting
    /// the manifold per dimension stays cheap, and the top of the dimension
    /// range is genuinely data-starved, which is what bends the accuracy
    /// curve back down inside the swept range.
    pub fn desk_sweep(mnist_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Mnist {
                dir: mnist_dir.to_path_buf(),
                train_size: 10_000,
                test_size: 2_000,
                seed: 42,
            },
            defense: DefenseKind::LleDnn { k: 12, d: 200 },
            attacks: vec![AttackSpec::untargeted(AttackNorm::Linf { eps: 0.15 })],
            box_mode: BoxMode::BlackBox,
            seed: 42,
            attack_subset: 500,
            epoch_scale: 0.5,
            lle_train_size: 403,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.defense.validate()?;
        ensure!(!self.attacks.is_empty(), "config needs at least one attack");
        for a in &self.attacks {
            a.validate()?;
        }
        ensure!(
            self.epoch_scale > 0.0 && self.epoch_scale.is_finite(),
            "epoch_scale must be > 0, got {}",
            self.epoch_scale
        );
        Ok(())
    }
}

/// The full resistance table: every listed defense, black and white box,
/// against the shared attack grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub dataset: DatasetSpec,
    pub defenses: Vec<DefenseKind>,
    pub attacks: Vec<AttackSpec>,
    pub seed: u64,
    #[serde(default = "default_attack_subset")]
    pub attack_subset: usize,
    #[serde(default = "default_epoch_scale")]
    pub epoch_scale: f64,
    #[serde(default = "default_lle_train_size")]
    pub lle_train_size: usize,
}

impl TableConfig {
    /// The headline desk-scale run: a seed-fixed stratified 10k/2k MNIST
    /// subset, all four defenses, and the three-norm attack grid. Epochs are
    /// halved from the published recipes so the full table fits a desk-scale
    /// compute budget; the l₂ strength is calibrated so the attack floors the
    /// undefended model without erasing the defended ones.
    pub fn desk_default(mnist_dir: &Path) -> TableConfig {
        TableConfig {
            dataset: DatasetSpec::Mnist {
                dir: mnist_dir.to_path_buf(),
                train_size: 10_000,
                test_size: 2_000,
                seed: 42,
            },
            defenses: vec![
                DefenseKind::Standard,
                DefenseKind::AdversarialTraining { eps: 0.15 },
                DefenseKind::Distillation { temperature: 20.0 },
                DefenseKind::LleDnn { k: 12, d: 200 },
            ],
            attacks: vec![
                AttackSpec::untargeted(AttackNorm::Linf { eps: 0.15 }),
                AttackSpec::untargeted(AttackNorm::L2 { c: 0.1, steps: 20, step_size: 0.01 }),
                AttackSpec::untargeted(AttackNorm::L0 { budget: 40, direction: L0Direction::Any }),
            ],
            seed: 42,
            attack_subset: 500,
            epoch_scale: 0.5,
            lle_train_size: 3000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.defenses.is_empty(), "table config needs at least one defense");
        for d in &self.defenses {
            d.validate()?;
        }
        ensure!(!self.attacks.is_empty(), "table config needs at least one attack");
        for a in &self.attacks {
            a.validate()?;
        }
        ensure!(
            self.epoch_scale > 0.0 && self.epoch_scale.is_finite(),
            "epoch_scale must be > 0, got {}",
            self.epoch_scale
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-defense training recipes
// ---------------------------------------------------------------------------

fn scaled_epochs(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

fn train_config(optimizer: Optimizer, epochs: usize, dropout_keep: f64, seed: u64) -> TrainConfig {
    TrainConfig { optimizer, batch_size: 100, epochs, dropout_keep, seed }
}

// The published hyperparameter table, desk-scaled: same structures,
// activations, optimizers and epoch counts, applied to the subsampled data.
// `epoch_scale` shortens every schedule proportionally and is echoed into
// reports so readers can tell a quick run from a full one.

fn standard_recipe(
    in_dim: usize,
    classes: usize,
    scale: f64,
    seed: u64,
) -> Result<(Vec<LayerSpec>, TrainConfig)> {
    let specs = classifier_specs(&[in_dim, 500, 300, 100, classes], Activation::Sigmoid)?;
    Ok((specs, train_config(Optimizer::adam(1e-3), scaled_epochs(70, scale), 1.0, seed)))
}

fn adversarial_recipe(
    in_dim: usize,
    classes: usize,
    scale: f64,
    seed: u64,
) -> Result<(Vec<LayerSpec>, TrainConfig)> {
    let specs = classifier_specs(&[in_dim, 100, 100, 100, classes], Activation::Tanh)?;
    Ok((specs, train_config(Optimizer::sgd(0.1), scaled_epochs(60, scale), 0.75, seed)))
}

fn distill_recipe(
    in_dim: usize,
    classes: usize,
    scale: f64,
    seed: u64,
) -> Result<(Vec<LayerSpec>, TrainConfig)> {
    let specs = classifier_specs(&[in_dim, 200, 50, 20, classes], Activation::Tanh)?;
    Ok((specs, train_config(Optimizer::sgd(0.1), scaled_epochs(100, scale), 0.75, seed)))
}

fn lle_classifier_recipe(
    d: usize,
    classes: usize,
    scale: f64,
    seed: u64,
) -> Result<(Vec<LayerSpec>, TrainConfig)> {
    let specs = classifier_specs(&[d, 200, 100, classes], Activation::Relu)?;
    Ok((specs, train_config(Optimizer::adam(1e-3), scaled_epochs(50, scale), 0.5, seed)))
}

fn approximator_recipe(
    in_dim: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> (Vec<LayerSpec>, TrainConfig) {
    let specs = vec![
        LayerSpec::new(in_dim, 400, Activation::Tanh),
        LayerSpec::new(400, 400, Activation::Tanh),
        LayerSpec::new(400, d, Activation::Linear),
    ];
    (specs, train_config(Optimizer::adam(1e-3), scaled_epochs(15, scale), 1.0, seed))
}

/// Plain training with the standard recipe; used for both the undefended
/// target and the attacker's auxiliary model. Seed handling mirrors the
/// defense trainers: weights from salt 1, shuffle/dropout stream from salt 2.
fn fit_standard(data: &Dataset, seed: u64, scale: f64) -> Result<MlpModel> {
    let (specs, cfg) = standard_recipe(data.input_dim(), data.num_classes(), scale, seed)?;
    let model = init_model(&specs, derive_seed(seed, 1))?;
    Ok(train(model, data, &TrainConfig { seed: derive_seed(seed, 2), ..cfg })?.model)
}

// ---------------------------------------------------------------------------
// Fitted defenses
// ---------------------------------------------------------------------------

/// A trained target model, tagged with how it was trained.
pub enum FittedDefense {
    Standard(MlpModel),
    AdversarialTraining(MlpModel),
    Distillation(MlpModel),
    LleDnn(LleDnnModel),
}

impl FittedDefense {
    pub fn kind_tag(&self) -> &'static str {
        match self {
            FittedDefense::Standard(_) => "standard",
            FittedDefense::AdversarialTraining(_) => "adversarial_training",
            FittedDefense::Distillation(_) => "distillation",
            FittedDefense::LleDnn(_) => "lle_dnn",
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            FittedDefense::Standard(m)
            | FittedDefense::AdversarialTraining(m)
            | FittedDefense::Distillation(m) => m,
            FittedDefense::LleDnn(m) => m,
        }
    }

    pub fn clean_accuracy(&self, data: &Dataset) -> Result<f64> {
        let scores = self.as_predictor().predict_proba(data.samples())?;
        let mut correct = 0usize;
        for i in 0..data.len() {
            if crate::mlp::argmax_row(scores.row(i)) == data.class_of(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Train the target model for `kind` with the defense's own recipe.
pub fn fit_defense(
    kind: &DefenseKind,
    data: &Dataset,
    seed: u64,
    epoch_scale: f64,
    lle_train_size: usize,
) -> Result<FittedDefense> {
    let in_dim = data.input_dim();
    let classes = data.num_classes();
    match *kind {
        DefenseKind::Standard => {
            Ok(FittedDefense::Standard(fit_standard(data, seed, epoch_scale)?))
        }
        DefenseKind::AdversarialTraining { eps } => {
            let (specs, cfg) = adversarial_recipe(in_dim, classes, epoch_scale, seed)?;
            let out = adversarial_train(&specs, data, &cfg, eps)?;
            Ok(FittedDefense::AdversarialTraining(out.model))
        }
        DefenseKind::Distillation { temperature } => {
            let (specs, cfg) = distill_recipe(in_dim, classes, epoch_scale, seed)?;
            let student = distill_train(&specs, &specs, data, &cfg, temperature)?;
            Ok(FittedDefense::Distillation(student))
        }
        DefenseKind::LleDnn { k, d } => {
            let (specs, cfg) = lle_classifier_recipe(d, classes, epoch_scale, seed)?;
            let size = if lle_train_size == 0 { None } else { Some(lle_train_size) };
            let model = fit_lle_dnn(data, k, d, &specs, &cfg, size)?;
            Ok(FittedDefense::LleDnn(model))
        }
    }
}

// ---------------------------------------------------------------------------
// Surrogates
// ---------------------------------------------------------------------------

/// What the attacker crafts on, plus bookkeeping for reports and the craft
/// cache. Black-box surrogates are standard models and identical across
/// defenses, so their crafts are shared; white-box surrogates are defense-
/// specific retrainings (or, for LLE-DNN, the approximator stack).
#[derive(Clone)]
pub struct Surrogate {
    pub model: MlpModel,
    pub description: String,
    /// Cells with the same cache key reuse each other's crafted batches —
    /// and the surrogate fit itself, which dwarfs the crafting cost.
    pub cache_key: String,
}

/// Cells sharing a key share one surrogate: every black-box cell uses the
/// attacker's standard model (as does the standard/white cell, where the
/// two roles coincide), while each white-box defense retrains its own.
fn surrogate_cache_key(kind: &DefenseKind, box_mode: BoxMode) -> String {
    match (box_mode, kind) {
        (BoxMode::BlackBox, _) | (BoxMode::WhiteBox, DefenseKind::Standard) => {
            "standard-surrogate".to_string()
        }
        (BoxMode::WhiteBox, k) => format!("white:{}", k.tag()),
    }
}

pub fn build_surrogate(
    kind: &DefenseKind,
    box_mode: BoxMode,
    data: &Dataset,
    target: &FittedDefense,
    seed: u64,
    epoch_scale: f64,
) -> Result<Surrogate> {
    let surrogate_seed = seed + 1;
    match (box_mode, kind) {
        // The attacker's auxiliary standard model; also the white-box
        // surrogate for the undefended target, where the two coincide.
        (BoxMode::BlackBox, _) | (BoxMode::WhiteBox, DefenseKind::Standard) => Ok(Surrogate {
            model: fit_standard(data, surrogate_seed, epoch_scale)?,
            description: format!("standard(seed+1={surrogate_seed})"),
            cache_key: surrogate_cache_key(kind, box_mode),
        }),
        (BoxMode::WhiteBox, DefenseKind::AdversarialTraining { eps }) => {
            let (specs, cfg) = adversarial_recipe(
                data.input_dim(),
                data.num_classes(),
                epoch_scale,
                surrogate_seed,
            )?;
            let model = adversarial_train(&specs, data, &cfg, *eps)?.model;
            Ok(Surrogate {
                model,
                description: format!("adversarial_training(seed+1={surrogate_seed}, eps={eps})"),
                cache_key: surrogate_cache_key(kind, box_mode),
            })
        }
        (BoxMode::WhiteBox, DefenseKind::Distillation { temperature }) => {
            let (specs, cfg) =
                distill_recipe(data.input_dim(), data.num_classes(), epoch_scale, surrogate_seed)?;
            let mut model = distill_train(&specs, &specs, data, &cfg, *temperature)?;
            // Crafting happens at the training temperature: the recipe is
            // public, and the temperature-1 softmax of a distilled network is
            // saturated enough to starve the attack of gradient.
            model.set_temperature(*temperature)?;
            Ok(Surrogate {
                model,
                description: format!(
                    "distillation(seed+1={surrogate_seed}, craft_temperature={temperature})"
                ),
                cache_key: surrogate_cache_key(kind, box_mode),
            })
        }
        (BoxMode::WhiteBox, DefenseKind::LleDnn { d, .. }) => {
            let lle_model = match target {
                FittedDefense::LleDnn(m) => m,
                _ => {
                    return Err(Error::Contract(
                        "lle_dnn white-box surrogate needs the fitted lle_dnn target".into(),
                    ))
                }
            };
            let (specs, cfg) =
                approximator_recipe(data.input_dim(), *d, epoch_scale, surrogate_seed);
            let approx = train_lle_approximator(
                lle_model,
                data,
                &TrainConfig { seed: surrogate_seed, ..cfg },
                &specs,
            )?;
            let stacked = stack(&approx, &lle_model.classifier)?;
            Ok(Surrogate {
                model: stacked,
                description: format!("lle-approximator(seed+1={surrogate_seed})"),
                cache_key: surrogate_cache_key(kind, box_mode),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Resistance table
// ---------------------------------------------------------------------------

/// One (defense, box, norm) grid cell.
#[derive(Clone, Debug, Serialize)]
pub struct TableCell {
    pub defense: String,
    pub dataset: String,
    pub box_mode: String,
    pub norm: String,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub mean_distortion: f64,
    pub seed: u64,
    pub surrogate: String,
    pub n_eval: usize,
    pub n_originally_correct: usize,
}

#[derive(Debug)]
pub struct ResistanceTable {
    pub cells: Vec<TableCell>,
    pub dataset_fingerprint: String,
    pub seed: u64,
}

impl ResistanceTable {
    /// The pinned CSV form. Deterministic: fixed cell order, fixed float
    /// formatting, placeholder runtime column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TABLE_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{},0.000\n",
                c.defense,
                c.dataset,
                c.box_mode,
                c.norm,
                c.clean_acc,
                c.adv_acc,
                c.mean_distortion,
                c.seed
            ));
        }
        out
    }

    pub fn to_json_value(
        &self,
        config_echo: serde_json::Value,
        complete: bool,
    ) -> serde_json::Value {
        serde_json::json!({
            "format_version": 1,
            "kind": "resistance_table",
            "complete": complete,
            "seed": self.seed,
            "dataset_fingerprint": self.dataset_fingerprint,
            "runtime_note": "runtime_s columns are placeholders; wall-clock goes to stderr so output bytes depend only on config and seed",
            "config": config_echo,
            "cells": self.cells,
        })
    }
}

/// Content hash of a (train, test) pair, recorded in every report.
pub fn fingerprint_pair(train: &Dataset, test: &Dataset) -> String {
    format!("sha256:{}/{}", &train.fingerprint()[..16], &test.fingerprint()[..16])
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(name))?;
    eprintln!("[advlab] {name}: {:.1}s", t0.elapsed().as_secs_f64());
    Ok(out)
}

struct GridRun {
    train: Dataset,
    test: Dataset,
    eval: Dataset,
    fingerprint: String,
    seed: u64,
    epoch_scale: f64,
    surrogates: HashMap<String, Surrogate>,
    crafts: HashMap<(String, usize), Crafted>,
    cells: Vec<TableCell>,
}

impl GridRun {
    fn prepare(
        dataset: &DatasetSpec,
        seed: u64,
        attack_subset: usize,
        epoch_scale: f64,
    ) -> Result<GridRun> {
        let (train, test) = stage("load-dataset", || dataset.load())?;
        let eval = if attack_subset == 0 || attack_subset >= test.len() {
            test.clone()
        } else {
            subsample(&test, attack_subset, derive_seed(seed, 40))?
        };
        let fingerprint = fingerprint_pair(&train, &test);
        Ok(GridRun {
            train,
            test,
            eval,
            fingerprint,
            seed,
            epoch_scale,
            surrogates: HashMap::new(),
            crafts: HashMap::new(),
            cells: Vec::new(),
        })
    }

    /// Run one defense × box block (every attack), appending cells in grid
    /// order. `flush` is called after each finished cell with the cells so
    /// far — the incomplete-table hook.
    fn run_block(
        &mut self,
        kind: &DefenseKind,
        box_mode: BoxMode,
        target: &FittedDefense,
        clean_acc: f64,
        attacks: &[AttackSpec],
        mut flush: impl FnMut(&[TableCell]) -> Result<()>,
    ) -> Result<()> {
        let surrogate_key = surrogate_cache_key(kind, box_mode);
        if !self.surrogates.contains_key(&surrogate_key) {
            let built = stage(&format!("surrogate[{} {}]", kind.tag(), box_mode.tag()), || {
                build_surrogate(kind, box_mode, &self.train, target, self.seed, self.epoch_scale)
            })?;
            self.surrogates.insert(surrogate_key.clone(), built);
        }
        let surrogate = self.surrogates[&surrogate_key].clone();
        for (ai, spec) in attacks.iter().enumerate() {
            let key = (surrogate.cache_key.clone(), ai);
            if !self.crafts.contains_key(&key) {
                let crafted =
                    stage(&format!("craft[{} {}]", surrogate.cache_key, spec.norm.tag()), || {
                        craft_for_spec(&surrogate.model, &self.eval, spec)
                    })?;
                self.crafts.insert(key.clone(), crafted);
            }
            let crafted = &self.crafts[&key];
            let report = evaluate_transfer(target.as_predictor(), &self.eval, crafted, spec)
                .map_err(|e| e.in_stage("evaluate"))?;
            self.cells.push(TableCell {
                defense: kind.tag().to_string(),
                dataset: self.eval.name().to_string(),
                box_mode: box_mode.tag().to_string(),
                norm: report.norm_tag.clone(),
                clean_acc,
                adv_acc: report.adv_accuracy,
                mean_distortion: report.mean_distortion,
                seed: self.seed,
                surrogate: surrogate.description.clone(),
                n_eval: self.eval.len(),
                n_originally_correct: report.originally_correct.iter().filter(|&&c| c).count(),
            });
            flush(&self.cells)?;
        }
        Ok(())
    }

    fn into_table(self) -> ResistanceTable {
        ResistanceTable {
            cells: self.cells,
            dataset_fingerprint: self.fingerprint,
            seed: self.seed,
        }
    }
}

/// Artifact writer shared by `run_experiment` and `reproduce_table`: flushes
/// partial results under an `.incomplete` suffix, then atomically writes the
/// final pair and removes the marker. An aborted run leaves only the marker,
/// so nothing that parses as a finished table survives an abort.
struct TableWriter<'a> {
    out: Option<&'a Path>,
}

impl<'a> TableWriter<'a> {
    fn new(out: Option<&'a Path>) -> Result<Self> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            // Stale finished artifacts must not survive into a failed rerun.
            for name in ["table.csv", "report.json"] {
                let p = dir.join(name);
                if p.exists() {
                    std::fs::remove_file(&p)?;
                }
            }
        }
        Ok(TableWriter { out })
    }

    fn flush_partial(&self, seed: u64, fingerprint: &str, cells: &[TableCell]) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let partial = ResistanceTable {
            cells: cells.to_vec(),
            dataset_fingerprint: fingerprint.to_string(),
            seed,
        };
        atomic_write(&dir.join("table.csv.incomplete"), partial.to_csv().as_bytes())
    }

    fn finalize(&self, table: &ResistanceTable, config_echo: serde_json::Value) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let json = serde_json::to_string_pretty(&table.to_json_value(config_echo, true))
            .map_err(|e| Error::Format(format!("report encode: {e}")))?;
        atomic_write(&dir.join("table.csv"), table.to_csv().as_bytes())?;
        atomic_write(&dir.join("report.json"), json.as_bytes())?;
        let marker = dir.join("table.csv.incomplete");
        if marker.exists() {
            std::fs::remove_file(marker)?;
        }
        Ok(())
    }
}

/// Train target and surrogate for one defense/box pair and evaluate the whole
/// attack grid. Returns one table row per attack.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResistanceTable> {
    cfg.validate()?;
    let writer = TableWriter::new(cfg.out.as_deref())?;
    let mut run = GridRun::prepare(&cfg.dataset, cfg.seed, cfg.attack_subset, cfg.epoch_scale)?;
    let target = stage(&format!("fit[{}]", cfg.defense.tag()), || {
        fit_defense(&cfg.defense, &run.train, cfg.seed, cfg.epoch_scale, cfg.lle_train_size)
    })?;
    let clean_acc = target.clean_accuracy(&run.test).map_err(|e| e.in_stage("clean-accuracy"))?;
    let seed = run.seed;
    let fingerprint = run.fingerprint.clone();
    run.run_block(&cfg.defense, cfg.box_mode, &target, clean_acc, &cfg.attacks, |cells| {
        writer.flush_partial(seed, &fingerprint, cells)
    })?;
    let table = run.into_table();
    // The echo records the experiment, not the destination: the same config
    // written to two directories must produce identical bytes in both.
    let echo = serde_json::to_value(ExperimentConfig { out: None, ..cfg.clone() })
        .map_err(|e| Error::Format(format!("config echo: {e}")))?;
    writer.finalize(&table, echo)?;
    Ok(table)
}

/// The headline artifact: every configured defense, black and white box, over
/// the shared attack grid. Cells appear in fixed order (defense-major, then
/// box, then attack); black-box crafts are shared across defenses because the
/// surrogate is the same standard model.
pub fn reproduce_table(cfg: &TableConfig, out: Option<&Path>) -> Result<ResistanceTable> {
    cfg.validate()?;
    let writer = TableWriter::new(out)?;
    let mut run = GridRun::prepare(&cfg.dataset, cfg.seed, cfg.attack_subset, cfg.epoch_scale)?;
    for kind in &cfg.defenses {
        let target = stage(&format!("fit[{}]", kind.tag()), || {
            fit_defense(kind, &run.train, cfg.seed, cfg.epoch_scale, cfg.lle_train_size)
        })?;
        let clean_acc =
            target.clean_accuracy(&run.test).map_err(|e| e.in_stage("clean-accuracy"))?;
        for box_mode in [BoxMode::BlackBox, BoxMode::WhiteBox] {
            let seed = run.seed;
            let fingerprint = run.fingerprint.clone();
            run.run_block(kind, box_mode, &target, clean_acc, &cfg.attacks, |cells| {
                writer.flush_partial(seed, &fingerprint, cells)
            })?;
        }
    }
    let table = run.into_table();
    let echo = serde_json::to_value(cfg).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    writer.finalize(&table, echo)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Dimension sweep
// ---------------------------------------------------------------------------

/// Refit the LLE-DNN at each embedding dimension and record test accuracy.
/// The config's defense must be `lle_dnn`; its `d` is ignored in favor of
/// the swept values.
pub fn sweep_lle_dim(cfg: &ExperimentConfig, dims: &[usize]) -> Result<Vec<(usize, f64)>> {
    let k = match cfg.defense {
        DefenseKind::LleDnn { k, .. } => k,
        _ => {
            return Err(Error::Contract(format!(
                "sweep_lle_dim needs an lle_dnn defense, got {}",
                cfg.defense.tag()
            )))
        }
    };
    ensure!(!dims.is_empty(), "sweep_lle_dim: empty dims");
    ensure!(dims.windows(2).all(|w| w[0] < w[1]), "sweep_lle_dim: dims must be ascending");
    let (train, test) = stage("load-dataset", || cfg.dataset.load())?;
    ensure!(
        *dims.last().unwrap() < train.input_dim(),
        "sweep_lle_dim: dims must stay below the input dimension {}",
        train.input_dim()
    );

    let mut curve = Vec::with_capacity(dims.len());
    for &d in dims {
        let acc = stage(&format!("sweep[d={d}]"), || {
            let (specs, train_cfg) =
                lle_classifier_recipe(d, train.num_classes(), cfg.epoch_scale, cfg.seed)?;
            let size = if cfg.lle_train_size == 0 { None } else { Some(cfg.lle_train_size) };
            let model = fit_lle_dnn(&train, k, d, &specs, &train_cfg, size)?;
            let scores = model.predict_proba(test.samples())?;
            let mut correct = 0usize;
            for i in 0..test.len() {
                if crate::mlp::argmax_row(scores.row(i)) == test.class_of(i) {
                    correct += 1;
                }
            }
            Ok(correct as f64 / test.len() as f64)
        })?;
        curve.push((d, acc));
    }

    if let Some(dir) = cfg.out.as_deref() {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("d,clean_acc\n");
        for &(d, acc) in &curve {
            csv.push_str(&format!("{d},{acc:.6}\n"));
        }
        atomic_write(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

/// Either kind of persistable model; the JSON layout tells them apart.
#[derive(Debug)]
pub enum AnyModel {
    Mlp(MlpModel),
    LleDnn(LleDnnModel),
}

impl Predictor for AnyModel {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            AnyModel::Mlp(m) => m.predict_proba(x),
            AnyModel::LleDnn(m) => m.predict_proba(x),
        }
    }
}

pub fn save_model(path: &Path, model: &AnyModel) -> Result<()> {
    let value = match model {
        AnyModel::Mlp(m) => model_to_json_value(m),
        AnyModel::LleDnn(m) => lle_dnn_to_json_value(m),
    };
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Format(format!("model encode: {e}")))?;
    atomic_write(path, text.as_bytes())
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
    let is_lle = value.get("defense").and_then(|v| v.as_str()) == Some("lle_dnn");
    if is_lle {
        Ok(AnyModel::LleDnn(lle_dnn_from_json_value(value)?))
    } else {
        Ok(AnyModel::Mlp(model_from_json_value(value)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::accuracy_on;

    fn cluster_spec() -> DatasetSpec {
        DatasetSpec::GaussianClusters { n_train: 120, n_test: 60, m: 8, seed: 11, separation: 6.0 }
    }

    fn tiny_experiment(out: Option<PathBuf>) -> ExperimentConfig {
        ExperimentConfig {
            dataset: cluster_spec(),
            defense: DefenseKind::Standard,
            attacks: vec![AttackSpec::untargeted(AttackNorm::Linf { eps: 0.1 })],
            box_mode: BoxMode::BlackBox,
            seed: 5,
            attack_subset: 0,
            epoch_scale: 0.1,
            lle_train_size: 0,
            out,
        }
    }

    #[test]
    fn single_cell_experiment_matches_clean_accuracy() {
        let cfg = tiny_experiment(None);
        let table = run_experiment(&cfg).unwrap();
        assert_eq!(table.cells.len(), 1);
        let cell = &table.cells[0];
        assert_eq!(cell.defense, "standard");
        assert_eq!(cell.box_mode, "black_box");
        assert_eq!(cell.norm, "linf");

        let (train, test) = cfg.dataset.load().unwrap();
        let target = fit_defense(&cfg.defense, &train, cfg.seed, cfg.epoch_scale, 0).unwrap();
        let expected = target.clean_accuracy(&test).unwrap();
        assert_eq!(cell.clean_acc, expected);
        if let FittedDefense::Standard(m) = &target {
            assert_eq!(expected, accuracy_on(m, test.samples(), test.labels()).unwrap());
        } else {
            panic!("standard defense expected");
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(Some(dir.path().join("a")));
        run_experiment(&cfg).unwrap();
        let cfg2 = ExperimentConfig { out: Some(dir.path().join("b")), ..cfg };
        run_experiment(&cfg2).unwrap();
        let a = std::fs::read(dir.path().join("a/table.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b/table.csv")).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(TABLE_CSV_HEADER.as_bytes()));
        let ja = std::fs::read(dir.path().join("a/report.json")).unwrap();
        let jb = std::fs::read(dir.path().join("b/report.json")).unwrap();
        assert_eq!(ja, jb);
        assert!(!dir.path().join("a/table.csv.incomplete").exists());
    }

    #[test]
    fn aborted_grid_leaves_only_the_incomplete_marker() {
        let dir = tempfile::tempdir().unwrap();
        // Second attack is invalid for a continuous domain: the first cell
        // lands in the incomplete file, then the run aborts.
        let cfg = ExperimentConfig {
            attacks: vec![
                AttackSpec::untargeted(AttackNorm::Linf { eps: 0.1 }),
                AttackSpec::untargeted(AttackNorm::L0 {
                    budget: 3,
                    direction: L0Direction::ZeroToOneOnly,
                }),
            ],
            ..tiny_experiment(Some(dir.path().to_path_buf()))
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(matches!(err, Error::Stage { .. }), "errors carry their stage: {err}");
        assert!(!dir.path().join("table.csv").exists());
        assert!(!dir.path().join("report.json").exists());
        let partial = std::fs::read_to_string(dir.path().join("table.csv.incomplete")).unwrap();
        assert_eq!(partial.lines().count(), 2, "header plus the one finished cell");
    }

    #[test]
    fn small_table_covers_the_grid_in_fixed_order() {
        let cfg = TableConfig {
            dataset: cluster_spec(),
            defenses: vec![DefenseKind::Standard, DefenseKind::AdversarialTraining { eps: 0.1 }],
            attacks: vec![
                AttackSpec::untargeted(AttackNorm::Linf { eps: 0.1 }),
                AttackSpec::untargeted(AttackNorm::L2 { c: 0.1, steps: 3, step_size: 0.05 }),
            ],
            seed: 5,
            attack_subset: 0,
            epoch_scale: 0.05,
            lle_train_size: 0,
        };
        let table = reproduce_table(&cfg, None).unwrap();
        let got: Vec<(String, String, String)> = table
            .cells
            .iter()
            .map(|c| (c.defense.clone(), c.box_mode.clone(), c.norm.clone()))
            .collect();
        let mut want = Vec::new();
        for d in ["standard", "adversarial_training"] {
            for b in ["black_box", "white_box"] {
                for n in ["linf", "l2"] {
                    want.push((d.to_string(), b.to_string(), n.to_string()));
                }
            }
        }
        assert_eq!(got, want);
        // Standard-defense white box reuses the black-box surrogate: same
        // model, same crafts, so the rows must agree exactly.
        assert_eq!(table.cells[0].adv_acc, table.cells[2].adv_acc);
        assert_eq!(table.cells[0].surrogate, table.cells[2].surrogate);
    }

    #[test]
    fn sweep_emits_ascending_curve_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            defense: DefenseKind::LleDnn { k: 6, d: 2 },
            out: Some(dir.path().to_path_buf()),
            ..tiny_experiment(None)
        };
        let curve = sweep_lle_dim(&cfg, &[2, 3]).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!((curve[0].0, curve[1].0), (2, 3));
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(csv.starts_with("d,clean_acc\n"));
        assert_eq!(csv.lines().count(), 3);

        assert!(sweep_lle_dim(&cfg, &[3, 2]).is_err(), "descending dims");
        assert!(sweep_lle_dim(&cfg, &[2, 8]).is_err(), "dim not below input dim");
        let bad = ExperimentConfig { defense: DefenseKind::Standard, ..cfg };
        assert!(sweep_lle_dim(&bad, &[2]).is_err(), "non-lle defense");
    }

    #[test]
    fn model_files_round_trip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = cluster_spec().load().unwrap();
        let target = fit_defense(&DefenseKind::Standard, &train, 3, 0.05, 0).unwrap();
        let FittedDefense::Standard(mlp) = target else { panic!() };
        let probe = train.samples();

        let p1 = dir.path().join("mlp.json");
        save_model(&p1, &AnyModel::Mlp(mlp.clone())).unwrap();
        let loaded = load_model(&p1).unwrap();
        assert_eq!(
            loaded.predict_proba(probe).unwrap().data(),
            mlp.predict_proba(probe).unwrap().data()
        );

        let lle = fit_defense(&DefenseKind::LleDnn { k: 6, d: 2 }, &train, 3, 0.05, 0).unwrap();
        let FittedDefense::LleDnn(lle) = lle else { panic!() };
        let p2 = dir.path().join("lle.json");
        save_model(&p2, &AnyModel::LleDnn(lle.clone())).unwrap();
        let loaded = load_model(&p2).unwrap();
        assert_eq!(
            loaded.predict_proba(probe).unwrap().data(),
            lle.predict_proba(probe).unwrap().data()
        );

        let p3 = dir.path().join("junk.json");
        std::fs::write(&p3, b"{ not json").unwrap();
        let err = load_model(&p3).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let (train, test) = cluster_spec().load().unwrap();
        let f1 = fingerprint_pair(&train, &test);
        assert_eq!(f1, fingerprint_pair(&train, &test));
        assert!(f1.starts_with("sha256:"));
        let other = DatasetSpec::GaussianClusters {
            n_train: 120,
            n_test: 60,
            m: 8,
            seed: 12,
            separation: 6.0,
        };
        let (t2, s2) = other.load().unwrap();
        assert_ne!(f1, fingerprint_pair(&t2, &s2));
    }
}
