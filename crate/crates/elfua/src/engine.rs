//! Bi-level training driver: self-supervised inner updates, the
//! domain-adaptation outer objective, and the meta update.
//!
//! The inner loop takes plain gradient-descent steps on the pretext loss
//! over a person's support images; only the adaptable parameter suffix
//! moves. The adapted parameters stay expressed as graph tensors
//! `psi' = psi - alpha * g`, so with detached inner gradients (the
//! first-order default) the meta gradient w.r.t. `psi` is exactly the
//! gradient at `psi'`, and with `second_order = true` the same code path
//! carries the full bi-level gradient through the inner updates.
//!
//! One outer step sums each task's meta loss (source gaze loss plus the
//! weighted JMMD to the task's query set at the adapted parameters) and
//! applies a single SGD step at the fixed meta learning rate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    sample_source_batch, sample_task_batch, GazeSample, PersonTaskset, SourceDataset, Task,
};
use crate::error::{Error, Result};
use crate::jigsaw::{make_pretext_batch, PermutationSet};
use crate::losses::{self, KernelSpec, LossReport};
use crate::network::{image_batch, ModelConfig, ModelState, ParamSet};
use crate::seed::{self, stream};
use crate::tensor::backward;
use crate::{checkpoint, network};

/// Training hyperparameters. Shipped defaults follow the reference
/// configuration: alpha 1e-2, beta 1e-4, gamma 0.1, G = 3 inner steps,
/// K = 5 shots, meta-batch of 10 tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Meta learning rate for the fixed-rate SGD outer update.
    pub beta: f64,
    /// Weight of the JMMD term in the meta loss.
    pub gamma: f64,
    /// Inner gradient steps G.
    pub inner_steps: usize,
    /// Support-set size K.
    pub shots: usize,
    /// Query-set size t.
    pub query_size: usize,
    /// Tasks per outer step.
    pub meta_batch: usize,
    /// Labeled source mini-batch size, resampled per task per outer step.
    pub source_batch: usize,
    /// Outer steps to run; no meaningful default, the caller must choose.
    pub total_outer_steps: usize,
    /// Propagate meta gradients through the inner updates.
    pub second_order: bool,
    /// Include each support image unshuffled as pretext class 0.
    pub pretext_include_original: bool,
    pub seed: u64,
    /// Worker threads for per-task / per-person parallelism (1 = serial).
    pub jobs: usize,
    /// Write a checkpoint every this many outer steps (0 = final only).
    pub checkpoint_every: usize,
    /// Warm-start parameters from this checkpoint instead of random init.
    pub init_from: Option<std::path::PathBuf>,
    /// Weight of the auxiliary pretext loss in `train_baseline`; zero
    /// keeps the baseline purely supervised, a positive value trains the
    /// permutation head jointly on shuffled source images.
    pub pretext_weight: f64,
    pub kernel: KernelSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            alpha: 1e-2,
            beta: 1e-4,
            gamma: 0.1,
            inner_steps: 3,
            shots: 5,
            query_size: 5,
            meta_batch: 10,
            source_batch: 32,
            total_outer_steps: 0,
            second_order: false,
            pretext_include_original: true,
            seed: 0,
            jobs: 1,
            checkpoint_every: 0,
            init_from: None,
            pretext_weight: 0.0,
            kernel: KernelSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and non-negative".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if self.shots == 0 || self.query_size == 0 || self.meta_batch == 0 {
            return Err(Error::Config(
                "shots, query_size and meta_batch must be >= 1".into(),
            ));
        }
        if self.gamma > 0.0 && (self.source_batch < 2 || self.query_size < 2) {
            return Err(Error::Config(
                "jmmd needs source_batch >= 2 and query_size >= 2".into(),
            ));
        }
        if self.source_batch == 0 {
            return Err(Error::Config("source_batch must be >= 1".into()));
        }
        if self.pretext_weight < 0.0 {
            return Err(Error::Config("pretext_weight must be non-negative".into()));
        }
        self.kernel.validate()?;
        self.model.validate()
    }
}

/// Person-adapted parameters plus the inner-loss trace.
pub struct AdaptedParams {
    pub person_id: String,
    /// Adapted values over the adaptable scope (graph tensors).
    pub params: ParamSet,
    /// Pretext loss at each inner step, before that step's update.
    pub inner_losses: Vec<f64>,
    pub n_support: usize,
    /// The unadapted leaves `params` derive from; meta gradients are read
    /// off these.
    pub origin: ParamSet,
}

/// Knobs for one inner adaptation.
#[derive(Debug, Clone)]
pub struct InnerAdaptConfig {
    pub alpha: f64,
    pub steps: usize,
    pub include_original: bool,
    /// Keep the graph through the inner gradients (second-order mode).
    pub track_graph: bool,
    pub seed: u64,
}

impl InnerAdaptConfig {
    pub fn from_train(cfg: &TrainConfig, seed: u64) -> InnerAdaptConfig {
        InnerAdaptConfig {
            alpha: cfg.alpha,
            steps: cfg.inner_steps,
            include_original: cfg.pretext_include_original,
            track_graph: cfg.second_order,
            seed,
        }
    }
}

/// G gradient-descent steps on the pretext loss over the support set.
///
/// Only adaptable parameters move. Parameters the pretext loss does not
/// reach (the gaze head) are returned untouched.
pub fn inner_adapt(
    state: &ModelState,
    person_id: &str,
    support: &[GazeSample],
    pset: &PermutationSet,
    cfg: &InnerAdaptConfig,
) -> Result<AdaptedParams> {
    if support.is_empty() {
        return Err(Error::EmptyInput(format!(
            "support set for person {person_id} is empty"
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("inner adaptation needs steps >= 1".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config("alpha must be positive".into()));
    }

    let origin = state.adaptable_leaves();
    let mut current: ParamSet = origin.clone();
    let mut inner_losses = Vec::with_capacity(cfg.steps);

    let images: Vec<_> = support.iter().map(|s| s.image.clone()).collect();
    for g in 0..cfg.steps {
        // Fresh permutation draws per step over the same support images.
        let batch = make_pretext_batch(&images, pset, seed::mix(cfg.seed, &[stream::PRETEXT, g as u64]))?;
        let mut batch_images: Vec<&crate::data::ImageData> =
            batch.iter().map(|ex| &ex.shuffled_image).collect();
        let mut classes: Vec<usize> = batch.iter().map(|ex| ex.class_index).collect();
        if cfg.include_original {
            for img in &images {
                batch_images.push(img);
                classes.push(0);
            }
        }
        let input = image_batch(&batch_images)?;
        let out = state.forward_with(&current, &input)?;
        let loss = losses::self_supervised_loss(&out.perm_logits, &classes)?;
        let loss_value = loss.value();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("inner step {g} for person {person_id}"),
            });
        }
        inner_losses.push(loss_value);

        let grads = backward(&loss, cfg.track_graph);
        current = current
            .iter()
            .map(|(name, t)| {
                let updated = match grads.get(t) {
                    Some(g) => t.sub(&g.scale(cfg.alpha)),
                    None => t.clone(),
                };
                (name.clone(), updated)
            })
            .collect();
    }

    Ok(AdaptedParams {
        person_id: person_id.to_string(),
        params: current,
        inner_losses,
        n_support: support.len(),
        origin,
    })
}

/// Aggregate of one outer step.
#[derive(Debug, Clone, Serialize)]
pub struct OuterReport {
    pub step: usize,
    pub per_task: Vec<TaskReport>,
    pub mean_gaze: f64,
    pub mean_self: f64,
    pub mean_jmmd: f64,
    pub mean_meta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Seed for the source mini-batch of task `task_index` at `step`.
/// Public so reference loops can consume identical batches.
pub fn source_batch_seed(seed: u64, step: usize, task_index: usize) -> u64 {
    seed::mix(seed, &[stream::SOURCE_BATCH, step as u64, task_index as u64])
}

/// Seed for the inner adaptation of task `task_index` at `step`.
pub fn inner_loop_seed(seed: u64, step: usize, task_index: usize) -> u64 {
    seed::mix(seed, &[stream::INNER_LOOP, step as u64, task_index as u64])
}

type TaskGrads = BTreeMap<String, Vec<f64>>;

fn run_task(
    state: &ModelState,
    task: &Task,
    source: &SourceDataset,
    cfg: &TrainConfig,
    step: usize,
    task_index: usize,
) -> Result<(TaskGrads, TaskReport)> {
    let src_batch = sample_source_batch(
        source,
        cfg.source_batch,
        source_batch_seed(cfg.seed, step, task_index),
    );
    let inner_cfg = InnerAdaptConfig::from_train(cfg, inner_loop_seed(cfg.seed, step, task_index));
    let adapted = inner_adapt(state, &task.person_id, &task.support, &state.perm_set, &inner_cfg)?;
    let meta = losses::meta_loss(
        state,
        &adapted.params,
        &src_batch,
        &task.query,
        &cfg.kernel,
        cfg.gamma,
    )
    .map_err(|e| match e {
        Error::NonFiniteLoss { context } => Error::NonFiniteLoss {
            context: format!("{context} for task {}", task.person_id),
        },
        other => other,
    })?;

    let grads = backward(&meta.loss, false);
    let mut task_grads = TaskGrads::new();
    for (name, leaf) in &adapted.origin {
        if let Some(g) = grads.get(leaf) {
            task_grads.insert(name.clone(), g.data().to_vec());
        }
    }
    let mut losses = meta.report;
    losses.self_loss =
        adapted.inner_losses.iter().sum::<f64>() / adapted.inner_losses.len() as f64;
    Ok((
        task_grads,
        TaskReport {
            task: task.person_id.clone(),
            losses,
        },
    ))
}

/// One meta update: adapt to each task, sum the task meta losses, and take
/// a single SGD step on the shared parameters.
pub fn outer_step(
    state: &mut ModelState,
    tasks: &[Task],
    source: &SourceDataset,
    cfg: &TrainConfig,
    step: usize,
) -> Result<OuterReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("outer step needs at least one task".into()));
    }

    let results: Vec<(TaskGrads, TaskReport)> = if cfg.jobs > 1 {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .enumerate()
            .map(|(ti, task)| run_task(state, task, source, cfg, step, ti))
            .collect::<Result<_>>()?
    } else {
        tasks
            .iter()
            .enumerate()
            .map(|(ti, task)| run_task(state, task, source, cfg, step, ti))
            .collect::<Result<_>>()?
    };

    // Sum task gradients in task order, so parallel runs stay bitwise
    // identical to serial ones.
    let mut acc = TaskGrads::new();
    let mut per_task = Vec::with_capacity(results.len());
    for (grads, report) in results {
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(total) => {
                    for (t, v) in total.iter_mut().zip(&g) {
                        *t += v;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
        per_task.push(report);
    }

    if cfg.beta != 0.0 {
        for (name, g) in &acc {
            let mut data = state.params()[name].data.clone();
            for (p, gv) in data.iter_mut().zip(g) {
                *p -= cfg.beta * gv;
            }
            state.set_param(name, data)?;
        }
    }

    let n = per_task.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| per_task.iter().map(|r| f(&r.losses)).sum::<f64>() / n;
    Ok(OuterReport {
        step,
        mean_gaze: mean(|r| r.gaze_loss),
        mean_self: mean(|r| r.self_loss),
        mean_jmmd: mean(|r| r.jmmd),
        mean_meta: mean(|r| r.meta_loss),
        per_task,
    })
}

struct RunLogs {
    log: fs::File,
    metrics: fs::File,
}

impl RunLogs {
    fn create(dir: &Path) -> Result<RunLogs> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let metrics_path = dir.join("metrics.csv");
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(metrics, "step,mean_gaze,mean_self,mean_jmmd,mean_meta")
            .map_err(|e| Error::io(&metrics_path, e))?;
        Ok(RunLogs { log, metrics })
    }

    fn record(&mut self, dir: &Path, report: &OuterReport) -> Result<()> {
        for tr in &report.per_task {
            #[derive(Serialize)]
            struct Row<'a> {
                step: usize,
                task: &'a str,
                gaze_loss: f64,
                self_loss: f64,
                jmmd: f64,
                meta_loss: f64,
            }
            let row = Row {
                step: report.step,
                task: &tr.task,
                gaze_loss: tr.losses.gaze_loss,
                self_loss: tr.losses.self_loss,
                jmmd: tr.losses.jmmd,
                meta_loss: tr.losses.meta_loss,
            };
            writeln!(self.log, "{}", serde_json::to_string(&row).expect("log row"))
                .map_err(|e| Error::io(dir, e))?;
        }
        writeln!(
            self.metrics,
            "{},{},{},{},{}",
            report.step, report.mean_gaze, report.mean_self, report.mean_jmmd, report.mean_meta
        )
        .map_err(|e| Error::io(dir, e))
    }
}

fn initial_state(cfg: &TrainConfig) -> Result<ModelState> {
    match &cfg.init_from {
        Some(path) => {
            let (state, _, _) = checkpoint::load(path)?;
            if state.config != cfg.model {
                return Err(Error::Config(format!(
                    "init checkpoint {} was built for a different model config",
                    path.display()
                )));
            }
            Ok(state)
        }
        None => network::init_model(&cfg.model, cfg.seed),
    }
}

/// Full training run: returns the final state and writes checkpoints,
/// a JSON-lines training log, and per-step `metrics.csv` into
/// `checkpoint_dir`. Fully reproducible from `(datasets, cfg)`.
pub fn train(
    source: &SourceDataset,
    taskset: &PersonTaskset,
    cfg: &TrainConfig,
    checkpoint_dir: impl AsRef<Path>,
) -> Result<ModelState> {
    let dir = checkpoint_dir.as_ref();
    cfg.validate()?;
    let mut state = initial_state(cfg)?;
    let mut logs = RunLogs::create(dir)?;

    for step in 0..cfg.total_outer_steps {
        let tasks = sample_task_batch(
            taskset,
            cfg.meta_batch,
            cfg.shots,
            cfg.query_size,
            seed::mix(cfg.seed, &[stream::TASK_SAMPLE, step as u64]),
        )?;
        let report = outer_step(&mut state, &tasks, source, cfg, step)?;
        logs.record(dir, &report)?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let path = dir.join(format!("checkpoint_{:06}.json", step + 1));
            checkpoint::save(&state, Some(cfg), cfg.seed, path)?;
        }
    }

    checkpoint::save(&state, Some(cfg), cfg.seed, dir.join("checkpoint_final.json"))?;
    Ok(state)
}

/// Plain supervised training on the source data, the comparison baseline.
///
/// Each step consumes the same derived source mini-batches as one meta
/// outer step (`meta_batch` batches, gradients summed) and applies one SGD
/// step at `beta`, so the only differences from meta training are the
/// missing inner adaptation and JMMD term.
pub fn train_baseline(
    source: &SourceDataset,
    cfg: &TrainConfig,
    checkpoint_dir: impl AsRef<Path>,
) -> Result<ModelState> {
    let dir = checkpoint_dir.as_ref();
    cfg.validate()?;
    let mut state = initial_state(cfg)?;
    let mut logs = RunLogs::create(dir)?;

    for step in 0..cfg.total_outer_steps {
        let mut acc = TaskGrads::new();
        let mut gaze_sum = 0.0;
        for ti in 0..cfg.meta_batch {
            let batch = sample_source_batch(
                source,
                cfg.source_batch,
                source_batch_seed(cfg.seed, step, ti),
            );
            let labels: Vec<_> = batch.iter().map(|s| s.label.unwrap()).collect();
            let leaves = state.adaptable_leaves();
            let images = network::sample_batch(&batch)?;
            let out = state.forward_with(&leaves, &images)?;
            let mut loss = losses::gaze_loss(&out.gaze, &labels)?;
            if cfg.pretext_weight > 0.0 {
                // Joint pretraining: the permutation head learns on
                // shuffled copies of the same source images.
                let raw: Vec<_> = batch.iter().map(|s| s.image.clone()).collect();
                let pret = crate::jigsaw::make_pretext_batch(
                    &raw,
                    &state.perm_set,
                    seed::mix(cfg.seed, &[stream::PRETEXT, step as u64, ti as u64]),
                )?;
                let mut imgs: Vec<&crate::data::ImageData> =
                    pret.iter().map(|e| &e.shuffled_image).collect();
                let mut classes: Vec<usize> = pret.iter().map(|e| e.class_index).collect();
                if cfg.pretext_include_original {
                    for img in &raw {
                        imgs.push(img);
                        classes.push(0);
                    }
                }
                let pin = image_batch(&imgs)?;
                let pout = state.forward_with(&leaves, &pin)?;
                let aux = losses::self_supervised_loss(&pout.perm_logits, &classes)?;
                loss = loss.add(&aux.scale(cfg.pretext_weight));
            }
            let v = loss.value();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("baseline step {step}"),
                });
            }
            gaze_sum += v;
            let grads = backward(&loss, false);
            for (name, leaf) in &leaves {
                if let Some(g) = grads.get(leaf) {
                    match acc.get_mut(name) {
                        Some(total) => {
                            for (t, gv) in total.iter_mut().zip(g.data()) {
                                *t += gv;
                            }
                        }
                        None => {
                            acc.insert(name.clone(), g.data().to_vec());
                        }
                    }
                }
            }
        }
        if cfg.beta != 0.0 {
            for (name, g) in &acc {
                let mut data = state.params()[name].data.clone();
                for (p, gv) in data.iter_mut().zip(g) {
                    *p -= cfg.beta * gv;
                }
                state.set_param(name, data)?;
            }
        }
        let mean_gaze = gaze_sum / cfg.meta_batch as f64;
        let report = OuterReport {
            step,
            per_task: vec![],
            mean_gaze,
            mean_self: 0.0,
            mean_jmmd: 0.0,
            mean_meta: mean_gaze,
        };
        logs.record(dir, &report)?;
    }

    checkpoint::save(&state, Some(cfg), cfg.seed, dir.join("checkpoint_final.json"))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GazeLabel, ImageData};
    use crate::network::{init_model, AdaptableScope, BackboneDepth};
    use crate::tensor::Tensor;
    use rand::Rng as _;

    fn tiny_cfg(m: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: 1e-2,
            beta: 1e-3,
            gamma: 0.1,
            inner_steps: 2,
            shots: 3,
            query_size: 3,
            meta_batch: 2,
            source_batch: 4,
            total_outer_steps: 2,
            seed,
            model: ModelConfig {
                backbone: BackboneDepth::Tiny,
                embed_hidden: 16,
                embed_out: 8,
                m,
                image_size: 16,
                grid: 4,
                adaptable_scope: AdaptableScope::FinalStageAndHeads,
            },
            ..TrainConfig::default()
        }
    }

    fn random_sample(labeled: bool, pid: Option<&str>, seed_v: u64) -> GazeSample {
        let mut rng = seed::rng_from(seed_v);
        let mut image = ImageData::zeros(16, 16, 3);
        for p in image.pixels.iter_mut() {
            *p = rng.gen_range(0.0..1.0);
        }
        GazeSample {
            image,
            label: labeled.then(|| {
                GazeLabel::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3)).unwrap()
            }),
            person_id: pid.map(String::from),
            rel_path: format!("r{seed_v}.png"),
        }
    }

    fn tiny_world(seed_v: u64) -> (SourceDataset, PersonTaskset) {
        let source = SourceDataset::new(
            "src",
            (0..12).map(|i| random_sample(true, None, seed_v * 1000 + i)).collect(),
        )
        .unwrap();
        let mut persons = Vec::new();
        for p in 0..4 {
            for i in 0..8 {
                persons.push(random_sample(
                    false,
                    Some(&format!("p{p}")),
                    seed_v * 2000 + p * 100 + i,
                ));
            }
        }
        (source, PersonTaskset::from_samples(persons).unwrap())
    }

    #[test]
    fn gradient_descent_step_rule_on_quadratic() {
        // L(w) = 0.5 w^2 at w = 1 with alpha 0.01 steps to exactly 0.99.
        let w = Tensor::leaf(vec![1.0], &[1]);
        let loss = w.mul(&w).scale(0.5).sum_all();
        let grads = backward(&loss, false);
        let updated = w.sub(&grads.get(&w).unwrap().scale(0.01));
        assert_eq!(updated.data(), &[0.99]);
    }

    #[test]
    fn inner_adapt_rejects_zero_steps_and_empty_support() {
        let cfg = tiny_cfg(5, 0);
        let state = init_model(&cfg.model, 0).unwrap();
        let support = vec![random_sample(false, Some("p"), 1)];
        let mut icfg = InnerAdaptConfig::from_train(&cfg, 0);
        icfg.steps = 0;
        assert!(inner_adapt(&state, "p", &support, &state.perm_set, &icfg).is_err());
        let icfg = InnerAdaptConfig::from_train(&cfg, 0);
        assert!(inner_adapt(&state, "p", &[], &state.perm_set, &icfg).is_err());
    }

    #[test]
    fn stationary_pretext_loss_leaves_params_unchanged() {
        // M = 1: the pretext loss is identically zero (single class), so
        // every inner gradient is exactly zero and psi' = psi.
        let cfg = tiny_cfg(1, 0);
        let state = init_model(&cfg.model, 0).unwrap();
        let support: Vec<_> = (0..3).map(|i| random_sample(false, Some("p"), 10 + i)).collect();
        let icfg = InnerAdaptConfig::from_train(&cfg, 7);
        let adapted = inner_adapt(&state, "p", &support, &state.perm_set, &icfg).unwrap();
        assert_eq!(adapted.inner_losses, vec![0.0, 0.0]);
        for (name, t) in &adapted.params {
            let orig = &state.params()[name].data;
            assert_eq!(t.data(), orig.as_slice(), "{name} moved at a stationary point");
        }
    }

    #[test]
    fn gaze_head_is_untouched_by_inner_adaptation() {
        let cfg = tiny_cfg(5, 1);
        let state = init_model(&cfg.model, 1).unwrap();
        let support: Vec<_> = (0..4).map(|i| random_sample(false, Some("p"), 20 + i)).collect();
        let icfg = InnerAdaptConfig::from_train(&cfg, 3);
        let adapted = inner_adapt(&state, "p", &support, &state.perm_set, &icfg).unwrap();
        for name in ["head.gaze.w", "head.gaze.b"] {
            let before = &state.params()[name].data;
            let after = adapted.params[name].data();
            assert_eq!(before.as_slice(), after, "{name} must not move in the inner loop");
        }
        // The trunk does move.
        let trunk_before = &state.params()["backbone.conv3.w"].data;
        let trunk_after = adapted.params["backbone.conv3.w"].data();
        assert_ne!(trunk_before.as_slice(), trunk_after);
    }

    #[test]
    fn adaptation_is_deterministic_and_does_not_mutate_state() {
        let cfg = tiny_cfg(5, 2);
        let state = init_model(&cfg.model, 2).unwrap();
        let checksum = state.checksum(state.params().keys());
        let support: Vec<_> = (0..3).map(|i| random_sample(false, Some("p"), 30 + i)).collect();
        let icfg = InnerAdaptConfig::from_train(&cfg, 9);
        let a = inner_adapt(&state, "p", &support, &state.perm_set, &icfg).unwrap();
        let b = inner_adapt(&state, "p", &support, &state.perm_set, &icfg).unwrap();
        for (name, t) in &a.params {
            assert_eq!(t.data(), b.params[name].data());
        }
        assert_eq!(a.inner_losses, b.inner_losses);
        assert_eq!(state.checksum(state.params().keys()), checksum);
    }

    #[test]
    fn beta_zero_leaves_parameters_unchanged_but_reports_losses() {
        let (source, persons) = tiny_world(3);
        let mut cfg = tiny_cfg(5, 3);
        cfg.beta = 0.0;
        let mut state = init_model(&cfg.model, 3).unwrap();
        let before = state.checksum(state.params().keys());
        let tasks = sample_task_batch(&persons, 2, cfg.shots, cfg.query_size, 5).unwrap();
        let report = outer_step(&mut state, &tasks, &source, &cfg, 0).unwrap();
        assert_eq!(state.checksum(state.params().keys()), before);
        assert_eq!(report.per_task.len(), 2);
        assert!(report.mean_meta.is_finite());
        assert!(report.mean_self > 0.0);
    }

    #[test]
    fn outer_step_moves_only_adaptable_params() {
        let (source, persons) = tiny_world(4);
        let cfg = tiny_cfg(5, 4);
        let mut state = init_model(&cfg.model, 4).unwrap();
        let frozen_before = state.frozen_checksum();
        let adaptable_before = state.checksum(state.adaptable_names().iter());
        let tasks = sample_task_batch(&persons, 2, cfg.shots, cfg.query_size, 6).unwrap();
        outer_step(&mut state, &tasks, &source, &cfg, 0).unwrap();
        assert_eq!(state.frozen_checksum(), frozen_before);
        assert_ne!(state.checksum(state.adaptable_names().iter()), adaptable_before);
    }

    #[test]
    fn second_order_mode_produces_finite_updates() {
        let (source, persons) = tiny_world(5);
        let mut cfg = tiny_cfg(5, 5);
        cfg.second_order = true;
        cfg.meta_batch = 1;
        let mut state = init_model(&cfg.model, 5).unwrap();
        let tasks = sample_task_batch(&persons, 1, cfg.shots, cfg.query_size, 7).unwrap();
        let report = outer_step(&mut state, &tasks, &source, &cfg, 0).unwrap();
        assert!(report.mean_meta.is_finite());
        for p in state.params().values() {
            assert!(p.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn train_is_bitwise_deterministic() {
        let (source, persons) = tiny_world(6);
        let cfg = tiny_cfg(5, 6);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = train(&source, &persons, &cfg, d1.path()).unwrap();
        let s2 = train(&source, &persons, &cfg, d2.path()).unwrap();
        assert_eq!(
            s1.checksum(s1.params().keys()),
            s2.checksum(s2.params().keys())
        );
        let c1 = std::fs::read(d1.path().join("checkpoint_final.json")).unwrap();
        let c2 = std::fs::read(d2.path().join("checkpoint_final.json")).unwrap();
        assert_eq!(c1, c2, "checkpoint bytes must match");
        let m1 = std::fs::read(d1.path().join("metrics.csv")).unwrap();
        let m2 = std::fs::read(d2.path().join("metrics.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn zero_steps_still_writes_a_checkpoint() {
        let (source, persons) = tiny_world(7);
        let mut cfg = tiny_cfg(5, 7);
        cfg.total_outer_steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let state = train(&source, &persons, &cfg, dir.path()).unwrap();
        assert!(dir.path().join("checkpoint_final.json").exists());
        let init = init_model(&cfg.model, cfg.seed).unwrap();
        assert_eq!(
            state.checksum(state.params().keys()),
            init.checksum(init.params().keys())
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_task_context() {
        let (source, persons) = tiny_world(8);
        let mut cfg = tiny_cfg(5, 8);
        cfg.alpha = 1e18; // guarantees an inner explosion by step 2
        cfg.inner_steps = 3;
        let mut state = init_model(&cfg.model, 8).unwrap();
        let tasks = sample_task_batch(&persons, 2, cfg.shots, cfg.query_size, 9).unwrap();
        let err = outer_step(&mut state, &tasks, &source, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err}");
    }

    #[test]
    fn parallel_outer_step_matches_serial_bitwise() {
        let (source, persons) = tiny_world(9);
        let cfg_serial = tiny_cfg(5, 9);
        let mut cfg_par = tiny_cfg(5, 9);
        cfg_par.jobs = 3;
        let mut s1 = init_model(&cfg_serial.model, 9).unwrap();
        let mut s2 = init_model(&cfg_par.model, 9).unwrap();
        let tasks = sample_task_batch(&persons, 3, cfg_serial.shots, cfg_serial.query_size, 11).unwrap();
        outer_step(&mut s1, &tasks, &source, &cfg_serial, 0).unwrap();
        outer_step(&mut s2, &tasks, &source, &cfg_par, 0).unwrap();
        assert_eq!(
            s1.checksum(s1.params().keys()),
            s2.checksum(s2.params().keys())
        );
    }

    #[test]
    fn baseline_trains_supervised_only() {
        let (source, _persons) = tiny_world(10);
        let mut cfg = tiny_cfg(5, 10);
        cfg.total_outer_steps = 3;
        let dir = tempfile::tempdir().unwrap();
        let state = train_baseline(&source, &cfg, dir.path()).unwrap();
        assert!(dir.path().join("checkpoint_final.json").exists());
        let init = init_model(&cfg.model, cfg.seed).unwrap();
        assert_ne!(
            state.checksum(state.adaptable_names().iter()),
            init.checksum(init.adaptable_names().iter())
        );
        assert_eq!(state.frozen_checksum(), init.frozen_checksum());
    }
}
