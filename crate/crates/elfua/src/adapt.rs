//! Meta-testing: adapt to an unseen person from a few unlabeled images and
//! score angular gaze error against held-out labeled images.
//!
//! Three protocol modes mirror the comparison rows of the evaluation:
//! `Ours` (pretext-loss adaptation on the unlabeled support set), `NoAdapt`
//! (score the shared parameters directly) and `Oracle` (supervised
//! fine-tuning on the support labels, same step count and learning rate —
//! the upper bound).


use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{GazeLabel, GazeSample, PersonTaskset};
use crate::engine::{inner_adapt, AdaptedParams, InnerAdaptConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::gaze_loss;
use crate::network::{sample_batch, ModelState};
use crate::seed::{self, stream};
use crate::tensor::backward;

/// Angular error between two gaze directions, in degrees.
///
/// Both labels are mapped to unit vectors
/// `(cos(pitch)sin(yaw), sin(pitch), cos(pitch)cos(yaw))`; the result is
/// the arc cosine of their clamped dot product.
pub fn angular_error(pred: &GazeLabel, target: &GazeLabel) -> f64 {
    let v = gaze_vector(pred);
    let w = gaze_vector(target);
    let dot = (v[0] * w[0] + v[1] * w[1] + v[2] * w[2]).clamp(-1.0, 1.0);
    dot.acos().to_degrees()
}

fn gaze_vector(g: &GazeLabel) -> [f64; 3] {
    [
        g.pitch.cos() * g.yaw.sin(),
        g.pitch.sin(),
        g.pitch.cos() * g.yaw.cos(),
    ]
}

/// Per-person evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub person_id: String,
    pub n_support: usize,
    pub error_pre_deg: f64,
    pub error_post_deg: f64,
    pub per_image_errors: Vec<f64>,
}

/// Protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Ours,
    NoAdapt,
    Oracle,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "ours" => Ok(EvalMode::Ours),
            "no-adapt" => Ok(EvalMode::NoAdapt),
            "oracle" => Ok(EvalMode::Oracle),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?} (expected ours | no-adapt | oracle)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Ours => "ours",
            EvalMode::NoAdapt => "no-adapt",
            EvalMode::Oracle => "oracle",
        }
    }
}

/// Aggregate evaluation report for one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: EvalMode,
    pub n_support: usize,
    pub support_draws: usize,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub mean_pre_deg: f64,
    pub mean_post_deg: f64,
}

/// Label-free adaptation to one person, using the same inner mechanics,
/// learning rate and step count as meta-training. The input state is
/// never modified.
pub fn adapt(
    state: &ModelState,
    person_id: &str,
    support: &[GazeSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AdaptedParams> {
    if support.is_empty() {
        return Err(Error::EmptyInput("adaptation needs >= 1 support image".into()));
    }
    if support.len() > cfg.shots {
        return Err(Error::Config(format!(
            "support of {} exceeds the configured maximum K = {}",
            support.len(),
            cfg.shots
        )));
    }
    let icfg = InnerAdaptConfig {
        alpha: cfg.alpha,
        steps: cfg.inner_steps,
        include_original: cfg.pretext_include_original,
        track_graph: false,
        seed,
    };
    inner_adapt(state, person_id, support, &state.perm_set, &icfg)
}

/// Supervised fine-tuning on labeled support images: the oracle upper
/// bound. Same alpha and G as label-free adaptation.
pub fn adapt_oracle(
    state: &ModelState,
    person_id: &str,
    support: &[GazeSample],
    cfg: &TrainConfig,
) -> Result<AdaptedParams> {
    if support.is_empty() {
        return Err(Error::EmptyInput("adaptation needs >= 1 support image".into()));
    }
    let labels: Vec<GazeLabel> = support
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::MissingLabels(format!(
                    "oracle adaptation for person {person_id} needs labeled support (yaw/pitch)"
                ))
            })
        })
        .collect::<Result<_>>()?;

    let images = sample_batch(support)?;
    let origin = state.adaptable_leaves();
    let mut current = origin.clone();
    let mut inner_losses = Vec::with_capacity(cfg.inner_steps);
    for g in 0..cfg.inner_steps {
        let out = state.forward_with(&current, &images)?;
        let loss = gaze_loss(&out.gaze, &labels)?;
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("oracle step {g} for person {person_id}"),
            });
        }
        inner_losses.push(v);
        let grads = backward(&loss, false);
        current = current
            .iter()
            .map(|(name, t)| {
                let updated = match grads.get(t) {
                    Some(gr) => t.sub(&gr.scale(cfg.alpha)),
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

fn predict(state: &ModelState, params: Option<&AdaptedParams>, samples: &[GazeSample]) -> Result<Vec<GazeLabel>> {
    let images = sample_batch(samples)?;
    let out = match params {
        Some(a) => state.forward_with(&a.params, &images)?,
        None => state.forward(&images)?,
    };
    Ok(out
        .gaze
        .data()
        .chunks_exact(2)
        .map(|p| GazeLabel {
            yaw: p[0],
            pitch: p[1],
        })
        .collect())
}

fn mean_angular_error(preds: &[GazeLabel], targets: &[GazeLabel]) -> (f64, Vec<f64>) {
    let errors: Vec<f64> = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| angular_error(p, t))
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    (mean, errors)
}

/// Score one person on labeled eval samples, before and after adaptation.
pub fn evaluate_person(
    state: &ModelState,
    adapted: Option<&AdaptedParams>,
    eval_samples: &[GazeSample],
) -> Result<EvalRecord> {
    if eval_samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let targets: Vec<GazeLabel> = eval_samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::MissingLabels("evaluation requires ground truth".into()))
        })
        .collect::<Result<_>>()?;

    let pre = predict(state, None, eval_samples)?;
    let (error_pre, _) = mean_angular_error(&pre, &targets);
    let (error_post, per_image, person_id, n_support) = match adapted {
        Some(a) => {
            let post = predict(state, Some(a), eval_samples)?;
            let (e, per) = mean_angular_error(&post, &targets);
            (e, per, a.person_id.clone(), a.n_support)
        }
        None => {
            let (e, per) = mean_angular_error(&pre, &targets);
            (e, per, String::new(), 0)
        }
    };
    Ok(EvalRecord {
        person_id,
        n_support,
        error_pre_deg: error_pre,
        error_post_deg: error_post,
        per_image_errors: per_image,
    })
}

/// Run the full meta-testing protocol over every person of a labeled
/// taskset. Support images are drawn per person by seed; the rest of the
/// person's images form the evaluation set. With `support_draws > 1` the
/// per-person errors average over that many independent draws.
pub fn evaluate_protocol(
    state: &ModelState,
    taskset: &PersonTaskset,
    cfg: &TrainConfig,
    mode: EvalMode,
    support_draws: usize,
) -> Result<RunReport> {
    if support_draws == 0 {
        return Err(Error::Config("support_draws must be >= 1".into()));
    }
    let ids: Vec<String> = taskset.person_ids().to_vec();

    let eval_one = |person_id: &String| -> Result<EvalRecord> {
        let samples = taskset.samples_of(person_id)?;
        if samples.len() < cfg.shots + 1 {
            return Err(Error::InsufficientSamples {
                person_id: person_id.clone(),
                available: samples.len(),
                needed: cfg.shots + 1,
                support: cfg.shots,
                query: 1,
            });
        }
        let mut pre_sum = 0.0;
        let mut post_sum = 0.0;
        let mut per_image = Vec::new();
        for draw in 0..support_draws {
            let draw_seed = seed::mix(
                cfg.seed,
                &[stream::EVAL_SUPPORT, seed::hash_str(person_id), draw as u64],
            );
            let (support, eval_samples) = split_support(samples, cfg.shots, draw_seed);

            let adapted = match mode {
                EvalMode::NoAdapt => None,
                EvalMode::Ours => {
                    // Adaptation is label-free: strip labels before use.
                    let unlabeled: Vec<GazeSample> = support
                        .iter()
                        .map(|s| GazeSample {
                            label: None,
                            ..s.clone()
                        })
                        .collect();
                    Some(adapt(state, person_id, &unlabeled, cfg, draw_seed)?)
                }
                EvalMode::Oracle => Some(adapt_oracle(state, person_id, &support, cfg)?),
            };
            let mut record = evaluate_person(state, adapted.as_ref(), &eval_samples)?;
            record.person_id = person_id.clone();
            pre_sum += record.error_pre_deg;
            post_sum += record.error_post_deg;
            per_image.append(&mut record.per_image_errors);
        }
        Ok(EvalRecord {
            person_id: person_id.clone(),
            n_support: cfg.shots,
            error_pre_deg: pre_sum / support_draws as f64,
            error_post_deg: post_sum / support_draws as f64,
            per_image_errors: per_image,
        })
    };

    let records: Vec<EvalRecord> = if cfg.jobs > 1 {
        use rayon::prelude::*;
        ids.par_iter().map(eval_one).collect::<Result<_>>()?
    } else {
        ids.iter().map(eval_one).collect::<Result<_>>()?
    };

    let n = records.len() as f64;
    let mean_pre = records.iter().map(|r| r.error_pre_deg).sum::<f64>() / n;
    let mean_post = records.iter().map(|r| r.error_post_deg).sum::<f64>() / n;
    Ok(RunReport {
        mode,
        n_support: cfg.shots,
        support_draws,
        seed: cfg.seed,
        records,
        mean_pre_deg: mean_pre,
        mean_post_deg: mean_post,
    })
}

/// Seeded support/eval split: `k` support images, the rest evaluate.
fn split_support(samples: &[GazeSample], k: usize, seed_v: u64) -> (Vec<GazeSample>, Vec<GazeSample>) {
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut rng = seed::rng_from(seed_v);
    use rand::Rng as _;
    for i in 0..k.min(samples.len()) {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let support = indices[..k].iter().map(|&i| samples[i].clone()).collect();
    let eval = indices[k..].iter().map(|&i| samples[i].clone()).collect();
    (support, eval)
}

/// Plain-text table: one column per person plus the average, one row per
/// metric.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "mode: {}   support: {}   draws: {}",
        report.mode.name(),
        report.n_support,
        report.support_draws
    );
    let mut header = String::from("        ");
    for r in &report.records {
        let _ = write!(header, " {:>8}", truncate(&r.person_id, 8));
    }
    let _ = write!(header, " {:>8}", "Avg.");
    let _ = writeln!(out, "{header}");
    let rows: [(&str, fn(&EvalRecord) -> f64); 2] = [
        ("pre  ", |r| r.error_pre_deg),
        ("post ", |r| r.error_post_deg),
    ];
    for (label, f) in rows {
        let mut line = format!("{label}   ");
        for r in &report.records {
            let _ = write!(line, " {:>8.2}", f(r));
        }
        let avg = match label.trim() {
            "pre" => report.mean_pre_deg,
            _ => report.mean_post_deg,
        };
        let _ = write!(line, " {avg:>8.2}");
        let _ = writeln!(out, "{line}");
    }
    out
}

fn truncate(s: &str, n: usize) -> &str {
    if s.len() <= n {
        s
    } else {
        &s[s.len() - n..]
    }
}
