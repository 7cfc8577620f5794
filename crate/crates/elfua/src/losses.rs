//! Scalar objectives: pretext cross-entropy, supervised L1 gaze loss,
//! joint MMD between feature distributions, and the composed meta loss
//! (gaze loss on source plus a weighted divergence term).
//!
//! JMMD uses the biased V-statistic of the squared distance between
//! empirical joint embeddings. The joint kernel of two samples is the
//! product over feature taps of a per-tap Gaussian kernel (averaged over
//! a small bandwidth family). The V-statistic is non-negative up to
//! floating-point noise and is clamped at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{GazeLabel, GazeSample};
use crate::error::{Error, Result};
use crate::network::{ModelState, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

/// Bandwidth source for the Gaussian kernel family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthSpec {
    /// Fixed bandwidths (sigma values).
    Explicit(Vec<f64>),
    /// Median-heuristic base bandwidth from the pooled batch, scaled by
    /// each multiplier. Computed per call and treated as a constant: no
    /// gradient flows through the bandwidth.
    MedianHeuristic { multipliers: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidths: BandwidthSpec,
}

impl Default for KernelSpec {
    fn default() -> KernelSpec {
        KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidths: BandwidthSpec::MedianHeuristic {
                multipliers: vec![0.5, 1.0, 2.0],
            },
        }
    }
}

impl KernelSpec {
    pub fn explicit(sigmas: &[f64]) -> KernelSpec {
        KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidths: BandwidthSpec::Explicit(sigmas.to_vec()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let list = match &self.bandwidths {
            BandwidthSpec::Explicit(v) => v,
            BandwidthSpec::MedianHeuristic { multipliers } => multipliers,
        };
        if list.is_empty() || list.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config(
                "kernel needs at least one positive bandwidth/multiplier".into(),
            ));
        }
        Ok(())
    }
}

/// Per-task loss summary, also the schema of training-log rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub gaze_loss: f64,
    pub self_loss: f64,
    pub jmmd: f64,
    pub meta_loss: f64,
    pub gamma: f64,
}

/// Mean softmax cross-entropy of permutation logits against class indices.
pub fn self_supervised_loss(perm_logits: &Tensor, class_indices: &[usize]) -> Result<Tensor> {
    let shape = perm_logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "perm_logits must be [n, M], got {shape:?}"
        )));
    }
    let (n, m) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::EmptyInput("pretext batch is empty".into()));
    }
    if class_indices.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{n} logit rows vs {} class indices",
            class_indices.len()
        )));
    }
    for &idx in class_indices {
        if idx >= m {
            return Err(Error::ClassIndexOutOfRange { index: idx, m });
        }
    }

    // Row-max shift, detached: it only stabilizes the exp.
    let data = perm_logits.data();
    let row_max: Vec<f64> = data
        .chunks_exact(m)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Tensor::constant(row_max, &[n]);

    let shifted = perm_logits.sub(&shift.bcast_axis1(m));
    let lse = shifted.exp().sum_axis1().ln().add(&shift);
    let picked_idx: Vec<i64> = class_indices
        .iter()
        .enumerate()
        .map(|(i, &c)| (i * m + c) as i64)
        .collect();
    let picked = perm_logits.gather(std::rc::Rc::new(picked_idx), &[n]);
    Ok(lse.sub(&picked).sum_all().scale(1.0 / n as f64))
}

/// Mean over the batch of |d yaw| + |d pitch|.
pub fn gaze_loss(pred: &Tensor, targets: &[GazeLabel]) -> Result<Tensor> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "gaze predictions must be [n, 2], got {shape:?}"
        )));
    }
    let n = shape[0];
    if targets.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{n} predictions vs {} targets",
            targets.len()
        )));
    }
    let mut tgt = Vec::with_capacity(2 * n);
    for t in targets {
        tgt.push(t.yaw);
        tgt.push(t.pitch);
    }
    let target = Tensor::constant(tgt, &[n, 2]);
    Ok(pred.sub(&target).abs().sum_all().scale(1.0 / n as f64))
}

/// JMMD result: the clamped loss tensor plus the pre-clamp value.
pub struct Jmmd {
    pub loss: Tensor,
    pub raw: f64,
}

/// Joint maximum mean discrepancy between two feature-tap collections.
///
/// Differentiable with respect to both sides.
pub fn jmmd(
    source: &BTreeMap<String, Tensor>,
    target: &BTreeMap<String, Tensor>,
    kernel: &KernelSpec,
) -> Result<Jmmd> {
    kernel.validate()?;
    if source.is_empty() {
        return Err(Error::TapMismatch("no feature taps given".into()));
    }
    let src_taps: Vec<&String> = source.keys().collect();
    let tgt_taps: Vec<&String> = target.keys().collect();
    if src_taps != tgt_taps {
        return Err(Error::TapMismatch(format!(
            "source {src_taps:?} vs target {tgt_taps:?}"
        )));
    }

    let m = source.values().next().unwrap().shape()[0];
    let t = target.values().next().unwrap().shape()[0];
    if m < 2 || t < 2 {
        return Err(Error::BatchTooSmall(m.min(t)));
    }

    let mut joint: Option<(Tensor, Tensor, Tensor)> = None;
    for tap in src_taps {
        let s = &source[tap];
        let q = &target[tap];
        if s.shape().len() != 2 || q.shape().len() != 2 || s.shape()[1] != q.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "tap {tap}: {:?} vs {:?}",
                s.shape(),
                q.shape()
            )));
        }
        if s.shape()[0] != m || q.shape()[0] != t {
            return Err(Error::LengthMismatch(format!(
                "tap {tap} batch sizes disagree with other taps"
            )));
        }
        let sigmas = resolve_bandwidths(s, q, kernel);
        let k_ss = gaussian_kernel(&pairwise_sq_dists(s, s), &sigmas);
        let k_qq = gaussian_kernel(&pairwise_sq_dists(q, q), &sigmas);
        let k_sq = gaussian_kernel(&pairwise_sq_dists(s, q), &sigmas);
        joint = Some(match joint {
            None => (k_ss, k_qq, k_sq),
            Some((a, b, c)) => (a.mul(&k_ss), b.mul(&k_qq), c.mul(&k_sq)),
        });
    }
    let (k_ss, k_qq, k_sq) = joint.unwrap();

    let raw = k_ss
        .mean_all()
        .add(&k_qq.mean_all())
        .sub(&k_sq.mean_all().scale(2.0));
    let raw_value = raw.value();
    Ok(Jmmd {
        loss: raw.relu(),
        raw: raw_value,
    })
}

/// Squared Euclidean distances between the rows of `a` `[m,d]` and `b`
/// `[t,d]`, as a differentiable `[m,t]` tensor.
fn pairwise_sq_dists(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.shape()[0];
    let t = b.shape()[0];
    let a_sq = a.mul(a).sum_axis1(); // [m]
    let b_sq = b.mul(b).sum_axis1(); // [t]
    let cross = a.matmul(&b.t()); // [m,t]
    a_sq.bcast_axis1(t)
        .add(&b_sq.bcast_axis0(m))
        .sub(&cross.scale(2.0))
}

fn gaussian_kernel(d2: &Tensor, sigmas: &[f64]) -> Tensor {
    let mut acc: Option<Tensor> = None;
    for &sigma in sigmas {
        let k = d2.scale(-1.0 / (2.0 * sigma * sigma)).exp();
        acc = Some(match acc {
            None => k,
            Some(a) => a.add(&k),
        });
    }
    acc.unwrap().scale(1.0 / sigmas.len() as f64)
}

fn resolve_bandwidths(s: &Tensor, q: &Tensor, kernel: &KernelSpec) -> Vec<f64> {
    match &kernel.bandwidths {
        BandwidthSpec::Explicit(v) => v.clone(),
        BandwidthSpec::MedianHeuristic { multipliers } => {
            let base = median_sigma(s, q);
            multipliers.iter().map(|&mult| mult * base).collect()
        }
    }
}

/// Median-heuristic base sigma over the pooled batch, treated as a
/// constant. sigma = sqrt(median squared distance / 2), falling back to 1
/// when the pooled points coincide.
fn median_sigma(s: &Tensor, q: &Tensor) -> f64 {
    let d = s.shape()[1];
    let mut points: Vec<&[f64]> = Vec::new();
    points.extend(s.data().chunks_exact(d));
    points.extend(q.data().chunks_exact(d));
    let n = points.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2);
        }
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        (med / 2.0).sqrt()
    } else {
        1.0
    }
}

/// The meta loss and its tensor, evaluated at an adapted parameter set.
pub struct MetaLossOutput {
    pub loss: Tensor,
    pub report: LossReport,
}

/// Eq-style composition: supervised gaze loss on a labeled source batch
/// plus `gamma` times the JMMD between source and query features, both
/// evaluated through the model at the given (adapted) parameters.
///
/// When `gamma` is zero the divergence is not evaluated and reports as 0.
pub fn meta_loss(
    state: &ModelState,
    adapted: &ParamSet,
    source_batch: &[GazeSample],
    query: &[GazeSample],
    kernel: &KernelSpec,
    gamma: f64,
) -> Result<MetaLossOutput> {
    if gamma < 0.0 {
        return Err(Error::Config("gamma must be non-negative".into()));
    }
    let labels: Vec<GazeLabel> = source_batch
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::MissingLabels("source batch must be labeled".into()))
        })
        .collect::<Result<_>>()?;
    if query.iter().any(|s| s.label.is_some()) {
        return Err(Error::Config(
            "meta-training queries must be unlabeled".into(),
        ));
    }

    let src_images = crate::network::sample_batch(source_batch)?;
    let src_out = state.forward_with(adapted, &src_images)?;
    let l_gaze = gaze_loss(&src_out.gaze, &labels)?;
    let gaze_value = l_gaze.value();
    if !gaze_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "gaze loss".into(),
        });
    }

    let (loss, jmmd_value) = if gamma > 0.0 {
        let qry_images = crate::network::sample_batch(query)?;
        let qry_out = state.forward_with(adapted, &qry_images)?;
        let div = jmmd(&src_out.features, &qry_out.features, kernel)?;
        let jv = div.loss.value();
        if !jv.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "jmmd".into(),
            });
        }
        (l_gaze.add(&div.loss.scale(gamma)), jv)
    } else {
        (l_gaze, 0.0)
    };

    let report = LossReport {
        gaze_loss: gaze_value,
        self_loss: 0.0,
        jmmd: jmmd_value,
        meta_loss: loss.value(),
        gamma,
    };
    Ok(MetaLossOutput { loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, AdaptableScope, BackboneDepth, ModelConfig};
    use crate::seed;
    use crate::tensor::backward;
    use rand::Rng as _;

    fn random_features(n: usize, d: usize, center: f64, seed_v: u64) -> Vec<f64> {
        let mut rng = seed::rng_from(seed_v);
        (0..n * d)
            .map(|_| center + rng.gen_range(-1.0..1.0))
            .collect()
    }

    fn tap_map(entries: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    // Independent cross-entropy: direct log-sum-exp per row.
    fn ce_oracle(logits: &[f64], m: usize, classes: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &c) in logits.chunks_exact(m).zip(classes) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        total / classes.len() as f64
    }

    #[test]
    fn uniform_logits_hit_ln_m() {
        let m = 31;
        let logits = Tensor::constant(vec![0.25; 4 * m], &[4, m]);
        let loss = self_supervised_loss(&logits, &[0, 5, 17, 30]).unwrap();
        assert!((loss.value() - (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let m = 7;
        let mut prev = f64::INFINITY;
        for margin in [2.0, 10.0, 25.0] {
            let mut data = vec![0.0; m];
            data[3] = margin;
            let logits = Tensor::constant(data, &[1, m]);
            let loss = self_supervised_loss(&logits, &[3]).unwrap().value();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn cross_entropy_matches_oracle_on_random_batches() {
        let m = 13;
        let n = 9;
        let mut rng = seed::rng_from(42);
        let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let logits = Tensor::constant(data.clone(), &[n, m]);
        let loss = self_supervised_loss(&logits, &classes).unwrap().value();
        assert!((loss - ce_oracle(&data, m, &classes)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_validates_input() {
        let logits = Tensor::constant(vec![0.0; 6], &[2, 3]);
        assert!(matches!(
            self_supervised_loss(&logits, &[0, 3]),
            Err(Error::ClassIndexOutOfRange { .. })
        ));
        assert!(matches!(
            self_supervised_loss(&logits, &[0]),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn gaze_loss_definition() {
        let t = |y, p| GazeLabel::new(y, p).unwrap();
        let pred = Tensor::constant(vec![0.3, -0.1], &[1, 2]);
        let zero = gaze_loss(&pred, &[t(0.3, -0.1)]).unwrap();
        assert_eq!(zero.value(), 0.0);

        let pred = Tensor::constant(vec![0.2, -0.1], &[1, 2]);
        let loss = gaze_loss(&pred, &[t(0.1, 0.1)]).unwrap();
        assert!((loss.value() - 0.3).abs() < 1e-12);

        // Random batch against an elementwise oracle.
        let mut rng = seed::rng_from(7);
        let n = 12;
        let preds: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<GazeLabel> = (0..n)
            .map(|_| t(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let expected: f64 = preds
            .chunks_exact(2)
            .zip(&targets)
            .map(|(p, tt)| (p[0] - tt.yaw).abs() + (p[1] - tt.pitch).abs())
            .sum::<f64>()
            / n as f64;
        let loss = gaze_loss(&Tensor::constant(preds, &[n, 2]), &targets).unwrap();
        assert!((loss.value() - expected).abs() < 1e-9);
    }

    #[test]
    fn jmmd_of_identical_batches_is_zero() {
        let s = Tensor::constant(random_features(16, 4, 0.0, 1), &[16, 4]);
        let taps = tap_map(&[("embedding", s)]);
        let out = jmmd(&taps, &taps, &KernelSpec::default()).unwrap();
        assert!(out.raw.abs() < 1e-9);
        assert_eq!(out.loss.value().max(0.0), out.loss.value());
    }

    #[test]
    fn jmmd_is_symmetric() {
        let s = Tensor::constant(random_features(10, 3, 0.0, 2), &[10, 3]);
        let q = Tensor::constant(random_features(14, 3, 1.5, 3), &[14, 3]);
        let a = tap_map(&[("embedding", s)]);
        let b = tap_map(&[("embedding", q)]);
        let k = KernelSpec::default();
        let ab = jmmd(&a, &b, &k).unwrap().raw;
        let ba = jmmd(&b, &a, &k).unwrap().raw;
        assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    }

    // Brute-force O(n^2) oracle: explicit double sums of the joint
    // product kernel.
    fn jmmd_oracle(
        taps_s: &[(usize, Vec<f64>)],
        taps_q: &[(usize, Vec<f64>)],
        m: usize,
        t: usize,
        sigmas: &[f64],
    ) -> f64 {
        let kernel = |i: usize, j: usize, a: &[(usize, Vec<f64>)], b: &[(usize, Vec<f64>)]| {
            let mut prod = 1.0;
            for ((d, fa), (_, fb)) in a.iter().zip(b) {
                let xa = &fa[i * d..(i + 1) * d];
                let xb = &fb[j * d..(j + 1) * d];
                let d2: f64 = xa.iter().zip(xb).map(|(x, y)| (x - y) * (x - y)).sum();
                let k: f64 = sigmas
                    .iter()
                    .map(|s| (-d2 / (2.0 * s * s)).exp())
                    .sum::<f64>()
                    / sigmas.len() as f64;
                prod *= k;
            }
            prod
        };
        let mut kss = 0.0;
        for i in 0..m {
            for j in 0..m {
                kss += kernel(i, j, taps_s, taps_s);
            }
        }
        let mut kqq = 0.0;
        for i in 0..t {
            for j in 0..t {
                kqq += kernel(i, j, taps_q, taps_q);
            }
        }
        let mut ksq = 0.0;
        for i in 0..m {
            for j in 0..t {
                ksq += kernel(i, j, taps_s, taps_q);
            }
        }
        kss / (m * m) as f64 + kqq / (t * t) as f64 - 2.0 * ksq / (m * t) as f64
    }

    #[test]
    fn jmmd_matches_brute_force_on_separated_gaussians() {
        // Two 1-d clouds at means 0 and 5, 64 samples each, bandwidth 1.
        let m = 64;
        let s_data = random_features(m, 1, 0.0, 10);
        let q_data = random_features(m, 1, 5.0, 11);
        let s = Tensor::constant(s_data.clone(), &[m, 1]);
        let q = Tensor::constant(q_data.clone(), &[m, 1]);
        let k = KernelSpec::explicit(&[1.0]);
        let ours = jmmd(&tap_map(&[("f", s)]), &tap_map(&[("f", q)]), &k).unwrap();
        let oracle = jmmd_oracle(&[(1, s_data)], &[(1, q_data)], m, m, &[1.0]);
        assert!(ours.raw > 0.1, "separated clouds must diverge");
        assert!((ours.raw - oracle).abs() < 1e-9, "{} vs {oracle}", ours.raw);
    }

    #[test]
    fn jmmd_multi_tap_matches_brute_force() {
        let (m, t) = (9, 13);
        let e_s = random_features(m, 4, 0.0, 20);
        let e_q = random_features(t, 4, 0.8, 21);
        let g_s = random_features(m, 2, 0.0, 22);
        let g_q = random_features(t, 2, -0.5, 23);
        let sigmas = [0.7, 1.3];
        let src = tap_map(&[
            ("embedding", Tensor::constant(e_s.clone(), &[m, 4])),
            ("gaze_output", Tensor::constant(g_s.clone(), &[m, 2])),
        ]);
        let tgt = tap_map(&[
            ("embedding", Tensor::constant(e_q.clone(), &[t, 4])),
            ("gaze_output", Tensor::constant(g_q.clone(), &[t, 2])),
        ]);
        let ours = jmmd(&src, &tgt, &KernelSpec::explicit(&sigmas)).unwrap();
        let oracle = jmmd_oracle(
            &[(4, e_s), (2, g_s)],
            &[(4, e_q), (2, g_q)],
            m,
            t,
            &sigmas,
        );
        assert!((ours.raw - oracle).abs() < 1e-9);
    }

    #[test]
    fn jmmd_validates_taps_and_batch_sizes() {
        let s = Tensor::constant(random_features(4, 2, 0.0, 1), &[4, 2]);
        let q = Tensor::constant(random_features(4, 2, 0.0, 2), &[4, 2]);
        let a = tap_map(&[("embedding", s.clone())]);
        let b = tap_map(&[("other", q.clone())]);
        assert!(matches!(
            jmmd(&a, &b, &KernelSpec::default()),
            Err(Error::TapMismatch(_))
        ));
        let tiny = Tensor::constant(vec![0.0, 0.0], &[1, 2]);
        let b = tap_map(&[("embedding", tiny)]);
        assert!(matches!(
            jmmd(&a, &b, &KernelSpec::default()),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn jmmd_is_invariant_under_simultaneous_reordering() {
        let m = 8;
        let d = 3;
        let s_data = random_features(m, d, 0.0, 30);
        let q_data = random_features(m, d, 1.0, 31);
        let k = KernelSpec::explicit(&[0.9]);
        let v1 = jmmd(
            &tap_map(&[("f", Tensor::constant(s_data.clone(), &[m, d]))]),
            &tap_map(&[("f", Tensor::constant(q_data.clone(), &[m, d]))]),
            &k,
        )
        .unwrap()
        .raw;
        // Reverse the sample order on both sides.
        let rev = |v: &[f64]| -> Vec<f64> {
            v.chunks_exact(d).rev().flatten().copied().collect()
        };
        let v2 = jmmd(
            &tap_map(&[("f", Tensor::constant(rev(&s_data), &[m, d]))]),
            &tap_map(&[("f", Tensor::constant(rev(&q_data), &[m, d]))]),
            &k,
        )
        .unwrap()
        .raw;
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn jmmd_gradients_match_finite_differences() {
        let (m, t, d) = (5, 6, 3);
        let s0 = random_features(m, d, 0.0, 40);
        let q0 = random_features(t, d, 1.2, 41);
        let k = KernelSpec::explicit(&[0.8, 1.6]);
        let eval = |s: &[f64], q: &[f64]| -> f64 {
            jmmd(
                &tap_map(&[("f", Tensor::constant(s.to_vec(), &[m, d]))]),
                &tap_map(&[("f", Tensor::constant(q.to_vec(), &[t, d]))]),
                &k,
            )
            .unwrap()
            .raw
        };
        let s = Tensor::leaf(s0.clone(), &[m, d]);
        let q = Tensor::leaf(q0.clone(), &[t, d]);
        let out = jmmd(
            &tap_map(&[("f", s.clone())]),
            &tap_map(&[("f", q.clone())]),
            &k,
        )
        .unwrap();
        let grads = backward(&out.loss, false);
        let h = 1e-6;
        for coord in [0, 4, 9, 14] {
            let mut sp = s0.clone();
            sp[coord] += h;
            let up = eval(&sp, &q0);
            sp[coord] -= 2.0 * h;
            let dn = eval(&sp, &q0);
            let fd = (up - dn) / (2.0 * h);
            let an = grads.get(&s).unwrap().data()[coord];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5);
        }
        for coord in [1, 7, 16] {
            let mut qp = q0.clone();
            qp[coord] += h;
            let up = eval(&s0, &qp);
            qp[coord] -= 2.0 * h;
            let dn = eval(&s0, &qp);
            let fd = (up - dn) / (2.0 * h);
            let an = grads.get(&q).unwrap().data()[coord];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5);
        }
    }

    fn tiny_state() -> ModelState {
        let cfg = ModelConfig {
            backbone: BackboneDepth::Tiny,
            embed_hidden: 16,
            embed_out: 8,
            m: 5,
            image_size: 16,
            grid: 4,
            adaptable_scope: AdaptableScope::FinalStageAndHeads,
        };
        init_model(&cfg, 0).unwrap()
    }

    fn synth_samples(n: usize, labeled: bool, seed_v: u64) -> Vec<GazeSample> {
        use crate::data::ImageData;
        let mut rng = seed::rng_from(seed_v);
        (0..n)
            .map(|i| {
                let mut image = ImageData::zeros(16, 16, 3);
                for p in image.pixels.iter_mut() {
                    *p = rng.gen_range(0.0..1.0);
                }
                GazeSample {
                    image,
                    label: labeled.then(|| {
                        GazeLabel::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3)).unwrap()
                    }),
                    person_id: None,
                    rel_path: format!("s{i}.png"),
                }
            })
            .collect()
    }

    #[test]
    fn meta_loss_composition_and_gamma_zero() {
        let state = tiny_state();
        let leaves = state.adaptable_leaves();
        let source = synth_samples(6, true, 1);
        let query = synth_samples(4, false, 2);
        let kernel = KernelSpec::default();

        let out = meta_loss(&state, &leaves, &source, &query, &kernel, 0.1).unwrap();
        let r = &out.report;
        assert!((r.meta_loss - (r.gaze_loss + r.gamma * r.jmmd)).abs() < 1e-9);
        assert!(r.jmmd >= 0.0);

        let zero = meta_loss(&state, &leaves, &source, &query, &kernel, 0.0).unwrap();
        assert_eq!(zero.report.meta_loss, zero.report.gaze_loss);

        // Monotone in gamma for fixed features, since jmmd >= 0.
        let lo = meta_loss(&state, &leaves, &source, &query, &kernel, 0.05)
            .unwrap()
            .report
            .meta_loss;
        let hi = meta_loss(&state, &leaves, &source, &query, &kernel, 0.5)
            .unwrap()
            .report
            .meta_loss;
        assert!(hi >= lo);
    }

    #[test]
    fn meta_loss_rejects_labeled_queries_and_unlabeled_source() {
        let state = tiny_state();
        let leaves = state.adaptable_leaves();
        let kernel = KernelSpec::default();
        let labeled = synth_samples(4, true, 3);
        let unlabeled = synth_samples(4, false, 4);
        assert!(meta_loss(&state, &leaves, &unlabeled, &unlabeled, &kernel, 0.1).is_err());
        assert!(meta_loss(&state, &leaves, &labeled, &labeled, &kernel, 0.1).is_err());
    }

    #[test]
    fn jmmd_nonnegativity_over_random_batches() {
        let mut rng = seed::rng_from(99);
        let k = KernelSpec::default();
        for trial in 0..200 {
            let m = rng.gen_range(2..10);
            let t = rng.gen_range(2..10);
            let d = rng.gen_range(1..5);
            let center = rng.gen_range(-2.0..2.0);
            let s = Tensor::constant(random_features(m, d, 0.0, 1000 + trial), &[m, d]);
            let q = Tensor::constant(random_features(t, d, center, 2000 + trial), &[t, d]);
            let out = jmmd(&tap_map(&[("f", s)]), &tap_map(&[("f", q)]), &k).unwrap();
            assert!(out.raw >= -1e-9, "trial {trial}: raw {}", out.raw);
            assert!(out.loss.value() >= 0.0);
        }
    }
}
