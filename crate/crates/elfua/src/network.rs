//! The differentiable model: convolutional backbone, embedding MLP, gaze
//! head, permutation head, and feature taps for the joint-MMD loss.
//!
//! Parameters are partitioned into a frozen backbone prefix and an
//! adaptable suffix (final backbone stage plus all heads); only the
//! adaptable suffix moves during both the inner adaptation and the meta
//! update. `forward_with` evaluates the network at an arbitrary override
//! of the adaptable parameters without touching the stored state, which is
//! what lets the meta gradient flow back through an inner update.
//!
//! Two backbones share every code path: `Tiny` (3 conv stages, 32x32
//! inputs, small enough for finite-difference checks) and `Full` (a
//! ResNet-18-like geometry for 224x224 inputs).

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{GazeSample, ImageData};
use crate::error::{Error, Result};
use crate::jigsaw::{self, PermutationSet};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

/// Feature tap names exposed to the JMMD loss.
pub const TAP_EMBEDDING: &str = "embedding";
pub const TAP_GAZE_OUTPUT: &str = "gaze_output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneDepth {
    Full,
    Tiny,
}

/// Which parameters the inner loop may move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptableScope {
    /// Final backbone stage, embedding MLP, gaze head, permutation head.
    FinalStageAndHeads,
    /// Parameters whose name starts with any of the given prefixes.
    Prefixes(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneDepth,
    pub embed_hidden: usize,
    pub embed_out: usize,
    /// Permutation vocabulary size.
    pub m: usize,
    pub image_size: usize,
    /// Jigsaw grid side length.
    pub grid: usize,
    pub adaptable_scope: AdaptableScope,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            backbone: BackboneDepth::Full,
            embed_hidden: 256,
            embed_out: 128,
            m: 31,
            image_size: 224,
            grid: 4,
            adaptable_scope: AdaptableScope::FinalStageAndHeads,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneDepth::Tiny,
            image_size: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_hidden == 0 || self.embed_out == 0 || self.m == 0 {
            return Err(Error::Config(
                "embed_hidden, embed_out and m must be positive".into(),
            ));
        }
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by grid {}",
                self.image_size, self.grid
            )));
        }
        let min = match self.backbone {
            BackboneDepth::Tiny => 8,
            BackboneDepth::Full => 32,
        };
        if self.image_size < min {
            return Err(Error::Config(format!(
                "image_size {} too small for backbone (min {min})",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors over the adaptable scope; the currency of the inner loop.
pub type ParamSet = BTreeMap<String, Tensor>;

/// The model: parameter store, partition, permutation vocabulary, config.
#[derive(Debug, Clone)]
pub struct ModelState {
    params: BTreeMap<String, Param>,
    adaptable: BTreeSet<String>,
    pub perm_set: PermutationSet,
    pub config: ModelConfig,
}

/// Network outputs for one batch.
pub struct ForwardOutput {
    /// Per-input (yaw, pitch), shape `[n, 2]`.
    pub gaze: Tensor,
    /// Per-input permutation logits, shape `[n, M]`.
    pub perm_logits: Tensor,
    /// Feature taps for the JMMD loss.
    pub features: BTreeMap<String, Tensor>,
}

struct ConvSpec {
    name: &'static str,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn tiny_convs() -> Vec<ConvSpec> {
    let mk = |name: &'static str, in_c, out_c| ConvSpec {
        name,
        in_c,
        out_c,
        k: 3,
        stride: 2,
        pad: 1,
    };
    vec![
        mk("backbone.conv1", 3, 8),
        mk("backbone.conv2", 8, 16),
        mk("backbone.conv3", 16, 32),
    ]
}

const TINY_TRUNK_OUT: usize = 32;
const FULL_TRUNK_OUT: usize = 512;
const FULL_STAGES: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 2)];

impl ModelState {
    /// Reassemble a state (checkpoint loading); re-validates the
    /// partition and permutation invariants.
    pub fn from_parts(
        params: BTreeMap<String, Param>,
        adaptable: BTreeSet<String>,
        perm_set: PermutationSet,
        config: ModelConfig,
    ) -> Result<ModelState> {
        config.validate()?;
        if params.is_empty() {
            return Err(Error::Config("no parameters".into()));
        }
        for name in &adaptable {
            if !params.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        if perm_set.m() != config.m || perm_set.grid != config.grid {
            return Err(Error::Config(
                "permutation set disagrees with model config".into(),
            ));
        }
        for (name, p) in &params {
            if p.data.len() != p.shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} length disagrees with its shape"
                )));
            }
        }
        Ok(ModelState {
            params,
            adaptable,
            perm_set,
            config,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn adaptable_names(&self) -> &BTreeSet<String> {
        &self.adaptable
    }

    pub fn frozen_names(&self) -> Vec<&String> {
        self.params
            .keys()
            .filter(|k| !self.adaptable.contains(*k))
            .collect()
    }

    pub fn adaptable_params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params
            .iter()
            .filter(|(k, _)| self.adaptable.contains(*k))
    }

    pub fn frozen_params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params
            .iter()
            .filter(|(k, _)| !self.adaptable.contains(*k))
    }

    /// Leaf tensors over the adaptable scope, ready for gradient tracking.
    pub fn adaptable_leaves(&self) -> ParamSet {
        self.adaptable_params()
            .map(|(name, p)| (name.clone(), Tensor::leaf(p.data.clone(), &p.shape)))
            .collect()
    }

    /// Overwrite one adaptable parameter (the optimizer's entry point).
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        if !self.adaptable.contains(name) {
            return Err(Error::UnknownParameter(name.to_string()));
        }
        let p = self.params.get_mut(name).expect("partition covers params");
        if p.data.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: expected {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    /// FNV-1a over the little-endian bytes of the named parameters, in
    /// name order. Used to assert that frozen parameters never move.
    pub fn checksum(&self, names: impl IntoIterator<Item = impl AsRef<str>>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in names {
            let p = &self.params[name.as_ref()];
            for v in &p.data {
                for b in v.to_le_bits_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(self.frozen_names())
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Evaluate the network at the stored parameters.
    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let leaves = self.adaptable_leaves();
        self.forward_with(&leaves, images)
    }

    /// Evaluate the network with the adaptable parameters overridden.
    ///
    /// The override must cover the adaptable scope exactly; frozen
    /// parameters are taken from the state as constants. Outputs stay
    /// graph-connected to whatever produced the overrides.
    pub fn forward_with(&self, overrides: &ParamSet, images: &Tensor) -> Result<ForwardOutput> {
        for name in overrides.keys() {
            if !self.adaptable.contains(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        for name in &self.adaptable {
            if !overrides.contains_key(name) {
                return Err(Error::MissingParameter(name.clone()));
            }
        }
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != self.config.image_size
            || shape[2] != self.config.image_size
            || shape[3] != 3
        {
            return Err(Error::ShapeMismatch(format!(
                "expected [n, {s}, {s}, 3] image batch, got {shape:?}",
                s = self.config.image_size
            )));
        }

        let resolve = |name: &str| -> Tensor {
            if let Some(t) = overrides.get(name) {
                t.clone()
            } else {
                let p = &self.params[name];
                Tensor::constant(p.data.clone(), &p.shape)
            }
        };

        let trunk = match self.config.backbone {
            BackboneDepth::Tiny => forward_tiny_trunk(&resolve, images),
            BackboneDepth::Full => forward_full_trunk(&resolve, images),
        };

        let h1 = linear(&trunk, &resolve("embed.fc1.w"), &resolve("embed.fc1.b")).relu();
        let emb = linear(&h1, &resolve("embed.fc2.w"), &resolve("embed.fc2.b"));
        let gaze = linear(&emb, &resolve("head.gaze.w"), &resolve("head.gaze.b"));
        let perm_logits = linear(&emb, &resolve("head.perm.w"), &resolve("head.perm.b"));

        let mut features = BTreeMap::new();
        features.insert(TAP_EMBEDDING.to_string(), emb);
        features.insert(TAP_GAZE_OUTPUT.to_string(), gaze.clone());

        Ok(ForwardOutput {
            gaze,
            perm_logits,
            features,
        })
    }
}

trait F64Bits {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl F64Bits for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

/// Deterministically initialize a model.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut params = BTreeMap::new();
    let adaptable_stage_prefix;

    let add = |params: &mut BTreeMap<String, Param>, name: String, shape: Vec<usize>, bound: f64| {
        let n: usize = shape.iter().product();
        let mut rng = seed::rng_from(seed::mix(seed, &[stream::MODEL_INIT, seed::hash_str(&name)]));
        let data = if bound == 0.0 {
            vec![0.0; n]
        } else {
            use rand::Rng as _;
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.insert(name, Param { shape, data });
    };

    match config.backbone {
        BackboneDepth::Tiny => {
            for spec in tiny_convs() {
                let fan_in = spec.k * spec.k * spec.in_c;
                let bound = (6.0 / fan_in as f64).sqrt();
                add(
                    &mut params,
                    format!("{}.w", spec.name),
                    vec![fan_in, spec.out_c],
                    bound,
                );
                add(&mut params, format!("{}.b", spec.name), vec![spec.out_c], 0.0);
            }
            adaptable_stage_prefix = "backbone.conv3".to_string();
        }
        BackboneDepth::Full => {
            let stem_fan = 7 * 7 * 3;
            add(
                &mut params,
                "backbone.stem.w".into(),
                vec![stem_fan, 64],
                (6.0 / stem_fan as f64).sqrt(),
            );
            add(&mut params, "backbone.stem.b".into(), vec![64], 0.0);
            let mut in_c = 64;
            for (si, (out_c, stride)) in FULL_STAGES.iter().enumerate() {
                let stage = si + 1;
                for block in 0..2 {
                    let prefix = format!("backbone.stage{stage}.block{block}");
                    let s = if block == 0 { *stride } else { 1 };
                    let from_c = if block == 0 { in_c } else { *out_c };
                    let fan_a = 3 * 3 * from_c;
                    add(
                        &mut params,
                        format!("{prefix}.conv_a.w"),
                        vec![fan_a, *out_c],
                        (6.0 / fan_a as f64).sqrt(),
                    );
                    add(&mut params, format!("{prefix}.conv_a.b"), vec![*out_c], 0.0);
                    let fan_b = 3 * 3 * *out_c;
                    add(
                        &mut params,
                        format!("{prefix}.conv_b.w"),
                        vec![fan_b, *out_c],
                        (6.0 / fan_b as f64).sqrt(),
                    );
                    add(&mut params, format!("{prefix}.conv_b.b"), vec![*out_c], 0.0);
                    if s != 1 || from_c != *out_c {
                        add(
                            &mut params,
                            format!("{prefix}.skip.w"),
                            vec![from_c, *out_c],
                            (6.0 / from_c as f64).sqrt(),
                        );
                        add(&mut params, format!("{prefix}.skip.b"), vec![*out_c], 0.0);
                    }
                }
                in_c = *out_c;
            }
            adaptable_stage_prefix = "backbone.stage4".to_string();
        }
    }

    let trunk_out = match config.backbone {
        BackboneDepth::Tiny => TINY_TRUNK_OUT,
        BackboneDepth::Full => FULL_TRUNK_OUT,
    };
    add(
        &mut params,
        "embed.fc1.w".into(),
        vec![trunk_out, config.embed_hidden],
        (6.0 / trunk_out as f64).sqrt(),
    );
    add(&mut params, "embed.fc1.b".into(), vec![config.embed_hidden], 0.0);
    add(
        &mut params,
        "embed.fc2.w".into(),
        vec![config.embed_hidden, config.embed_out],
        (6.0 / config.embed_hidden as f64).sqrt(),
    );
    add(&mut params, "embed.fc2.b".into(), vec![config.embed_out], 0.0);

    let head_bound = 0.1 * (3.0 / config.embed_out as f64).sqrt();
    add(
        &mut params,
        "head.gaze.w".into(),
        vec![config.embed_out, 2],
        head_bound,
    );
    add(&mut params, "head.gaze.b".into(), vec![2], 0.0);
    add(
        &mut params,
        "head.perm.w".into(),
        vec![config.embed_out, config.m],
        head_bound,
    );
    add(&mut params, "head.perm.b".into(), vec![config.m], 0.0);

    let adaptable: BTreeSet<String> = match &config.adaptable_scope {
        AdaptableScope::FinalStageAndHeads => params
            .keys()
            .filter(|k| {
                k.starts_with(&adaptable_stage_prefix)
                    || k.starts_with("embed.")
                    || k.starts_with("head.")
            })
            .cloned()
            .collect(),
        AdaptableScope::Prefixes(prefixes) => {
            let set: BTreeSet<String> = params
                .keys()
                .filter(|k| prefixes.iter().any(|p| k.starts_with(p.as_str())))
                .cloned()
                .collect();
            if set.is_empty() {
                return Err(Error::Config(
                    "adaptable scope selects no parameters".into(),
                ));
            }
            set
        }
    };

    let perm_set = jigsaw::build_permutation_set(
        config.m,
        config.grid,
        seed::mix(seed, &[stream::PERM_SET]),
    )?;

    Ok(ModelState {
        params,
        adaptable,
        perm_set,
        config: config.clone(),
    })
}

/// Stack decoded images into a `[n, h, w, 3]` constant tensor.
pub fn image_batch(images: &[&ImageData]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyInput("image batch is empty".into()));
    }
    let (h, w, c) = (images[0].h, images[0].w, images[0].c);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.h, img.w, img.c) != (h, w, c) {
            return Err(Error::ShapeMismatch(
                "images in a batch must share dimensions".into(),
            ));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::constant(data, &[images.len(), h, w, c]))
}

pub fn sample_batch(samples: &[GazeSample]) -> Result<Tensor> {
    let refs: Vec<&ImageData> = samples.iter().map(|s| &s.image).collect();
    image_batch(&refs)
}

fn forward_tiny_trunk(resolve: &dyn Fn(&str) -> Tensor, images: &Tensor) -> Tensor {
    let mut x = images.clone();
    for spec in tiny_convs() {
        let w = resolve(&format!("{}.w", spec.name));
        let b = resolve(&format!("{}.b", spec.name));
        x = conv2d(&x, &w, &b, spec.k, spec.stride, spec.pad).relu();
    }
    global_avg_pool(&x)
}

fn forward_full_trunk(resolve: &dyn Fn(&str) -> Tensor, images: &Tensor) -> Tensor {
    let w = resolve("backbone.stem.w");
    let b = resolve("backbone.stem.b");
    let mut x = conv2d(images, &w, &b, 7, 2, 3).relu();
    x = avg_pool2(&x);
    let mut in_c = 64;
    for (si, (out_c, stride)) in FULL_STAGES.iter().enumerate() {
        let stage = si + 1;
        for block in 0..2 {
            let prefix = format!("backbone.stage{stage}.block{block}");
            let s = if block == 0 { *stride } else { 1 };
            let from_c = if block == 0 { in_c } else { *out_c };
            let a = conv2d(
                &x,
                &resolve(&format!("{prefix}.conv_a.w")),
                &resolve(&format!("{prefix}.conv_a.b")),
                3,
                s,
                1,
            )
            .relu();
            let bten = conv2d(
                &a,
                &resolve(&format!("{prefix}.conv_b.w")),
                &resolve(&format!("{prefix}.conv_b.b")),
                3,
                1,
                1,
            );
            let skip = if s != 1 || from_c != *out_c {
                conv2d(
                    &x,
                    &resolve(&format!("{prefix}.skip.w")),
                    &resolve(&format!("{prefix}.skip.b")),
                    1,
                    s,
                    0,
                )
            } else {
                x.clone()
            };
            x = bten.add(&skip).relu();
        }
        in_c = *out_c;
    }
    global_avg_pool(&x)
}

/// NHWC convolution via im2col + matmul. Weights are `[k*k*c_in, c_out]`.
fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "conv2d expects [n,h,w,c]");
    let (n, h, ww, c) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (ww + 2 * pad - k) / stride + 1;
    let oc = w.shape()[1];
    debug_assert_eq!(w.shape()[0], k * k * c, "conv2d weight fan-in mismatch");

    let cols = k * k * c;
    let mut idx = Vec::with_capacity(n * oh * ow * cols);
    for ni in 0..n {
        let base_n = (ni * h) as i64;
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 || ix < 0 || ix >= ww as i64 {
                            for _ in 0..c {
                                idx.push(-1);
                            }
                        } else {
                            let off = ((base_n + iy) * ww as i64 + ix) * c as i64;
                            for ch in 0..c as i64 {
                                idx.push(off + ch);
                            }
                        }
                    }
                }
            }
        }
    }
    let patches = x.gather(Rc::new(idx), &[n * oh * ow, cols]);
    patches
        .matmul(w)
        .add_bias(b)
        .reshape(&[n, oh, ow, oc])
}

/// 2x2 average pooling with stride 2 (NHWC).
fn avg_pool2(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let total = n * oh * ow * c;
    let mut maps = [(); 4].map(|_| Vec::with_capacity(total));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| {
                        ((((ni * h) + oy * 2 + dy) * w + ox * 2 + dx) * c + ch) as i64
                    };
                    maps[0].push(at(0, 0));
                    maps[1].push(at(0, 1));
                    maps[2].push(at(1, 0));
                    maps[3].push(at(1, 1));
                }
            }
        }
    }
    let out_shape = [n, oh, ow, c];
    let mut acc: Option<Tensor> = None;
    for m in maps {
        let t = x.gather(Rc::new(m), &out_shape);
        acc = Some(match acc {
            Some(a) => a.add(&t),
            None => t,
        });
    }
    acc.unwrap().scale(0.25)
}

/// Mean over spatial positions: `[n,h,w,c]` to `[n,c]`.
fn global_avg_pool(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    x.reshape(&[n, h * w, c]).sum_mid().scale(1.0 / (h * w) as f64)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.matmul(w).add_bias(b)
}
