//! A controllable synthetic population for desk-scale experiments.
//!
//! Each synthetic person owes two kinds of individuality: a gaze bias
//! (their pupils encode `true_gaze + bias`, standing in for anatomical
//! axis offsets) and an appearance (iris radius, eye spacing, skin tone,
//! sensor noise). Labels written to disk are always the *true* gaze, so
//! a predictor that reads pupils at face value carries the person's bias
//! as error; only adaptation (or labels) can remove it.
//!
//! The source population has zero bias and a narrower appearance range
//! than the person-specific population, giving source-trained models a
//! genuine appearance shift to stumble over.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::data::{GazeLabel, ImageData, ManifestEntry};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Renderable appearance of one person.
#[derive(Debug, Clone)]
pub struct Appearance {
    /// Pupil disk radius in pixels.
    pub iris_radius: f64,
    /// Distance between eye centers in pixels.
    pub eye_spacing: f64,
    /// Background gray level in [0,1].
    pub skin_tone: f64,
    /// Additive Gaussian noise sigma.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SynthPersonSpec {
    pub person_id: String,
    /// (yaw, pitch) offset baked into the rendered pupils, radians.
    pub gaze_bias: (f64, f64),
    pub appearance: Appearance,
}

pub const MAX_BIAS_RAD: f64 = 0.35;

impl SynthPersonSpec {
    pub fn validate(&self, size: usize) -> Result<()> {
        let (by, bp) = self.gaze_bias;
        if by.abs() > MAX_BIAS_RAD || bp.abs() > MAX_BIAS_RAD {
            return Err(Error::Config(format!(
                "gaze bias ({by}, {bp}) exceeds {MAX_BIAS_RAD} rad"
            )));
        }
        let a = &self.appearance;
        let eye_r = eye_radius(size);
        if a.iris_radius <= 0.5 || a.iris_radius >= eye_r {
            return Err(Error::Config("iris radius outside renderable range".into()));
        }
        if a.eye_spacing < 2.0 * eye_r || a.eye_spacing > size as f64 - 2.0 * eye_r {
            return Err(Error::Config("eye spacing outside renderable range".into()));
        }
        if !(0.0..=1.0).contains(&a.skin_tone) || a.noise_sigma < 0.0 {
            return Err(Error::Config("skin tone / noise outside range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorldConfig {
    pub n_train_persons: usize,
    pub n_test_persons: usize,
    pub samples_per_person: usize,
    pub image_size: usize,
    /// Per-component bias magnitude for person-specific data, radians.
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> SynthWorldConfig {
        SynthWorldConfig {
            n_train_persons: 40,
            n_test_persons: 20,
            samples_per_person: 40,
            image_size: 32,
            bias_scale: 0.25,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_persons == 0
            || self.n_test_persons == 0
            || self.samples_per_person == 0
            || self.image_size < 16
        {
            return Err(Error::Config(
                "world needs positive person/sample counts and image_size >= 16".into(),
            ));
        }
        if self.bias_scale < 0.0 || self.bias_scale > MAX_BIAS_RAD {
            return Err(Error::Config(format!(
                "bias_scale must lie in [0, {MAX_BIAS_RAD}]"
            )));
        }
        Ok(())
    }
}

fn eye_radius(size: usize) -> f64 {
    0.18 * size as f64
}

const SCLERA: f64 = 0.92;
const PUPIL: f64 = 0.06;
const EDGE_PX: f64 = 1.0;

/// Pixel displacement of the pupil for an effective gaze direction.
///
/// `dx = P sin(yaw_eff)`, `dy = -P sin(pitch_eff)` where `P` is the travel
/// radius keeping the pupil inside the sclera. Exposed so tests can check
/// rendered pupils against the projection directly.
pub fn pupil_offset(spec: &SynthPersonSpec, true_gaze: &GazeLabel, size: usize) -> (f64, f64) {
    let yaw_eff = true_gaze.yaw + spec.gaze_bias.0;
    let pitch_eff = true_gaze.pitch + spec.gaze_bias.1;
    let travel = eye_radius(size) - spec.appearance.iris_radius - 0.6;
    (travel * yaw_eff.sin(), -travel * pitch_eff.sin())
}

fn smooth_disk(d: f64, r: f64) -> f64 {
    ((r - d) / EDGE_PX + 0.5).clamp(0.0, 1.0)
}

/// Render one face: two sclera disks with pupils displaced by the
/// projected effective gaze, plus per-person appearance and seeded noise.
pub fn render_face(
    spec: &SynthPersonSpec,
    true_gaze: &GazeLabel,
    size: usize,
    seed_v: u64,
) -> Result<ImageData> {
    spec.validate(size)?;
    let mut img = ImageData::zeros(size, size, 3);
    let eye_r = eye_radius(size);
    let cy = 0.45 * size as f64;
    let cx = 0.5 * size as f64;
    let half = spec.appearance.eye_spacing / 2.0;
    let eye_centers = [(cx - half, cy), (cx + half, cy)];
    let (dx, dy) = pupil_offset(spec, true_gaze, size);

    let mut rng = seed::rng_from(seed::mix(seed_v, &[stream::WORLD]));
    let sigma = spec.appearance.noise_sigma;

    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut cov_eye: f64 = 0.0;
            let mut cov_pupil: f64 = 0.0;
            for (ex, ey) in eye_centers {
                let de = ((px - ex).powi(2) + (py - ey).powi(2)).sqrt();
                cov_eye = cov_eye.max(smooth_disk(de, eye_r));
                let dp = ((px - (ex + dx)).powi(2) + (py - (ey + dy)).powi(2)).sqrt();
                cov_pupil = cov_pupil.max(smooth_disk(dp, spec.appearance.iris_radius));
            }
            let inner = SCLERA * (1.0 - cov_pupil) + PUPIL * cov_pupil;
            let base = spec.appearance.skin_tone * (1.0 - cov_eye) + inner * cov_eye;
            // Box-Muller, one noise value shared by the three channels.
            let noise = if sigma > 0.0 {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            } else {
                0.0
            };
            let v = (base + noise).clamp(0.0, 1.0);
            for ch in 0..3 {
                img.set(y, x, ch, v);
            }
        }
    }
    Ok(img)
}

/// Appearance ranges: the person-specific population is wider and shifted
/// relative to the source population.
fn sample_appearance(rng: &mut seed::Rng, size: usize, person_specific: bool) -> Appearance {
    let s = size as f64;
    if person_specific {
        Appearance {
            iris_radius: rng.gen_range(0.052 * s..0.112 * s),
            eye_spacing: rng.gen_range(0.37 * s..0.59 * s),
            skin_tone: rng.gen_range(0.15..0.97),
            noise_sigma: rng.gen_range(0.035..0.095),
        }
    } else {
        Appearance {
            iris_radius: rng.gen_range(0.075 * s..0.090 * s),
            eye_spacing: rng.gen_range(0.45 * s..0.51 * s),
            skin_tone: rng.gen_range(0.45..0.65),
            noise_sigma: rng.gen_range(0.005..0.02),
        }
    }
}

// Gaze ranges are narrow relative to the bias scale on purpose: a few
// unlabeled images then pin down a person's bias well enough for
// label-free correction to have real headroom.
fn sample_gaze(rng: &mut seed::Rng) -> GazeLabel {
    GazeLabel {
        yaw: rng.gen_range(-0.35..0.35),
        pitch: rng.gen_range(-0.25..0.25),
    }
}

fn sample_person(
    rng: &mut seed::Rng,
    person_id: String,
    size: usize,
    bias_scale: f64,
    person_specific: bool,
) -> SynthPersonSpec {
    let gaze_bias = if person_specific && bias_scale > 0.0 {
        (
            rng.gen_range(-bias_scale..bias_scale),
            rng.gen_range(-bias_scale..bias_scale),
        )
    } else {
        (0.0, 0.0)
    };
    SynthPersonSpec {
        person_id,
        gaze_bias,
        appearance: sample_appearance(rng, size, person_specific),
    }
}

/// Paths produced by [`generate_world`].
#[derive(Debug, Clone)]
pub struct WorldPaths {
    pub source_manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Write a full synthetic world under `out_dir`: a labeled source
/// manifest (zero-bias generic population, no person IDs), an unlabeled
/// person-specific training manifest, and a labeled person-specific test
/// manifest for evaluation and oracle mode. Fully seeded; identical
/// configs produce identical bytes.
pub fn generate_world(cfg: &SynthWorldConfig, out_dir: impl AsRef<Path>) -> Result<WorldPaths> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let size = cfg.image_size;
    let mut entries_source = Vec::new();
    let mut entries_train = Vec::new();
    let mut entries_test = Vec::new();

    // Source: zero-bias persons drawn from the narrow appearance range,
    // one batch of samples each, emitted without IDs.
    let mut person_rng = seed::rng_from(seed::mix(cfg.seed, &[stream::WORLD, 1]));
    let mut counter: u64 = 0;
    for p in 0..cfg.n_train_persons {
        let spec = sample_person(&mut person_rng, format!("src{p:03}"), size, 0.0, false);
        for i in 0..cfg.samples_per_person {
            let mut gaze_rng =
                seed::rng_from(seed::mix(cfg.seed, &[stream::WORLD, 2, p as u64, i as u64]));
            let gaze = sample_gaze(&mut gaze_rng);
            let img = render_face(&spec, &gaze, size, seed::mix(cfg.seed, &[3, counter]))?;
            counter += 1;
            let rel = format!("images/src_{p:03}_{i:03}.png");
            write_png(&out_dir.join(&rel), &img)?;
            entries_source.push(ManifestEntry {
                rel_path: rel,
                label: Some(gaze),
                person_id: None,
            });
        }
    }

    // Person-specific populations: biased, wide appearance.
    let emit_persons = |prefix: &str,
                            n_persons: usize,
                            labeled: bool,
                            entries: &mut Vec<ManifestEntry>,
                            person_rng: &mut seed::Rng,
                            counter: &mut u64|
     -> Result<()> {
        for p in 0..n_persons {
            let pid = format!("{prefix}{p:03}");
            let spec = sample_person(person_rng, pid.clone(), size, cfg.bias_scale, true);
            for i in 0..cfg.samples_per_person {
                let mut gaze_rng = seed::rng_from(seed::mix(
                    cfg.seed,
                    &[stream::WORLD, 4, seed::hash_str(prefix), p as u64, i as u64],
                ));
                let gaze = sample_gaze(&mut gaze_rng);
                let img = render_face(&spec, &gaze, size, seed::mix(cfg.seed, &[5, *counter]))?;
                *counter += 1;
                let rel = format!("images/{prefix}_{p:03}_{i:03}.png");
                write_png(&out_dir.join(&rel), &img)?;
                entries.push(ManifestEntry {
                    rel_path: rel,
                    // Ground truth is the true gaze, never the biased one.
                    label: labeled.then_some(gaze),
                    person_id: Some(pid.clone()),
                });
            }
        }
        Ok(())
    };

    let mut train_rng = seed::rng_from(seed::mix(cfg.seed, &[stream::WORLD, 6]));
    emit_persons(
        "train",
        cfg.n_train_persons,
        false,
        &mut entries_train,
        &mut train_rng,
        &mut counter,
    )?;
    let mut test_rng = seed::rng_from(seed::mix(cfg.seed, &[stream::WORLD, 7]));
    emit_persons(
        "test",
        cfg.n_test_persons,
        true,
        &mut entries_test,
        &mut test_rng,
        &mut counter,
    )?;

    let paths = WorldPaths {
        source_manifest: out_dir.join("source.jsonl"),
        train_manifest: out_dir.join("persons_train.jsonl"),
        test_manifest: out_dir.join("persons_test.jsonl"),
    };
    fs::write(
        &paths.source_manifest,
        crate::data::manifest_text(entries_source),
    )
    .map_err(|e| Error::io(&paths.source_manifest, e))?;
    fs::write(
        &paths.train_manifest,
        crate::data::manifest_text(entries_train),
    )
    .map_err(|e| Error::io(&paths.train_manifest, e))?;
    fs::write(
        &paths.test_manifest,
        crate::data::manifest_text(entries_test),
    )
    .map_err(|e| Error::io(&paths.test_manifest, e))?;
    Ok(paths)
}

fn write_png(path: &Path, img: &ImageData) -> Result<()> {
    let mut out = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.at(y, x, 0) * 255.0).round() as u8,
                (img.at(y, x, 1) * 255.0).round() as u8,
                (img.at(y, x, 2) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
