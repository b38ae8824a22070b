//! Seeded synthetic corpus: images with analytic palettes, saliency maps,
//! detection records, rater scores and a logistic dataset from known
//! coefficients.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::datamodel::{Annotation, AnnotationTable, BinaryLabel, ImageRecord, Manifest};
use crate::highlevel::{BoundingBox, DetectorSource, HighLevelIndicators, NounMatch};
use crate::lowlevel::RgbImage;
use crate::midlevel::encode_raw;

pub const IMAGE_SIDE: usize = 32;
pub const SALIENCY_SIDE: usize = 32;
pub const LOGISTIC_BETA: [f64; 3] = [-1.0, 1.098_612_288_668_109_6, 0.0];
pub const LOGISTIC_N: usize = 2000;

const MESSAGES: [&str; 6] = [
    "Remove_unnecessary_electronic_devices",
    "Use_recyclable_building_materials",
    "Turn_off_lights_when_leaving",
    "Carpool_to_work",
    "Plant_trees_in_your_community",
    "Take_shorter_showers",
];

const KEY_NOUNS: [&str; 6] = ["devices", "building", "lights", "work", "trees", "showers"];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image encode failed for {path}: {message}")]
    Encode { path: String, message: String },
    #[error("fixture spec needs at least one image and one case of each kind")]
    EmptySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PaletteCase {
    UniformGray,
    RedGreenSplit,
    /// Four quadrants in four distinct chroma bins.
    KBinUniform,
    WhiteBlackHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaliencyCase {
    Uniform,
    PointCenter,
    PointCorner,
    PointThirds,
    /// 2x2 map with masses {0.5, 0.3, 0.15, 0.05}.
    FourValue,
}

pub const K_BIN_COLORS: [[u8; 3]; 4] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_images: usize,
    pub palettes: Vec<PaletteCase>,
    pub saliency: Vec<SaliencyCase>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 7,
            n_images: 12,
            palettes: vec![
                PaletteCase::UniformGray,
                PaletteCase::RedGreenSplit,
                PaletteCase::KBinUniform,
                PaletteCase::WhiteBlackHalf,
            ],
            saliency: vec![
                SaliencyCase::Uniform,
                SaliencyCase::PointCenter,
                SaliencyCase::PointCorner,
                SaliencyCase::PointThirds,
                SaliencyCase::FourValue,
            ],
        }
    }
}

/// Rater pattern chosen by `index % 5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaterPattern {
    UnanimousHigh,
    UnanimousLow,
    UnanimousMid,
    Mixed,
}

pub fn rater_pattern(index: usize) -> RaterPattern {
    match index % 5 {
        0 => RaterPattern::UnanimousHigh,
        1 | 2 => RaterPattern::UnanimousLow,
        3 => RaterPattern::UnanimousMid,
        _ => RaterPattern::Mixed,
    }
}

/// Designed consensus label, `None` for items the robust subset drops.
pub fn expected_label(index: usize) -> Option<BinaryLabel> {
    match rater_pattern(index) {
        RaterPattern::UnanimousHigh => Some(BinaryLabel::High),
        RaterPattern::UnanimousLow => Some(BinaryLabel::Low),
        _ => None,
    }
}

/// (x_obj, x_hum) for item `index`. Labelled items cover every cell without
/// separating the human-label fit.
pub fn designed_indicators(index: usize) -> (u8, u8) {
    match index {
        0 | 1 => (1, 0),
        5 | 2 => (0, 1),
        10 | 6 => (1, 1),
        7 | 11 => (0, 0),
        i => ((i % 2) as u8, ((i / 2) % 2) as u8),
    }
}

pub fn palette_image(case: PaletteCase, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = IMAGE_SIDE;
    let pixels: Vec<[u8; 3]> = match case {
        PaletteCase::UniformGray => {
            let g = rng.random_range(40u8..=215);
            vec![[g, g, g]; s * s]
        }
        PaletteCase::RedGreenSplit => {
            (0..s * s).map(|k| if k % s < s / 2 { [255, 0, 0] } else { [0, 255, 0] }).collect()
        }
        PaletteCase::KBinUniform => (0..s * s)
            .map(|k| {
                let (i, j) = (k / s, k % s);
                K_BIN_COLORS[2 * usize::from(i >= s / 2) + usize::from(j >= s / 2)]
            })
            .collect(),
        PaletteCase::WhiteBlackHalf => (0..s * s).map(|k| if k / s < s / 2 { [255; 3] } else { [0; 3] }).collect(),
    };
    RgbImage::new(s, s, pixels).expect("fixture dimensions are consistent")
}

/// Saliency map `(height, width, values)` for a case.
pub fn saliency_values(case: SaliencyCase, rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f32>) {
    let s = SALIENCY_SIDE;
    let point = |i: usize, j: usize| {
        let mut v = vec![0.0f32; s * s];
        v[i * s + j] = 1.0;
        v
    };
    match case {
        SaliencyCase::Uniform => (s, s, vec![rng.random_range(0.1f32..1.0); s * s]),
        SaliencyCase::PointCenter => (s, s, point(s / 2, s / 2)),
        SaliencyCase::PointCorner => (s, s, point(0, 0)),
        SaliencyCase::PointThirds => {
            let t = (s as f64 / 3.0).round() as usize;
            (s, s, point(t, t))
        }
        SaliencyCase::FourValue => {
            let mut v = vec![0.5f32, 0.3, 0.15, 0.05];
            v.shuffle(rng);
            (2, 2, v)
        }
    }
}

fn rater_scores(index: usize, rng: &mut ChaCha8Rng) -> [u8; 4] {
    match rater_pattern(index) {
        RaterPattern::UnanimousHigh if index == 0 => [9, 9, 8, 10],
        RaterPattern::UnanimousHigh => std::array::from_fn(|_| rng.random_range(8..=10)),
        RaterPattern::UnanimousLow => std::array::from_fn(|_| rng.random_range(0..=2)),
        RaterPattern::UnanimousMid if index == 3 => [5, 5, 5, 5],
        RaterPattern::UnanimousMid => std::array::from_fn(|_| rng.random_range(3..=7)),
        RaterPattern::Mixed => [0, 5, 9, 10],
    }
}

fn random_box(rng: &mut ChaCha8Rng, label: &str, source: DetectorSource) -> BoundingBox {
    let x_min = rng.random_range(-4.0..20.0f64);
    let y_min = rng.random_range(0.0..20.0f64);
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    BoundingBox {
        x_min: round4(x_min),
        y_min: round4(y_min),
        x_max: round4(x_min + rng.random_range(2.0..12.0)),
        y_max: round4(y_min + rng.random_range(2.0..12.0)),
        score: round4(rng.random_range(0.3..0.95)),
        label: label.to_string(),
        source,
    }
}

fn detection_record(index: usize, id: &str, image_path: &str, rng: &mut ChaCha8Rng) -> HighLevelIndicators {
    let message = MESSAGES[index % MESSAGES.len()];
    let (x_obj, x_hum) = designed_indicators(index);
    let noun = KEY_NOUNS[index % KEY_NOUNS.len()];
    let nouns: Vec<String> = crate::highlevel::message_tokens(message);
    let obj_count = if x_obj == 1 { rng.random_range(1..=3) } else { 0 };
    let hum_count = if x_hum == 1 { rng.random_range(1..=4) } else { 0 };
    let key_label = format!("a photo of {noun}");
    HighLevelIndicators {
        id: Some(json!(id)),
        image_path: Some(image_path.to_string()),
        message: Some(message.to_string()),
        x_obj,
        x_hum,
        nouns,
        matches: if obj_count > 0 { vec![NounMatch { noun: noun.to_string(), count: obj_count }] } else { vec![] },
        key_boxes: (0..obj_count).map(|_| random_box(rng, &key_label, DetectorSource::Owlvit)).collect(),
        human_count: hum_count,
        human_boxes: (0..hum_count).map(|_| random_box(rng, "person", DetectorSource::Yolo)).collect(),
        warnings: vec![],
    }
}

/// Labelled logistic dataset from [`LOGISTIC_BETA`]: rows `(x_obj, x_hum)` and
/// binary responses.
pub fn logistic_dataset(seed: u64, n: usize) -> (Vec<(u8, u8)>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1061);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b) = (u8::from(rng.random::<bool>()), u8::from(rng.random::<bool>()));
        let eta = LOGISTIC_BETA[0] + LOGISTIC_BETA[1] * f64::from(a) + LOGISTIC_BETA[2] * f64::from(b);
        xs.push((a, b));
        ys.push(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())));
    }
    (xs, ys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutput {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub annotations_path: PathBuf,
    pub labels_path: PathBuf,
    pub logistic_path: PathBuf,
    pub config_path: PathBuf,
    pub manifest: Manifest,
    pub annotations: AnnotationTable,
    pub palettes: Vec<PaletteCase>,
    pub saliency: Vec<SaliencyCase>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), FixtureError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FixtureError::Io { path: dir.display().to_string(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| FixtureError::Io { path: path.display().to_string(), source: e })
}

fn png_bytes(img: &image::DynamicImage, path: &Path) -> Result<Vec<u8>, FixtureError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| FixtureError::Encode { path: path.display().to_string(), message: e.to_string() })?;
    Ok(buf.into_inner())
}

/// Writes the corpus under `out_dir`. Paths inside the manifest and config
/// are relative to `out_dir`.
pub fn generate_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<FixtureOutput, FixtureError> {
    if spec.n_images == 0 || spec.palettes.is_empty() || spec.saliency.is_empty() {
        return Err(FixtureError::EmptySpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut palettes = Vec::new();
    let mut saliency = Vec::new();
    for i in 0..spec.n_images {
        let id = format!("img{i:02}");
        let palette = spec.palettes[i % spec.palettes.len()];
        let sal = spec.saliency[i % spec.saliency.len()];
        palettes.push(palette);
        saliency.push(sal);

        let image_rel = format!("images/{id}.png");
        let image_path = out_dir.join(&image_rel);
        let img = image::DynamicImage::ImageRgb8(palette_image(palette, &mut rng).to_image_buffer());
        write(&image_path, png_bytes(&img, &image_path)?)?;

        let (h, w, values) = saliency_values(sal, &mut rng);
        let sal_rel = if sal == SaliencyCase::Uniform {
            let rel = format!("saliency/{id}.png");
            let path = out_dir.join(&rel);
            let gray = image::GrayImage::from_raw(w as u32, h as u32, vec![128u8; h * w]).expect("buffer sized");
            write(&path, png_bytes(&image::DynamicImage::ImageLuma8(gray), &path)?)?;
            rel
        } else {
            let rel = format!("saliency/{id}.sal");
            write(&out_dir.join(&rel), encode_raw(h, w, &values))?;
            rel
        };

        let det_rel = format!("detections/{id}.json");
        let det = detection_record(i, &id, &image_rel, &mut rng);
        write(&out_dir.join(&det_rel), serde_json::to_string_pretty(&det.to_json()).expect("json") + "\n")?;

        for (r, score) in rater_scores(i, &mut rng).into_iter().enumerate() {
            rows.push(Annotation { image_id: id.clone(), rater_id: format!("r{}", r + 1), score });
        }

        let mut rec = ImageRecord::new(id.clone(), image_rel, MESSAGES[i % MESSAGES.len()]);
        rec.label = expected_label(i);
        rec.saliency_path = Some(sal_rel);
        rec.detection_path = Some(det_rel);
        records.push(rec);
    }

    let manifest = Manifest::from_records(records).expect("fixture ids are unique");
    let manifest_path = out_dir.join("manifest.jsonl");
    write(&manifest_path, manifest.to_jsonl())?;

    let annotations = AnnotationTable::from_rows(rows).expect("fixture scores are valid");
    let annotations_path = out_dir.join("annotations.csv");
    write(&annotations_path, annotations.to_csv())?;

    let mut labels = String::from("id,model,label\n");
    for r in manifest.iter() {
        if let Some(l) = r.label {
            labels.push_str(&format!("{},human,{}\n", r.id, l));
        }
    }
    let labels_path = out_dir.join("labels.csv");
    write(&labels_path, labels)?;

    let (xs, ys) = logistic_dataset(spec.seed, LOGISTIC_N);
    let mut logistic = String::from("id,keyobj,human,label\n");
    for (k, ((a, b), y)) in xs.iter().zip(&ys).enumerate() {
        let label = if *y == 1 { "high" } else { "low" };
        logistic.push_str(&format!("s{k:04},{a},{b},{label}\n"));
    }
    let logistic_path = out_dir.join("logistic.csv");
    write(&logistic_path, logistic)?;

    let config = json!({
        "manifest_path": "manifest.jsonl",
        "annotations_path": "annotations.csv",
        "cache_dir": "cache",
        "out_dir": "out",
        "model_name": "stub-model",
        "modes": ["baseline", "cog", "chain", "ctx", "rationale"],
        "rationale_variants": ["agnostic", "informed"],
        "seed": spec.seed,
    });
    let config_path = out_dir.join("config.json");
    write(&config_path, serde_json::to_string_pretty(&config).expect("json") + "\n")?;

    Ok(FixtureOutput {
        root: out_dir.to_path_buf(),
        manifest_path,
        annotations_path,
        labels_path,
        logistic_path,
        config_path,
        manifest,
        annotations,
        palettes,
        saliency,
    })
}
