//! A synthetic dataset of grayscale circles, squares and crosses with
//! randomized position, scale and intensity, plus descriptive captions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Provenance, Record};
use crate::error::{Error, Result};
use crate::imageio::{save_image, ImageTensor};
use crate::rng::{self, Stream};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "cross"];

/// Samples per pixel side for antialiasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: String,
    /// Center in pixels.
    pub cx: f32,
    pub cy: f32,
    /// Half-extent in pixels.
    pub radius: f32,
    /// Foreground intensity in `(0, 1]`.
    pub intensity: f32,
}

fn inside(class: &str, dx: f32, dy: f32, r: f32) -> Result<bool> {
    Ok(match class {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs().max(dy.abs()) <= 0.8 * r,
        "cross" => {
            let arm = 0.3 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        other => return Err(Error::InvalidArgument(format!("unknown shape class {other:?}"))),
    })
}

/// Renders `spec` on a black `size × size` canvas with antialiased edges.
pub fn render(spec: &ShapeSpec, size: usize) -> Result<ImageTensor> {
    let mut values = vec![0.0f32; size * size];
    let n = SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f32;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f32 + (sx as f32 + 0.5) / n as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / n as f32;
                    if inside(&spec.class, px - spec.cx, py - spec.cy, spec.radius)? {
                        hits += 1;
                    }
                }
            }
            values[y * size + x] = spec.intensity * hits as f32 * inv;
        }
    }
    ImageTensor::new([1, size, size], values)
}

/// Random placement: radius 15–30% of the side, fully inside the canvas.
pub fn random_spec(class: &str, size: usize, rng: &mut Stream) -> ShapeSpec {
    let s = size as f32;
    let radius = rng.random_range(0.15 * s..=0.30 * s);
    let margin = radius + 1.0;
    let cx = rng.random_range(margin..=s - margin);
    let cy = rng.random_range(margin..=s - margin);
    let intensity = rng.random_range(0.45f32..=1.0);
    ShapeSpec {
        class: class.to_string(),
        cx,
        cy,
        radius,
        intensity,
    }
}

/// e.g. "a small bright circle near the top left".
pub fn describe(spec: &ShapeSpec, size: usize) -> String {
    let s = size as f32;
    let scale = match spec.radius / s {
        r if r < 0.20 => "small",
        r if r < 0.25 => "medium",
        _ => "large",
    };
    let tone = if spec.intensity >= 0.75 { "bright" } else { "dim" };
    let third = |v: f32| ((3.0 * v / s) as usize).min(2);
    let vertical = ["top", "middle", "bottom"][third(spec.cy)];
    let horizontal = ["left", "center", "right"][third(spec.cx)];
    let place = match (vertical, horizontal) {
        ("middle", "center") => "the center".to_string(),
        ("middle", h) => format!("the {h}"),
        (v, "center") => format!("the {v}"),
        (v, h) => format!("the {v} {h}"),
    };
    format!("a {scale} {tone} {} near {place}", spec.class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    pub classes: Vec<String>,
    pub count_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("image size must be at least 16, got {}", self.size)));
        }
        if self.classes.is_empty() || self.count_per_class == 0 {
            return Err(Error::InvalidArgument("need at least one class and one image per class".into()));
        }
        for c in &self.classes {
            inside(c, 0.0, 0.0, 1.0)?;
        }
        Ok(())
    }
}

/// One image's spec, drawn from its own stream so datasets of different
/// sizes share their common prefix.
pub fn spec_for(config: &ShapesConfig, class_index: usize, i: usize) -> ShapeSpec {
    let class = &config.classes[class_index];
    let seed = rng::derive_index(rng::derive(config.seed, class), i as u64);
    random_spec(class, config.size, &mut rng::stream(seed))
}

/// Renders the dataset into `out_dir/<class>/<class>_<i>.png` and writes
/// `out_dir/manifest.json`. Captions are the descriptors.
pub fn generate_shapes(out_dir: &Path, config: &ShapesConfig) -> Result<Manifest> {
    config.validate()?;
    let mut manifest = Manifest::new(config.classes.clone())?;
    for (ci, class) in config.classes.iter().enumerate() {
        for i in 0..config.count_per_class {
            let spec = spec_for(config, ci, i);
            let path = out_dir.join(class).join(format!("{class}_{i:04}.png"));
            save_image(&render(&spec, config.size)?, &path)?;
            manifest.push(Record {
                path,
                label: class.clone(),
                caption: Some(describe(&spec, config.size)),
                provenance: Provenance::Real,
                meta: Some(serde_json::to_value(&spec).map_err(|e| Error::parse("shape spec", e))?),
            })?;
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_antialiased_and_bounded() {
        let spec = ShapeSpec {
            class: "circle".into(),
            cx: 8.0,
            cy: 8.0,
            radius: 4.0,
            intensity: 0.8,
        };
        let img = render(&spec, 16).unwrap();
        assert_eq!(img.get(0, 8, 8), 0.8);
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!(img.values().iter().any(|&v| v > 0.0 && v < 0.8));
        // Area ≈ πr² in units of intensity.
        let area: f32 = img.values().iter().sum::<f32>() / 0.8;
        assert!((area - std::f32::consts::PI * 16.0).abs() < 1.5, "{area}");
    }

    #[test]
    fn classes_render_differently() {
        let mk = |c: &str| ShapeSpec {
            class: c.into(),
            cx: 16.0,
            cy: 16.0,
            radius: 8.0,
            intensity: 1.0,
        };
        let c = render(&mk("circle"), 32).unwrap();
        let s = render(&mk("square"), 32).unwrap();
        let x = render(&mk("cross"), 32).unwrap();
        assert_ne!(c, s);
        assert_ne!(s, x);
        // The cross leaves its corners empty; the square fills them.
        assert_eq!(x.get(0, 11, 11), 0.0);
        assert_eq!(s.get(0, 11, 11), 1.0);
        assert!(render(&mk("hexagon"), 32).is_err());
    }

    #[test]
    fn descriptions() {
        let spec = ShapeSpec {
            class: "circle".into(),
            cx: 4.0,
            cy: 3.0,
            radius: 2.5,
            intensity: 0.9,
        };
        assert_eq!(describe(&spec, 16), "a small bright circle near the top left");
        let spec = ShapeSpec {
            class: "cross".into(),
            cx: 8.0,
            cy: 8.0,
            radius: 4.5,
            intensity: 0.5,
        };
        assert_eq!(describe(&spec, 16), "a large dim cross near the center");
    }

    #[test]
    fn specs_stay_on_canvas() {
        let cfg = ShapesConfig {
            classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            count_per_class: 50,
            size: 16,
            seed: 3,
        };
        for ci in 0..3 {
            for i in 0..50 {
                let s = spec_for(&cfg, ci, i);
                assert!(s.cx - s.radius >= 0.0 && s.cx + s.radius <= 16.0);
                assert!(s.cy - s.radius >= 0.0 && s.cy + s.radius <= 16.0);
            }
        }
        assert!(ShapesConfig { size: 8, ..cfg }.validate().is_err());
    }
}
