//! Deterministic two-domain "vehicle" corpus: each identity is a rounded
//! body with two marks in an identity-specific palette, re-rendered per image
//! with viewpoint jitter and then styled per domain (blur, brightness shift,
//! background palette).

use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::images::load_image;
use super::{DatasetIndex, DatasetRecord, Domain, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Additive offset in normalized `[-1, 1]` units, within `[-0.5, 0.5]`.
    pub brightness: f64,
    /// Gaussian blur standard deviation in pixels; `0` disables blurring.
    pub blur_radius: f64,
    pub background: Vec<[u8; 3]>,
}

impl DomainStyle {
    pub fn bright_sharp() -> Self {
        Self {
            brightness: 0.2,
            blur_radius: 0.0,
            background: vec![[112, 120, 128], [128, 124, 116], [104, 116, 108]],
        }
    }

    pub fn dark_blurred() -> Self {
        Self {
            brightness: -0.2,
            blur_radius: 0.8,
            background: vec![[120, 110, 124], [106, 124, 128], [124, 120, 102]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_id: usize,
    pub image_size: usize,
    pub num_cameras: u32,
    pub source: DomainStyle,
    pub target: DomainStyle,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_identities: usize, images_per_id: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_identities,
            images_per_id,
            image_size,
            num_cameras: 4,
            source: DomainStyle::bright_sharp(),
            target: DomainStyle::dark_blurred(),
            seed,
        }
    }

    pub fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 || self.images_per_id < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs >= 2 identities with >= 2 images each, got {} x {}",
                self.num_identities, self.images_per_id
            )));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        for (name, s) in [("source", &self.source), ("target", &self.target)] {
            if !(-0.5..=0.5).contains(&s.brightness) || !(s.blur_radius >= 0.0) || s.background.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{name} style needs brightness in [-0.5, 0.5], blur >= 0 and a non-empty palette"
                )));
            }
        }
        if self.num_cameras == 0 {
            return Err(Error::InvalidArgument("num_cameras must be positive".into()));
        }
        Ok(())
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

struct Identity {
    body: [f64; 3],
    width: f64,
    height: f64,
    marks: [([f64; 3], f64, f64, f64); 2],
}

impl Identity {
    fn new(spec: &SyntheticSpec, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1 + id as u64));
        let hue = (id as f64 + rng.random_range(0.0..0.3)) / spec.num_identities as f64 * 360.0;
        let body = hsv(hue, rng.random_range(0.55..0.9), rng.random_range(0.55..0.85));
        let width = rng.random_range(0.55..0.75);
        let height = rng.random_range(0.3..0.42);
        let mut mark = || {
            let color = hsv(rng.random_range(0.0..360.0), rng.random_range(0.3..1.0), rng.random_range(0.15..0.95));
            (color, rng.random_range(0.1..0.7), rng.random_range(0.15..0.6), rng.random_range(0.18..0.3))
        };
        let marks = [mark(), mark()];
        Self { body, width, height, marks }
    }
}

fn inside_rounded_rect(x: f64, y: f64, x0: f64, y0: f64, w: f64, h: f64, r: f64) -> bool {
    if x < x0 || y < y0 || x > x0 + w || y > y0 + h {
        return false;
    }
    let cx = x.clamp(x0 + r, x0 + w - r);
    let cy = y.clamp(y0 + r, y0 + h - r);
    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
}

fn gaussian_blur(buf: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; buf.len()];
    for horizontal in [true, false] {
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in (-radius..=radius).enumerate() {
                        let (sx, sy) = if horizontal {
                            (clampi(x as isize + k), y)
                        } else {
                            (x, clampi(y as isize + k))
                        };
                        acc += kernel[ki] * buf[(sy * size + sx) * 3 + c];
                    }
                    tmp[(y * size + x) * 3 + c] = acc / norm;
                }
            }
        }
        buf.copy_from_slice(&tmp);
    }
}

/// Renders image `n` of identity `id` under `domain`'s style.
pub fn render_synthetic_image(spec: &SyntheticSpec, domain: Domain, id: usize, n: usize) -> RgbImage {
    let s = spec.image_size;
    let sf = s as f64;
    let style = spec.style(domain);
    let ident = Identity::new(spec, id);
    let domain_word = match domain {
        Domain::Source => 0x5u64,
        Domain::Target => 0x7u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, domain_word), (id * 10_007 + n) as u64));
    let bg = style.background[rng.random_range(0..style.background.len())];
    let scale = rng.random_range(0.9..1.1);
    let w = ident.width * scale * sf;
    let h = ident.height * scale * sf;
    let cx = sf / 2.0 + rng.random_range(-0.08..0.08) * sf;
    let cy = sf / 2.0 + rng.random_range(-0.08..0.08) * sf;
    let (x0, y0) = (cx - w / 2.0, cy - h / 2.0);
    let wheel_r = 0.16 * h;
    let wheels = [(x0 + 0.25 * w, y0 + h), (x0 + 0.75 * w, y0 + h)];

    let mut buf = vec![0.0f64; s * s * 3];
    for py in 0..s {
        for px in 0..s {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let shade = 1.0 + 0.15 * (y / sf - 0.5);
            let mut color = [bg[0] as f64 * shade, bg[1] as f64 * shade, bg[2] as f64 * shade];
            if wheels.iter().any(|&(wx, wy)| (x - wx).powi(2) + (y - wy).powi(2) <= wheel_r * wheel_r) {
                color = [30.0, 30.0, 34.0];
            }
            if inside_rounded_rect(x, y, x0, y0, w, h, 0.25 * h) {
                color = ident.body;
                for (mc, u, v, size) in ident.marks {
                    let side = size * h;
                    let (mx, my) = (x0 + u * w, y0 + v * h);
                    if x >= mx && x < mx + side && y >= my && y < my + side {
                        color = mc;
                    }
                }
            }
            let o = (py * s + px) * 3;
            buf[o..o + 3].copy_from_slice(&color);
        }
    }
    for v in buf.iter_mut() {
        *v += rng.random_range(-4.0..4.0);
    }
    gaussian_blur(&mut buf, s, style.blur_radius);
    let offset = style.brightness * 127.5;
    let raw: Vec<u8> = buf.iter().map(|&v| (v + offset).round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(s as u32, s as u32, raw).expect("buffer sized for the image")
}

/// Writes `root/synth/<domain>/<id>/<n>.png` for both domains plus
/// `root/synth/<domain>.json` indexes, and returns `(source, target)`.
pub fn generate_synthetic_domains(spec: &SyntheticSpec, root: &Path) -> Result<(DatasetIndex, DatasetIndex)> {
    spec.validate()?;
    let mut out = Vec::with_capacity(2);
    for domain in [Domain::Source, Domain::Target] {
        let dir = root.join("synth").join(domain.as_str());
        let mut records = Vec::with_capacity(spec.num_identities * spec.images_per_id);
        for id in 0..spec.num_identities {
            let id_dir = dir.join(id.to_string());
            std::fs::create_dir_all(&id_dir).map_err(|e| Error::io(&id_dir, e))?;
            for n in 0..spec.images_per_id {
                let path = id_dir.join(format!("{n}.png"));
                render_synthetic_image(spec, domain, id, n)
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|source| Error::Image { path: path.clone(), source })?;
                records.push(DatasetRecord {
                    image_path: path,
                    vehicle_id: id as u32,
                    camera_id: (n as u32) % spec.num_cameras,
                    domain_tag: domain,
                });
            }
        }
        let index = DatasetIndex::new(Split::Train, records);
        index.write_json(&root.join("synth").join(format!("{}.json", domain.as_str())))?;
        out.push(index);
    }
    let target = out.pop().expect("two domains");
    let source = out.pop().expect("two domains");
    Ok((source, target))
}

/// Mean normalized pixel value over every image of `index`.
pub fn mean_brightness(index: &DatasetIndex, size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in &index.records {
        let px = load_image(&r.image_path, size)?;
        sum += px.iter().map(|&v| v as f64).sum::<f64>();
        count += px.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::images::rgb_to_normalized;

    fn rendered_mean(spec: &SyntheticSpec, domain: Domain) -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for id in 0..spec.num_identities {
            for n in 0..spec.images_per_id {
                let px = rgb_to_normalized(&render_synthetic_image(spec, domain, id, n));
                sum += px.iter().map(|&v| v as f64).sum::<f64>();
                count += px.len();
            }
        }
        sum / count as f64
    }

    fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(20, 8, 16, 3);
        let (s, t) = generate_synthetic_domains(&spec, dir.path()).unwrap();
        assert_eq!((s.len(), t.len()), (160, 160));
        assert_eq!((s.num_identities, t.num_identities), (20, 20));
        assert!(s.records.iter().all(|r| r.domain_tag == Domain::Source));
        assert!(t.records.iter().all(|r| r.domain_tag == Domain::Target));
        assert!(dir.path().join("synth/target/19/7.png").is_file());
    }

    #[test]
    fn byte_identical_for_same_spec_and_seed() {
        let spec = SyntheticSpec::new(3, 2, 16, 11);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_domains(&spec, a.path()).unwrap();
        generate_synthetic_domains(&spec, b.path()).unwrap();
        let (ta, tb) = (read_tree(&a.path().join("synth")), read_tree(&b.path().join("synth")));
        let images = |t: &[(String, Vec<u8>)]| t.iter().filter(|(n, _)| n.ends_with(".png")).cloned().collect::<Vec<_>>();
        assert_eq!(images(&ta), images(&tb));
        let other = SyntheticSpec { seed: 12, ..spec };
        assert_ne!(
            render_synthetic_image(&other, Domain::Source, 0, 0),
            render_synthetic_image(&SyntheticSpec::new(3, 2, 16, 11), Domain::Source, 0, 0)
        );
    }

    #[test]
    fn brightness_gap_between_domains() {
        let spec = SyntheticSpec::new(20, 8, 32, 5);
        let gap = rendered_mean(&spec, Domain::Source) - rendered_mean(&spec, Domain::Target);
        assert!(gap >= 0.3, "gap {gap}");
    }

    #[test]
    fn rejects_bad_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(4, 2, 30, 0);
        assert!(generate_synthetic_domains(&spec, dir.path()).is_err());
        assert!(SyntheticSpec::new(1, 2, 32, 0).validate().is_err());
        assert!(SyntheticSpec::new(2, 1, 32, 0).validate().is_err());
    }
}
