//! Synthetic speckled-ellipse datasets and binary PGM (P5) image I/O.
//!
//! Each sample is a textured background with one or two bright ellipses,
//! multiplied by speckle noise and blurred — a desk-scale stand-in for
//! low-contrast ultrasound imagery. The mask is the exact ellipse interior,
//! so segmentation quality is bounded only by the injected noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grayscale image with its binary ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// [1,S,S], values in [0,1].
    pub image: Tensor,
    /// [1,S,S], strictly binary.
    pub mask: Tensor,
}

/// Knobs of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Background intensity level.
    pub bg_level: f64,
    /// Intensity added inside ellipses.
    pub fg_offset: f64,
    /// Amplitude of the uniform background texture.
    pub texture_amp: f64,
    /// Strength of the multiplicative speckle term.
    pub speckle_amp: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    /// Ellipse semi-axis range as a fraction of the image side.
    pub min_axis_frac: f64,
    pub max_axis_frac: f64,
    /// Mask foreground fraction accepted per image.
    pub min_fg_frac: f64,
    pub max_fg_frac: f64,
}

impl GeneratorParams {
    /// Frozen defaults for the speckled dataset all tests run on.
    pub fn speckled() -> Self {
        GeneratorParams {
            bg_level: 0.28,
            fg_offset: 0.45,
            texture_amp: 0.05,
            speckle_amp: 0.25,
            blur_sigma: 0.8,
            min_axis_frac: 0.10,
            max_axis_frac: 0.26,
            min_fg_frac: 0.02,
            max_fg_frac: 0.40,
        }
    }

    /// Noise-free two-level scenes: thresholding the image at the midpoint
    /// between the background and foreground levels recovers the mask
    /// exactly.
    pub fn clean() -> Self {
        GeneratorParams {
            texture_amp: 0.0,
            speckle_amp: 0.0,
            blur_sigma: 0.0,
            ..Self::speckled()
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Generate `n` samples of side `size` with the frozen speckled parameters.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    synth_dataset_with(n, size, seed, &GeneratorParams::speckled())
}

/// Generate `n` samples with explicit generator parameters. Fully
/// reproducible: the same `(n, size, seed, params)` give bit-identical
/// samples.
pub fn synth_dataset_with(
    n: usize,
    size: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    if size < 32 || !size.is_power_of_two() {
        return Err(Error::invalid(format!(
            "image size must be a power of two >= 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_sample(&mut rng, size, params, format!("sample_{i:04}")))
        .collect()
}

fn synth_sample(
    rng: &mut ChaCha8Rng,
    size: usize,
    p: &GeneratorParams,
    id: String,
) -> Result<Sample> {
    let s = size as f64;
    let pixels = size * size;

    // draw ellipse scenes until the mask foreground fraction is acceptable
    let mut mask = vec![0.0; pixels];
    let mut accepted = false;
    for _ in 0..64 {
        let count = rng.gen_range(1..=2usize);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cx: rng.gen_range(0.2 * s..0.8 * s),
                    cy: rng.gen_range(0.2 * s..0.8 * s),
                    a: rng.gen_range(p.min_axis_frac * s..p.max_axis_frac * s),
                    b: rng.gen_range(p.min_axis_frac * s..p.max_axis_frac * s),
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                }
            })
            .collect();
        mask.fill(0.0);
        let mut fg = 0usize;
        for y in 0..size {
            for x in 0..size {
                if ellipses.iter().any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5)) {
                    mask[y * size + x] = 1.0;
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / pixels as f64;
        if frac >= p.min_fg_frac && frac <= p.max_fg_frac {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::invalid(
            "ellipse generator failed to meet the foreground-fraction bound",
        ));
    }

    // scene: textured background plus the foreground offset
    let mut image = vec![0.0; pixels];
    for (img, &m) in image.iter_mut().zip(&mask) {
        let texture = if p.texture_amp > 0.0 {
            p.texture_amp * rng.gen_range(-1.0..1.0)
        } else {
            0.0
        };
        *img = p.bg_level + texture + p.fg_offset * m;
    }

    // multiplicative speckle: 1 + amp*(4*u1*u2 - 1), mean one
    if p.speckle_amp > 0.0 {
        for v in image.iter_mut() {
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            *v *= 1.0 + p.speckle_amp * (4.0 * u1 * u2 - 1.0);
        }
    }

    if p.blur_sigma > 0.0 {
        image = gaussian_blur(&image, size, p.blur_sigma);
    }

    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Sample {
        id,
        image: Tensor::from_raw(vec![1, size, size], image),
        mask: Tensor::from_raw(vec![1, size, size], mask),
    })
}

/// Separable Gaussian blur with clamp-to-edge boundary handling.
fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }

    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut horizontal = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + k as isize - radius);
                acc += w * src[y * size + sx];
            }
            horizontal[y * size + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - radius);
                acc += w * horizontal[sy * size + x];
            }
            out[y * size + x] = acc;
        }
    }
    out
}

// ── PGM I/O ──────────────────────────────────────────────────────────

/// Encode a [H,W] or [1,H,W] tensor of [0,1] values as a binary PGM (P5,
/// maxval 255). Bytes are `round(v * 255)`, half away from zero.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::invalid(format!(
                "encode_pgm expects [H,W] or [1,H,W], got {other:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in t.data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Decode a binary PGM (P5, maxval 255) into a [1,H,W] tensor with values
/// `byte / 255`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::parse(0, "missing P5 magic"));
    }
    pos += 2;

    let next_token = |pos: &mut usize| -> Result<usize> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(start, "expected an ASCII integer"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(start, "integer out of range"))
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(Error::parse(pos, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(pos, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(pos, "missing whitespace before pixel data"));
    }
    pos += 1;

    let need = width * height;
    if bytes.len() - pos < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    if bytes.len() - pos > need {
        return Err(Error::parse(
            pos + need,
            format!("{} trailing bytes after pixel data", bytes.len() - pos - need),
        ));
    }
    let data: Vec<f64> = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_raw(vec![1, height, width], data))
}

pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes)
}

/// Write a dataset as `images/<id>.pgm` + `masks/<id>.pgm` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        save_pgm(dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
        save_pgm(dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    Ok(())
}

/// Load a dataset written by [`save_dataset`], ordered by sample id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no .pgm images under {}",
            dir.join("images").display()
        )));
    }
    ids.iter()
        .map(|id| {
            let image = load_pgm(dir.join("images").join(format!("{id}.pgm")))?;
            let mask_raw = load_pgm(dir.join("masks").join(format!("{id}.pgm")))?;
            // masks are stored as 0/255 bytes; restore exact binary values
            let mask = Tensor::from_raw(
                mask_raw.shape().to_vec(),
                mask_raw.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
            );
            Ok(Sample {
                id: id.clone(),
                image,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::binarize;

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let a = synth_dataset(5, 32, 7).unwrap();
        let b = synth_dataset(5, 32, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(5, 32, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_are_binary_and_images_in_unit_range() {
        for s in synth_dataset(10, 32, 1).unwrap() {
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), s.mask.shape());
        }
    }

    #[test]
    fn foreground_fraction_within_bounds_over_one_thousand_samples() {
        let p = GeneratorParams::speckled();
        for s in synth_dataset(1000, 32, 99).unwrap() {
            let fg: f64 = s.mask.data().iter().sum();
            let frac = fg / s.mask.numel() as f64;
            assert!(
                frac >= p.min_fg_frac && frac <= p.max_fg_frac,
                "sample {} foreground fraction {frac} out of bounds",
                s.id
            );
        }
    }

    #[test]
    fn clean_scene_recovers_mask_by_thresholding() {
        let p = GeneratorParams::clean();
        let midpoint = p.bg_level + p.fg_offset / 2.0;
        for s in synth_dataset_with(20, 32, 3, &p).unwrap() {
            let recovered = binarize(&s.image, midpoint).unwrap();
            assert_eq!(recovered, s.mask, "sample {}", s.id);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_dataset(1, 16, 0).is_err());
        assert!(synth_dataset(1, 48, 0).is_err());
        assert!(synth_dataset(0, 32, 0).is_err());
    }

    #[test]
    fn pgm_scale_endpoints() {
        let one = Tensor::full(&[1, 1], 1.0);
        let bytes = encode_pgm(&one).unwrap();
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(back.data(), &[1.0]);

        let zero = Tensor::full(&[1, 1], 0.0);
        let back = parse_pgm(&encode_pgm(&zero).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0]);
    }

    #[test]
    fn pgm_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let t = Tensor::from_raw(vec![1, 16, 16], data);
        let bytes1 = encode_pgm(&t).unwrap();
        let decoded = parse_pgm(&bytes1).unwrap();
        let bytes2 = encode_pgm(&decoded).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn pgm_parser_reports_byte_offsets() {
        match parse_pgm(b"P6\n2 2\n255\n....") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        // truncated payload: 4 pixels declared, 2 provided
        match parse_pgm(b"P5\n2 2\n255\nab") {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        // comment handling
        let t = parse_pgm(b"P5\n# a comment\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.data(), &[1.0]);
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(3, 32, 11).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.mask, back.mask);
            // image values pass through one 8-bit quantization
            for (a, b) in orig.image.data().iter().zip(back.image.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}
