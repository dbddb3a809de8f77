use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::{ClassSpec, ShapeFamily};
use super::SynthError;

const IMAGE_MAGIC: &[u8; 4] = b"MEIM";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Target among familiar distractors over a cluttered background.
    Scene,
    /// Target alone, centred on a uniform background.
    Isolated,
}

/// An RGB render with per-pixel provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub size: usize,
    /// Channel-major `3 x size x size` values in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// 0 for background, `k + 1` for pixels of `placements[k]`.
    pub mask: Vec<u8>,
    /// Class names of every shape drawn, target first.
    pub placements: Vec<String>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside(shape: ShapeFamily, u: f64, v: f64) -> bool {
    match shape {
        ShapeFamily::Circle => u * u + v * v <= 1.0,
        ShapeFamily::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        ShapeFamily::Triangle => {
            // Equilateral triangle inscribed in the unit circle, apex up.
            let h = 3f64.sqrt() / 2.0;
            v >= -0.5 && v <= 1.0 && u.abs() <= (1.0 - v) / (1.5 / h)
        }
        ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeFamily::Cross => {
            (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0)
        }
        ShapeFamily::Ring => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        ShapeFamily::Star => {
            let r = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            r <= 0.62 + 0.38 * (5.0 * phi).cos()
        }
        ShapeFamily::Hexagon => {
            let (au, av) = (u.abs(), v.abs());
            av <= 0.87 && (3f64.sqrt() * au + av) <= 3f64.sqrt() * 0.95
        }
        ShapeFamily::Pentagon => regular_polygon(5, u, v),
        ShapeFamily::Ellipse => u * u + (v * v) / 0.36 <= 1.0,
        ShapeFamily::Crescent => u * u + v * v <= 1.0 && (u - 0.45).powi(2) + v * v > 0.55,
        ShapeFamily::Arrow => {
            // shaft on the left, head on the right
            (u <= 0.1 && u >= -0.95 && v.abs() <= 0.25) || (u > 0.1 && u <= 0.95 && v.abs() <= 0.95 - u)
        }
        ShapeFamily::Trapezoid => v.abs() <= 0.6 && u.abs() <= 0.55 + 0.4 * (v + 0.6) / 1.2,
        ShapeFamily::Semicircle => u * u + v * v <= 1.0 && v >= -0.2,
        ShapeFamily::Chevron => {
            let d = v - 0.8 * u.abs();
            u.abs() <= 0.95 && (-0.55..=0.05).contains(&d)
        }
        ShapeFamily::Bar => u.abs() <= 0.95 && v.abs() <= 0.3,
    }
}

/// Regular `k`-gon inscribed in the unit circle, vertex up.
fn regular_polygon(k: usize, u: f64, v: f64) -> bool {
    let sector = std::f64::consts::TAU / k as f64;
    let phi = (u.atan2(v)).rem_euclid(sector) - sector / 2.0;
    (u * u + v * v).sqrt() * phi.cos() <= (sector / 2.0).cos()
}

struct Placement<'a> {
    spec: &'a ClassSpec,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn draw(img: &mut RawImage, p: &Placement<'_>, label: u8) {
    let n = img.size;
    let plane = n * n;
    let rgb = hsv_to_rgb(p.spec.visual.hue, 0.75, 0.9);
    let (sin, cos) = p.angle.sin_cos();
    let lo_x = (p.cx - p.radius - 1.0).floor().max(0.0) as usize;
    let hi_x = ((p.cx + p.radius + 1.0).ceil() as usize).min(n);
    let lo_y = (p.cy - p.radius - 1.0).floor().max(0.0) as usize;
    let hi_y = ((p.cy + p.radius + 1.0).ceil() as usize).min(n);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let dx = x as f64 + 0.5 - p.cx;
            let dy = y as f64 + 0.5 - p.cy;
            let u = (dx * cos + dy * sin) / p.radius;
            let v = (-dx * sin + dy * cos) / p.radius;
            // image rows grow downward; flip so "up" shapes point up
            if !inside(p.spec.visual.shape, u, -v) {
                continue;
            }
            let tex = p.spec.visual.texture_freq;
            let shade = if tex > 0.0 && (std::f64::consts::PI * tex * (u + 1.0)).sin() < 0.0 {
                0.65
            } else {
                1.0
            };
            let i = y * n + x;
            for c in 0..3 {
                img.pixels[c * plane + i] = rgb[c] * shade;
            }
            img.mask[i] = label;
        }
    }
}

fn blank(size: usize, tone: f64) -> RawImage {
    RawImage {
        size,
        pixels: vec![tone; 3 * size * size],
        mask: vec![0; size * size],
        placements: Vec::new(),
    }
}

/// Isolated-object radius as a fraction of the image side.
pub(crate) const ISOLATED_RADIUS: f64 = 0.38;

/// Half-width of the per-image jitter around the bucket tone.
pub(crate) const TONE_JITTER: f64 = 0.03;

/// Background grey level for each simulated source dataset.
pub(crate) fn bucket_tone(bucket: u8) -> f64 {
    if bucket == 0 {
        0.5
    } else {
        0.58
    }
}

fn clutter(img: &mut RawImage, rng: &mut ChaCha8Rng) {
    let n = img.size;
    let plane = n * n;
    let a = hsv_to_rgb(rng.random(), 0.2, rng.random_range(0.35..0.75));
    let b = hsv_to_rgb(rng.random(), 0.2, rng.random_range(0.35..0.75));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 / n as f64 - 0.5) * c + (y as f64 / n as f64 - 0.5) * s + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            for ch in 0..3 {
                img.pixels[ch * plane + y * n + x] = a[ch] * (1.0 - t) + b[ch] * t;
            }
        }
    }
    for _ in 0..rng.random_range(3..7) {
        let col = hsv_to_rgb(rng.random(), 0.15, rng.random_range(0.3..0.8));
        let (w, h) = (rng.random_range(2..n / 3), rng.random_range(2..n / 3));
        let (x0, y0) = (rng.random_range(0..n - w), rng.random_range(0..n - h));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for ch in 0..3 {
                    let p = &mut img.pixels[ch * plane + y * n + x];
                    *p = 0.7 * *p + 0.3 * col[ch];
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.02).expect("valid noise");
    for p in img.pixels.iter_mut() {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

fn place<'a>(
    specs: &[&'a ClassSpec],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placement<'a>>, SynthError> {
    let n = size as f64;
    let mut shrink = 1.0;
    for _ in 0..10 {
        let mut out: Vec<Placement<'a>> = Vec::with_capacity(specs.len());
        'shapes: for spec in specs {
            let radius = rng.random_range(0.14..0.22) * n * shrink;
            for _ in 0..500 {
                let cx = rng.random_range(radius + 1.0..n - radius - 1.0);
                let cy = rng.random_range(radius + 1.0..n - radius - 1.0);
                let clear = out.iter().all(|p| {
                    let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                    d > p.radius + radius + 3.0
                });
                if clear {
                    out.push(Placement {
                        spec,
                        cx,
                        cy,
                        radius,
                        angle: rng.random_range(0.0..std::f64::consts::TAU),
                    });
                    continue 'shapes;
                }
            }
            break;
        }
        if out.len() == specs.len() {
            return Ok(out);
        }
        shrink *= 0.9;
    }
    Err(SynthError::Placement(specs.len()))
}

/// Composites `target` and the given distractors at random non-touching
/// poses over background clutter. Novel distractors are only accepted when
/// `allow_novel` is set (leakage studies).
pub(crate) fn render_scene(
    target: &ClassSpec,
    distractors: &[&ClassSpec],
    size: usize,
    allow_novel: bool,
    seed: u64,
) -> Result<RawImage, SynthError> {
    if !allow_novel {
        if let Some(bad) = distractors.iter().find(|d| d.is_novel()) {
            return Err(SynthError::NovelDistractor(bad.name.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = blank(size, 0.5);
    clutter(&mut img, &mut rng);
    let mut specs = vec![target];
    specs.extend_from_slice(distractors);
    let placements = place(&specs, size, &mut rng)?;
    for (k, p) in placements.iter().enumerate() {
        draw(&mut img, p, k as u8 + 1);
        img.placements.push(p.spec.name.clone());
    }
    Ok(img)
}

/// Renders one image of `spec`.
///
/// Scene mode draws 0–3 distractors from `distractor_pool` (which must hold
/// familiar classes only; the target's own class is skipped). Isolated mode
/// centres the target on a uniform background whose tone is drawn near the
/// `bucket` tone.
pub fn synth_image(
    spec: &ClassSpec,
    mode: RenderMode,
    distractor_pool: &[&ClassSpec],
    size: usize,
    bucket: u8,
    instance_seed: u64,
) -> Result<RawImage, SynthError> {
    match mode {
        RenderMode::Scene => {
            if let Some(bad) = distractor_pool.iter().find(|d| d.is_novel()) {
                return Err(SynthError::NovelDistractor(bad.name.clone()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
            let mut pool: Vec<&ClassSpec> = distractor_pool
                .iter()
                .copied()
                .filter(|d| d.name != spec.name)
                .collect();
            let k = rng.random_range(0..=3usize).min(pool.len());
            pool.shuffle(&mut rng);
            pool.truncate(k);
            render_scene(spec, &pool, size, false, rng.random())
        }
        RenderMode::Isolated => {
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
            // Uniform within the image, but never bit-equal across images:
            // identical backgrounds would tie every background-cell match.
            let tone = bucket_tone(bucket) + rng.random_range(-TONE_JITTER..TONE_JITTER);
            let mut img = blank(size, tone);
            let p = Placement {
                spec,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                radius: ISOLATED_RADIUS * size as f64 * rng.random_range(0.9..1.1),
                angle: rng.random_range(-0.4..0.4),
            };
            draw(&mut img, &p, 1);
            img.placements.push(spec.name.clone());
            Ok(img)
        }
    }
}

/// Number of 8-connected foreground regions in a render mask.
pub fn count_components(mask: &[u8], size: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / size) as i64, (i % size) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                        continue;
                    }
                    let j = ny as usize * size + nx as usize;
                    if mask[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Writes the 16-byte header (magic, H, W, channels as LE u32) followed by
/// little-endian f32 channel planes.
pub fn write_image_file(path: &Path, img: &RawImage) -> Result<(), SynthError> {
    let mut bytes = Vec::with_capacity(16 + img.pixels.len() * 4);
    bytes.extend_from_slice(IMAGE_MAGIC);
    for v in [img.size as u32, img.size as u32, 3u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &p in &img.pixels {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an image file, returning `(height, width, channel-major pixels)`.
pub fn read_image_file(path: &Path) -> Result<(usize, usize, Vec<f64>), SynthError> {
    let bytes = fs::read(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |detail: &str| SynthError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("missing image header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(1), word(2), word(3));
    if c != 3 || bytes.len() != 16 + 4 * c * h * w {
        return Err(bad("payload size does not match header"));
    }
    let pixels = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((h, w, pixels))
}
