//! Deterministic synthetic chip rendering and dataset generation.
//!
//! Each chip is a top-down view of one vehicle on a noisy gray-green ground:
//! cars are rounded rectangles with a darker windshield band, trucks are
//! cab-plus-trailer silhouettes, both rotated by a random angle and drawn
//! with 3x3 supersampling. Everything derives from a single u64 seed with a
//! fixed draw order, so a chip is a pure function of its spec and datasets
//! regenerate byte for byte.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;
use crate::text::{all_classes, ClassDescription, Color, VehicleType};

/// Side length of generated dataset chips.
pub const CHIP_SIZE: usize = 64;

/// Smallest renderable chip.
pub const MIN_CHIP_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum ChipError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("chip size {0} is below the minimum of {MIN_CHIP_SIZE}")]
    ChipTooSmall(usize),
    #[error("per-class count {0} is too small (need at least 4)")]
    PerClassTooSmall(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadTrainFraction(f64),
    #[error("refusing to overwrite existing manifest at {0}")]
    ManifestExists(PathBuf),
    #[error("bad ppm file {path}: {reason}")]
    BadPpm { path: PathBuf, reason: String },
    #[error("bad manifest line {line}: {source}")]
    BadManifest {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("dataset chips disagree on size ({0} vs {1})")]
    MixedChipSizes(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Body paint RGB values. Background tones stay away from these.
pub fn palette(color: Color) -> [u8; 3] {
    match color {
        Color::Black => [25, 25, 25],
        Color::White => [235, 235, 235],
        Color::Gray => [128, 128, 128],
        Color::Yellow => [230, 200, 30],
        Color::Green => [30, 160, 60],
        Color::Blue => [30, 70, 200],
        Color::Red => [200, 40, 40],
    }
}

/// Everything that determines a chip's pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChipSpec {
    pub description: ClassDescription,
    pub seed: u64,
    pub size: usize,
}

impl ChipSpec {
    pub fn new(description: ClassDescription, seed: u64, size: usize) -> Result<Self, ChipError> {
        if size < MIN_CHIP_SIZE {
            return Err(ChipError::ChipTooSmall(size));
        }
        Ok(ChipSpec {
            description,
            seed,
            size,
        })
    }
}

/// Rendered chip: row-major RGB, `size * size * 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chip {
    pub spec: ChipSpec,
    pub pixels: Vec<u8>,
}

/// Pixel masks from rendering: `silhouette` marks majority-vehicle pixels,
/// `paint` the silhouette minus the windshield. Used by the round-trip
/// validation tests, not by training.
#[derive(Debug, Clone)]
pub struct ChipGeometry {
    pub silhouette: Vec<bool>,
    pub paint: Vec<bool>,
}

struct BodyShape {
    vehicle: VehicleType,
    half_l: f64,
    half_h: f64,
    length: f64,
    height: f64,
}

impl BodyShape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match self.vehicle {
            VehicleType::Car => {
                // Rounded rectangle, corner radius 0.3 of the body width.
                let (au, av) = (u.abs(), v.abs());
                if au > self.half_l || av > self.half_h {
                    return false;
                }
                let r = 0.3 * self.height;
                let du = au - (self.half_l - r);
                let dv = av - (self.half_h - r);
                du <= 0.0 || dv <= 0.0 || du * du + dv * dv <= r * r
            }
            VehicleType::Truck => {
                // Trailer (72% of the length, full width), a gap, then a
                // slightly narrower cab at the front.
                let trailer = u >= -self.half_l
                    && u <= self.half_l - 0.28 * self.length
                    && v.abs() <= self.half_h;
                let cab = u >= self.half_l - 0.25 * self.length
                    && u <= self.half_l
                    && v.abs() <= 0.46 * self.height;
                trailer || cab
            }
        }
    }

    fn windshield(&self, u: f64, v: f64) -> bool {
        match self.vehicle {
            VehicleType::Car => {
                u >= self.half_l - 0.38 * self.length
                    && u <= self.half_l - 0.26 * self.length
                    && v.abs() <= 0.45 * self.height
            }
            VehicleType::Truck => {
                u >= self.half_l - 0.22 * self.length
                    && u <= self.half_l - 0.16 * self.length
                    && v.abs() <= 0.425 * self.height
            }
        }
    }
}

fn bilinear(grid: &[f64], cells: usize, x: f64, y: f64) -> f64 {
    // grid is (cells+1)^2 corner values over [0, 1]^2.
    let gx = (x * cells as f64).min(cells as f64 - 1e-9);
    let gy = (y * cells as f64).min(cells as f64 - 1e-9);
    let (cx, cy) = (gx as usize, gy as usize);
    let (fx, fy) = (gx - cx as f64, gy - cy as f64);
    let stride = cells + 1;
    let v00 = grid[cy * stride + cx];
    let v01 = grid[cy * stride + cx + 1];
    let v10 = grid[(cy + 1) * stride + cx];
    let v11 = grid[(cy + 1) * stride + cx + 1];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

const BG_LOW: [f64; 3] = [78.0, 88.0, 70.0];
const BG_HIGH: [f64; 3] = [150.0, 158.0, 138.0];
const COARSE_CELLS: usize = 8;
const FINE_CELLS: usize = 16;
const JITTER: f64 = 12.0;

/// Renders a chip along with its geometry masks.
///
/// The draw order from the chip seed is frozen: body width fraction, aspect
/// ratio, rotation, center jitter (x then y), color gain, coarse background
/// lattice, fine background lattice, then per-pixel paint jitter in row-major
/// RGB order. The width fraction is drawn before the aspect, so a car and a
/// truck rendered from the same seed share their body width, and the truck's
/// longer silhouette always covers more area.
pub fn render_chip_with_geometry(spec: &ChipSpec) -> (Chip, ChipGeometry) {
    let size = spec.size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let h_frac: f64 = rng.gen_range(0.22..0.26);
    let aspect: f64 = match spec.description.vehicle_type {
        VehicleType::Car => rng.gen_range(1.8..2.4),
        VehicleType::Truck => rng.gen_range(2.6..3.4),
    };
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let cx = s / 2.0 + rng.gen_range(-0.02..0.02) * s;
    let cy = s / 2.0 + rng.gen_range(-0.02..0.02) * s;
    let gain: f64 = rng.gen_range(0.85..1.1);

    let coarse: Vec<f64> = (0..(COARSE_CELLS + 1) * (COARSE_CELLS + 1))
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let fine: Vec<f64> = (0..(FINE_CELLS + 1) * (FINE_CELLS + 1))
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let jitter: Vec<f64> = (0..size * size * 3)
        .map(|_| rng.gen_range(-JITTER..JITTER))
        .collect();

    let height = h_frac * s;
    let shape = BodyShape {
        vehicle: spec.description.vehicle_type,
        half_l: aspect * height / 2.0,
        half_h: height / 2.0,
        length: aspect * height,
        height,
    };
    let (sin_t, cos_t) = theta.sin_cos();
    let base = palette(spec.description.color);

    let mut pixels = vec![0u8; size * size * 3];
    let mut silhouette = vec![false; size * size];
    let mut paint = vec![false; size * size];

    for py in 0..size {
        for px in 0..size {
            let mut n_body = 0u32;
            let mut n_wind = 0u32;
            for sy in 0..3 {
                for sx in 0..3 {
                    let x = px as f64 + (sx as f64 + 0.5) / 3.0;
                    let y = py as f64 + (sy as f64 + 0.5) / 3.0;
                    let dx = x - cx;
                    let dy = y - cy;
                    let u = cos_t * dx + sin_t * dy;
                    let v = -sin_t * dx + cos_t * dy;
                    if shape.contains(u, v) {
                        n_body += 1;
                        if shape.windshield(u, v) {
                            n_wind += 1;
                        }
                    }
                }
            }
            let idx = py * size + px;
            silhouette[idx] = n_body >= 5;
            paint[idx] = n_body >= 5 && n_wind <= 4;

            let nx = (px as f64 + 0.5) / s;
            let ny = (py as f64 + 0.5) / s;
            let noise =
                0.74 * bilinear(&coarse, COARSE_CELLS, nx, ny) + 0.26 * bilinear(&fine, FINE_CELLS, nx, ny);
            let alpha = n_body as f64 / 9.0;
            let wind = n_wind as f64 / 9.0;
            for c in 0..3 {
                let bg = BG_LOW[c] + (BG_HIGH[c] - BG_LOW[c]) * noise;
                let body =
                    (base[c] as f64 * gain + jitter[idx * 3 + c]).clamp(0.0, 255.0);
                let wind_col = body * 0.45;
                let out = bg * (1.0 - alpha) + body * (alpha - wind) + wind_col * wind;
                pixels[idx * 3 + c] = out.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    (
        Chip {
            spec: *spec,
            pixels,
        },
        ChipGeometry { silhouette, paint },
    )
}

pub fn render_chip(spec: &ChipSpec) -> Chip {
    render_chip_with_geometry(spec).0
}

/// Mean RGB over the paint mask, or `None` when the mask is empty.
pub fn mean_paint_color(chip: &Chip, geometry: &ChipGeometry) -> Option<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (idx, &keep) in geometry.paint.iter().enumerate() {
        if keep {
            for c in 0..3 {
                sum[c] += chip.pixels[idx * 3 + c] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

/// Nearest palette color under the gain-normalized distance: for each
/// candidate the best gain in `[0.85, 1.1]` is applied before comparing, so
/// the global illumination draw cancels out. Ties keep the earlier palette
/// entry.
pub fn classify_color(rgb: [f64; 3]) -> Color {
    let mut best = Color::ALL[0];
    let mut best_d = f64::INFINITY;
    for color in Color::ALL {
        let p = palette(color);
        let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
        let dot_mp: f64 = (0..3).map(|i| rgb[i] * pf[i]).sum();
        let dot_pp: f64 = (0..3).map(|i| pf[i] * pf[i]).sum();
        let g = (dot_mp / dot_pp).clamp(0.85, 1.1);
        let d: f64 = (0..3).map(|i| (rgb[i] - g * pf[i]).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = color;
        }
    }
    best
}

/// Elongation of a mask, `sqrt(major/minor)` of the pixel covariance
/// eigenvalues. Rotation invariant; a solid `l x h` rectangle scores about
/// `l / h`. `None` for degenerate masks.
pub fn silhouette_aspect(mask: &[bool], size: usize) -> Option<f64> {
    let mut n = 0.0;
    let (mut mx, mut my) = (0.0, 0.0);
    for py in 0..size {
        for px in 0..size {
            if mask[py * size + px] {
                n += 1.0;
                mx += px as f64;
                my += py as f64;
            }
        }
    }
    if n < 2.0 {
        return None;
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for py in 0..size {
        for px in 0..size {
            if mask[py * size + px] {
                let dx = px as f64 - mx;
                let dy = py as f64 - my;
                sxx += dx * dx;
                sxy += dx * dy;
                syy += dy * dy;
            }
        }
    }
    sxx /= n;
    sxy /= n;
    syy /= n;
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    if l2 <= 1e-12 {
        return None;
    }
    Some((l1 / l2).sqrt())
}

/// Which half of the dataset a chip belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub class: ClassDescription,
    pub split: Split,
    pub seed: u64,
}

/// The dataset index, in generation order (classes in canonical order, items
/// by index within each class).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes a binary (P6) PPM image.
pub fn write_ppm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<(), ChipError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary (P6) PPM image with a 255 max value.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), ChipError> {
    let bad = |reason: &str| ChipError::BadPpm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 2];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header != b"P6" {
        return Err(bad("not a P6 ppm"));
    }
    // Three header fields: width, height, max value. Whitespace separated,
    // '#' comments allowed.
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        let mut token = String::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            match b[0] {
                b'#' => {
                    let mut skip = String::new();
                    r.read_line(&mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        break;
                    }
                }
                c if c.is_ascii_digit() => token.push(c as char),
                _ => return Err(bad("unexpected byte in header")),
            }
        }
        *field = token.parse().map_err(|_| bad("bad header number"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("max value must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels).map_err(|_| bad("truncated pixel data"))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((width, height, pixels))
}

/// Renders `per_class` chips for each of the 14 classes into
/// `out_dir/chips/` and writes `out_dir/manifest.jsonl`. The first
/// `ceil(train_fraction * per_class)` chips of every class are the train
/// split. Chip seeds derive injectively from `seed`, so no two chips in a
/// dataset repeat, and the whole tree is byte-deterministic.
pub fn generate_dataset(
    out_dir: &Path,
    per_class: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Manifest, ChipError> {
    if per_class < 4 {
        return Err(ChipError::PerClassTooSmall(per_class));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ChipError::BadTrainFraction(train_fraction));
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    if manifest_path.exists() {
        return Err(ChipError::ManifestExists(manifest_path));
    }
    let chips_dir = out_dir.join("chips");
    fs::create_dir_all(&chips_dir)?;

    let train_count = ((train_fraction * per_class as f64).ceil() as usize).min(per_class);
    let mut records = Vec::with_capacity(14 * per_class);
    for (ci, class) in all_classes().iter().enumerate() {
        for item in 0..per_class {
            let chip_seed = seeding::derive(seed, (ci * per_class + item) as u64);
            let spec = ChipSpec::new(*class, chip_seed, CHIP_SIZE)?;
            let chip = render_chip(&spec);
            let file = format!(
                "{}_{}_{item:03}.ppm",
                class.color.word(),
                class.vehicle_type.word()
            );
            write_ppm(&chips_dir.join(&file), &chip.pixels, CHIP_SIZE, CHIP_SIZE)?;
            records.push(ManifestRecord {
                path: format!("chips/{file}"),
                class: *class,
                split: if item < train_count {
                    Split::Train
                } else {
                    Split::Test
                },
                seed: chip_seed,
            });
        }
    }

    let mut w = BufWriter::new(File::create(&manifest_path)?);
    for rec in &records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(Manifest { records })
}

/// A chip pulled back off disk.
#[derive(Debug, Clone)]
pub struct LoadedChip {
    pub record: ManifestRecord,
    pub size: usize,
    pub pixels: Vec<u8>,
}

/// A full dataset in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub chips: Vec<LoadedChip>,
}

impl LoadedDataset {
    /// The common chip side length. Errors if chips disagree or none exist.
    pub fn chip_size(&self) -> Result<usize, ChipError> {
        let first = self.chips.first().ok_or(ChipError::EmptyDataset)?.size;
        for c in &self.chips {
            if c.size != first {
                return Err(ChipError::MixedChipSizes(first, c.size));
            }
        }
        Ok(first)
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.chips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.record.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reads `manifest.jsonl` under `dir` and every chip it names.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, ChipError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = BufReader::new(File::open(&manifest_path)?);
    let mut chips = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|source| ChipError::BadManifest {
                line: i + 1,
                source,
            })?;
        let (w, h, pixels) = read_ppm(&dir.join(&record.path))?;
        if w != h {
            return Err(ChipError::BadPpm {
                path: dir.join(&record.path),
                reason: format!("chip must be square, got {w}x{h}"),
            });
        }
        chips.push(LoadedChip {
            record,
            size: w,
            pixels,
        });
    }
    if chips.is_empty() {
        return Err(ChipError::EmptyDataset);
    }
    Ok(LoadedDataset {
        root: dir.to_path_buf(),
        chips,
    })
}

/// Converts interleaved RGB bytes to planar channel-major f64 values in
/// `[-1, 1]`, the layout the model's conv stack consumes. Centering keeps the
/// first conv layer's pre-activations zero-mean, which conditions SGD far
/// better than raw `[0, 1]` intensities.
pub fn chip_tensor_values(pixels: &[u8], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for idx in 0..size * size {
        for c in 0..3 {
            out[c * size * size + idx] = pixels[idx * 3 + c] as f64 / 127.5 - 1.0;
        }
    }
    out
}
