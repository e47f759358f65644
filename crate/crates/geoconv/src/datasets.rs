//! Synthetic benchmark datasets (centre-of-mass point clouds, Greek numeral
//! glyphs) and the bit-exact GPDS binary container.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GeoError, Result};
use crate::tensor::Tensor;

pub const GPDS_MAGIC: &[u8; 4] = b"GPDS";
pub const GPDS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Task {
    MassCentre,
    Greek,
}

impl Task {
    pub fn id(&self) -> u8 {
        match self {
            Task::MassCentre => 0,
            Task::Greek => 1,
        }
    }

    pub fn from_id(id: u8, offset: usize) -> Result<Task> {
        match id {
            0 => Ok(Task::MassCentre),
            1 => Ok(Task::Greek),
            other => Err(GeoError::Format { offset, message: format!("unknown task id {other}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub seed: u64,
    /// Point density for mass-centre data, shift spread for Greek data.
    pub param: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// [N, H, W, 1] binary images.
    pub images: Tensor,
    /// [N, label_dim]: (row, col) centroid or a single class index.
    pub labels: Tensor,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn label_dim(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Sample image as an [H, W, 1] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.image_hw();
        let start = i * h * w;
        Tensor::new(&[h, w, 1], self.images.data()[start..start + h * w].to_vec()).unwrap()
    }

    pub fn label(&self, i: usize) -> &[f32] {
        let d = self.label_dim();
        &self.labels.data()[i * d..(i + 1) * d]
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // Per-sample stream derived from (seed, index) so generation order and
    // thread count never change the result.
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))
}

/// Bernoulli point images with centroid labels. All-black draws are
/// rejection-resampled so the centroid is always defined.
pub fn gen_mass_centre(n: usize, size: usize, density: f32, seed: u64) -> Result<Dataset> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(GeoError::Config(format!("density must be in (0, 1], got {density}")));
    }
    if size < 1 {
        return Err(GeoError::Config("image size must be >= 1".into()));
    }
    let per_image = size * size;
    let samples: Vec<(Vec<f32>, [f32; 2])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            loop {
                let mut pixels = vec![0.0f32; per_image];
                let (mut count, mut row_sum, mut col_sum) = (0usize, 0u64, 0u64);
                for r in 0..size {
                    for c in 0..size {
                        if rng.gen::<f32>() < density {
                            pixels[r * size + c] = 1.0;
                            count += 1;
                            row_sum += r as u64;
                            col_sum += c as u64;
                        }
                    }
                }
                if count > 0 {
                    let label = [row_sum as f32 / count as f32, col_sum as f32 / count as f32];
                    return (pixels, label);
                }
            }
        })
        .collect();

    let mut images = Vec::with_capacity(n * per_image);
    let mut labels = Vec::with_capacity(n * 2);
    for (pix, lab) in samples {
        images.extend_from_slice(&pix);
        labels.extend_from_slice(&lab);
    }
    Ok(Dataset {
        images: Tensor::new(&[n, size, size, 1], images)?,
        labels: Tensor::new(&[n, 2], labels)?,
        meta: DatasetMeta { task: Task::MassCentre, seed, param: density },
    })
}

/// Raster metrics of the I/II/III glyphs: vertical bars on a square canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GlyphMetrics {
    pub bar_width: usize,
    pub bar_height: usize,
    pub gap: usize,
}

impl Default for GlyphMetrics {
    fn default() -> GlyphMetrics {
        GlyphMetrics { bar_width: 3, bar_height: 24, gap: 4 }
    }
}

impl GlyphMetrics {
    pub fn glyph_width(&self, class: usize) -> usize {
        let bars = class + 1;
        bars * self.bar_width + (bars - 1) * self.gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreekSplit {
    /// Glyphs near the centre, integer offsets uniform in [-spread, spread].
    Shifted { spread: usize },
    /// One image per class per feasible integer translation.
    Exhaustive,
}

fn render_glyph(canvas: &mut [f32], size: usize, metrics: &GlyphMetrics, class: usize, dy: i64, dx: i64) -> Result<()> {
    let gw = metrics.glyph_width(class);
    let top = (size - metrics.bar_height) as i64 / 2 + dy;
    let left = (size - gw) as i64 / 2 + dx;
    if top < 0 || left < 0 || top + metrics.bar_height as i64 > size as i64 || left + gw as i64 > size as i64 {
        return Err(GeoError::Config(format!(
            "glyph class {class} out of bounds at offset ({dy}, {dx}) on {size}x{size} canvas"
        )));
    }
    for bar in 0..=class {
        let bar_left = left as usize + bar * (metrics.bar_width + metrics.gap);
        for r in top as usize..top as usize + metrics.bar_height {
            for c in bar_left..bar_left + metrics.bar_width {
                canvas[r * size + c] = 1.0;
            }
        }
    }
    Ok(())
}

/// Feasible integer offsets keeping the glyph fully on the canvas.
fn offset_ranges(size: usize, metrics: &GlyphMetrics, class: usize) -> ((i64, i64), (i64, i64)) {
    let gw = metrics.glyph_width(class) as i64;
    let gh = metrics.bar_height as i64;
    let top0 = (size as i64 - gh) / 2;
    let left0 = (size as i64 - gw) / 2;
    ((-top0, size as i64 - gh - top0), (-left0, size as i64 - gw - left0))
}

pub fn gen_greek_numerals(
    n: usize,
    size: usize,
    split: GreekSplit,
    metrics: &GlyphMetrics,
    seed: u64,
) -> Result<Dataset> {
    if size < metrics.bar_height || size < metrics.glyph_width(2) {
        return Err(GeoError::Config(format!("canvas {size} too small for glyphs {metrics:?}")));
    }
    let per_image = size * size;
    let (images, labels, count, param) = match split {
        GreekSplit::Shifted { spread } => {
            let s = spread as i64;
            for class in 0..3 {
                let ((dy_lo, dy_hi), (dx_lo, dx_hi)) = offset_ranges(size, metrics, class);
                if -s < dy_lo || s > dy_hi || -s < dx_lo || s > dx_hi {
                    return Err(GeoError::Config(format!(
                        "spread {spread} pushes class {class} glyph out of the {size}x{size} canvas"
                    )));
                }
            }
            let samples: Vec<(Vec<f32>, f32)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = sample_rng(seed, i as u64);
                    let class = i % 3;
                    let dy = rng.gen_range(-s..=s);
                    let dx = rng.gen_range(-s..=s);
                    let mut canvas = vec![0.0f32; per_image];
                    render_glyph(&mut canvas, size, metrics, class, dy, dx).expect("checked above");
                    (canvas, class as f32)
                })
                .collect();
            let mut images = Vec::with_capacity(n * per_image);
            let mut labels = Vec::with_capacity(n);
            for (pix, lab) in samples {
                images.extend_from_slice(&pix);
                labels.push(lab);
            }
            (images, labels, n, spread as f32)
        }
        GreekSplit::Exhaustive => {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let mut count = 0usize;
            for class in 0..3 {
                let ((dy_lo, dy_hi), (dx_lo, dx_hi)) = offset_ranges(size, metrics, class);
                for dy in dy_lo..=dy_hi {
                    for dx in dx_lo..=dx_hi {
                        let mut canvas = vec![0.0f32; per_image];
                        render_glyph(&mut canvas, size, metrics, class, dy, dx)?;
                        images.extend_from_slice(&canvas);
                        labels.push(class as f32);
                        count += 1;
                    }
                }
            }
            (images, labels, count, 0.0)
        }
    };
    Ok(Dataset {
        images: Tensor::new(&[count, size, size, 1], images)?,
        labels: Tensor::new(&[count, 1], labels)?,
        meta: DatasetMeta { task: Task::Greek, seed, param },
    })
}

const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 1 + 8 + 4;

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (ds.images.len() + ds.labels.len()));
    buf.extend_from_slice(GPDS_MAGIC);
    buf.extend_from_slice(&GPDS_VERSION.to_le_bytes());
    let shape = ds.images.shape();
    for dim in [shape[0], shape[1], shape[2], shape[3], ds.labels.shape()[1]] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(ds.meta.task.id());
    buf.extend_from_slice(&ds.meta.seed.to_le_bytes());
    buf.extend_from_slice(&ds.meta.param.to_le_bytes());
    for &v in ds.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ds.labels.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GeoError::Format {
                offset: self.pos,
                message: format!("truncated file while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != GPDS_MAGIC {
        return Err(GeoError::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"GPDS\"") });
    }
    let version = cur.u32("version")?;
    if version != GPDS_VERSION {
        return Err(GeoError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let n = cur.u32("N")? as usize;
    let h = cur.u32("H")? as usize;
    let w = cur.u32("W")? as usize;
    let c = cur.u32("C")? as usize;
    let label_dim = cur.u32("label_dim")? as usize;
    let task_offset = cur.pos;
    let task = Task::from_id(cur.take(1, "task id")?[0], task_offset)?;
    let seed = u64::from_le_bytes(cur.take(8, "seed")?.try_into().unwrap());
    let param = cur.f32("density/spread")?;

    let mut images = Vec::with_capacity(n * h * w * c);
    for _ in 0..n * h * w * c {
        images.push(cur.f32("image data")?);
    }
    let mut labels = Vec::with_capacity(n * label_dim);
    for _ in 0..n * label_dim {
        labels.push(cur.f32("label data")?);
    }
    if cur.pos != buf.len() {
        return Err(GeoError::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }
    Ok(Dataset {
        images: Tensor::new(&[n, h, w, c], images)?,
        labels: Tensor::new(&[n, label_dim], labels)?,
        meta: DatasetMeta { task, seed, param },
    })
}
