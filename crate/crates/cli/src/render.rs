//! Prediction images: a composite over the map plus per-step heatmaps.
//!
//! Images are written as binary PPM/PGM, and optionally PNG.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use drf_core::grid::{normalize, ProbGrid};
use drf_core::heads::{Batch, Model};
use drf_core::raster::{build_sample, Sample};
use drf_core::scenario::{Scenario, SurfaceClass};

use crate::config::{RunConfig, Split};
use crate::data::load_split;
use crate::error::CliError;

/// Row-major RGB or grayscale pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Binary PPM for RGB, PGM for grayscale.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&self.data).expect("in-memory png data");
        }
        out
    }
}

/// Hue sweep from blue at the first step to red at the last.
pub fn horizon_color(t: usize, horizon: usize) -> [u8; 3] {
    let f = if horizon <= 1 { 0.0 } else { t as f64 / (horizon - 1) as f64 };
    let h = (1.0 - f) * 240.0 / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        _ => (x, 0.0, 1.0),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn surface_gray(c: SurfaceClass) -> u8 {
    match c {
        SurfaceClass::OffRoad => 230,
        SurfaceClass::Crosswalk => 175,
        SurfaceClass::Road => 110,
    }
}

/// Intensity `round(255 * m / max)` per bin, each bin drawn as a
/// `scale x scale` block with the PoI heading up.
pub fn heatmap(p: &ProbGrid, scale: usize) -> Image {
    let spec = p.spec();
    let max = p.mass().iter().cloned().fold(0.0, f64::max);
    let mut img = Image::new(spec.cols * scale, spec.rows * scale, 1);
    for (i, m) in p.mass().iter().enumerate() {
        let b = spec.unflat(i);
        let v = if max > 0.0 { (255.0 * m / max).round() as u8 } else { 0 };
        let top = (spec.rows - 1 - b.row) * scale;
        for y in top..top + scale {
            for x in b.col * scale..(b.col + 1) * scale {
                img.pixel_mut(x, y)[0] = v;
            }
        }
    }
    img
}

/// Map surfaces in grayscale, predicted mass tinted by horizon with opacity
/// proportional to relative density, the observed past in black and the
/// ground-truth future in white.
pub fn composite(scn: &Scenario, sample: &Sample, probs: &[ProbGrid], scale: usize) -> Image {
    let input = sample.raster.spec;
    let px = input.bin_size / scale as f64;
    let (w, h) = (input.cols * scale, input.rows * scale);
    let mut img = Image::new(w, h, 3);
    let world = |x: f64, y: f64| input.local_to_world([x * px, (h as f64 - y) * px]);
    let maxes: Vec<f64> = probs
        .iter()
        .map(|p| p.mass().iter().cloned().fold(0.0, f64::max))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let p = world(x as f64 + 0.5, y as f64 + 0.5);
            let g = surface_gray(scn.map.surface_class(p)) as f64;
            let mut rgb = [g, g, g];
            if let Some(bin) = sample.output.world_to_bin(p) {
                for (t, prob) in probs.iter().enumerate() {
                    if maxes[t] <= 0.0 {
                        continue;
                    }
                    let alpha = 0.85 * prob.get(bin) / maxes[t];
                    let tint = horizon_color(t, probs.len());
                    for k in 0..3 {
                        rgb[k] = rgb[k] * (1.0 - alpha) + tint[k] as f64 * alpha;
                    }
                }
            }
            let out = img.pixel_mut(x, y);
            for k in 0..3 {
                out[k] = rgb[k].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let to_px = |p: [f64; 2]| {
        let q = input.world_to_local(p);
        [q[0] / px, h as f64 - q[1] / px]
    };
    let past: Vec<[f64; 2]> = scn.poi.observed_past().map(|(_, s)| to_px(s.position)).collect();
    let current = past.last().copied();
    let future: Vec<[f64; 2]> = current
        .into_iter()
        .chain(scn.poi.future_positions().into_iter().map(to_px))
        .collect();
    polyline(&mut img, &past, [0, 0, 0]);
    polyline(&mut img, &future, [255, 255, 255]);
    img
}

fn polyline(img: &mut Image, points: &[[f64; 2]], color: [u8; 3]) {
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n = ((b[0] - a[0]).hypot(b[1] - a[1]) * 4.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let f = i as f64 / n as f64;
            let (x, y) = (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]));
            if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
                img.pixel_mut(x as usize, y as usize).copy_from_slice(&color);
            }
        }
    }
}

fn write_image(img: &Image, stem: &Path, png: bool, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let ext = if img.channels == 3 { "ppm" } else { "pgm" };
    let path = stem.with_extension(ext);
    std::fs::File::create(&path)?.write_all(&img.to_pnm())?;
    written.push(path);
    if png {
        let path = stem.with_extension("png");
        std::fs::write(&path, img.to_png())?;
        written.push(path);
    }
    Ok(())
}

/// Renders `probs` for one scenario into `out`; returns the files written.
pub fn render_files(
    scn: &Scenario,
    sample: &Sample,
    probs: &[ProbGrid],
    out: &Path,
    heatmaps: bool,
    png: bool,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let stem = out.join(format!("scenario_{}", scn.seed));
    write_image(&composite(scn, sample, probs, 4), &stem, png, &mut written)?;
    if heatmaps {
        for (t, p) in probs.iter().enumerate() {
            let stem = out.join(format!("scenario_{}_t{:02}", scn.seed, t + 1));
            write_image(&heatmap(p, 8), &stem, png, &mut written)?;
        }
    }
    Ok(written)
}

pub fn predict_probs(model: &Model<f32>, cfg: &RunConfig, scn: &Scenario) -> Result<(Sample, Vec<ProbGrid>), CliError> {
    let sample = build_sample(scn, &cfg.frame).map_err(|e| CliError::Data(e.to_string()))?;
    let batch = Batch::from_samples(&[&sample], model.horizon(), model.config.head.leak)?;
    let pred = model.predict(&batch)?.remove(0);
    let probs = pred.marginals.iter().map(normalize).collect::<drf_core::Result<Vec<_>>>()?;
    Ok((sample, probs))
}

/// `drf render`: looks the scenario up by id (its seed) in `split`.
pub fn run_render(
    cfg: &RunConfig,
    model: &Model<f32>,
    split: Split,
    id: u64,
    out: &Path,
    heatmaps: bool,
    png: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let scenarios = load_split(cfg, split, None)?;
    let scn = scenarios.iter().find(|s| s.seed == id).ok_or_else(|| {
        let range = match (scenarios.first(), scenarios.last()) {
            (Some(a), Some(b)) => format!("{}..={}", a.seed, b.seed),
            _ => "none".into(),
        };
        CliError::Data(format!("no scenario {id} in split {}; ids are {range}", split.name()))
    })?;
    let (sample, probs) = predict_probs(model, cfg, scn)?;
    render_files(scn, &sample, &probs, out, heatmaps, png)
}
