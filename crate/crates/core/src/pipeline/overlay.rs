use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::evaluate::EvalReport;
use super::PipelineError;
use crate::data::{Image, Manifest};
use crate::geometry::{LandmarkSet, Measurement, PixelPoint};

const LABEL: Rgb<u8> = Rgb([40, 220, 60]);
const PREDICTED: Rgb<u8> = Rgb([235, 40, 40]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: PixelPoint, b: PixelPoint, c: Rgb<u8>) {
    let steps = (a.distance(&b).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.x + t * (b.x - a.x)).round() as i64, (a.y + t * (b.y - a.y)).round() as i64, c);
    }
}

fn cross(img: &mut RgbImage, p: PixelPoint, c: Rgb<u8>) {
    let (x, y) = (p.x.round() as i64, p.y.round() as i64);
    for d in -3..=3 {
        put(img, x + d, y, c);
        put(img, x, y + d, c);
    }
}

fn calipers(img: &mut RgbImage, lm: &LandmarkSet, c: Rgb<u8>) {
    for m in Measurement::ALL {
        let (s, e) = m.endpoints();
        line(img, lm.points[s], lm.points[e], c);
    }
    for &p in &lm.points {
        cross(img, p, c);
    }
}

/// Grayscale image with labeled calipers in green and predictions in red.
pub fn render_overlay(image: &Image, truth: &LandmarkSet, predicted: &LandmarkSet) -> RgbImage {
    let mut out = RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let v = (image.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    calipers(&mut out, truth, LABEL);
    calipers(&mut out, predicted, PREDICTED);
    out
}

/// Writes `overlay_best.png`, `overlay_median.png` and `overlay_worst.png`.
pub fn write_overlays(report: &EvalReport, manifest: &Manifest, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let picks = [("best", report.best()), ("median", report.median()), ("worst", report.worst())];
    let mut written = Vec::with_capacity(3);
    for (tag, entry) in picks {
        let Some(entry) = entry else { continue };
        let index = manifest
            .records
            .iter()
            .position(|r| r.id() == entry.id)
            .ok_or_else(|| PipelineError::Config(format!("ranked sample {} is not in the manifest", entry.id)))?;
        let pred = report
            .predictions
            .iter()
            .find(|p| p.id == entry.id)
            .ok_or_else(|| PipelineError::Config(format!("no prediction stored for {}", entry.id)))?;
        let sample = manifest.load_sample(index)?;
        let path = out_dir.join(format!("overlay_{tag}.png"));
        render_overlay(&sample.image, &pred.truth, &pred.predicted)
            .save(&path)
            .map_err(|e| PipelineError::Config(format!("cannot write {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
