use std::path::Path;

use anyhow::{Context, Result};
use hkp_core::heatmap::{KeypointSet, Source, SKELETON};
use image::{Rgb, RgbImage};

const BONE: Rgb<u8> = Rgb([0, 220, 255]);
const CONFIDENT: Rgb<u8> = Rgb([40, 255, 40]);
const FALLBACK: Rgb<u8> = Rgb([255, 60, 60]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Writes `source` with the predicted skeleton drawn on top. Fallback keypoints are red.
pub fn draw(source: &Path, kps: &KeypointSet, out: &Path) -> Result<()> {
    let mut img = image::open(source)
        .with_context(|| format!("reading image {}", source.display()))?
        .to_rgb8();
    let r = (img.width().max(img.height()) / 150).max(2) as i64;
    let pos = |i: usize| kps.get(i).map(|k| (k.x, k.y));
    for (a, b) in SKELETON {
        if let (Some(pa), Some(pb)) = (pos(a), pos(b)) {
            line(&mut img, pa, pb, BONE);
        }
    }
    for k in &kps.points {
        let c = if k.source == Source::Fallback { FALLBACK } else { CONFIDENT };
        dot(&mut img, (k.x, k.y), r, c);
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))
}
