//! Seeded synthetic image generators used by the toy experiments: document
//! pages, natural-like scenes, glyphs, squares, layouts, and screen styles.
//! All images are single-channel `[S, S, 1]` with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::heads::{BBox, HeadLabel, HeadSample, HeadTask};
use crate::numkernel::{Rng, Tensor};

fn canvas(size: usize, value: f32) -> Vec<f32> {
    vec![value; size * size]
}

fn fill_rect(px: &mut [f32], size: usize, x0: usize, y0: usize, x1: usize, y1: usize, value: f32) {
    for y in y0.min(size)..y1.min(size) {
        for x in x0.min(size)..x1.min(size) {
            px[y * size + x] = value;
        }
    }
}

fn add_noise(px: &mut [f32], sigma: f32, rng: &mut Rng) {
    if sigma > 0.0 {
        for v in px.iter_mut() {
            *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
}

fn finish(px: Vec<f32>, size: usize) -> Tensor {
    Tensor::new(vec![size, size, 1], px).expect("square canvas")
}

/// White page with a few sparse lines of dark word strokes and wide margins.
pub fn document_image(size: usize, rng: &mut Rng) -> Tensor {
    let mut px = canvas(size, 1.0);
    let margin = (size / 5).max(1);
    let line_gap = (size / 5).max(4);
    let mut y = margin + rng.below(line_gap);
    while y + 2 < size - margin {
        if rng.uniform(0.0, 1.0) < 0.5 {
            let end = size - margin - rng.below((size / 3).max(1));
            let mut x = margin;
            while x + 2 < end {
                let word = 2 + rng.below(5);
                let ink = rng.uniform(0.0, 0.25);
                for dx in 0..word.min(end - x) {
                    // sparse strokes, not solid bars
                    for dy in 0..2 {
                        if rng.uniform(0.0, 1.0) < 0.6 {
                            px[(y + dy) * size + x + dx] = ink;
                        }
                    }
                }
                x += word + 2;
            }
        }
        y += line_gap;
    }
    finish(px, size)
}

/// Smooth random field from a few oriented sinusoids plus pixel noise.
pub fn natural_image(size: usize, rng: &mut Rng) -> Tensor {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            let angle = rng.uniform(0.0, std::f32::consts::PI);
            let period = rng.uniform(6.0, 20.0);
            let k = 2.0 * std::f32::consts::PI / period;
            (
                k * angle.cos(),
                k * angle.sin(),
                rng.uniform(0.0, 6.3),
                rng.uniform(0.08, 0.18),
            )
        })
        .collect();
    let base = rng.uniform(0.35, 0.65);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f32 = waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * x as f32 + ky * y as f32 + ph).sin())
                .sum();
            px.push(base + v);
        }
    }
    add_noise(&mut px, 0.06, rng);
    finish(px, size)
}

/// 5×5 bitmaps for the glyph-reading task.
pub const GLYPHS: [[u8; 5]; 8] = [
    [0b01110, 0b10001, 0b10001, 0b10001, 0b01110], // ring
    [0b00100, 0b01100, 0b00100, 0b00100, 0b01110], // one
    [0b11111, 0b00001, 0b11111, 0b10000, 0b11111], // two
    [0b10001, 0b01010, 0b00100, 0b01010, 0b10001], // cross
    [0b11111, 0b10000, 0b11110, 0b10000, 0b10000], // eff
    [0b10001, 0b10001, 0b11111, 0b10001, 0b10001], // aitch
    [0b00100, 0b01010, 0b10001, 0b11111, 0b10001], // ay
    [0b11110, 0b10001, 0b11110, 0b10001, 0b11110], // bee
];

/// Glyph `index` drawn at 4× scale at a random offset on a dark field.
pub fn glyph_image(index: usize, size: usize, rng: &mut Rng) -> Tensor {
    let scale = (size / 8).max(1);
    let extent = 5 * scale;
    let mut px = canvas(size, 0.0);
    let (ox, oy) = (rng.below(size - extent + 1), rng.below(size - extent + 1));
    for (r, bits) in GLYPHS[index % GLYPHS.len()].iter().enumerate() {
        for c in 0..5 {
            if bits >> (4 - c) & 1 == 1 {
                let (x0, y0) = (ox + c * scale, oy + r * scale);
                fill_rect(&mut px, size, x0, y0, x0 + scale, y0 + scale, 1.0);
            }
        }
    }
    add_noise(&mut px, 0.05, rng);
    finish(px, size)
}

/// Black image with one white axis-aligned square; returns its box in
/// normalized coordinates.
pub fn square_image(size: usize, rng: &mut Rng) -> (Tensor, BBox) {
    let side = size / 4 + rng.below(size / 4 + 1);
    let (x0, y0) = (rng.below(size - side + 1), rng.below(size - side + 1));
    let mut px = canvas(size, 0.0);
    fill_rect(&mut px, size, x0, y0, x0 + side, y0 + side, 1.0);
    let s = size as f32;
    let bbox = BBox::new(
        x0 as f32 / s,
        y0 as f32 / s,
        (x0 + side) as f32 / s,
        (y0 + side) as f32 / s,
    )
    .expect("square lies inside the canvas");
    (finish(px, size), bbox)
}

/// Layout classes for [`layout_image`]: text block, figure, background.
pub const LAYOUT_CLASSES: usize = 2;

/// Page with a text block (class 0) and a figure (class 1) on white
/// background (class 2), both aligned to the patch grid. Returns per-patch
/// labels in row-major order.
pub fn layout_image(size: usize, patch: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let grid = size / patch;
    let mut labels = vec![LAYOUT_CLASSES; grid * grid];
    let mut px = canvas(size, 1.0);
    for class in 0..LAYOUT_CLASSES {
        // a few attempts to place a non-overlapping rectangle
        for _ in 0..20 {
            let (w, h) = (
                1 + rng.below(grid.div_ceil(2)),
                1 + rng.below(grid.div_ceil(2)),
            );
            let (c0, r0) = (rng.below(grid - w + 1), rng.below(grid - h + 1));
            let cells: Vec<usize> = (r0..r0 + h)
                .flat_map(|r| (c0..c0 + w).map(move |c| r * grid + c))
                .collect();
            if cells.iter().any(|&i| labels[i] != LAYOUT_CLASSES) {
                continue;
            }
            for &i in &cells {
                labels[i] = class;
                let (x0, y0) = ((i % grid) * patch, (i / grid) * patch);
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        px[y * size + x] = match class {
                            0 if y % 3 == 0 => rng.uniform(0.0, 0.3),
                            0 => 1.0,
                            _ => 0.45,
                        };
                    }
                }
            }
            break;
        }
    }
    add_noise(&mut px, 0.03, rng);
    (finish(px, size), labels)
}

pub const SCREEN_CLASSES: usize = 4;

/// Screenshot-style image of one of four coarse styles: text page, tile grid,
/// hero block, column layout.
pub fn screen_image(class: usize, size: usize, rng: &mut Rng) -> Tensor {
    let mut px = canvas(size, rng.uniform(0.85, 1.0));
    let ink = rng.uniform(0.0, 0.3);
    let jitter = |rng: &mut Rng| rng.below(3);
    match class % SCREEN_CLASSES {
        0 => {
            let mut y = 2 + jitter(rng);
            while y + 1 < size {
                let end = size - 2 - rng.below(size / 3);
                fill_rect(&mut px, size, 2, y, end, y + 1, ink);
                y += 4;
            }
        }
        1 => {
            let cell = size / 4;
            let off = jitter(rng);
            for r in 0..4 {
                for c in 0..4 {
                    let (x0, y0) = (c * cell + 1 + off, r * cell + 1 + off);
                    fill_rect(&mut px, size, x0, y0, x0 + cell - 3, y0 + cell - 3, ink);
                }
            }
        }
        2 => {
            let m = 3 + jitter(rng);
            fill_rect(&mut px, size, m, m, size - m, size - m - size / 4, ink);
        }
        _ => {
            let width = size / 8;
            let mut x = 2 + jitter(rng);
            while x + width < size {
                fill_rect(&mut px, size, x, 2, x + width, size - 2, ink);
                x += 2 * width;
            }
        }
    }
    add_noise(&mut px, 0.04, rng);
    finish(px, size)
}

/// Labelled samples for a head task. `grid` is the token-grid side the head
/// sees; segmentation labels are produced at that resolution.
pub fn head_samples(
    task: HeadTask,
    n: usize,
    size: usize,
    grid: usize,
    rng: &mut Rng,
) -> Result<Vec<HeadSample>> {
    match task {
        HeadTask::BBox => Ok((0..n)
            .map(|_| {
                let (image, b) = square_image(size, rng);
                HeadSample {
                    image,
                    label: HeadLabel::BBox(b),
                }
            })
            .collect()),
        HeadTask::Segmentation { classes } if classes == LAYOUT_CLASSES => {
            if grid == 0 || !size.is_multiple_of(grid) {
                return Err(Error::Geometry(format!(
                    "{size}px image cannot be split into a {grid}x{grid} grid"
                )));
            }
            Ok((0..n)
                .map(|_| {
                    let (image, labels) = layout_image(size, size / grid, rng);
                    HeadSample {
                        image,
                        label: HeadLabel::Patches(labels),
                    }
                })
                .collect())
        }
        HeadTask::Classification { classes } if classes == SCREEN_CLASSES => Ok((0..n)
            .map(|i| HeadSample {
                image: screen_image(i % classes, size, rng),
                label: HeadLabel::Class(i % classes),
            })
            .collect()),
        other => Err(Error::Usage(format!("no synthetic data for {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seed_deterministic_and_in_range() {
        for seed in 0..5 {
            let a = document_image(32, &mut Rng::new(seed));
            let b = document_image(32, &mut Rng::new(seed));
            assert_eq!(a, b);
            let n = natural_image(32, &mut Rng::new(seed));
            assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (sq, bbox) = square_image(32, &mut Rng::new(seed));
            assert_eq!(sq.shape(), &[32, 32, 1]);
            assert!(bbox.x1 > bbox.x0 && bbox.y1 > bbox.y0);
        }
    }

    #[test]
    fn square_box_matches_pixels() {
        let (img, b) = square_image(32, &mut Rng::new(3));
        let cx = ((b.x0 + b.x1) / 2.0 * 32.0) as usize;
        let cy = ((b.y0 + b.y1) / 2.0 * 32.0) as usize;
        assert_eq!(img.data()[cy * 32 + cx], 1.0);
        let lit = img.data().iter().filter(|&&v| v == 1.0).count();
        let side = ((b.x1 - b.x0) * 32.0).round() as usize;
        assert_eq!(lit, side * side);
    }

    #[test]
    fn layout_labels_cover_grid() {
        let (_, labels) = layout_image(32, 8, &mut Rng::new(4));
        assert_eq!(labels.len(), 16);
        assert!(labels.iter().all(|&l| l <= LAYOUT_CLASSES));
    }

    #[test]
    fn glyphs_are_distinct() {
        for i in 0..GLYPHS.len() {
            for j in i + 1..GLYPHS.len() {
                assert_ne!(GLYPHS[i], GLYPHS[j]);
            }
        }
    }
}
