#![allow(dead_code)]

use std::f64::consts::PI;

use mrcl_core::mask::BinaryMask;
use proptest::prelude::*;

/// Independent histogram reference: `atan2` in y-up orientation, bins
/// centred on multiples of `2π/Θ`, per-pair accumulation in row-major order.
pub fn reference_histogram(a: &BinaryMask, b: &BinaryMask, theta_bins: usize, levels: &[u32]) -> Vec<f64> {
    let nl = levels.len();
    let mut out = vec![0.0; theta_bins * nl];
    let pa: Vec<(usize, usize)> = (0..a.height())
        .flat_map(|y| (0..a.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| a.get(x, y))
        .collect();
    let pb: Vec<(usize, usize)> = (0..b.height())
        .flat_map(|y| (0..b.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| b.get(x, y))
        .collect();
    let width = 2.0 * PI / theta_bins as f64;
    for &(ax, ay) in &pa {
        for &(bx, by) in &pb {
            let dx = bx as f64 - ax as f64;
            let dy = by as f64 - ay as f64;
            let d = (dx * dx + dy * dy).sqrt();
            if d == 0.0 {
                continue;
            }
            let mut theta = (-dy).atan2(dx);
            if theta < 0.0 {
                theta += 2.0 * PI;
            }
            let bin = ((theta / width + 0.5).floor() as usize) % theta_bins;
            for (li, &r) in levels.iter().enumerate() {
                out[bin * nl + li] += 1.0 / d.powi(r as i32);
            }
        }
    }
    let norm = (pa.len() * pb.len()) as f64;
    out.iter().map(|v| v / norm).collect()
}

pub fn mask_from(w: usize, h: usize, pixels: &[(usize, usize)]) -> BinaryMask {
    BinaryMask::from_pixels(w, h, pixels).unwrap()
}

/// Two non-empty masks on a shared grid of at most 64×64 with up to 40
/// pixels each.
pub fn mask_pair(max_pixels: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (4usize..=64, 4usize..=64).prop_flat_map(move |(w, h)| {
        (
            prop::collection::vec((0..w, 0..h), 1..=max_pixels),
            prop::collection::vec((0..w, 0..h), 1..=max_pixels),
        )
            .prop_map(move |(pa, pb)| (mask_from(w, h, &pa), mask_from(w, h, &pb)))
    })
}

/// Filled rectangle mask.
pub fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
    let mut px = Vec::new();
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            px.push((x, y));
        }
    }
    mask_from(w, h, &px)
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() < 1e-15
}
