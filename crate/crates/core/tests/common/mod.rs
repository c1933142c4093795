#![allow(dead_code)]

use rsenet::data::{stack_25d, Exam};
use rsenet::phantom::{self, PhantomParams};
use rsenet::train::Sample;
use rsenet::metrics::boundary_pixels;
use rsenet::{InputStack, Mask};

/// Every (stack, mask) pair of the given exams, in exam then slice order.
pub fn samples_of(exams: &[Exam]) -> Vec<Sample> {
    let mut out = Vec::new();
    for e in exams {
        let norm = e.normalized();
        let masks = e.masks.as_ref().expect("phantom exams carry masks");
        for i in 0..e.len() {
            out.push((stack_25d(&norm, i).unwrap(), masks[i].clone()));
        }
    }
    out
}

pub fn phantom_exams(count: usize, seed: u64, size: usize, slices: usize) -> Vec<Exam> {
    phantom::generate_phantom_set(count, seed, (size, size), slices).unwrap()
}

pub fn phantom_stack(size: usize, seed: u64) -> (InputStack, Mask) {
    let mut p = PhantomParams::randomized(size, size, seed);
    p.n_slices = 3;
    let e = phantom::generate_phantom_exam(&p).unwrap();
    samples_of(&[e]).swap_remove(1)
}

pub fn mask_from_bits(h: usize, w: usize, bits: &[bool]) -> Mask {
    Mask::from_fn(h, w, |r, c| bits[r * w + c])
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn brute_force_hausdorff(a: &Mask, b: &Mask, spacing: (f64, f64)) -> Option<f64> {
    let (ba, bb) = (boundary_pixels(a), boundary_pixels(b));
    if ba.is_empty() && bb.is_empty() {
        return Some(0.0);
    }
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dist = |p: (usize, usize), q: (usize, usize)| {
        let dr = (p.0 as f64 - q.0 as f64) * spacing.0;
        let dc = (p.1 as f64 - q.1 as f64) * spacing.1;
        (dr * dr + dc * dc).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// Two-sided p by enumerating every sign pattern, ranks computed per element.
pub fn enumerated_wilcoxon(d: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    // Doubled mid-rank: 2 * (#smaller) + (#equal) + 1.
    let r2: Vec<i64> = abs
        .iter()
        .map(|&a| {
            let smaller = abs.iter().filter(|&&b| b < a).count() as i64;
            let equal = abs.iter().filter(|&&b| b == a).count() as i64;
            2 * smaller + equal + 1
        })
        .collect();
    let total: i64 = r2.iter().sum();
    let w2: i64 = nz.iter().zip(&r2).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    // Compare |2W - total| on doubled, integer scale.
    let observed = (2 * w2 - total).abs();
    let mut extreme = 0u64;
    for pattern in 0u64..(1 << n) {
        let s: i64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| r2[i]).sum();
        if (2 * s - total).abs() >= observed {
            extreme += 1;
        }
    }
    (w2 as f64 / 2.0, extreme as f64 / (1u64 << n) as f64)
}

