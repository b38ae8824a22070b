//! Naive reference implementations and frozen fixtures shared by the
//! oracle suites and the acceptance runner.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-12
}

// Per-pixel reference: direct formulas, no lookup tables, explicit loops.

pub fn ref_lab(p: [u8; 3]) -> [f64; 3] {
    let lin = |v: u8| {
        let c = f64::from(v) / 255.0;
        if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) }
    };
    let m = [[0.4124564, 0.3575761, 0.1804375], [0.2126729, 0.7151522, 0.0721750], [0.0193339, 0.1191920, 0.9503041]];
    let rgb = [lin(p[0]), lin(p[1]), lin(p[2])];
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            xyz[r] += m[r][c] * rgb[c];
            white[r] += m[r][c];
        }
    }
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d.powi(3) { t.powf(1.0 / 3.0) } else { t / (3.0 * d * d) + 4.0 / 29.0 }
    };
    let (fx, fy, fz) = (f(xyz[0] / white[0]), f(xyz[1] / white[1]), f(xyz[2] / white[2]));
    [(116.0 * fy - 16.0).clamp(0.0, 100.0), 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn ref_colorfulness(w: usize, h: usize, px: &[[u8; 3]]) -> f64 {
    let n = (w * h) as f64;
    let (mut srg, mut syb) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = px[y * w + x].map(f64::from);
            srg += r - g;
            syb += 0.5 * (r + g) - b;
        }
    }
    let (mrg, myb) = (srg / n, syb / n);
    let (mut vrg, mut vyb) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = px[y * w + x].map(f64::from);
            vrg += (r - g - mrg).powi(2);
            vyb += (0.5 * (r + g) - b - myb).powi(2);
        }
    }
    ((vrg / n) + (vyb / n)).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt()
}

fn ref_bin(v: f64, bins: usize) -> usize {
    let width = 255.0 / bins as f64;
    let raw = ((v + 128.0) / width).floor();
    if raw < 0.0 { 0 } else { (raw as usize).min(bins - 1) }
}

pub fn ref_entropy(px: &[[u8; 3]], bins: usize) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &p in px {
        let lab = ref_lab(p);
        *counts.entry((ref_bin(lab[1], bins), ref_bin(lab[2], bins))).or_insert(0usize) += 1;
    }
    let n = px.len() as f64;
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).log2()).sum()
}

pub fn ref_brightness(px: &[[u8; 3]]) -> f64 {
    px.iter().map(|&p| ref_lab(p)[0]).sum::<f64>() / px.len() as f64
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<[u8; 3]> {
    // Mix smooth regions with noise so histograms are neither flat nor degenerate.
    let base: [u8; 3] = rng.random();
    (0..w * h)
        .map(|k| {
            if rng.random_bool(0.5) {
                rng.random()
            } else {
                let j = (k % w) as u8;
                [base[0].wrapping_add(j), base[1], base[2].wrapping_sub(j)]
            }
        })
        .collect()
}

pub fn ref_top_p(s: &[f64], p: f64) -> f64 {
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for k in 1..=sorted.len() {
        if sorted[..k].iter().sum::<f64>() >= p - 1e-12 {
            return k as f64 / s.len() as f64;
        }
    }
    1.0
}

pub fn ref_entropy_sal(s: &[f64]) -> f64 {
    s.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>() / (s.len() as f64).ln()
}

pub fn ref_mass_in(s: &[f64], h: usize, w: usize, centers: &[(f64, f64)], r: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut hit = false;
            for &(ci, cj) in centers {
                if (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) <= r * r {
                    hit = true;
                }
            }
            if hit {
                total += s[i * w + j];
            }
        }
    }
    total
}

pub fn center(h: usize, w: usize) -> [(f64, f64); 1] {
    [((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)]
}

pub fn thirds(h: usize, w: usize) -> [(f64, f64); 4] {
    let (hf, wf) = (h as f64, w as f64);
    [(hf / 3.0, wf / 3.0), (hf / 3.0, 2.0 * wf / 3.0), (2.0 * hf / 3.0, wf / 3.0), (2.0 * hf / 3.0, 2.0 * wf / 3.0)]
}

/// Random saliency map: raw values plus their normalized copy.
pub fn random_saliency(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f64>, Vec<f64>) {
    let (h, w) = (rng.random_range(8..48), rng.random_range(8..48));
    let raw: Vec<f64> = (0..h * w).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>().powi(3) }).collect();
    let total: f64 = raw.iter().sum();
    let s = raw.iter().map(|v| v / total).collect();
    (h, w, raw, s)
}

/// Pairwise definition: observed agreement is the share of ordered rater
/// pairs that agree per item; chance agreement from pooled marginals.
pub fn brute_kappa(assign: &[Vec<usize>], k: usize) -> f64 {
    let n = assign[0].len();
    let mut p_bar = 0.0;
    let mut marg = vec![0.0; k];
    for item in assign {
        let mut agree = 0usize;
        for a in 0..n {
            for b in 0..n {
                if a != b && item[a] == item[b] {
                    agree += 1;
                }
            }
            marg[item[a]] += 1.0;
        }
        p_bar += agree as f64 / (n * (n - 1)) as f64;
    }
    p_bar /= assign.len() as f64;
    let total = (assign.len() * n) as f64;
    let pe: f64 = marg.iter().map(|m| (m / total).powi(2)).sum();
    (p_bar - pe) / (1.0 - pe)
}

/// Random rater assignments with a tunable pull toward one category per item.
pub fn random_assignments(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, usize) {
    let k = rng.random_range(2..=11);
    let raters = rng.random_range(2..=7);
    let items = rng.random_range(3..=40);
    let skew = rng.random_range(0.0..0.9);
    let assign = (0..items)
        .map(|_| {
            let anchor = rng.random_range(0..k);
            (0..raters).map(|_| if rng.random_bool(skew) { anchor } else { rng.random_range(0..k) }).collect()
        })
        .collect();
    (assign, k)
}

// Frozen 50-row logistic fixture; reference values from an independent
// statistical package (Newton fit, HC3 sandwich, marginal effects).

pub const XO: &str = "10001100001000101001001001010111011100101110110000";
pub const XH: &str = "00111100100010100100001010100001111000111011000001";
pub const Y: &str = "00101110001000101010011011000011011100111110000001";

pub const BETA: [f64; 3] = [-2.0216191219142954, 2.362145833763326, 1.8436312835876192];
pub const HC3: [f64; 9] = [
    0.5763897538378928, -0.4105428640236553, -0.40732700436060204,
    -0.410542864023655, 0.5833274331283522, 0.15827168514029052,
    -0.4073270043606018, 0.15827168514029066, 0.5705702019640816,
];
pub const HC0: [f64; 9] = [
    0.523183948899885, -0.3752147662803891, -0.3731348667855284,
    -0.3752147662803891, 0.5202429358176075, 0.15502925561202904,
    -0.3731348667855283, 0.15502925561202893, 0.507783014028797,
];
pub const AME: [f64; 2] = [0.39249983932319715, 0.3063422131843986];
pub const AME_DISCRETE: [f64; 2] = [0.45721577330381896, 0.32803407000834317];
pub const Z: [f64; 3] = [-2.6628163248190013, 3.0927905229078836, 2.4407287979617935];
pub const P: [f64; 3] = [0.007748969871671224, 0.0019828404430222795, 0.014657657714745323];
pub const LOGLIK: f64 = -25.13799643267187;

pub fn bits(s: &str) -> Vec<f64> {
    s.bytes().map(|b| f64::from(b - b'0')).collect()
}

pub fn terms() -> Vec<String> {
    ["intercept", "x_obj", "x_hum"].iter().map(|s| s.to_string()).collect()
}

pub fn design(xo: &[f64], xh: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(xo.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => xo[i],
        _ => xh[i],
    })
}

pub fn fixture() -> (DMatrix<f64>, Vec<f64>) {
    (design(&bits(XO), &bits(XH)), bits(Y))
}
