//! Straight-line reference implementations used as test oracles.

use ozbias::grid::{GridSpec, LatLonBox};
use ozbias::zonal::{Raster, RasterData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar Adam with coupled weight decay, written out step by step.
pub fn adam_reference(w0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut w = w0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::new();
    for (step, &g_raw) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        let g = g_raw + wd * w;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(t));
        let v_hat = v / (1.0 - beta2.powi(t));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(w);
    }
    out
}

fn two_pass_sse(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Exhaustive split search: every feature, every midpoint between
/// consecutive distinct values, children scored independently. Returns
/// `(feature, threshold)` of the first candidate (in feature, then threshold
/// order) within `1e-12 · Var(y)` of the best decrease.
pub fn brute_force_split(x: &[Vec<f64>], y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = y.len();
    let p = x.first().map_or(0, Vec::len);
    let parent = two_pass_sse(y);
    let tol = 1e-12 * parent / n as f64;
    let mut cands = Vec::new();
    for f in 0..p {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let thr = pair[0] + (pair[1] - pair[0]) / 2.0;
            let left: Vec<f64> = (0..n).filter(|&i| x[i][f] <= thr).map(|i| y[i]).collect();
            let right: Vec<f64> = (0..n).filter(|&i| x[i][f] > thr).map(|i| y[i]).collect();
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let dec = (parent - two_pass_sse(&left) - two_pass_sse(&right)) / n as f64;
            cands.push((f, thr, dec));
        }
    }
    let best = cands.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if best <= tol {
        return None;
    }
    cands.into_iter().find(|c| c.2 >= best - tol)
}

/// Per-cell statistics by scanning every pixel of the raster.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteCell {
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub mode: Option<u8>,
    pub lc_mean_var: Option<(f64, f64)>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
}

fn inside(lat: f64, lon: f64, b: &LatLonBox) -> bool {
    lat >= b.lat_min && lat < b.lat_max && lon >= b.lon_min && lon < b.lon_max
}

pub fn brute_cell(raster: &Raster, cell: &LatLonBox, codes: &[u8]) -> BruteCell {
    let b = raster.bounds();
    let dlat = (b.lat_max - b.lat_min) / raster.rows() as f64;
    let dlon = (b.lon_max - b.lon_min) / raster.cols() as f64;
    let mut members = Vec::new();
    for r in 0..raster.rows() {
        for c in 0..raster.cols() {
            let lat = b.lat_min + (r as f64 + 0.5) * dlat;
            let lon = b.lon_min + (c as f64 + 0.5) * dlon;
            if inside(lat, lon, cell) {
                members.push(r * raster.cols() + c);
            }
        }
    }
    let mut out = BruteCell {
        count: members.len(),
        class_counts: vec![0; codes.len()],
        mode: None,
        lc_mean_var: None,
        min: None,
        max: None,
        mean: None,
        variance: None,
    };
    if members.is_empty() {
        return out;
    }
    match raster.data() {
        RasterData::Categorical(px) => {
            let vals: Vec<f64> = members.iter().map(|&i| px[i] as f64).collect();
            for &i in &members {
                let k = codes.iter().position(|&c| c == px[i]).expect("known class");
                out.class_counts[k] += 1;
            }
            // Highest count; among equal counts the smallest code.
            let mut order: Vec<usize> = (0..codes.len()).collect();
            order.sort_by_key(|&k| (std::cmp::Reverse(out.class_counts[k]), codes[k]));
            out.mode = Some(codes[order[0]]);
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            out.lc_mean_var = Some((m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64));
        }
        RasterData::Continuous(px) => {
            let vals: Vec<f64> = members.iter().map(|&i| px[i] as f64).collect();
            out.min = vals.iter().copied().reduce(f64::min);
            out.max = vals.iter().copied().reduce(f64::max);
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            out.mean = Some(m);
            out.variance = Some(vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

/// A random grid and a land-cover and population raster over (roughly) the
/// same extent. Pixel sizes are sometimes commensurate with the grid so that
/// pixel centres land exactly on cell edges.
pub fn random_scene(seed: u64, codes: &[u8]) -> (GridSpec, Raster, Raster) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = [0.5, 1.0, 2.0, 0.75][rng.random_range(0..4)];
    let rows = rng.random_range(1..6);
    let cols = rng.random_range(1..6);
    let lat0 = rng.random_range(-60..60) as f64;
    let lon0 = rng.random_range(-170..160) as f64;
    let spec = GridSpec::new(lat0, lat0 + rows as f64 * res, lon0, lon0 + cols as f64 * res, res, None).unwrap();
    let aligned = rng.random_bool(0.5);
    let (pad_lat, pad_lon) = if aligned {
        (0.0, 0.0)
    } else {
        (rng.random_range(-0.4..0.4) * res, rng.random_range(-0.4..0.4) * res)
    };
    let bounds = LatLonBox::new(
        lat0 + pad_lat,
        lat0 + rows as f64 * res + pad_lat.abs(),
        lon0 - pad_lon.abs(),
        lon0 + cols as f64 * res - pad_lon,
    )
    .unwrap();
    let per = rng.random_range(1..5);
    let (pr, pc) = if aligned {
        (rows * per, cols * per)
    } else {
        (rng.random_range(1..5 * rows + 2), rng.random_range(1..5 * cols + 2))
    };
    let n_used = rng.random_range(1..=codes.len().min(4));
    let lc: Vec<u8> = (0..pr * pc).map(|_| codes[rng.random_range(0..n_used)]).collect();
    let pop: Vec<f32> = (0..pr * pc).map(|_| rng.random_range(0.0f32..5000.0)).collect();
    (
        spec,
        Raster::new(bounds, pr, pc, RasterData::Categorical(lc)).unwrap(),
        Raster::new(bounds, pr, pc, RasterData::Continuous(pop)).unwrap(),
    )
}
