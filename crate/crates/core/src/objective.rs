//! Training loss, anomaly maps and image-level scores.
//!
//! Both the loss and the anomaly map compare the original and
//! reconstructed feature vectors location by location along the channel
//! axis: a squared Euclidean residual and a cosine dissimilarity. The loss
//! averages `l2 + λ·cos` over locations; the map multiplies the two.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array2, Array3, Axis};

use crate::backbone::{resize_bilinear, FeatureMap};
use crate::error::{Result, SivtError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum over locations of the squared residual norm.
    pub l2: f64,
    /// Sum over locations of the cosine dissimilarity.
    pub cosine: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn zero(lambda: f64) -> Self {
        Self {
            total: 0.0,
            l2: 0.0,
            cosine: 0.0,
            lambda,
        }
    }
}

fn check_pair(f: &FeatureMap, g: &FeatureMap) -> Result<()> {
    if f.shape() != g.shape() {
        return Err(SivtError::Shape(format!(
            "feature maps {:?} and {:?} differ",
            f.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Squared residual and cosine dissimilarity at one location, with both
/// norms clamped below at `eps`.
fn location_terms(f: &[f64], r: &[f64], eps: f64) -> (f64, f64, f64, f64, f64) {
    let mut l2 = 0.0;
    let mut dot = 0.0;
    let mut ff = 0.0;
    let mut rr = 0.0;
    for (&a, &b) in f.iter().zip(r) {
        let d = a - b;
        l2 += d * d;
        dot += a * b;
        ff += a * a;
        rr += b * b;
    }
    let nf = ff.sqrt().max(eps);
    let nr = rr.sqrt().max(eps);
    (l2, 1.0 - dot / (nf * nr), dot, nf, nr)
}

fn locations(f: &FeatureMap) -> impl Iterator<Item = (usize, usize)> {
    let (h, w, _) = f.shape();
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))
}

fn channel_vec(f: &Array3<f64>, y: usize, x: usize) -> Vec<f64> {
    f.slice(ndarray::s![y, x, ..]).to_vec()
}

pub fn reconstruction_loss(f: &FeatureMap, recon: &FeatureMap, lambda: f64, eps: f64) -> Result<LossBreakdown> {
    check_pair(f, recon)?;
    let mut out = LossBreakdown::zero(lambda);
    for (y, x) in locations(f) {
        let (l2, cos, ..) = location_terms(&channel_vec(&f.data, y, x), &channel_vec(&recon.data, y, x), eps);
        out.l2 += l2;
        out.cosine += cos;
    }
    out.total = (out.l2 + lambda * out.cosine) / (f.height() * f.width()) as f64;
    Ok(out)
}

/// Loss plus its gradient with respect to the reconstruction.
pub fn reconstruction_loss_with_grad(
    f: &FeatureMap,
    recon: &FeatureMap,
    lambda: f64,
    eps: f64,
) -> Result<(LossBreakdown, Array3<f64>)> {
    check_pair(f, recon)?;
    let scale = 1.0 / (f.height() * f.width()) as f64;
    let mut out = LossBreakdown::zero(lambda);
    let mut grad = Array3::zeros(recon.data.raw_dim());
    for (y, x) in locations(f) {
        let fv = channel_vec(&f.data, y, x);
        let rv = channel_vec(&recon.data, y, x);
        let (l2, cos, dot, nf, nr) = location_terms(&fv, &rv, eps);
        out.l2 += l2;
        out.cosine += cos;
        let unclamped = nr > eps;
        for (c, (&a, &b)) in fv.iter().zip(&rv).enumerate() {
            // d cos / d r = -(f/(|f||r|) - (f·r) r / (|f||r|^3)); the second
            // term vanishes where |r| is clamped.
            let mut dcos = -a / (nf * nr);
            if unclamped {
                dcos += dot * b / (nf * nr * nr * nr);
            }
            grad[[y, x, c]] = scale * (2.0 * (b - a) + lambda * dcos);
        }
    }
    out.total = (out.l2 + lambda * out.cosine) * scale;
    Ok((out, grad))
}

/// Raw `H×W` anomaly map: squared residual times cosine dissimilarity.
pub fn anomaly_map(f: &FeatureMap, recon: &FeatureMap, eps: f64) -> Result<Array2<f64>> {
    check_pair(f, recon)?;
    let mut map = Array2::zeros((f.height(), f.width()));
    for (y, x) in locations(f) {
        let (l2, cos, ..) = location_terms(&channel_vec(&f.data, y, x), &channel_vec(&recon.data, y, x), eps);
        // Rounding can push the cosine term a hair below zero.
        map[[y, x]] = l2 * cos.max(0.0);
    }
    Ok(map)
}

/// Anomaly map at image resolution together with its feature-resolution
/// source.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub data: Array2<f64>,
    pub raw: Array2<f64>,
}

/// Normalized 1-D Gaussian taps over `[-r, r]`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(mut i: isize, n: isize) -> usize {
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian smoothing with reflective borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * map[[y, reflect(x as isize + j as isize - r, w as isize)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * tmp[[reflect(y as isize + j as isize - r, h as isize), x]])
                .sum();
        }
    }
    out
}

/// Bilinear upsampling to the image size, then Gaussian smoothing
/// (`sigma = 0` skips smoothing).
pub fn postprocess(raw: &Array2<f64>, height: usize, width: usize, sigma: f64) -> AnomalyMap {
    let (h, w) = raw.dim();
    let as3 = raw.clone().into_shape_with_order((h, w, 1)).expect("same element count");
    let up = resize_bilinear(&as3, height, width)
        .index_axis_move(Axis(2), 0);
    AnomalyMap {
        data: gaussian_blur(&up, sigma),
        raw: raw.clone(),
    }
}

/// Population standard deviation of the final map.
pub fn image_score(map: &AnomalyMap) -> f64 {
    let n = map.data.len() as f64;
    let mean = map.data.sum() / n;
    (map.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Write a map as a 16-bit grayscale PNG scaled to its own min/max, a
/// `.txt` sidecar with the scale and shape, and a raw little-endian `f64`
/// dump. `stem` is the output path without extension.
pub fn export_map(map: &Array2<f64>, stem: &Path) -> Result<(f64, f64)> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| SivtError::io(dir, e))?;
    }
    let (h, w) = map.dim();
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels: Vec<u16> = map
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - min) / range * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    let png = stem.with_extension("png");
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, pixels)
        .expect("buffer matches dimensions")
        .save(&png)
        .map_err(|e| SivtError::io(&png, std::io::Error::other(e)))?;

    let sidecar = stem.with_extension("txt");
    fs::write(
        &sidecar,
        format!("height={h}\nwidth={w}\nmin={min:e}\nmax={max:e}\nraw=f64-le\n"),
    )
    .map_err(|e| SivtError::io(&sidecar, e))?;

    let raw = stem.with_extension("f64");
    let file = fs::File::create(&raw).map_err(|e| SivtError::io(&raw, e))?;
    let mut wtr = BufWriter::new(file);
    for &v in map.iter() {
        wtr.write_f64::<LittleEndian>(v).map_err(|e| SivtError::io(&raw, e))?;
    }
    wtr.flush().map_err(|e| SivtError::io(&raw, e))?;
    Ok((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        FeatureMap {
            data: Array3::from_shape_simple_fn((h, w, c), || n.sample(&mut rng)),
        }
    }

    #[test]
    fn loss_special_cases() {
        let f = random_map(3, 2, 4, 1);
        let same = reconstruction_loss(&f, &f, 1.0, 1e-8).unwrap();
        assert!(same.total.abs() < 1e-12);

        let neg = FeatureMap { data: -&f.data };
        let l = reconstruction_loss(&f, &neg, 1.0, 1e-8).unwrap();
        let sq: f64 = f.data.iter().map(|v| v * v).sum();
        assert!((l.l2 - 4.0 * sq).abs() < 1e-9);
        assert!((l.cosine - 2.0 * 6.0).abs() < 1e-12);

        let dbl = FeatureMap { data: &f.data * 2.0 };
        let l = reconstruction_loss(&f, &dbl, 0.5, 1e-8).unwrap();
        assert!(l.cosine.abs() < 1e-12);
        assert!((l.l2 - sq).abs() < 1e-9);
        assert!((l.total - (l.l2 + 0.5 * l.cosine) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_never_nan() {
        let f = FeatureMap::zeros(2, 2, 3);
        let l = reconstruction_loss(&f, &f, 1.0, 1e-8).unwrap();
        assert!(l.total.is_finite());
        let (_, g) = reconstruction_loss_with_grad(&f, &f, 1.0, 1e-8).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(anomaly_map(&f, &f, 1e-8).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let f = random_map(2, 3, 4, 2);
        let r = random_map(2, 3, 4, 3);
        let (_, g) = reconstruction_loss_with_grad(&f, &r, 0.7, 1e-8).unwrap();
        let h = 1e-6;
        for (idx, &analytic) in g.indexed_iter() {
            let mut rp = r.clone();
            rp.data[idx] += h;
            let mut rm = r.clone();
            rm.data[idx] -= h;
            let num = (reconstruction_loss(&f, &rp, 0.7, 1e-8).unwrap().total
                - reconstruction_loss(&f, &rm, 0.7, 1e-8).unwrap().total)
                / (2.0 * h);
            assert!((num - analytic).abs() <= 1e-4 * num.abs().max(1e-6), "{idx:?}");
        }
    }

    #[test]
    fn anomaly_map_matches_scalar_loop() {
        let f = random_map(2, 2, 3, 4);
        let r = random_map(2, 2, 3, 5);
        let map = anomaly_map(&f, &r, 1e-8).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let mut l2 = 0.0;
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for c in 0..3 {
                    let (a, b) = (f.data[[y, x, c]], r.data[[y, x, c]]);
                    l2 += (a - b).powi(2);
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                let expect = l2 * (1.0 - dot / (na.sqrt() * nb.sqrt()));
                assert!((map[[y, x]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anomaly_map_is_local() {
        let f = random_map(4, 4, 3, 6);
        let mut r = f.clone();
        for c in 0..3 {
            r.data[[1, 2, c]] = -f.data[[1, 2, c]];
        }
        let map = anomaly_map(&f, &r, 1e-8).unwrap();
        for ((y, x), &v) in map.indexed_iter() {
            if (y, x) == (1, 2) {
                assert!(v > 0.0);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn postprocess_constant_and_sigma_zero() {
        let raw = Array2::from_elem((4, 4), 0.25);
        let out = postprocess(&raw, 16, 16, 2.0);
        assert!(out.data.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let raw = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let out = postprocess(&raw, 8, 8, 0.0);
        let direct = resize_bilinear(&raw.clone().into_shape_with_order((4, 4, 1)).unwrap(), 8, 8);
        assert_eq!(out.data.into_shape_with_order((8, 8, 1)).unwrap(), direct);
    }

    #[test]
    fn impulse_response_is_sampled_gaussian() {
        let sigma = 1.5;
        let n = 31;
        let mut m = Array2::zeros((n, n));
        m[[15, 15]] = 1.0;
        let out = gaussian_blur(&m, sigma);
        let r = (4.0 * sigma).ceil() as i64;
        let z: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        for dy in -r..=r {
            for dx in -r..=r {
                let expect = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / (z * z);
                let got = out[[(15 + dy) as usize, (15 + dx) as usize]];
                assert!((got - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn image_score_examples() {
        let mk = |v: Vec<f64>| AnomalyMap {
            data: Array2::from_shape_vec((2, 2), v).unwrap(),
            raw: Array2::zeros((1, 1)),
        };
        assert_eq!(image_score(&mk(vec![3.0; 4])), 0.0);
        let s = image_score(&mk(vec![0.0, 0.0, 0.0, 1.0]));
        assert!((s - 3f64.sqrt() / 4.0).abs() < 1e-12);
        let base = mk(vec![0.1, 0.4, 0.2, 0.9]);
        let scaled = mk(vec![0.3, 1.2, 0.6, 2.7]);
        assert!((image_score(&scaled) - 3.0 * image_score(&base)).abs() < 1e-12);
    }

    #[test]
    fn export_writes_png_sidecar_and_raw() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f64 * 0.5);
        let (min, max) = export_map(&map, &dir.path().join("m")).unwrap();
        assert_eq!((min, max), (0.0, 7.0));
        let png = image::open(dir.path().join("m.png")).unwrap().into_luma16();
        assert_eq!(png.dimensions(), (5, 3));
        assert_eq!(png.get_pixel(4, 2)[0], 65535);
        assert_eq!(png.get_pixel(0, 0)[0], 0);
        let raw = fs::read(dir.path().join("m.f64")).unwrap();
        assert_eq!(raw.len(), 15 * 8);
        let side = fs::read_to_string(dir.path().join("m.txt")).unwrap();
        assert!(side.contains("max=7e0"));
    }
}
