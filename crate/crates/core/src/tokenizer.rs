//! Feature map ⇄ patch-token conversion.
//!
//! Patches are `P×P×C` blocks taken in row-major grid order; inside a
//! patch the flattened layout is `(row, col, channel)`.

use ndarray::{s, Array2, Array3};

use crate::backbone::FeatureMap;
use crate::error::{Result, SivtError};
use crate::nn::Linear;

/// Grid of patches covering a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn for_map(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(SivtError::Shape(format!(
                "patch size {patch} does not divide {height}×{width}"
            )));
        }
        Ok(Self {
            rows: height / patch,
            cols: width / patch,
            patch,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Embedded tokens `L×D` together with the grid they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub grid: PatchGrid,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Flatten every patch into a row: `L×(P·P·C)`.
pub fn patchify(feature: &FeatureMap, patch: usize) -> Result<(Array2<f64>, PatchGrid)> {
    let (h, w, c) = feature.shape();
    let grid = PatchGrid::for_map(h, w, c, patch)?;
    let mut rows = Array2::zeros((grid.len(), grid.patch_dim()));
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            let block = feature
                .data
                .slice(s![gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch, ..]);
            let mut row = rows.row_mut(gy * grid.cols + gx);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok((rows, grid))
}

/// Write patch rows back into their grid cells.
pub fn unpatchify(patches: &Array2<f64>, grid: PatchGrid) -> Result<FeatureMap> {
    if patches.nrows() != grid.len() || patches.ncols() != grid.patch_dim() {
        return Err(SivtError::Shape(format!(
            "{}×{} patch rows do not fit a {}×{} grid of width {}",
            patches.nrows(),
            patches.ncols(),
            grid.rows,
            grid.cols,
            grid.patch_dim()
        )));
    }
    let p = grid.patch;
    let mut data = Array3::zeros((grid.rows * p, grid.cols * p, grid.channels));
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            let row = patches.row(gy * grid.cols + gx);
            let mut block = data.slice_mut(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
            for (dst, src) in block.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(FeatureMap { data })
}

/// `token_i = proj(patch_i) + pos_i`.
pub fn patchify_embed(
    feature: &FeatureMap,
    patch: usize,
    proj: &Linear,
    pos: &Array2<f64>,
) -> Result<TokenSequence> {
    let (rows, grid) = patchify(feature, patch)?;
    if proj.in_dim() != grid.patch_dim() {
        return Err(SivtError::Shape(format!(
            "projection expects width {}, patches have {}",
            proj.in_dim(),
            grid.patch_dim()
        )));
    }
    if pos.dim() != (grid.len(), proj.out_dim()) {
        return Err(SivtError::Shape(format!(
            "positional table {:?} does not match {} tokens of width {}",
            pos.dim(),
            grid.len(),
            proj.out_dim()
        )));
    }
    Ok(TokenSequence {
        tokens: proj.forward(&rows) + pos,
        grid,
    })
}

/// Project reconstructed tokens to patch width and reassemble the map.
pub fn unpatchify_project(tokens: &Array2<f64>, inv_proj: &Linear, grid: PatchGrid) -> Result<FeatureMap> {
    if tokens.ncols() != inv_proj.in_dim() {
        return Err(SivtError::Shape(format!(
            "token width {} does not match head input {}",
            tokens.ncols(),
            inv_proj.in_dim()
        )));
    }
    unpatchify(&inv_proj.forward(tokens), grid)
}

/// 1-D sin/cos embedding of dimension `dim`: the first half are sines,
/// the rest cosines, with frequencies `10000^(-2k/dim)`.
fn sincos_1d(dim: usize, position: f64) -> Vec<f64> {
    let half = dim.div_ceil(2);
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        out.push((position / 10000f64.powf(2.0 * k as f64 / dim as f64)).sin());
    }
    for k in 0..dim - half {
        out.push((position / 10000f64.powf(2.0 * k as f64 / dim as f64)).cos());
    }
    out
}

/// Fixed 2-D sinusoidal table `L×D`: half the width encodes the grid row,
/// the other half the column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Array2<f64> {
    let dim_y = dim / 2;
    let dim_x = dim - dim_y;
    let mut table = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            for (i, v) in sincos_1d(dim_y, r as f64).into_iter().enumerate() {
                row[i] = v;
            }
            for (i, v) in sincos_1d(dim_x, c as f64).into_iter().enumerate() {
                row[dim_y + i] = v;
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
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

    /// Random orthonormal `n×n` matrix by Gram–Schmidt.
    fn orthonormal(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut q = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut v = Array1::from_shape_simple_fn(n, || dist.sample(&mut rng));
            for j in 0..i {
                let qj = q.column(j).to_owned();
                let proj = v.dot(&qj);
                v = v - qj * proj;
            }
            let norm = v.dot(&v).sqrt();
            q.column_mut(i).assign(&(v / norm));
        }
        q
    }

    #[test]
    fn token_counts() {
        let f = FeatureMap::zeros(32, 32, 4);
        let (rows, grid) = patchify(&f, 2).unwrap();
        assert_eq!(grid.len(), 256);
        assert_eq!(rows.ncols(), 16);
        let (rows, _) = patchify(&f, 1).unwrap();
        assert_eq!(rows.nrows(), 32 * 32);
        assert!(matches!(patchify(&f, 3), Err(SivtError::Shape(_))));
    }

    #[test]
    fn zero_map_gives_bias_tokens() {
        let f = FeatureMap::zeros(4, 4, 2);
        let mut proj = Linear::zeros(8, 3);
        proj.bias = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let pos = Array2::zeros((4, 3));
        let seq = patchify_embed(&f, 2, &proj, &pos).unwrap();
        for row in seq.tokens.rows() {
            assert_eq!(row.to_vec(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn orthonormal_round_trip() {
        let f = random_map(4, 6, 3, 1);
        let d = 2 * 2 * 3;
        let q = orthonormal(d, 2);
        let proj = Linear {
            weight: q.clone(),
            bias: Array1::zeros(d),
        };
        let inv = Linear {
            weight: q.t().to_owned(),
            bias: Array1::zeros(d),
        };
        let pos = Array2::zeros((6, d));
        let seq = patchify_embed(&f, 2, &proj, &pos).unwrap();
        let back = unpatchify_project(&seq.tokens, &inv, seq.grid).unwrap();
        for (a, b) in f.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn single_patch_is_whole_map() {
        let f = random_map(2, 2, 3, 4);
        let (rows, grid) = patchify(&f, 2).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(rows.row(0).to_vec(), f.data.iter().copied().collect::<Vec<_>>());
        assert_eq!(unpatchify(&rows, grid).unwrap(), f);
        assert!(unpatchify(&rows.slice(s![.., ..4]).to_owned(), grid).is_err());
    }

    #[test]
    fn locality_one_patch_one_token() {
        let f = random_map(6, 6, 2, 5);
        let mut g = f.clone();
        g.data[[3, 4, 1]] += 1.0; // grid cell (1, 2)
        let (a, grid) = patchify(&f, 2).unwrap();
        let (b, _) = patchify(&g, 2).unwrap();
        let changed: Vec<usize> = (0..grid.len()).filter(|&i| a.row(i) != b.row(i)).collect();
        assert_eq!(changed, vec![3 + 2]);
    }

    #[test]
    fn sincos_table_shape_and_values() {
        let t = sincos_2d(2, 3, 8);
        assert_eq!(t.dim(), (6, 8));
        // Position (0, 0): sines 0, cosines 1.
        assert_eq!(t.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // Row index only enters the first half.
        assert_eq!(t.row(1).slice(s![..4]), t.row(0).slice(s![..4]));
        assert!((t[[1, 4]] - 1f64.sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn shape_algebra_and_exact_rearrangement(gr in 1usize..5, gc in 1usize..5, p in 1usize..4, c in 1usize..4, seed in 0u64..100) {
            let f = random_map(gr * p, gc * p, c, seed);
            let (rows, grid) = patchify(&f, p).unwrap();
            prop_assert_eq!(grid.len() * p * p, f.height() * f.width());
            prop_assert_eq!(unpatchify(&rows, grid).unwrap(), f);
        }
    }
}
