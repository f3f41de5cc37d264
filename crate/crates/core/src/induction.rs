//! Self-induction partitioning.
//!
//! The token positions are split into `N` disjoint subsets. Hybrid
//! sequence `i` carries induction-bank tokens on subset `i` and the real
//! tokens everywhere else; after encoding, only the latents at the
//! substituted positions are kept and scattered back into one sequence.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SivtError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InductionPartition {
    subsets: Vec<Vec<usize>>,
    /// `owner[p]` is the subset holding position `p`.
    owner: Vec<usize>,
    seed: Option<u64>,
}

impl InductionPartition {
    /// Build from explicit subsets, checking disjointness and coverage.
    pub fn from_subsets(len: usize, subsets: Vec<Vec<usize>>) -> Result<Self> {
        if subsets.is_empty() {
            return Err(SivtError::Invariant("partition has no subsets".into()));
        }
        let mut owner = vec![usize::MAX; len];
        for (i, set) in subsets.iter().enumerate() {
            for &p in set {
                if p >= len {
                    return Err(SivtError::Invariant(format!(
                        "position {p} outside 0..{len}"
                    )));
                }
                if owner[p] != usize::MAX {
                    return Err(SivtError::Invariant(format!(
                        "position {p} appears in subsets {} and {i}",
                        owner[p]
                    )));
                }
                owner[p] = i;
            }
        }
        if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(SivtError::Invariant(format!("position {p} is not covered")));
        }
        Ok(Self {
            subsets,
            owner,
            seed: None,
        })
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn owner(&self, position: usize) -> usize {
        self.owner[position]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Random permutation of `0..len` cut into `n` contiguous chunks whose
/// sizes differ by at most one (larger chunks first).
pub fn make_partition<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<InductionPartition> {
    if n == 0 || n > len {
        return Err(SivtError::Parameter(format!(
            "subset count {n} must lie in 1..={len}"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    let base = len / n;
    let extra = len % n;
    let mut subsets = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        subsets.push(perm[start..start + size].to_vec());
        start += size;
    }
    InductionPartition::from_subsets(len, subsets)
}

/// [`make_partition`] driven by a fresh ChaCha8 stream for `seed`.
pub fn seeded_partition(len: usize, n: usize, seed: u64) -> Result<InductionPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = make_partition(len, n, &mut rng)?;
    part.seed = Some(seed);
    Ok(part)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridSequence {
    pub tokens: Array2<f64>,
    /// True where an induction token was substituted.
    pub mask: Vec<bool>,
}

/// One hybrid sequence per subset: `phi_i[p] = bank[p]` for `p ∈ S_i`,
/// otherwise `tokens[p]`.
pub fn build_hybrid_sequences(
    tokens: &Array2<f64>,
    bank: &Array2<f64>,
    part: &InductionPartition,
) -> Result<Vec<HybridSequence>> {
    if tokens.dim() != bank.dim() {
        return Err(SivtError::Shape(format!(
            "token sequence {:?} and induction bank {:?} differ",
            tokens.dim(),
            bank.dim()
        )));
    }
    if tokens.nrows() != part.len() {
        return Err(SivtError::Shape(format!(
            "partition covers {} positions, sequence has {}",
            part.len(),
            tokens.nrows()
        )));
    }
    Ok(part
        .subsets()
        .iter()
        .map(|set| {
            let mut phi = tokens.clone();
            let mut mask = vec![false; tokens.nrows()];
            for &p in set {
                phi.row_mut(p).assign(&bank.row(p));
                mask[p] = true;
            }
            HybridSequence { tokens: phi, mask }
        })
        .collect())
}

/// Keep row `p` of `latents[i]` for the subset `i` that owns `p`.
pub fn reassemble_latents(latents: &[Array2<f64>], part: &InductionPartition) -> Result<Array2<f64>> {
    if latents.len() != part.num_subsets() {
        return Err(SivtError::Invariant(format!(
            "{} latent sequences for {} subsets",
            latents.len(),
            part.num_subsets()
        )));
    }
    let dim = latents[0].raw_dim();
    if dim[0] != part.len() || latents.iter().any(|z| z.raw_dim() != dim) {
        return Err(SivtError::Shape("latent sequences differ in shape".into()));
    }
    let mut out = Array2::zeros(dim);
    for (i, set) in part.subsets().iter().enumerate() {
        for &p in set {
            out.row_mut(p).assign(&latents[i].row(p));
        }
    }
    Ok(out)
}

/// Adjoint of [`reassemble_latents`]: route each gradient row to the
/// sequence it was taken from, zeros elsewhere.
pub fn scatter_latent_grad(grad: &Array2<f64>, part: &InductionPartition) -> Vec<Array2<f64>> {
    part.subsets()
        .iter()
        .map(|set| {
            let mut g = Array2::zeros(grad.raw_dim());
            for &p in set {
                g.row_mut(p).assign(&grad.row(p));
            }
            g
        })
        .collect()
}
