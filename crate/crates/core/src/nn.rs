//! Transformer building blocks with explicit backward passes.
//!
//! Everything operates on `L×D` matrices in `f64`. Each forward returns a
//! cache that the matching backward consumes; parameter gradients are
//! accumulated into a structure of the same type as the parameters.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SivtError};

/// Named views over every tensor of a parameter structure, in a fixed
/// order. Gradients share the parameter type, so the two walks line up.
pub trait ParamTree {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>);
    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>);

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.named("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.named_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn add_assign_(&mut self, other: &Self) {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst += &s;
        }
    }

    fn scale_(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal samples with std `std`, redrawn when beyond two std.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || truncated_normal(rng, std)),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl ParamTree for Linear {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        let Linear { weight, bias } = self;
        out.push((join(prefix, "weight"), weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centered * rstd.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&mean_dxhat)
            .and(&mean_dxhat_xhat)
            .and(&cache.rstd)
            .for_each(|mut row, xh, &m1, &m2, &r| {
                Zip::from(&mut row).and(&xh).for_each(|g, &xv| *g = r * (*g - m1 - xv * m2));
            });
        dx
    }
}

impl ParamTree for LayerNorm {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "gamma"), self.gamma.view().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view().into_dyn()));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        let LayerNorm { gamma, beta } = self;
        out.push((join(prefix, "gamma"), gamma.view_mut().into_dyn()));
        out.push((join(prefix, "beta"), beta.view_mut().into_dyn()));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities, one `L×L` matrix per head.
    pub probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(dim: usize, mlp_ratio: usize, std: f64, rng: &mut R) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::init(dim, 3 * dim, std, rng),
            proj: Linear::init(dim, dim, std, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, std, rng),
            fc2: Linear::init(hidden, dim, std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn forward(&self, x: &Array2<f64>, heads: usize, eps: f64) -> (Array2<f64>, BlockCache) {
        let (l, d) = x.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, ln1) = self.ln1.forward(x, eps);
        let qkv = self.qkv.forward(&h1);
        let mut attn = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = softmax_rows(&(q.dot(&k.t()) * scale));
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let x1 = x + &self.proj.forward(&attn);
        let (h2, ln2) = self.ln2.forward(&x1, eps);
        let pre_act = self.fc1.forward(&h2);
        let act = pre_act.mapv(gelu);
        let y = &x1 + &self.fc2.forward(&act);
        let cache = BlockCache {
            x: x.clone(),
            ln1,
            h1,
            qkv,
            probs,
            attn,
            ln2,
            h2,
            pre_act,
            act,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, heads: usize, grad: &mut Block) -> Array2<f64> {
        let (_, d) = cache.x.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch.
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward(&cache.h2, &dpre, &mut grad.fc1);
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);

        // Attention branch.
        let dattn = self.proj.backward(&cache.attn, &dx1, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dout = dattn.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        let dh1 = self.qkv.backward(&cache.h1, &dqkv, &mut grad.qkv);
        dx1 + self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1)
    }
}

impl ParamTree for Block {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.ln1.named(&join(prefix, "ln1"), out);
        self.qkv.named(&join(prefix, "qkv"), out);
        self.proj.named(&join(prefix, "proj"), out);
        self.ln2.named(&join(prefix, "ln2"), out);
        self.fc1.named(&join(prefix, "fc1"), out);
        self.fc2.named(&join(prefix, "fc2"), out);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        let Block {
            ln1,
            qkv,
            proj,
            ln2,
            fc1,
            fc2,
        } = self;
        ln1.named_mut(&join(prefix, "ln1"), out);
        qkv.named_mut(&join(prefix, "qkv"), out);
        proj.named_mut(&join(prefix, "proj"), out);
        ln2.named_mut(&join(prefix, "ln2"), out);
        fc1.named_mut(&join(prefix, "fc1"), out);
        fc2.named_mut(&join(prefix, "fc2"), out);
    }
}

impl ParamTree for Vec<Block> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        for (i, b) in self.iter().enumerate() {
            b.named(&join(prefix, &i.to_string()), out);
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        for (i, b) in self.iter_mut().enumerate() {
            b.named_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Run a block stack, failing on the first block that produces a
/// non-finite activation.
pub fn stack_forward(
    blocks: &[Block],
    x: &Array2<f64>,
    heads: usize,
    eps: f64,
    label: &str,
) -> Result<(Array2<f64>, Vec<BlockCache>)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let (y, cache) = block.forward(&h, heads, eps);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SivtError::NonFinite {
                stage: format!("{label} block {i}"),
            });
        }
        caches.push(cache);
        h = y;
    }
    Ok((h, caches))
}

pub fn stack_backward(
    blocks: &[Block],
    caches: &[BlockCache],
    dy: Array2<f64>,
    heads: usize,
    grads: &mut [Block],
) -> Array2<f64> {
    let mut d = dy;
    for i in (0..blocks.len()).rev() {
        d = blocks[i].backward(&caches[i], &d, heads, &mut grads[i]);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
    }

    /// Central-difference check of `sum(y ⊙ w)` for a block, against both
    /// input and parameter gradients.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, d, heads) = (5, 8, 2);
        let mut block = Block::init(d, 2, 0.3, &mut rng);
        block.ln1.gamma.mapv_inplace(|_| 1.0 + 0.1 * truncated_normal(&mut rng, 1.0));
        block.ln2.beta.mapv_inplace(|_| 0.1 * truncated_normal(&mut rng, 1.0));
        let x = random(l, d, &mut rng);
        let w = random(l, d, &mut rng);
        let loss = |b: &Block, x: &Array2<f64>| (b.forward(x, heads, 1e-6).0 * &w).sum();

        let (_, cache) = block.forward(&x, heads, 1e-6);
        let mut grad = block.zeros_like();
        let dx = block.backward(&cache, &w, heads, &mut grad);

        let h = 1e-5;
        for i in 0..l {
            for j in 0..d {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-7 * (1.0 + num.abs()), "dx[{i},{j}]");
            }
        }
        let analytic: Vec<(String, Vec<f64>)> = grad
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().copied().collect()))
            .collect();
        for (ti, (name, g)) in analytic.iter().enumerate() {
            for (k, &gk) in g.iter().enumerate() {
                let mut bp = block.clone();
                bp.tensors_mut()[ti].1.as_slice_mut().unwrap()[k] += h;
                let mut bm = block.clone();
                bm.tensors_mut()[ti].1.as_slice_mut().unwrap()[k] -= h;
                let num = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
                assert!((num - gk).abs() < 1e-7 * (1.0 + num.abs()), "{name}[{k}]");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = softmax_rows(&(random(7, 7, &mut rng) * 30.0));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_query_key_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, d) = (6, 8);
        let mut block = Block::init(d, 2, 0.2, &mut rng);
        block.qkv.weight.slice_mut(s![.., ..2 * d]).fill(0.0);
        let x = random(l, d, &mut rng);
        let (_, cache) = block.forward(&x, 2, 1e-6);
        for p in &cache.probs {
            assert!(p.iter().all(|v| (v - 1.0 / l as f64).abs() < 1e-15));
        }
        // Each attention row is the mean of the value rows.
        let (h1, _) = block.ln1.forward(&x, 1e-6);
        let v = block.qkv.forward(&h1).slice(s![.., 2 * d..]).to_owned();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in cache.attn.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
