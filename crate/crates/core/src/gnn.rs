//! GATv2 encoder over the subassembly lattice and the masked Q-head, with a
//! hand-written reverse pass.
//!
//! Node `v` attends over `N+(v) ∪ {v}` where `N+(v) = { v ∪ {p} : p ∉ v }`:
//!
//! ```text
//! e_vu  = a · LeakyReLU(Θ1 h_v + Θ2 h_u)
//! α_vu  = softmax_u(e_vu)
//! h'_v  = Σ_u α_vu Θ2 h_u
//! Q(v,u) = Θ3 · ReLU(Θ4 [h_v ‖ h_u])
//! ```
//!
//! Heads are concatenated between layers and averaged at the last one.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::world::{voxelize_all, Instance, SubassemblyMask, VOXELS};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const CHECKPOINT_FORMAT: &str = "subasm-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error("non-finite value in {stage} at node {node}")]
    NonFinite { stage: &'static str, node: u32 },
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward called without a recorded forward pass")]
    EmptyTape,
    #[error("gradient count {got} does not match {expected} recorded outputs")]
    OutputCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dense row-major array with a same-shape gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self, GnnError> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(GnnError::Shape {
                what: "tensor values".into(),
                expected: vec![n],
                got: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: vec![T::zero(); n],
            values,
        })
    }

    /// Glorot-uniform entries in `[-limit, limit]`, `limit = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for x in &mut t.values {
            *x = T::of(rng.gen_range(-limit..=limit));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    /// Values and gradient together, for optimizers.
    pub fn values_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (&mut self.values, &self.grad)
    }

    /// Values for reading alongside the gradient for accumulation.
    pub fn values_grad_mut(&mut self) -> (&[T], &mut [T]) {
        (&self.values, &mut self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn fill(&mut self, value: T) {
        self.values.fill(value);
    }
}

/// Shape of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Node feature width `d`.
    pub in_dim: usize,
    /// Output width of one attention head.
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_dim: VOXELS,
            head_dim: 16,
            heads: 8,
            layers: 2,
        }
    }
}

impl NetConfig {
    /// Width of the final embedding (heads are averaged at the last layer).
    pub fn embed_dim(&self) -> usize {
        self.head_dim
    }

    fn layer_dims(&self, l: usize) -> (usize, bool) {
        let in_dim = if l == 0 { self.in_dim } else { self.heads * self.head_dim };
        (in_dim, l + 1 < self.layers)
    }

    fn validate(&self) -> Result<(), GnnError> {
        if self.in_dim == 0 || self.head_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(GnnError::Shape {
                what: "network config (all sizes must be positive)".into(),
                expected: vec![1, 1, 1, 1],
                got: vec![self.in_dim, self.head_dim, self.heads, self.layers],
            });
        }
        Ok(())
    }
}

/// One attention layer: `attn` is `[H, out]`, `theta1`/`theta2` are `[H, out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    pub attn: Tensor<T>,
    pub theta1: Tensor<T>,
    pub theta2: Tensor<T>,
    /// Concatenate heads (hidden layers) or average them (last layer).
    pub concat: bool,
}

impl<T: Scalar> GatLayerParams<T> {
    pub fn heads(&self) -> usize {
        self.theta1.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.theta1.shape[1]
    }

    pub fn in_dim(&self) -> usize {
        self.theta1.shape[2]
    }

    pub fn output_width(&self) -> usize {
        if self.concat {
            self.heads() * self.out_dim()
        } else {
            self.out_dim()
        }
    }

    pub fn zeros(heads: usize, in_dim: usize, out_dim: usize, concat: bool) -> Self {
        GatLayerParams {
            attn: Tensor::zeros(&[heads, out_dim]),
            theta1: Tensor::zeros(&[heads, out_dim, in_dim]),
            theta2: Tensor::zeros(&[heads, out_dim, in_dim]),
            concat,
        }
    }
}

/// `theta3` is `[f]`, `theta4` is `[f, 2f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QHeadParams<T> {
    pub theta3: Tensor<T>,
    pub theta4: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNetParams<T> {
    pub config: NetConfig,
    pub layers: Vec<GatLayerParams<T>>,
    pub head: QHeadParams<T>,
}

impl<T: Scalar> QNetParams<T> {
    pub fn zeros(config: NetConfig) -> Self {
        let layers = (0..config.layers)
            .map(|l| {
                let (in_dim, concat) = config.layer_dims(l);
                GatLayerParams::zeros(config.heads, in_dim, config.head_dim, concat)
            })
            .collect();
        let f = config.embed_dim();
        QNetParams {
            config,
            layers,
            head: QHeadParams {
                theta3: Tensor::zeros(&[f]),
                theta4: Tensor::zeros(&[f, 2 * f]),
            },
        }
    }

    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let (h, o) = (config.heads, config.head_dim);
        for layer in &mut p.layers {
            let i = layer.in_dim();
            layer.attn = Tensor::glorot(&[h, o], o, 1, rng);
            layer.theta1 = Tensor::glorot(&[h, o, i], i, o, rng);
            layer.theta2 = Tensor::glorot(&[h, o, i], i, o, rng);
        }
        let f = config.embed_dim();
        p.head.theta4 = Tensor::glorot(&[f, 2 * f], 2 * f, f, rng);
        p.head.theta3 = Tensor::glorot(&[f], f, 1, rng);
        p
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn"), &layer.attn));
            out.push((format!("layers.{l}.theta1"), &layer.theta1));
            out.push((format!("layers.{l}.theta2"), &layer.theta2));
        }
        out.push(("head.theta3".into(), &self.head.theta3));
        out.push(("head.theta4".into(), &self.head.theta4));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.attn);
            out.push(&mut layer.theta1);
            out.push(&mut layer.theta2);
        }
        out.push(&mut self.head.theta3);
        out.push(&mut self.head.theta4);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Copies parameter values (not gradients) from `other`.
    pub fn copy_values_from(&mut self, other: &QNetParams<T>) {
        assert_eq!(self.config, other.config, "copying between differently shaped networks");
        let src: Vec<&[T]> = other.named_tensors().into_iter().map(|(_, t)| t.values()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.values_mut().copy_from_slice(src);
        }
    }

    /// Values of every tensor equal (bitwise for finite numbers).
    pub fn values_equal(&self, other: &QNetParams<T>) -> bool {
        self.config == other.config
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors().iter())
                .all(|((_, a), (_, b))| a.values() == b.values())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.into(),
            config: self.config,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self, GnnError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GnnError::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.dtype != T::DTYPE {
            return Err(GnnError::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                ck.dtype,
                T::DTYPE
            )));
        }
        ck.config.validate()?;
        let mut params = Self::zeros(ck.config);
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != ck.tensors.len() {
            return Err(GnnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ck.tensors.len()
            )));
        }
        for ((dst, (name, shape)), src) in params.tensors_mut().into_iter().zip(expected).zip(ck.tensors) {
            if src.name != name || src.shape != shape {
                return Err(GnnError::Shape {
                    what: format!("tensor {} (found {})", name, src.name),
                    expected: shape,
                    got: src.shape,
                });
            }
            *dst = Tensor::from_vec(&shape, src.values)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|source| GnnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GnnError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GnnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// Structured-text checkpoint: every tensor with its name and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: NetConfig,
    pub tensors: Vec<NamedTensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Input features of every lattice node, row `v.bits()`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures<T> {
    m: usize,
    dim: usize,
    rows: Vec<T>,
}

impl<T: Scalar> NodeFeatures<T> {
    pub fn new(m: usize, dim: usize, rows: Vec<T>) -> Result<Self, GnnError> {
        if rows.len() != (1 << m) * dim {
            return Err(GnnError::Shape {
                what: "node features".into(),
                expected: vec![1 << m, dim],
                got: vec![rows.len()],
            });
        }
        Ok(NodeFeatures { m, dim, rows })
    }

    /// Voxel occupancy of every subassembly.
    pub fn from_instance(instance: &Instance) -> Self {
        let rows = voxelize_all(instance)
            .iter()
            .flat_map(|f| f.values.iter().map(|&b| T::of(f64::from(b))))
            .collect();
        NodeFeatures {
            m: instance.m(),
            dim: VOXELS,
            rows,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        1 << self.m
    }

    pub fn row(&self, v: SubassemblyMask) -> &[T] {
        let i = v.index() * self.dim;
        &self.rows[i..i + self.dim]
    }

    /// Same features under a relabeling of part ids: part `p` becomes `perm[p]`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.m);
        let mut rows = vec![T::zero(); self.rows.len()];
        for bits in 0..(1u32 << self.m) {
            let v = SubassemblyMask::from_bits(bits);
            let w = relabel_mask(v, perm);
            rows[w.index() * self.dim..(w.index() + 1) * self.dim].copy_from_slice(self.row(v));
        }
        NodeFeatures { m: self.m, dim: self.dim, rows }
    }
}

pub fn relabel_mask(v: SubassemblyMask, perm: &[usize]) -> SubassemblyMask {
    SubassemblyMask::from_parts(v.parts().map(|p| perm[p]))
}

/// `v` itself, then `v ∪ {p}` for every missing `p` in ascending order.
pub fn neighborhood(v: SubassemblyMask, m: usize) -> impl Iterator<Item = SubassemblyMask> {
    std::iter::once(v).chain(v.missing(m).map(move |p| v.with(p)))
}

/// Score given to masked (already placed) parts: the most negative finite value.
pub fn mask_sentinel<T: Scalar>() -> T {
    T::min_value()
}

pub fn is_masked<T: Scalar>(q: T) -> bool {
    q == mask_sentinel::<T>()
}

/// Highest admissible score, ties to the lowest part id; `None` when every entry is masked.
pub fn argmax_admissible<T: Scalar>(q: &[T], v: SubassemblyMask) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (p, &x) in q.iter().enumerate() {
        if v.contains(p) || is_masked(x) {
            continue;
        }
        if best.is_none_or(|b| x > q[b]) {
            best = Some(p);
        }
    }
    best
}

/// Up to `k` admissible parts by descending score, ties to the lowest part id.
pub fn top_k_admissible<T: Scalar>(q: &[T], v: SubassemblyMask, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len())
        .filter(|&p| !v.contains(p) && !is_masked(q[p]))
        .collect();
    idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[inline]
fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_SLOPE)
    }
}

#[inline]
fn leaky_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation order is
/// fixed, so results stay bitwise reproducible.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[r] = Σ_c w[r, c] x[c]` for a row-major `[rows, x.len()]` block.
#[inline]
fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Row-wise ops on `[rows, cols]` blocks used by the reverse pass:
/// `dw += dy ⊗ x` and `dx += wᵀ dy`.
#[inline]
fn matvec_backward<T: Scalar>(w: &[T], x: &[T], dy: &[T], dw: &mut [T], dx: Option<&mut [T]>) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, &xi) in row.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (r, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (d, &wi) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *d += g * wi;
            }
        }
    }
}

/// Everything one layer computed for a subset of nodes.
#[derive(Clone, Debug)]
struct LayerRecord<T> {
    in_dim: usize,
    /// Input rows, one per input node.
    h_in: Vec<T>,
    /// `Θ2 h` for every input node, `[n_in, H, out]`.
    p2: Vec<T>,
    /// Input index of every target node.
    targets: Vec<usize>,
    /// `Θ1 h` for every target, `[n_t, H, out]`.
    p1: Vec<T>,
    /// Neighborhood of every target as input indices, self first.
    nbrs: Vec<Vec<usize>>,
    /// Attention per target: `[|nbrs|, H]`.
    alpha: Vec<Vec<T>>,
    /// Output rows, one per target.
    out: Vec<T>,
    out_width: usize,
}

/// Masks whose embeddings each layer must produce, last layer first.
fn plan_node_sets(final_nodes: &[SubassemblyMask], m: usize, layers: usize) -> Vec<Vec<SubassemblyMask>> {
    let mut sets = vec![dedup(final_nodes.to_vec())];
    for _ in 0..layers {
        let prev = sets.last().expect("non-empty");
        let mut next: Vec<SubassemblyMask> = prev.iter().flat_map(|&v| neighborhood(v, m)).collect();
        next = dedup(next);
        sets.push(next);
    }
    sets.reverse();
    sets
}

fn dedup(mut v: Vec<SubassemblyMask>) -> Vec<SubassemblyMask> {
    v.sort_unstable();
    v.dedup();
    v
}

fn layer_forward<T: Scalar>(
    layer: &GatLayerParams<T>,
    inputs: &[SubassemblyMask],
    h_in: Vec<T>,
    targets: &[SubassemblyMask],
    m: usize,
) -> Result<LayerRecord<T>, GnnError> {
    let (h, o, d) = (layer.heads(), layer.out_dim(), layer.in_dim());
    debug_assert_eq!(h_in.len(), inputs.len() * d);
    let mut slot = vec![usize::MAX; 1 << m];
    for (i, v) in inputs.iter().enumerate() {
        slot[v.index()] = i;
    }
    let t1 = layer.theta1.values();
    let t2 = layer.theta2.values();
    let attn = layer.attn.values();
    let ho = h * o;

    let mut p2 = vec![T::zero(); inputs.len() * ho];
    for i in 0..inputs.len() {
        let x = &h_in[i * d..(i + 1) * d];
        for k in 0..h {
            matvec(&t2[k * o * d..(k + 1) * o * d], x, &mut p2[i * ho + k * o..i * ho + (k + 1) * o]);
        }
    }

    let target_idx: Vec<usize> = targets.iter().map(|v| slot[v.index()]).collect();
    let mut p1 = vec![T::zero(); targets.len() * ho];
    for (t, &i) in target_idx.iter().enumerate() {
        let x = &h_in[i * d..(i + 1) * d];
        for k in 0..h {
            matvec(&t1[k * o * d..(k + 1) * o * d], x, &mut p1[t * ho + k * o..t * ho + (k + 1) * o]);
        }
    }

    let out_width = layer.output_width();
    let mut out = vec![T::zero(); targets.len() * out_width];
    let mut nbrs = Vec::with_capacity(targets.len());
    let mut alphas = Vec::with_capacity(targets.len());
    let inv_h = T::one() / T::of(h as f64);
    let mut s = vec![T::zero(); o];
    for (t, &v) in targets.iter().enumerate() {
        let nb: Vec<usize> = neighborhood(v, m).map(|u| slot[u.index()]).collect();
        let mut alpha = vec![T::zero(); nb.len() * h];
        for k in 0..h {
            let a = &attn[k * o..(k + 1) * o];
            let p1k = &p1[t * ho + k * o..t * ho + (k + 1) * o];
            let mut max = T::neg_infinity();
            for (j, &u) in nb.iter().enumerate() {
                let p2k = &p2[u * ho + k * o..u * ho + (k + 1) * o];
                for c in 0..o {
                    s[c] = leaky(p1k[c] + p2k[c]);
                }
                let e = dot(a, &s);
                if !e.is_finite() {
                    return Err(GnnError::NonFinite { stage: "attention logits", node: v.bits() });
                }
                alpha[j * h + k] = e;
                max = max.max(e);
            }
            let mut z = T::zero();
            for j in 0..nb.len() {
                let w = (alpha[j * h + k] - max).exp();
                alpha[j * h + k] = w;
                z += w;
            }
            for j in 0..nb.len() {
                alpha[j * h + k] /= z;
            }
            let row = &mut out[t * out_width..(t + 1) * out_width];
            for (j, &u) in nb.iter().enumerate() {
                let w = alpha[j * h + k];
                let p2k = &p2[u * ho + k * o..u * ho + (k + 1) * o];
                if layer.concat {
                    for c in 0..o {
                        row[k * o + c] += w * p2k[c];
                    }
                } else {
                    for c in 0..o {
                        row[c] += w * inv_h * p2k[c];
                    }
                }
            }
        }
        nbrs.push(nb);
        alphas.push(alpha);
    }
    if let Some(t) = out.iter().position(|x| !x.is_finite()) {
        return Err(GnnError::NonFinite {
            stage: "layer output",
            node: targets[t / out_width].bits(),
        });
    }
    Ok(LayerRecord {
        in_dim: d,
        h_in,
        p2,
        targets: target_idx,
        p1,
        nbrs,
        alpha: alphas,
        out,
        out_width,
    })
}

/// Forward pass restricted to what `final_nodes` need. Returns the layer records
/// and the final node list (row order of the last record's output).
fn forward_subset<T: Scalar>(
    params: &QNetParams<T>,
    feats: &NodeFeatures<T>,
    final_nodes: &[SubassemblyMask],
) -> Result<(Vec<LayerRecord<T>>, Vec<SubassemblyMask>), GnnError> {
    check_features(params, feats)?;
    let m = feats.m();
    let mut sets = plan_node_sets(final_nodes, m, params.layers.len());
    let mut h: Vec<T> = sets[0].iter().flat_map(|&v| feats.row(v).iter().copied()).collect();
    let mut records = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let rec = layer_forward(layer, &sets[l], h, &sets[l + 1], m)?;
        h = rec.out.clone();
        records.push(rec);
    }
    Ok((records, sets.pop().expect("final set")))
}

fn check_features<T: Scalar>(params: &QNetParams<T>, feats: &NodeFeatures<T>) -> Result<(), GnnError> {
    if feats.dim() != params.config.in_dim {
        return Err(GnnError::Shape {
            what: "feature width".into(),
            expected: vec![params.config.in_dim],
            got: vec![feats.dim()],
        });
    }
    Ok(())
}

/// Final embeddings of all `2^M` nodes, row `v.bits()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    pub m: usize,
    pub dim: usize,
    pub rows: Vec<T>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn row(&self, v: SubassemblyMask) -> &[T] {
        let i = v.index() * self.dim;
        &self.rows[i..i + self.dim]
    }
}

/// Attention of every node over its neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    /// Per node `v` (indexed by bits): `(u, α per head)` with `u` in neighborhood order.
    pub per_node: Vec<Vec<(SubassemblyMask, Vec<T>)>>,
}

/// Attention coefficients of one layer given input embeddings for all nodes.
pub fn attention_coefficients<T: Scalar>(
    layer: &GatLayerParams<T>,
    h: &[T],
    m: usize,
) -> Result<Attention<T>, GnnError> {
    let n = 1usize << m;
    if h.len() != n * layer.in_dim() {
        return Err(GnnError::Shape {
            what: "layer input".into(),
            expected: vec![n, layer.in_dim()],
            got: vec![h.len()],
        });
    }
    let nodes: Vec<SubassemblyMask> = (0..n as u32).map(SubassemblyMask::from_bits).collect();
    let rec = layer_forward(layer, &nodes, h.to_vec(), &nodes, m)?;
    let heads = layer.heads();
    let per_node = nodes
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            neighborhood(v, m)
                .enumerate()
                .map(|(j, u)| (u, rec.alpha[t][j * heads..(j + 1) * heads].to_vec()))
                .collect()
        })
        .collect();
    Ok(Attention { per_node })
}

/// Output of one layer for every node.
pub fn layer_outputs<T: Scalar>(layer: &GatLayerParams<T>, h: &[T], m: usize) -> Result<Vec<T>, GnnError> {
    let nodes: Vec<SubassemblyMask> = (0..1u32 << m).map(SubassemblyMask::from_bits).collect();
    Ok(layer_forward(layer, &nodes, h.to_vec(), &nodes, m)?.out)
}

/// Final embeddings of every lattice node.
pub fn message_pass<T: Scalar>(params: &QNetParams<T>, feats: &NodeFeatures<T>) -> Result<Embeddings<T>, GnnError> {
    let all: Vec<SubassemblyMask> = (0..feats.node_count() as u32).map(SubassemblyMask::from_bits).collect();
    let (records, _) = forward_subset(params, feats, &all)?;
    let last = records.last().expect("at least one layer");
    Ok(Embeddings {
        m: feats.m(),
        dim: last.out_width,
        rows: last.out.clone(),
    })
}

fn head_forward<T: Scalar>(head: &QHeadParams<T>, hv: &[T], hu: &[T], z: &mut [T]) -> T {
    let f = hv.len();
    let t4 = head.theta4.values();
    let t3 = head.theta3.values();
    let mut q = T::zero();
    for r in 0..f {
        let row = &t4[r * 2 * f..(r + 1) * 2 * f];
        z[r] = dot(&row[..f], hv) + dot(&row[f..], hu);
        if z[r] > T::zero() {
            q += t3[r] * z[r];
        }
    }
    q
}

/// Scores of all `M` parts at `v` from precomputed embeddings; placed parts get
/// the mask sentinel.
pub fn q_values<T: Scalar>(params: &QNetParams<T>, emb: &Embeddings<T>, v: SubassemblyMask) -> Vec<T> {
    let mut z = vec![T::zero(); emb.dim];
    (0..emb.m)
        .map(|p| {
            if v.contains(p) {
                mask_sentinel()
            } else {
                head_forward(&params.head, emb.row(v), emb.row(v.with(p)), &mut z)
            }
        })
        .collect()
}

/// Scores of all `M` parts at `v`, computing only the embeddings they depend on.
pub fn q_values_at<T: Scalar>(
    params: &QNetParams<T>,
    feats: &NodeFeatures<T>,
    v: SubassemblyMask,
) -> Result<Vec<T>, GnnError> {
    let m = feats.m();
    let actions: Vec<usize> = v.missing(m).collect();
    let mut tape = Tape::new();
    let scores = tape.record_q(params, feats, v, &actions)?;
    let mut q = vec![mask_sentinel(); m];
    for (&p, s) in actions.iter().zip(scores) {
        q[p] = s;
    }
    Ok(q)
}

/// Recorded forward passes for the reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    entries: Vec<TapeEntry<T>>,
}

#[derive(Debug)]
struct TapeEntry<T> {
    records: Vec<LayerRecord<T>>,
    /// Final-layer row of `v` and of each `v ∪ {p}`.
    v_row: usize,
    u_rows: Vec<usize>,
    /// Head pre-activations per recorded action.
    z: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { entries: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of recorded scalar outputs.
    pub fn output_count(&self) -> usize {
        self.entries.iter().map(|e| e.u_rows.len()).sum()
    }

    /// Computes `Q(v, v ∪ {p})` for each listed action and records what the reverse
    /// pass needs. Every action must be admissible at `v`.
    pub fn record_q(
        &mut self,
        params: &QNetParams<T>,
        feats: &NodeFeatures<T>,
        v: SubassemblyMask,
        actions: &[usize],
    ) -> Result<Vec<T>, GnnError> {
        for &p in actions {
            assert!(p < feats.m() && !v.contains(p), "action {p} is not admissible at {v:?}");
        }
        let mut finals = vec![v];
        finals.extend(actions.iter().map(|&p| v.with(p)));
        let (records, order) = forward_subset(params, feats, &finals)?;
        let row_of = |w: SubassemblyMask| order.binary_search(&w).expect("requested node present");
        let last = records.last().expect("at least one layer");
        let f = last.out_width;
        let v_row = row_of(v);
        let hv = &last.out[v_row * f..(v_row + 1) * f];
        let mut u_rows = Vec::with_capacity(actions.len());
        let mut zs = Vec::with_capacity(actions.len());
        let mut qs = Vec::with_capacity(actions.len());
        for &p in actions {
            let u_row = row_of(v.with(p));
            let hu = &last.out[u_row * f..(u_row + 1) * f];
            let mut z = vec![T::zero(); f];
            let q = head_forward(&params.head, hv, hu, &mut z);
            if !q.is_finite() {
                return Err(GnnError::NonFinite { stage: "q-head", node: v.bits() });
            }
            u_rows.push(u_row);
            zs.push(z);
            qs.push(q);
        }
        self.entries.push(TapeEntry {
            records,
            v_row,
            u_rows,
            z: zs,
        });
        Ok(qs)
    }

    /// Accumulates `Σ d_outputs[i] · ∂out_i/∂θ` into the parameter gradients, where
    /// outputs are in recording order.
    pub fn backward(&self, params: &mut QNetParams<T>, d_outputs: &[T]) -> Result<(), GnnError> {
        if self.entries.is_empty() {
            return Err(GnnError::EmptyTape);
        }
        if d_outputs.len() != self.output_count() {
            return Err(GnnError::OutputCount {
                expected: self.output_count(),
                got: d_outputs.len(),
            });
        }
        let mut offset = 0;
        for entry in &self.entries {
            let n = entry.u_rows.len();
            entry_backward(params, entry, &d_outputs[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn entry_backward<T: Scalar>(params: &mut QNetParams<T>, entry: &TapeEntry<T>, dq: &[T]) {
    let last = entry.records.last().expect("at least one layer");
    let f = last.out_width;
    let mut d_out = vec![T::zero(); last.out.len()];
    {
        let (t3, d3) = params.head.theta3.values_grad_mut();
        let (t4, d4) = params.head.theta4.values_grad_mut();
        let hv = &last.out[entry.v_row * f..(entry.v_row + 1) * f];
        for ((&g, &u_row), z) in dq.iter().zip(&entry.u_rows).zip(&entry.z) {
            if g == T::zero() {
                continue;
            }
            let hu = &last.out[u_row * f..(u_row + 1) * f];
            let mut dz = vec![T::zero(); f];
            for r in 0..f {
                if z[r] > T::zero() {
                    d3[r] += g * z[r];
                    dz[r] = g * t3[r];
                }
            }
            for r in 0..f {
                if dz[r] == T::zero() {
                    continue;
                }
                let row = &t4[r * 2 * f..(r + 1) * 2 * f];
                let drow = &mut d4[r * 2 * f..(r + 1) * 2 * f];
                for c in 0..f {
                    drow[c] += dz[r] * hv[c];
                    drow[f + c] += dz[r] * hu[c];
                    d_out[entry.v_row * f + c] += dz[r] * row[c];
                    d_out[u_row * f + c] += dz[r] * row[f + c];
                }
            }
        }
    }
    for l in (0..entry.records.len()).rev() {
        let need_input_grad = l > 0;
        d_out = layer_backward(&mut params.layers[l], &entry.records[l], &d_out, need_input_grad);
    }
}

/// Reverse pass of one layer. Returns the gradient w.r.t. its input rows (empty
/// when not requested).
fn layer_backward<T: Scalar>(
    layer: &mut GatLayerParams<T>,
    rec: &LayerRecord<T>,
    d_out: &[T],
    need_input_grad: bool,
) -> Vec<T> {
    let (h, o, d) = (layer.heads(), layer.out_dim(), rec.in_dim);
    let ho = h * o;
    let n_in = rec.h_in.len() / d;
    let mut dp1 = vec![T::zero(); rec.p1.len()];
    let mut dp2 = vec![T::zero(); rec.p2.len()];
    let inv_h = T::one() / T::of(h as f64);
    let mut dalpha = Vec::new();
    let mut s = vec![T::zero(); o];
    {
        let (attn, d_attn) = layer.attn.values_grad_mut();
        for (t, nb) in rec.nbrs.iter().enumerate() {
            let row = &d_out[t * rec.out_width..(t + 1) * rec.out_width];
            if row.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let alpha = &rec.alpha[t];
            for k in 0..h {
                let mut dok = vec![T::zero(); o];
                for c in 0..o {
                    dok[c] = if layer.concat { row[k * o + c] } else { row[c] * inv_h };
                }
                dalpha.clear();
                let mut weighted = T::zero();
                for (j, &u) in nb.iter().enumerate() {
                    let a = alpha[j * h + k];
                    let p2k = &rec.p2[u * ho + k * o..u * ho + (k + 1) * o];
                    let da = dot(&dok, p2k);
                    dalpha.push(da);
                    weighted += a * da;
                    let dp2k = &mut dp2[u * ho + k * o..u * ho + (k + 1) * o];
                    for c in 0..o {
                        dp2k[c] += a * dok[c];
                    }
                }
                let ak = &attn[k * o..(k + 1) * o];
                for (j, &u) in nb.iter().enumerate() {
                    let de = alpha[j * h + k] * (dalpha[j] - weighted);
                    if de == T::zero() {
                        continue;
                    }
                    let (p1, p2) = (&rec.p1[t * ho + k * o..], &rec.p2[u * ho + k * o..]);
                    for (c, sc) in s.iter_mut().enumerate() {
                        *sc = p1[c] + p2[c];
                    }
                    for c in 0..o {
                        d_attn[k * o + c] += de * leaky(s[c]);
                        let ds = de * ak[c] * leaky_grad(s[c]);
                        dp1[t * ho + k * o + c] += ds;
                        dp2[u * ho + k * o + c] += ds;
                    }
                }
            }
        }
    }

    let mut dh = if need_input_grad { vec![T::zero(); rec.h_in.len()] } else { Vec::new() };
    {
        let (t1, g1) = layer.theta1.values_grad_mut();
        for (t, &i) in rec.targets.iter().enumerate() {
            let x = &rec.h_in[i * d..(i + 1) * d];
            for k in 0..h {
                let dy = &dp1[t * ho + k * o..t * ho + (k + 1) * o];
                let dx = need_input_grad.then(|| &mut dh[i * d..(i + 1) * d]);
                matvec_backward(&t1[k * o * d..(k + 1) * o * d], x, dy, &mut g1[k * o * d..(k + 1) * o * d], dx);
            }
        }
    }
    {
        let (t2, g2) = layer.theta2.values_grad_mut();
        for i in 0..n_in {
            let x = &rec.h_in[i * d..(i + 1) * d];
            for k in 0..h {
                let dy = &dp2[i * ho + k * o..i * ho + (k + 1) * o];
                let dx = need_input_grad.then(|| &mut dh[i * d..(i + 1) * d]);
                matvec_backward(&t2[k * o * d..(k + 1) * o * d], x, dy, &mut g2[k * o * d..(k + 1) * o * d], dx);
            }
        }
    }
    dh
}
