//! Dense matrices, log-domain reductions, seeded randomness, and the
//! parameter/gradient bookkeeping shared by every other module.
//!
//! Everything is double precision. The gradient checks and brute-force
//! equivalences elsewhere in the crate require agreement down to 1e-8,
//! which single precision cannot deliver.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Row-major dense matrix of f64. A column vector is a matrix with `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// self += other, elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += *b;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// log(sum_i exp(v_i)) with max-subtraction. Exact for the max element:
/// a singleton input returns itself and tied maxima never overflow.
///
/// Entries may be `-inf` (empty cells); an input whose entries are all
/// `-inf` (or an empty input) has no support and is an error.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::EmptySupport);
    }
    let sum: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Standard matrix-vector product.
pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols() {
        return Err(Error::Shape(format!(
            "matvec: matrix is {}x{}, vector has length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows()];
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v.iter()) {
            acc += a * b;
        }
        out[r] = acc;
    }
    Ok(out)
}

/// v_out += m^T * u  (accumulating transpose-matvec, used by backward passes).
pub fn matvec_t_acc(m: &DenseMatrix, u: &[f64], out: &mut [f64]) {
    assert_eq!(u.len(), m.rows());
    assert_eq!(out.len(), m.cols());
    for r in 0..m.rows() {
        let ur = u[r];
        if ur == 0.0 {
            continue;
        }
        let row = m.row(r);
        for (o, w) in out.iter_mut().zip(row.iter()) {
            *o += w * ur;
        }
    }
}

/// grad += u ⊗ v (outer product), for weight gradients.
pub fn outer_acc(grad: &mut DenseMatrix, u: &[f64], v: &[f64]) {
    assert_eq!(grad.rows(), u.len());
    assert_eq!(grad.cols(), v.len());
    for (r, ur) in u.iter().enumerate() {
        if *ur == 0.0 {
            continue;
        }
        let row = grad.row_mut(r);
        for (g, vc) in row.iter_mut().zip(v.iter()) {
            *g += ur * vc;
        }
    }
}

/// Deterministic seeded random stream. Identical seed, identical stream.
///
/// Sampling helpers are implemented directly on the raw 64-bit stream so
/// the values drawn are pinned by this crate rather than by library
/// internals that may change between releases.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Multiply-shift; bias is O(n / 2^64), irrelevant at our scales.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independent child stream (for split/batch seeding).
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// How an entry is initialized by [`init_parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Fan-based uniform init.
    Weight,
    /// Zero init.
    Bias,
    /// Zero init (the label-transition table).
    Transition,
}

/// Handle to one store entry; valid for the store that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named dense parameters with paired gradient accumulators.
/// Iteration order is registration order, which makes training runs
/// reproducible given a seed.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<DenseMatrix>,
    grads: Vec<DenseMatrix>,
    index: HashMap<String, usize>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.values.push(DenseMatrix::zeros(rows, cols));
        self.grads.push(DenseMatrix::zeros(rows, cols));
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &DenseMatrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.values().len()).sum()
    }

    /// (name, value, grad) triples in deterministic registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix, &DenseMatrix)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .zip(self.grads.iter())
            .map(|((n, v), g)| (n.as_str(), v, g))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Fresh zeroed gradient buffer shaped like this store's entries.
    pub fn new_grad_bag(&self) -> GradBag {
        GradBag {
            mats: self
                .values
                .iter()
                .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    /// store.grads += bag, entry by entry.
    pub fn accumulate(&mut self, bag: &GradBag) {
        assert_eq!(self.grads.len(), bag.mats.len());
        for (g, b) in self.grads.iter_mut().zip(bag.mats.iter()) {
            g.add_assign(b);
        }
    }

    /// Scale all gradients by `s` (batch-mean losses).
    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.values_mut() {
                *x *= s;
            }
        }
    }

    /// Binary checkpoint: magic, entry count, then per entry name, shape,
    /// and row-major little-endian f64 values. Gradients are not stored.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(self.values.iter()) {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(value.rows() as u32).to_le_bytes())?;
            w.write_all(&(value.cols() as u32).to_le_bytes())?;
            for v in value.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`write_to`]. Entries come back in file order with zeroed
    /// gradients; kinds are not part of the wire format.
    pub fn read_from<R: Read>(r: &mut R) -> Result<ParameterStore> {
        let mut magic = [0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != *CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a parameter checkpoint".into()));
        }
        let count = read_u32(r)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut values = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in values.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let id = store.register(&name, rows, cols, ParamKind::Weight)?;
            *store.value_mut(id) = DenseMatrix::from_vec(rows, cols, values)?;
        }
        Ok(store)
    }

    /// Serialized values as a byte blob (best-checkpoint snapshots).
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec cannot fail");
        out
    }

    /// Restore values from a [`snapshot`] blob. Names and shapes must match.
    pub fn restore(&mut self, blob: &[u8]) -> Result<()> {
        let loaded = ParameterStore::read_from(&mut &blob[..])?;
        if loaded.len() != self.len() {
            return Err(Error::Checkpoint("snapshot entry count mismatch".into()));
        }
        for id in self.ids() {
            let other = loaded
                .id(self.name(id))
                .ok_or_else(|| Error::Checkpoint(format!("snapshot missing '{}'", self.name(id))))?;
            if loaded.value(other).shape() != self.value(id).shape() {
                return Err(Error::Checkpoint(format!("snapshot shape mismatch for '{}'", self.name(id))));
            }
            *self.value_mut(id) = loaded.value(other).clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"CHAINTAG1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Per-worker gradient buffer aligned with a store's entries.
#[derive(Debug, Clone)]
pub struct GradBag {
    mats: Vec<DenseMatrix>,
}

impl GradBag {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.mats[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.mats[id.0]
    }

    pub fn reset(&mut self) {
        for m in &mut self.mats {
            m.fill(0.0);
        }
    }
}

/// Fill registered parameters: weights uniform in
/// ±sqrt(6 / (fan_in + fan_out)), biases and the transition table zero.
/// Gradients are zeroed. Deterministic given the rng seed.
pub fn init_parameters(store: &mut ParameterStore, rng: &mut Rng) {
    for i in 0..store.len() {
        let id = ParamId(i);
        match store.kind(id) {
            ParamKind::Weight => {
                let (rows, cols) = store.value(id).shape();
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                for v in store.value_mut(id).values_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            ParamKind::Bias | ParamKind::Transition => {
                store.value_mut(id).fill(0.0);
            }
        }
        store.grad_mut(id).fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn lse_symmetry_pair() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn lse_singleton_identity() {
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn lse_large_no_overflow() {
        // Reference value computed from the shifted form, which is exact here.
        let got = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!(got.is_finite());
        assert!((got - (1000.0 + LN_2)).abs() < 1e-9);
    }

    #[test]
    fn lse_empty_support() {
        assert!(matches!(log_sum_exp(&[f64::NEG_INFINITY]), Err(Error::EmptySupport)));
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptySupport)));
    }

    #[test]
    fn lse_ignores_neg_inf_cells() {
        let got = log_sum_exp(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert!((got - 0.0).abs() < 1e-12);
    }

    #[test]
    fn matvec_identity_zero_direct() {
        let eye = DenseMatrix::identity(2);
        assert_eq!(matvec(&eye, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);

        let zero = DenseMatrix::zeros(2, 2);
        assert_eq!(matvec(&zero, &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);

        let m = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_shape_error() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(matvec(&m, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn rng_deterministic() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    fn toy_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.register("A", 5, 4, ParamKind::Transition).unwrap();
        s.register("w", 600, 300, ParamKind::Weight).unwrap();
        s.register("b", 600, 1, ParamKind::Bias).unwrap();
        s
    }

    #[test]
    fn init_deterministic_and_rules() {
        let mut s1 = toy_store();
        let mut s2 = toy_store();
        init_parameters(&mut s1, &mut Rng::new(7));
        init_parameters(&mut s2, &mut Rng::new(7));
        for (id1, id2) in s1.ids().zip(s2.ids()) {
            assert_eq!(s1.value(id1).values(), s2.value(id2).values());
        }

        // transition table and biases all zero
        assert!(s1.value(s1.id("A").unwrap()).is_all_zero());
        assert!(s1.value(s1.id("b").unwrap()).is_all_zero());

        // 600x300 weight: every entry within the fan bound sqrt(6/900)
        let bound = (6.0f64 / 900.0).sqrt();
        let w = s1.value(s1.id("w").unwrap());
        assert!(w.values().iter().all(|v| v.abs() <= bound));
        // and the draw actually uses the range
        assert!(w.values().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParameterStore::new();
        s.register("x", 1, 1, ParamKind::Weight).unwrap();
        assert!(s.register("x", 1, 1, ParamKind::Weight).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut s = toy_store();
        init_parameters(&mut s, &mut Rng::new(3));
        let blob = s.snapshot();
        let loaded = ParameterStore::read_from(&mut &blob[..]).unwrap();
        assert_eq!(loaded.len(), s.len());
        for id in s.ids() {
            let lid = loaded.id(s.name(id)).unwrap();
            assert_eq!(loaded.value(lid).shape(), s.value(id).shape());
            // bit-exact: compare the raw bit patterns
            let a: Vec<u64> = s.value(id).values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.value(lid).values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let blob = b"NOTMAGIC!\x00\x00\x00\x00".to_vec();
        assert!(ParameterStore::read_from(&mut &blob[..]).is_err());
    }

    #[test]
    fn grad_bag_accumulates() {
        let mut s = toy_store();
        let mut bag = s.new_grad_bag();
        let id = s.id("A").unwrap();
        bag.get_mut(id).set(0, 0, 2.5);
        s.accumulate(&bag);
        assert_eq!(s.grad(id).get(0, 0), 2.5);
        s.accumulate(&bag);
        assert_eq!(s.grad(id).get(0, 0), 5.0);
    }
}
