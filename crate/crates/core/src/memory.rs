//! Memory bank and its attention-based addressing.
//!
//! A latent code `z` is compared against every memory item by cosine
//! similarity, the similarities are softmax-normalised, weights at or below
//! `1/N` are removed by hard shrinkage, and the survivors are renormalised
//! before reading a convex combination of memory items.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N x C` matrix of prototypical normal latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    items: Array2<f64>,
    frozen: bool,
}

impl MemoryBank {
    pub fn new(items: Array2<f64>) -> Result<Self> {
        if items.nrows() < 2 {
            return Err(Error::Config(format!(
                "memory bank needs at least 2 items, got {}",
                items.nrows()
            )));
        }
        if let Some(i) = items
            .outer_iter()
            .position(|row| row.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Degenerate(format!("memory item {i} is the zero vector")));
        }
        Ok(MemoryBank {
            items,
            frozen: false,
        })
    }

    /// Uniform `[-1, 1)` entries, each row scaled to unit L2 norm.
    pub fn random(items: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut m: Array2<f64> = Array2::from_shape_simple_fn((items, dim), || rng.random_range(-1.0..1.0));
        for mut row in m.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        MemoryBank::new(m)
    }

    pub fn items(&self) -> &Array2<f64> {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Mutable access to the items, refused while the bank is frozen.
    pub fn items_mut(&mut self) -> Option<&mut Array2<f64>> {
        if self.frozen {
            None
        } else {
            Some(&mut self.items)
        }
    }

    /// Little-endian bytes of the item matrix, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.items.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Renormalization {
    #[default]
    L1,
    L2,
}

/// Raw softmax weights and their shrunk, renormalised counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub raw: Array1<f64>,
    pub shrunk: Array1<f64>,
}

fn l2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Softmax over memory items of the cosine similarity with `z`.
pub fn cosine_attention(z: ArrayView1<f64>, memory: &MemoryBank) -> Result<Array1<f64>> {
    let z2 = z.insert_axis(Axis(0));
    let (raw, _) = batch_cosine_attention(z2, memory)?;
    Ok(raw.row(0).to_owned())
}

/// Hard shrinkage `max(w - 1/N, 0) * w / (|w - 1/N| + eps)` followed by
/// renormalisation. Falls back to `raw` when every entry shrinks to zero.
pub fn hard_shrink_renormalize(raw: ArrayView1<f64>, eps: f64, renorm: Renormalization) -> Array1<f64> {
    shrink_row(raw, eps, renorm).shrunk
}

/// `sum_i shrunk[i] * m_i`.
pub fn memory_read(shrunk: ArrayView1<f64>, memory: &MemoryBank) -> Result<Array1<f64>> {
    if shrunk.len() != memory.len() {
        return Err(Error::dim(
            format!("{} attention weights", memory.len()),
            format!("{}", shrunk.len()),
        ));
    }
    Ok(shrunk.dot(memory.items()))
}

/// Full addressing of a single code: attention, shrinkage and read.
pub fn address(
    z: ArrayView1<f64>,
    memory: &MemoryBank,
    eps: f64,
    renorm: Renormalization,
) -> Result<(Array1<f64>, AttentionWeights)> {
    let raw = cosine_attention(z, memory)?;
    let shrunk = hard_shrink_renormalize(raw.view(), eps, renorm);
    let read = memory_read(shrunk.view(), memory)?;
    Ok((read, AttentionWeights { raw, shrunk }))
}

struct Normalised {
    unit: Array2<f64>,
    norms: Array1<f64>,
}

fn normalise_rows(m: ArrayView2<f64>, what: &str) -> Result<Normalised> {
    let mut unit = m.to_owned();
    let mut norms = Array1::zeros(m.nrows());
    for (i, mut row) in unit.outer_iter_mut().enumerate() {
        let n = l2(row.view());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("{what} {i} has norm {n}")));
        }
        row /= n;
        norms[i] = n;
    }
    Ok(Normalised { unit, norms })
}

fn batch_cosine_attention(z: ArrayView2<f64>, memory: &MemoryBank) -> Result<(Array2<f64>, AttentionCache)> {
    if z.ncols() != memory.dim() {
        return Err(Error::dim(
            format!("latent length {}", memory.dim()),
            format!("{}", z.ncols()),
        ));
    }
    let zn = normalise_rows(z, "latent code")?;
    let mn = normalise_rows(memory.items().view(), "memory item")?;
    let mut w = zn.unit.dot(&mn.unit.t());
    for mut row in w.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok((w.clone(), AttentionCache { zn, mn, raw: w }))
}

struct AttentionCache {
    zn: Normalised,
    mn: Normalised,
    raw: Array2<f64>,
}

struct ShrinkRow {
    /// Shrunk values before renormalisation.
    pre: Array1<f64>,
    shrunk: Array1<f64>,
    fallback: bool,
}

fn shrink_row(raw: ArrayView1<f64>, eps: f64, renorm: Renormalization) -> ShrinkRow {
    let lambda = 1.0 / raw.len() as f64;
    let pre = raw.mapv(|w| (w - lambda).max(0.0) * w / ((w - lambda).abs() + eps));
    let total = match renorm {
        Renormalization::L1 => pre.sum(),
        Renormalization::L2 => l2(pre.view()),
    };
    if total > 0.0 && total.is_finite() {
        let shrunk = &pre / total;
        ShrinkRow {
            pre,
            shrunk,
            fallback: false,
        }
    } else {
        ShrinkRow {
            pre,
            shrunk: raw.to_owned(),
            fallback: true,
        }
    }
}

/// Batched addressing with everything needed for the backward pass.
pub(crate) struct Addressing {
    pub read: Array2<f64>,
    pub shrunk: Array2<f64>,
    attention: AttentionCache,
    rows: Vec<ShrinkRow>,
    eps: f64,
    renorm: Renormalization,
}

impl Addressing {
    pub fn forward(z: ArrayView2<f64>, memory: &MemoryBank, eps: f64, renorm: Renormalization) -> Result<Self> {
        let (raw, attention) = batch_cosine_attention(z, memory)?;
        let rows: Vec<ShrinkRow> = raw
            .outer_iter()
            .map(|r| shrink_row(r, eps, renorm))
            .collect();
        let mut shrunk = Array2::zeros(raw.dim());
        for (mut dst, r) in shrunk.outer_iter_mut().zip(&rows) {
            dst.assign(&r.shrunk);
        }
        let read = shrunk.dot(memory.items());
        Ok(Addressing {
            read,
            shrunk,
            attention,
            rows,
            eps,
            renorm,
        })
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.attention.raw
    }

    /// Given the gradient of the read codes and an extra gradient on the
    /// shrunk weights (from the sparsity loss), returns `(dz, dM)`.
    pub fn backward(
        &self,
        memory: &MemoryBank,
        d_read: &Array2<f64>,
        d_shrunk_extra: Option<&Array2<f64>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let items = memory.items();
        let mut d_memory = self.shrunk.t().dot(d_read);
        let mut d_shrunk = d_read.dot(&items.t());
        if let Some(extra) = d_shrunk_extra {
            d_shrunk += extra;
        }
        let lambda = 1.0 / items.nrows() as f64;
        let mut d_cos = Array2::zeros(d_shrunk.dim());
        for (b, row) in self.rows.iter().enumerate() {
            let raw = self.attention.raw.row(b);
            let ds = d_shrunk.row(b);
            let d_raw: Array1<f64> = if row.fallback {
                ds.to_owned()
            } else {
                let d_pre = match self.renorm {
                    Renormalization::L1 => {
                        let total = row.pre.sum();
                        let proj = ds.dot(&row.shrunk);
                        ds.mapv(|g| (g - proj) / total)
                    }
                    Renormalization::L2 => {
                        let total = l2(row.pre.view());
                        let proj = ds.dot(&row.shrunk);
                        (&ds - &(&row.shrunk * proj)) / total
                    }
                };
                let mut d_raw = Array1::zeros(raw.len());
                for i in 0..raw.len() {
                    let w = raw[i];
                    if w > lambda {
                        let a = w - lambda;
                        let den = a + self.eps;
                        let deriv = ((2.0 * w - lambda) * den - w * a) / (den * den);
                        d_raw[i] = d_pre[i] * deriv;
                    }
                }
                d_raw
            };
            // softmax
            let proj = d_raw.dot(&raw);
            for i in 0..raw.len() {
                d_cos[[b, i]] = raw[i] * (d_raw[i] - proj);
            }
        }
        let zn = &self.attention.zn;
        let mn = &self.attention.mn;
        let d_zn = d_cos.dot(&mn.unit);
        let d_mn = d_cos.t().dot(&zn.unit);
        let dz = project_unit_grad(&zn.unit, &zn.norms, &d_zn);
        d_memory += &project_unit_grad(&mn.unit, &mn.norms, &d_mn);
        (dz, d_memory)
    }
}

/// Backward of row normalisation `u = x / |x|`: `(du - u (u . du)) / |x|`.
fn project_unit_grad(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    for ((mut o, u), &n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norms.iter()) {
        let proj = o.dot(&u);
        o.zip_mut_with(&u, |g, &uu| *g = (*g - uu * proj) / n);
    }
    out
}
