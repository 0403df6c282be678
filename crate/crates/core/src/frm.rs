//! Feature repair: merges the encoder code `z` with the memory read `z_mem`
//! through forget and input gates.
//!
//! ```text
//! x  = [z, z_mem]
//! f  = sigmoid(W_f x + b_f)
//! i  = sigmoid(W_i x + b_i)
//! c  = tanh(W_c x + b_c)
//! z' = f * z_mem
//! out = z' + i * c          (FrmUpdate::Forgotten)
//! out = z_mem + i * c       (FrmUpdate::Raw)
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrmUpdate {
    /// Input gate adds onto the forget-gated memory code.
    #[default]
    Forgotten,
    /// Input gate adds onto the ungated memory code; the forget gate is unused.
    Raw,
}

/// How the encoder code and the memory read are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RepairMode {
    /// Forget/input gating.
    #[default]
    Gated,
    /// A single linear projection of `[z, z_mem]`.
    Concat,
    /// The memory read is used directly.
    MemoryOnly,
}

/// Fully connected gate layers, each mapping `2C -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub forget: Linear,
    pub input: Linear,
    pub candidate: Linear,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        GateParams {
            forget: Linear::zeros(2 * dim, dim),
            input: Linear::zeros(2 * dim, dim),
            candidate: Linear::zeros(2 * dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.forget.out_features()
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.forget.init(rng, 1.0);
        self.input.init(rng, 1.0);
        self.candidate.init(rng, 1.0);
    }

    fn check(&self, dim: usize) -> Result<()> {
        for l in [&self.forget, &self.input, &self.candidate] {
            if l.in_features() != 2 * dim || l.out_features() != dim {
                return Err(Error::dim(
                    format!("gate of shape ({dim}, {})", 2 * dim),
                    format!("({}, {})", l.out_features(), l.in_features()),
                ));
            }
        }
        Ok(())
    }
}

/// Repair parameters for each [`RepairMode`].
#[derive(Debug, Clone, PartialEq)]
pub enum Repair {
    Gated(GateParams),
    Concat(Linear),
    MemoryOnly,
}

impl Repair {
    pub fn zeros(mode: RepairMode, dim: usize) -> Self {
        match mode {
            RepairMode::Gated => Repair::Gated(GateParams::zeros(dim)),
            RepairMode::Concat => Repair::Concat(Linear::zeros(2 * dim, dim)),
            RepairMode::MemoryOnly => Repair::MemoryOnly,
        }
    }

    pub fn mode(&self) -> RepairMode {
        match self {
            Repair::Gated(_) => RepairMode::Gated,
            Repair::Concat(_) => RepairMode::Concat,
            Repair::MemoryOnly => RepairMode::MemoryOnly,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        match self {
            Repair::Gated(g) => g.init(rng),
            Repair::Concat(l) => l.init(rng, 1.0),
            Repair::MemoryOnly => {}
        }
    }

    pub(crate) fn linears(&self) -> Vec<&Linear> {
        match self {
            Repair::Gated(g) => vec![&g.forget, &g.input, &g.candidate],
            Repair::Concat(l) => vec![l],
            Repair::MemoryOnly => vec![],
        }
    }

    pub(crate) fn linears_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            Repair::Gated(g) => vec![&mut g.forget, &mut g.input, &mut g.candidate],
            Repair::Concat(l) => vec![l],
            Repair::MemoryOnly => vec![],
        }
    }
}

/// Applies the gated repair to a single pair of codes.
pub fn frm(
    z: ArrayView1<f64>,
    z_mem: ArrayView1<f64>,
    params: &GateParams,
    update: FrmUpdate,
) -> Result<Array1<f64>> {
    if z.len() != z_mem.len() {
        return Err(Error::dim(format!("code length {}", z.len()), z_mem.len()));
    }
    params.check(z.len())?;
    let repair = Repair::Gated(params.clone());
    let out = RepairPass::forward(
        &repair,
        z.insert_axis(Axis(0)),
        z_mem.insert_axis(Axis(0)),
        update,
    )?;
    Ok(out.output.row(0).to_owned())
}

pub(crate) struct RepairPass {
    pub output: Array2<f64>,
    concat: Array2<f64>,
    gates: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    z_mem: Array2<f64>,
    update: FrmUpdate,
}

impl RepairPass {
    pub fn forward(
        repair: &Repair,
        z: ArrayView2<f64>,
        z_mem: ArrayView2<f64>,
        update: FrmUpdate,
    ) -> Result<Self> {
        let dim = z.ncols();
        let concat = match repair {
            Repair::MemoryOnly => Array2::zeros((0, 0)),
            _ => concatenate(Axis(1), &[z, z_mem]).expect("rows agree"),
        };
        let (output, gates) = match repair {
            Repair::Gated(g) => {
                g.check(dim)?;
                let f = g.forget.forward(&concat)?.mapv(sigmoid);
                let i = g.input.forward(&concat)?.mapv(sigmoid);
                let c = g.candidate.forward(&concat)?.mapv(f64::tanh);
                let base = match update {
                    FrmUpdate::Forgotten => &f * &z_mem,
                    FrmUpdate::Raw => z_mem.to_owned(),
                };
                let out = base + &i * &c;
                (out, Some((f, i, c)))
            }
            Repair::Concat(l) => (l.forward(&concat)?, None),
            Repair::MemoryOnly => (z_mem.to_owned(), None),
        };
        Ok(RepairPass {
            output,
            concat,
            gates,
            z_mem: z_mem.to_owned(),
            update,
        })
    }

    /// Returns `(dz, dz_mem)` and accumulates parameter gradients.
    pub fn backward(&self, repair: &Repair, d_out: &Array2<f64>, grad: &mut Repair) -> (Array2<f64>, Array2<f64>) {
        let dim = d_out.ncols();
        let d_concat = match (repair, grad) {
            (Repair::Gated(g), Repair::Gated(gg)) => {
                let (f, i, c) = self.gates.as_ref().expect("gated pass");
                let (d_base_mem, df) = match self.update {
                    FrmUpdate::Forgotten => (d_out * f, d_out * &self.z_mem),
                    FrmUpdate::Raw => (d_out.clone(), Array2::zeros(d_out.dim())),
                };
                let da_f = &df * &f.mapv(|v| v * (1.0 - v));
                let da_i = &(d_out * c) * &i.mapv(|v| v * (1.0 - v));
                let da_c = &(d_out * i) * &c.mapv(|v| 1.0 - v * v);
                let mut dx = g.forget.backward(&self.concat, &da_f, &mut gg.forget);
                dx += &g.input.backward(&self.concat, &da_i, &mut gg.input);
                dx += &g.candidate.backward(&self.concat, &da_c, &mut gg.candidate);
                let mut dz_mem = dx.slice(s![.., dim..]).to_owned();
                dz_mem += &d_base_mem;
                return (dx.slice(s![.., ..dim]).to_owned(), dz_mem);
            }
            (Repair::Concat(l), Repair::Concat(gl)) => l.backward(&self.concat, d_out, gl),
            (Repair::MemoryOnly, Repair::MemoryOnly) => {
                return (Array2::zeros(d_out.dim()), d_out.clone());
            }
            _ => panic!("gradient container does not match repair mode"),
        };
        (
            d_concat.slice(s![.., ..dim]).to_owned(),
            d_concat.slice(s![.., dim..]).to_owned(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_gates_halve_memory_code() {
        let g = GateParams::zeros(3);
        let z = arr1(&[0.3, -1.0, 2.0]);
        let zm = arr1(&[1.0, 2.0, -4.0]);
        let out = frm(z.view(), zm.view(), &g, FrmUpdate::Forgotten).unwrap();
        assert_eq!(out, arr1(&[0.5, 1.0, -2.0]));
        let raw = frm(z.view(), zm.view(), &g, FrmUpdate::Raw).unwrap();
        assert_eq!(raw, zm);
    }

    #[test]
    fn saturated_gates_are_identity_on_memory_code() {
        let mut g = GateParams::zeros(3);
        g.forget.bias.fill(1e3);
        g.input.bias.fill(-1e3);
        let z = arr1(&[0.3, -1.0, 2.0]);
        let zm = arr1(&[1.0, 2.0, -4.0]);
        let out = frm(z.view(), zm.view(), &g, FrmUpdate::Forgotten).unwrap();
        for (a, b) in out.iter().zip(zm.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let g = GateParams::zeros(3);
        assert!(frm(arr1(&[1.0, 2.0]).view(), arr1(&[1.0, 2.0, 3.0]).view(), &g, FrmUpdate::Forgotten).is_err());
        assert!(frm(arr1(&[1.0, 2.0]).view(), arr1(&[1.0, 2.0]).view(), &g, FrmUpdate::Forgotten).is_err());
    }
}
