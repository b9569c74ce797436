//! Minimal neural-network core: dense layers, a single-layer gated recurrent
//! cell, explicit forward/backward passes (including backprop through time),
//! an RMS-style optimizer and a finite-difference gradient checker.
//!
//! Everything is plain `f64` value data. There is no autodiff graph; each
//! model's backward pass is written out by hand and certified against central
//! finite differences.

mod check;
mod ckpt;
mod ff;
mod gru;
mod optim;

pub use check::grad_check;
pub use ckpt::{read_checkpoint, write_checkpoint};
pub use ff::{mlp_backward, mlp_forward, mlp_forward_traced, FfTrace};
pub use gru::{gru_backward, gru_forward_traced, gru_step, GruState, GruTrace};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

use crate::{Error, Result};
use rand::Rng;

/// Default hidden width for every model in the lab.
pub const HIDDEN_DIM: usize = 128;

/// Row-major matrix. `data[i * cols + j]` is element `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = W x`.
    #[inline]
    pub fn matv(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out[i] = acc;
        }
    }

    /// `out += W x`.
    #[inline]
    pub fn matv_acc(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out[i] += acc;
        }
    }

    /// `out += Wᵀ d` (accumulated row-wise so memory access stays contiguous).
    #[inline]
    pub fn tmatv_acc(&self, d: &[f64], out: &mut [f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for i in 0..self.rows {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += di * w;
            }
        }
    }

    /// Rank-one update `W += d xᵀ`.
    #[inline]
    pub fn outer_acc(&mut self, d: &[f64], x: &[f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for i in 0..self.rows {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            for (w, xv) in self.row_mut(i).iter_mut().zip(x) {
                *w += di * xv;
            }
        }
    }
}

/// Dense affine layer `y = W x + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let mut d = Dense::zeros(out_dim, in_dim);
        let limit = 1.0 / (in_dim as f64).sqrt();
        for w in &mut d.w.data {
            *w = rng.gen_range(-limit..=limit);
        }
        d
    }

    #[inline]
    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        self.w.matv(x, out);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
    }
}

/// Weights of one gated recurrent cell: update gate `z`, reset gate `r`,
/// candidate state `c`. Each gate has an input matrix (H×D), a recurrent
/// matrix (H×H) and a bias (H).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wz: Mat,
    pub uz: Mat,
    pub bz: Vec<f64>,
    pub wr: Mat,
    pub ur: Mat,
    pub br: Vec<f64>,
    pub wc: Mat,
    pub uc: Mat,
    pub bc: Vec<f64>,
}

impl GruCell {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruCell {
            wz: Mat::zeros(hidden, input),
            uz: Mat::zeros(hidden, hidden),
            bz: vec![0.0; hidden],
            wr: Mat::zeros(hidden, input),
            ur: Mat::zeros(hidden, hidden),
            br: vec![0.0; hidden],
            wc: Mat::zeros(hidden, input),
            uc: Mat::zeros(hidden, hidden),
            bc: vec![0.0; hidden],
        }
    }

    fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let mut c = GruCell::zeros(hidden, input);
        let li = 1.0 / (input as f64).sqrt();
        let lh = 1.0 / (hidden as f64).sqrt();
        for m in [&mut c.wz, &mut c.wr, &mut c.wc] {
            for w in &mut m.data {
                *w = rng.gen_range(-li..=li);
            }
        }
        for m in [&mut c.uz, &mut c.ur, &mut c.uc] {
            for w in &mut m.data {
                *w = rng.gen_range(-lh..=lh);
            }
        }
        c
    }
}

/// Which model family a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ff,
    Rnn,
}

/// The actual layer storage. Declaration order here is the flattening and
/// checkpoint order: ff = l1.w, l1.b, l2.w, l2.b, head.w, head.b;
/// gru = wz, uz, bz, wr, ur, br, wc, uc, bc, head.w, head.b.
#[derive(Debug, Clone, PartialEq)]
pub enum Layers {
    Ff { l1: Dense, l2: Dense, head: Dense },
    Gru { cell: GruCell, head: Dense },
}

impl Layers {
    fn for_each_slice<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        match self {
            Layers::Ff { l1, l2, head } => {
                for d in [l1, l2, head] {
                    f(&d.w.data);
                    f(&d.b);
                }
            }
            Layers::Gru { cell, head } => {
                f(&cell.wz.data);
                f(&cell.uz.data);
                f(&cell.bz);
                f(&cell.wr.data);
                f(&cell.ur.data);
                f(&cell.br);
                f(&cell.wc.data);
                f(&cell.uc.data);
                f(&cell.bc);
                f(&head.w.data);
                f(&head.b);
            }
        }
    }

    fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        match self {
            Layers::Ff { l1, l2, head } => {
                for d in [l1, l2, head] {
                    f(&mut d.w.data);
                    f(&mut d.b);
                }
            }
            Layers::Gru { cell, head } => {
                f(&mut cell.wz.data);
                f(&mut cell.uz.data);
                f(&mut cell.bz);
                f(&mut cell.wr.data);
                f(&mut cell.ur.data);
                f(&mut cell.br);
                f(&mut cell.wc.data);
                f(&mut cell.uc.data);
                f(&mut cell.bc);
                f(&mut head.w.data);
                f(&mut head.b);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_slice(|s| n += s.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_slice(|s| out.extend_from_slice(s));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.for_each_slice_mut(|s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_slice(|s| {
            if !s.iter().all(|v| v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_slice(|s| {
            for v in s {
                acc += v * v;
            }
        });
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_slice_mut(|s| {
            for v in s {
                *v *= factor;
            }
        });
    }
}

/// A complete Q-network parameter set: declared dimensions plus layers.
/// Dimensions are fixed at construction; all forward/backward code asserts
/// against them rather than re-validating inputs at step time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_actions: usize,
    pub layers: Layers,
}

impl ParamSet {
    /// Feed-forward Q-network: two ReLU hidden layers and a linear head.
    pub fn new_ff<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(input_dim, hidden_dim, n_actions)?;
        Ok(ParamSet {
            kind: ModelKind::Ff,
            input_dim,
            hidden_dim,
            n_actions,
            layers: Layers::Ff {
                l1: Dense::init(hidden_dim, input_dim, rng),
                l2: Dense::init(hidden_dim, hidden_dim, rng),
                head: Dense::init(n_actions, hidden_dim, rng),
            },
        })
    }

    /// Single-layer GRU Q-network with a linear head on the hidden state.
    pub fn new_gru<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(input_dim, hidden_dim, n_actions)?;
        Ok(ParamSet {
            kind: ModelKind::Rnn,
            input_dim,
            hidden_dim,
            n_actions,
            layers: Layers::Gru {
                cell: GruCell::init(hidden_dim, input_dim, rng),
                head: Dense::init(n_actions, hidden_dim, rng),
            },
        })
    }

    /// All-zero parameters, mainly for tests and fixtures.
    pub fn zeros(kind: ModelKind, input_dim: usize, hidden_dim: usize, n_actions: usize) -> Self {
        let layers = match kind {
            ModelKind::Ff => Layers::Ff {
                l1: Dense::zeros(hidden_dim, input_dim),
                l2: Dense::zeros(hidden_dim, hidden_dim),
                head: Dense::zeros(n_actions, hidden_dim),
            },
            ModelKind::Rnn => Layers::Gru {
                cell: GruCell::zeros(hidden_dim, input_dim),
                head: Dense::zeros(n_actions, hidden_dim),
            },
        };
        ParamSet {
            kind,
            input_dim,
            hidden_dim,
            n_actions,
            layers,
        }
    }

    fn check_dims(input_dim: usize, hidden_dim: usize, n_actions: usize) -> Result<()> {
        if input_dim == 0 || hidden_dim == 0 || n_actions == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive, got input={input_dim} hidden={hidden_dim} actions={n_actions}"
            )));
        }
        Ok(())
    }

    /// Gradient container with the same shape as `self`, zero-filled.
    pub fn zero_grads(&self) -> Gradients {
        let layers = match self.kind {
            ModelKind::Ff => Layers::Ff {
                l1: Dense::zeros(self.hidden_dim, self.input_dim),
                l2: Dense::zeros(self.hidden_dim, self.hidden_dim),
                head: Dense::zeros(self.n_actions, self.hidden_dim),
            },
            ModelKind::Rnn => Layers::Gru {
                cell: GruCell::zeros(self.hidden_dim, self.input_dim),
                head: Dense::zeros(self.n_actions, self.hidden_dim),
            },
        };
        Gradients { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.num_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.flatten()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        self.layers.assign_flat(flat);
    }

    pub fn is_finite(&self) -> bool {
        self.layers.is_finite()
    }
}

/// Gradients of a scalar loss with respect to a [`ParamSet`], shape-identical
/// to the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Layers,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.flatten()
    }

    pub fn num_params(&self) -> usize {
        self.layers.num_params()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.is_finite()
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers.l2_norm()
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.scale(factor);
    }
}

#[inline]
pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}
