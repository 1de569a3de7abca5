//! Stacked spatiotemporal LSTM with zigzag memory routing.
//!
//! Each layer keeps its own hidden state `H` and temporal cell `C`. A single
//! spatiotemporal memory `M` flows upward through the layers within a time
//! step, and the top layer's `M` at step `t-1` enters the bottom layer at
//! step `t`.
//!
//! The per-gate kernels are stored stacked along the output axis, one tensor
//! per input they read:
//!
//! | tensor | reads       | gates (in order)                         |
//! |--------|-------------|------------------------------------------|
//! | `wx`   | `x_t`       | `i, f, g, i′, f′, g′, o` (+ bias `bx`)   |
//! | `wh`   | `H_{t-1}^l` | `i, f, g, o`                             |
//! | `wm`   | `M_t^{l-1}` | `i′, f′, g′`                             |
//! | `wo`   | `[C_t, M_t]`| `o` (the `W^c_o` and `W^m_o` kernels)    |
//! | `w11`  | `[C_t, M_t]`| 1×1 projection feeding `H_t`             |
//!
//! A convolution over stacked inputs equals the sum of the per-input
//! convolutions, so this is the cell equation term for term.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    StLstm,
    ConvLstm,
}

#[derive(Clone, Debug)]
pub struct StpNet {
    pub kind: CellKind,
    pub layers: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

/// Graph handles for one layer's kernels.
#[derive(Clone, Copy, Debug)]
pub struct CellParams {
    pub wx: Var,
    pub bx: Var,
    pub wh: Var,
    /// Absent for the convolutional-LSTM cell.
    pub wm: Option<Var>,
    pub wo: Option<Var>,
    pub w11: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub h: Var,
    pub c: Var,
    /// Spatiotemporal memory leaving the cell; `None` for the convolutional LSTM.
    pub m: Option<Var>,
}

/// Memory maps observed at the bottom and top of the stack, per time step.
#[derive(Clone, Debug, Default)]
pub struct ZigzagTrace {
    /// `M_t^0`, the memory entering layer 1 at step `t`.
    pub bottom_inputs: Vec<Tensor>,
    /// `M_t^L`, the memory leaving the top layer at step `t`.
    pub top_outputs: Vec<Tensor>,
}

impl StpNet {
    fn prefix(&self, layer: usize) -> String {
        format!("stp.{layer}")
    }

    fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.hidden
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        let k = self.kernel;
        for l in 0..self.layers {
            let p = self.prefix(l);
            let cin = self.layer_in(l);
            let bound = |fan: usize| (3.0 / fan as f64).sqrt();
            match self.kind {
                CellKind::StLstm => {
                    store.insert(format!("{p}.wx"), Tensor::uniform(&[7 * h, cin, k, k], bound(cin * k * k), rng));
                    store.insert(format!("{p}.bx"), Tensor::zeros(&[7 * h]));
                    store.insert(format!("{p}.wh"), Tensor::uniform(&[4 * h, h, k, k], bound(h * k * k), rng));
                    store.insert(format!("{p}.wm"), Tensor::uniform(&[3 * h, h, k, k], bound(h * k * k), rng));
                    store.insert(format!("{p}.wo"), Tensor::uniform(&[h, 2 * h, k, k], bound(2 * h * k * k), rng));
                    store.insert(format!("{p}.w11"), Tensor::uniform(&[h, 2 * h, 1, 1], bound(2 * h), rng));
                }
                CellKind::ConvLstm => {
                    store.insert(format!("{p}.wx"), Tensor::uniform(&[4 * h, cin, k, k], bound(cin * k * k), rng));
                    store.insert(format!("{p}.bx"), Tensor::zeros(&[4 * h]));
                    store.insert(format!("{p}.wh"), Tensor::uniform(&[4 * h, h, k, k], bound(h * k * k), rng));
                }
            }
        }
    }

    pub fn bind_layer(&self, g: &mut Graph, store: &ParamStore, layer: usize) -> Result<CellParams> {
        let p = self.prefix(layer);
        let st = self.kind == CellKind::StLstm;
        let opt = |g: &mut Graph, name: &str| -> Result<Option<Var>> {
            if st {
                Ok(Some(store.bind(g, &format!("{p}.{name}"))?))
            } else {
                Ok(None)
            }
        };
        Ok(CellParams {
            wx: store.bind(g, &format!("{p}.wx"))?,
            bx: store.bind(g, &format!("{p}.bx"))?,
            wh: store.bind(g, &format!("{p}.wh"))?,
            wm: opt(g, "wm")?,
            wo: opt(g, "wo")?,
            w11: opt(g, "w11")?,
        })
    }

    /// One spatiotemporal LSTM step.
    pub fn st_cell_step(
        &self,
        g: &mut Graph,
        params: &CellParams,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        m_in: Var,
    ) -> Result<CellOutput> {
        let (Some(wm), Some(wo), Some(w11)) = (params.wm, params.wo, params.w11) else {
            return shape_err("st_cell_step", "layer was bound without spatiotemporal kernels");
        };
        let hc = self.hidden;
        self.check_state("st_cell_step", g, x, &[h_prev, c_prev, m_in])?;
        let same = ConvGeom::same(self.kernel);
        let xg = g.conv2d(x, params.wx, Some(params.bx), same)?;
        let hg = g.conv2d(h_prev, params.wh, None, same)?;
        let mg = g.conv2d(m_in, wm, None, same)?;

        let gate = |g: &mut Graph, src: Var, idx: usize| g.slice_channels(src, idx * hc, hc);
        let sum2 = |g: &mut Graph, a: Var, b: Var| g.add(a, b);

        let (xi, hi) = (gate(g, xg, 0)?, gate(g, hg, 0)?);
        let pre = sum2(g, xi, hi)?;
        let i = g.sigmoid(pre);
        let (xf, hf) = (gate(g, xg, 1)?, gate(g, hg, 1)?);
        let pre = sum2(g, xf, hf)?;
        let f = g.sigmoid(pre);
        let (xc, hcg) = (gate(g, xg, 2)?, gate(g, hg, 2)?);
        let pre = sum2(g, xc, hcg)?;
        let cand = g.tanh(pre);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;

        let (xim, mi) = (gate(g, xg, 3)?, gate(g, mg, 0)?);
        let pre = sum2(g, xim, mi)?;
        let i_m = g.sigmoid(pre);
        let (xfm, mf) = (gate(g, xg, 4)?, gate(g, mg, 1)?);
        let pre = sum2(g, xfm, mf)?;
        let f_m = g.sigmoid(pre);
        let (xmm, mm) = (gate(g, xg, 5)?, gate(g, mg, 2)?);
        let pre = sum2(g, xmm, mm)?;
        let cand_m = g.tanh(pre);
        let keep = g.mul(f_m, m_in)?;
        let write = g.mul(i_m, cand_m)?;
        let m = g.add(keep, write)?;

        let cm = g.concat_channels(&[c, m])?;
        let oc = g.conv2d(cm, wo, None, same)?;
        let (xo, ho) = (gate(g, xg, 6)?, gate(g, hg, 3)?);
        let pre = sum2(g, xo, ho)?;
        let pre = g.add(pre, oc)?;
        let o = g.sigmoid(pre);
        let proj = g.conv2d(cm, w11, None, ConvGeom::same(1))?;
        let squashed = g.tanh(proj);
        let h = g.mul(o, squashed)?;
        Ok(CellOutput { h, c, m: Some(m) })
    }

    /// One convolutional LSTM step (no spatiotemporal memory).
    pub fn conv_cell_step(&self, g: &mut Graph, params: &CellParams, x: Var, h_prev: Var, c_prev: Var) -> Result<CellOutput> {
        let hc = self.hidden;
        self.check_state("conv_cell_step", g, x, &[h_prev, c_prev])?;
        let same = ConvGeom::same(self.kernel);
        let xg = g.conv2d(x, params.wx, Some(params.bx), same)?;
        let hg = g.conv2d(h_prev, params.wh, None, same)?;
        let pre = g.add(xg, hg)?;
        let i = g.slice_channels(pre, 0, hc)?;
        let i = g.sigmoid(i);
        let f = g.slice_channels(pre, hc, hc)?;
        let f = g.sigmoid(f);
        let cand = g.slice_channels(pre, 2 * hc, hc)?;
        let cand = g.tanh(cand);
        let o = g.slice_channels(pre, 3 * hc, hc)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(CellOutput { h, c, m: None })
    }

    fn check_state(&self, op: &'static str, g: &Graph, x: Var, state: &[Var]) -> Result<()> {
        let xs = g.value(x).shape();
        for &s in state {
            let ss = g.value(s).shape();
            if ss.len() != 4 || xs.len() != 4 || ss[0] != xs[0] || ss[2..] != xs[2..] || ss[1] != self.hidden {
                return shape_err(op, format!("input {xs:?} state {ss:?} hidden {}", self.hidden));
            }
        }
        Ok(())
    }

    /// Run the stack over the encoded sequence and return the local feature:
    /// `[H_t^L, M_t^L]` for the spatiotemporal cell, `[H_t^L, C_t^L]` for the
    /// convolutional LSTM, at the final step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: &[Var],
        mut trace: Option<&mut ZigzagTrace>,
    ) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("stp_forward", "empty input sequence");
        };
        if self.layers == 0 {
            return shape_err("stp_forward", "zero layers");
        }
        let s = g.value(first).shape().to_vec();
        if s.len() != 4 {
            return shape_err("stp_forward", format!("input {s:?}"));
        }
        let zeros = Tensor::zeros(&[s[0], self.hidden, s[2], s[3]]);
        let params: Vec<CellParams> = (0..self.layers)
            .map(|l| self.bind_layer(g, store, l))
            .collect::<Result<_>>()?;
        let mut hs: Vec<Var> = (0..self.layers).map(|_| g.constant(zeros.clone())).collect();
        let mut cs: Vec<Var> = (0..self.layers).map(|_| g.constant(zeros.clone())).collect();
        let mut m = g.constant(zeros);
        for &x_t in xs {
            if let Some(tr) = trace.as_deref_mut() {
                tr.bottom_inputs.push(g.value(m).clone());
            }
            let mut below = x_t;
            for l in 0..self.layers {
                let out = match self.kind {
                    CellKind::StLstm => self.st_cell_step(g, &params[l], below, hs[l], cs[l], m)?,
                    CellKind::ConvLstm => self.conv_cell_step(g, &params[l], below, hs[l], cs[l])?,
                };
                hs[l] = out.h;
                cs[l] = out.c;
                if let Some(mo) = out.m {
                    m = mo;
                }
                below = out.h;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.top_outputs.push(g.value(m).clone());
            }
        }
        let top = self.layers - 1;
        match self.kind {
            CellKind::StLstm => g.concat_channels(&[hs[top], m]),
            CellKind::ConvLstm => g.concat_channels(&[hs[top], cs[top]]),
        }
    }
}
