//! Convolutional encoders around the two branches and the fused decoder.
//!
//! * local encoder: two stride-2 convolutions, input/4 spatially
//! * global encoder: three stride-2 convolutions and one stride-1 projection
//!   to the query dimension, input/8 spatially
//! * alignment: a 1×1 convolution on the spatiotemporal feature and a stride-2
//!   deconvolution on the memory feature bring both to the same grid
//! * decoder: one stride-1 and two stride-2 deconvolutions, then a 3×3
//!   convolution squashed by `tanh` into `[-1, 1]`

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelDims;
use crate::params::ParamStore;
use crate::tensor::ConvGeom;

const DOWN: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    pad: 1,
};
const UP: ConvGeom = ConvGeom {
    kernel: 4,
    stride: 2,
    pad: 1,
};
const SAME3: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 1,
    pad: 1,
};
const POINT: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 1,
    pad: 0,
};

fn conv_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    geom: ConvGeom,
    activate: bool,
) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.w"))?;
    let b = store.bind(g, &format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, Some(b), geom)?;
    Ok(if activate { g.silu(y) } else { y })
}

fn deconv_block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.w"))?;
    let b = store.bind(g, &format!("{prefix}.b"))?;
    let y = g.conv_transpose2d(x, w, Some(b), geom)?;
    Ok(g.silu(y))
}

pub fn init_local_encoder<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dims: &ModelDims) {
    let mut cin = dims.channels;
    for (i, &w) in dims.loc_widths.iter().enumerate() {
        store.init_conv(rng, &format!("e_loc.{i}"), w, cin, 3, true);
        cin = w;
    }
}

/// Encode a batch of single frames `[B, channels, H, W]` to `x_t`.
pub fn encode_loc(g: &mut Graph, store: &ParamStore, dims: &ModelDims, frame: Var) -> Result<Var> {
    let s = g.value(frame).shape().to_vec();
    if s.len() != 4 || s[1] != dims.channels {
        return shape_err("encode_loc", format!("frame batch {s:?}, expected {} channels", dims.channels));
    }
    if !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(Error::Config(format!(
            "local encoder needs spatial size divisible by 4, got {}x{}",
            s[2], s[3]
        )));
    }
    let mut x = frame;
    for i in 0..dims.loc_widths.len() {
        x = conv_block(g, store, &format!("e_loc.{i}"), x, DOWN, true)?;
    }
    Ok(x)
}

pub fn init_global_encoder<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dims: &ModelDims) {
    let mut cin = dims.channels * dims.n_inputs;
    for (i, &w) in dims.glo_widths.iter().enumerate() {
        store.init_conv(rng, &format!("e_glo.{i}"), w, cin, 3, true);
        cin = w;
    }
    store.init_conv(rng, "e_glo.proj", dims.feature_dim, cin, 3, true);
}

/// Encode channel-concatenated input windows `[B, n·channels, H, W]` to `F_lat`.
pub fn encode_glo(g: &mut Graph, store: &ParamStore, dims: &ModelDims, window: Var) -> Result<Var> {
    let s = g.value(window).shape().to_vec();
    let expect = dims.channels * dims.n_inputs;
    if s.len() != 4 || s[1] != expect {
        return Err(Error::Config(format!(
            "global encoder expects {} stacked frames ({expect} channels), got shape {s:?}",
            dims.n_inputs
        )));
    }
    if !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
        return Err(Error::Config(format!(
            "global encoder needs spatial size divisible by 8, got {}x{}",
            s[2], s[3]
        )));
    }
    let mut x = window;
    for i in 0..dims.glo_widths.len() {
        x = conv_block(g, store, &format!("e_glo.{i}"), x, DOWN, true)?;
    }
    conv_block(g, store, "e_glo.proj", x, SAME3, false)
}

/// Which aligned features reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionInputs {
    /// `F′_loc ⊕ F′_glo`.
    Both,
    /// `F′_loc` only.
    LocalOnly,
    /// `F′_glo` only, where the memory input is `F_lat ⊕ F_glo`.
    GlobalOnly,
}

pub fn init_fusion<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dims: &ModelDims, inputs: FusionInputs) {
    let decoder_in = match inputs {
        FusionInputs::Both => {
            store.init_conv(rng, "align_loc", dims.fuse_width, 2 * dims.hidden, 1, true);
            store.init_deconv(rng, "align_glo", dims.feature_dim, dims.fuse_width, 4, 2);
            2 * dims.fuse_width
        }
        FusionInputs::LocalOnly => {
            store.init_conv(rng, "align_loc", dims.fuse_width, 2 * dims.hidden, 1, true);
            dims.fuse_width
        }
        FusionInputs::GlobalOnly => {
            store.init_deconv(rng, "align_glo", 2 * dims.feature_dim, dims.fuse_width, 4, 2);
            dims.fuse_width
        }
    };
    let [d1, d2, d3] = dims.dec_widths;
    store.init_deconv(rng, "d_lg.0", decoder_in, d1, 3, 1);
    store.init_deconv(rng, "d_lg.1", d1, d2, 4, 2);
    store.init_deconv(rng, "d_lg.2", d2, d3, 4, 2);
    store.init_conv(rng, "d_lg.out", dims.channels, d3, 3, true);
}

/// Align the branch features to a common grid, concatenate and decode a frame.
pub fn fuse_and_decode(
    g: &mut Graph,
    store: &ParamStore,
    f_loc: Option<Var>,
    f_glo: Option<Var>,
) -> Result<Var> {
    let aligned_loc = match f_loc {
        Some(f) => Some(conv_block(g, store, "align_loc", f, POINT, true)?),
        None => None,
    };
    let aligned_glo = match f_glo {
        Some(f) => Some(deconv_block(g, store, "align_glo", f, UP)?),
        None => None,
    };
    let fused = match (aligned_loc, aligned_glo) {
        (Some(l), Some(r)) => {
            let (sl, sr) = (g.value(l).shape(), g.value(r).shape());
            if sl[2..] != sr[2..] {
                return shape_err("fuse_and_decode", format!("aligned local {sl:?} vs global {sr:?}"));
            }
            g.concat_channels(&[l, r])?
        }
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => return shape_err("fuse_and_decode", "no branch features"),
    };
    let x = deconv_block(g, store, "d_lg.0", fused, SAME3)?;
    let x = deconv_block(g, store, "d_lg.1", x, UP)?;
    let x = deconv_block(g, store, "d_lg.2", x, UP)?;
    let w = store.bind(g, "d_lg.out.w")?;
    let b = store.bind(g, "d_lg.out.b")?;
    let y = g.conv2d(x, w, Some(b), SAME3)?;
    Ok(g.tanh(y))
}
