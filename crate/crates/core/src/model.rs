//! The two-branch predictor and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, FusionInputs};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{self, MatchResult, MemoryPool, MemoryRead, QueryGrid};
use crate::params::ParamStore;
use crate::stlstm::{CellKind, StpNet, ZigzagTrace};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Spatiotemporal LSTM branch fused with the memory branch.
    LgnNet,
    /// Both branches, convolutional-LSTM cell.
    LgnSt,
    /// Convolutional-LSTM branch only.
    LocNet,
    /// Memory branch only; the decoder sees `F_lat ⊕ F_glo`.
    GloNet,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::LgnNet, Self::LgnSt, Self::LocNet, Self::GloNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LgnNet => "lgn_net",
            Self::LgnSt => "lgn_st",
            Self::LocNet => "loc_net",
            Self::GloNet => "glo_net",
        }
    }

    pub fn has_memory(self) -> bool {
        !matches!(self, Self::LocNet)
    }

    pub fn has_recurrent(self) -> bool {
        !matches!(self, Self::GloNet)
    }

    pub fn cell_kind(self) -> CellKind {
        match self {
            Self::LgnNet => CellKind::StLstm,
            _ => CellKind::ConvLstm,
        }
    }

    fn fusion(self) -> FusionInputs {
        match self {
            Self::LgnNet | Self::LgnSt => FusionInputs::Both,
            Self::LocNet => FusionInputs::LocalOnly,
            Self::GloNet => FusionInputs::GlobalOnly,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected lgn_net, lgn_st, loc_net or glo_net)")))
    }
}

/// Layer widths and sizes of every sub-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub channels: usize,
    /// Input frames per window.
    pub n_inputs: usize,
    /// Local encoder widths; the last is the channel count of `x_t`.
    pub loc_widths: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub cell_kernel: usize,
    /// Global encoder stride-2 block widths.
    pub glo_widths: Vec<usize>,
    /// Query / prototype dimension `C`.
    pub feature_dim: usize,
    /// Common width of the aligned branch features.
    pub fuse_width: usize,
    pub dec_widths: [usize; 3],
}

impl ModelDims {
    /// Full-size network for 256×256 input.
    pub fn full() -> Self {
        Self {
            image_size: 256,
            channels: 3,
            n_inputs: 4,
            loc_widths: vec![64, 128],
            hidden: 128,
            layers: 4,
            cell_kernel: 5,
            glo_widths: vec![64, 128, 256],
            feature_dim: 512,
            fuse_width: 256,
            dec_widths: [256, 128, 64],
        }
    }

    /// Narrow network sized for 64×64 synthetic video on one CPU core.
    pub fn synthetic() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            n_inputs: 4,
            loc_widths: vec![16, 16],
            hidden: 16,
            layers: 4,
            cell_kernel: 3,
            glo_widths: vec![16, 32, 32],
            feature_dim: 32,
            fuse_width: 16,
            dec_widths: [32, 16, 16],
        }
    }

    /// Tiny network for gradient checks and overfitting tests (16×16 frames).
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            n_inputs: 4,
            loc_widths: vec![4, 8],
            hidden: 8,
            layers: 2,
            cell_kernel: 3,
            glo_widths: vec![4, 8, 8],
            feature_dim: 16,
            fuse_width: 8,
            dec_widths: [8, 8, 4],
        }
    }

    pub fn x_channels(&self) -> usize {
        *self.loc_widths.last().expect("local encoder has layers")
    }

    pub fn validate(&self) -> Result<()> {
        if self.loc_widths.len() != 2 {
            return Err(Error::Config("local encoder must have exactly two stride-2 layers".into()));
        }
        if self.glo_widths.len() != 3 {
            return Err(Error::Config("global encoder must have exactly three stride-2 layers".into()));
        }
        if !self.image_size.is_multiple_of(8) || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.n_inputs == 0 || self.layers == 0 || self.hidden == 0 || self.cell_kernel.is_multiple_of(2) {
            return Err(Error::Config("n_inputs, layers and hidden must be positive and the cell kernel odd".into()));
        }
        Ok(())
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub predicted: Var,
    pub f_loc: Option<Var>,
    pub f_lat: Option<Var>,
    pub memory: Option<MemoryRead>,
}

/// Plain-value result of [`Model::predict_next_frame`].
#[derive(Clone, Debug)]
pub struct PredictionOutput {
    /// `[B, channels, H, W]` in `[-1, 1]`.
    pub predicted: Tensor,
    pub queries: Option<QueryGrid>,
    pub matching: Option<MatchResult>,
    pub f_loc: Option<Tensor>,
    pub f_glo: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub params: ParamStore,
}

impl Model {
    pub fn new(variant: ModelVariant, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if variant.has_recurrent() {
            backbone::init_local_encoder(&mut params, &mut rng, &dims);
            Self::stp_for(variant, &dims).init(&mut params, &mut rng);
        }
        if variant.has_memory() {
            backbone::init_global_encoder(&mut params, &mut rng, &dims);
        }
        backbone::init_fusion(&mut params, &mut rng, &dims, variant.fusion());
        Ok(Self { variant, dims, params })
    }

    pub fn stp(&self) -> StpNet {
        Self::stp_for(self.variant, &self.dims)
    }

    fn stp_for(variant: ModelVariant, dims: &ModelDims) -> StpNet {
        StpNet {
            kind: variant.cell_kind(),
            layers: dims.layers,
            in_channels: dims.x_channels(),
            hidden: dims.hidden,
            kernel: dims.cell_kernel,
        }
    }

    /// Check a batch of stacked input windows `[B, n·channels, H, W]`.
    pub fn check_window(&self, window: &Tensor) -> Result<()> {
        let s = window.shape();
        let expect = self.dims.n_inputs * self.dims.channels;
        if s.len() != 4 || s[1] != expect {
            return Err(Error::Config(format!(
                "model expects {} input frames of {} channels stacked as [B, {expect}, H, W], got {s:?}",
                self.dims.n_inputs, self.dims.channels
            )));
        }
        if !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
            return Err(Error::Config(format!("frame size {}x{} is not divisible by 8", s[2], s[3])));
        }
        Ok(())
    }

    /// Build the forward pass on `g`. `pool` is the `[I, C]` prototype matrix;
    /// bind it as a constant during training so only the update rule moves it.
    pub fn forward(
        &self,
        g: &mut Graph,
        window: &Tensor,
        pool: Option<Var>,
        trace: Option<&mut ZigzagTrace>,
    ) -> Result<ForwardPass> {
        self.check_window(window)?;
        let ch = self.dims.channels;
        let f_loc = if self.variant.has_recurrent() {
            let mut xs = Vec::with_capacity(self.dims.n_inputs);
            for t in 0..self.dims.n_inputs {
                let frame = g.constant(window.slice_channels(t * ch, ch));
                xs.push(backbone::encode_loc(g, &self.params, &self.dims, frame)?);
            }
            Some(self.stp().forward(g, &self.params, &xs, trace)?)
        } else {
            None
        };
        let (f_lat, mem) = if self.variant.has_memory() {
            let pool = pool.ok_or_else(|| Error::Config(format!("variant {} needs a memory pool", self.variant)))?;
            let input = g.constant(window.clone());
            let f_lat = backbone::encode_glo(g, &self.params, &self.dims, input)?;
            let mem = memory::read_in_graph(g, f_lat, pool)?;
            (Some(f_lat), Some(mem))
        } else {
            (None, None)
        };
        let glo_input = match (self.variant, f_lat, mem) {
            (ModelVariant::GloNet, Some(lat), Some(m)) => Some(g.concat_channels(&[lat, m.read])?),
            (_, _, Some(m)) => Some(m.read),
            _ => None,
        };
        let predicted = backbone::fuse_and_decode(g, &self.params, f_loc, glo_input)?;
        Ok(ForwardPass {
            predicted,
            f_loc,
            f_lat,
            memory: mem,
        })
    }

    /// Predict the frame following each stacked input window.
    pub fn predict_next_frame(&self, window: &Tensor, pool: &MemoryPool) -> Result<PredictionOutput> {
        let mut g = Graph::new();
        let pool_var = self.variant.has_memory().then(|| g.constant(pool.as_tensor().clone()));
        let pass = self.forward(&mut g, window, pool_var, None)?;
        let (queries, matching, f_glo) = match pass.memory {
            Some(m) => {
                let lat = g.value(pass.f_lat.expect("memory implies F_lat"));
                let grid = QueryGrid::from_rows(g.value(m.queries).clone(), lat.dim(0), lat.dim(2), lat.dim(3))?;
                let weights = g.value(m.weights).clone();
                let (nearest, second) = memory::rank_rows(&weights);
                (
                    Some(grid),
                    Some(MatchResult {
                        weights,
                        nearest,
                        second,
                    }),
                    Some(g.value(m.read).clone()),
                )
            }
            None => (None, None, None),
        };
        Ok(PredictionOutput {
            predicted: g.value(pass.predicted).clone(),
            queries,
            matching,
            f_loc: pass.f_loc.map(|v| g.value(v).clone()),
            f_glo,
        })
    }
}
