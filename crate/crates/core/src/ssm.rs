//! Selective state-space block with a chunked-parallel path and a
//! single-token recurrent path that compute the same function.
//!
//! Block dataflow for an input row `u`:
//!
//! ```text
//! h            = rms_norm(u)
//! [z, xBC, dt] = h W_in (+ routed LoRA delta)
//! [x, B, C]    = silu(causal_conv(xBC))
//! dt           = softplus(dt + dt_bias)
//! y            = ssd_scan(x, dt, A_log, B, C, D)
//! out          = rms_norm(y * silu(z)) W_out
//! ```

use crate::autograd::{ScanDims, Segment, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::{routed_projection_var, AdapterIds, TaskRoute};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Mat;

/// Parameter ids of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmLayerParams {
    pub in_norm: ParamId,
    pub in_proj: ParamId,
    pub conv: ParamId,
    pub a_log: ParamId,
    pub dt_bias: ParamId,
    pub d_skip: ParamId,
    pub out_norm: ParamId,
    pub out_proj: ParamId,
    pub lora_mmu: Option<AdapterIds>,
    pub lora_t2i: Option<AdapterIds>,
}

impl SsmLayerParams {
    pub fn adapter(&self, route: TaskRoute) -> Option<AdapterIds> {
        match route {
            TaskRoute::Mmu => self.lora_mmu,
            TaskRoute::T2i => self.lora_t2i,
            TaskRoute::None => None,
        }
    }
}

/// Constant-size decode state of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    /// Last `d_conv - 1` pre-convolution `[x, B, C]` rows, oldest first.
    pub conv: Mat<T>,
    /// Per-head outer-product state, `(n_heads * headdim) x d_state`.
    pub ssm: Mat<T>,
}

impl<T: Real> LayerState<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            conv: Mat::zeros(cfg.d_conv - 1, cfg.conv_dim()),
            ssm: Mat::zeros(cfg.n_heads * cfg.headdim, cfg.d_state),
        }
    }

    pub fn byte_size(&self) -> usize {
        (self.conv.len() + self.ssm.len()) * std::mem::size_of::<T>()
    }

    pub fn check_shape(&self, cfg: &ModelConfig) -> Result<()> {
        let conv = (cfg.d_conv - 1, cfg.conv_dim());
        let ssm = (cfg.n_heads * cfg.headdim, cfg.d_state);
        if (self.conv.rows, self.conv.cols) != conv || (self.ssm.rows, self.ssm.cols) != ssm {
            return Err(Error::Shape(format!(
                "layer state is conv {}x{} / ssm {}x{}, config needs {}x{} / {}x{}",
                self.conv.rows, self.conv.cols, self.ssm.rows, self.ssm.cols, conv.0, conv.1, ssm.0,
                ssm.1
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LayerState<U> {
        LayerState {
            conv: self.conv.cast(),
            ssm: self.ssm.cast(),
        }
    }
}

pub fn scan_dims(cfg: &ModelConfig, chunk_len: usize) -> ScanDims {
    ScanDims {
        n_heads: cfg.n_heads,
        headdim: cfg.headdim,
        n_groups: cfg.n_groups,
        d_state: cfg.d_state,
        chunk_len,
    }
}

/// Records one block on the tape for a packed batch. Returns the block output
/// (without residual) and the final state of every segment.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    layer: &SsmLayerParams,
    u: Var,
    segs: &[Segment],
    route: TaskRoute,
    chunk_len: usize,
    init: Option<&[LayerState<T>]>,
) -> (Var, Vec<LayerState<T>>) {
    let (di, gn, nh) = (cfg.d_inner(), cfg.n_groups * cfg.d_state, cfg.n_heads);
    let eps = T::of(cfg.rms_eps);
    let h = tape.rms_norm(u, Var::Param(layer.in_norm), eps);
    let scale = if cfg.lora_rank == 0 { 0.0 } else { cfg.lora_scale() };
    let proj = routed_projection_var(tape, h, layer.in_proj, layer.adapter(route), scale);

    let z = tape.slice_cols(proj, 0, di);
    let xbc_raw = tape.slice_cols(proj, di, di + 2 * gn);
    let dt_raw = tape.slice_cols(proj, 2 * di + 2 * gn, nh);

    let conv_init = init.map(|st| st.iter().map(|s| s.conv.clone()).collect());
    let (xbc, conv_final) = tape.causal_conv(xbc_raw, Var::Param(layer.conv), segs, conv_init);
    let xbc = tape.silu(xbc);
    let x = tape.slice_cols(xbc, 0, di);
    let b = tape.slice_cols(xbc, di, gn);
    let c = tape.slice_cols(xbc, di + gn, gn);

    let dt = tape.add_row(dt_raw, Var::Param(layer.dt_bias));
    let dt = tape.softplus(dt);

    let ssm_init: Option<Vec<Mat<T>>> = init.map(|st| st.iter().map(|s| s.ssm.clone()).collect());
    let (y, ssm_final) = tape.ssd_scan(
        x,
        dt,
        Var::Param(layer.a_log),
        b,
        c,
        Var::Param(layer.d_skip),
        scan_dims(cfg, chunk_len),
        segs,
        ssm_init.as_deref(),
    );
    let gate = tape.silu(z);
    let gated = tape.mul(y, gate);
    let normed = tape.rms_norm(gated, Var::Param(layer.out_norm), eps);
    let out = tape.matmul(normed, Var::Param(layer.out_proj));

    let states = conv_final
        .into_iter()
        .zip(ssm_final)
        .map(|(conv, ssm)| LayerState { conv, ssm })
        .collect();
    (out, states)
}
