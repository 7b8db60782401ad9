//! Task-routed low-rank adapters on each block's fused input projection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::{vecmat, Mat};

/// Which adapter branch is active for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRoute {
    Mmu,
    T2i,
    None,
}

impl TaskRoute {
    pub fn name(self) -> &'static str {
        match self {
            TaskRoute::Mmu => "MMU",
            TaskRoute::T2i => "T2I",
            TaskRoute::None => "NONE",
        }
    }
}

impl fmt::Display for TaskRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter ids of one adapter. `down` is stored `d_in x r` and `up`
/// `r x d_out`, so the delta for a row activation is `x * down * up`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterIds {
    pub down: ParamId,
    pub up: ParamId,
}

/// Owned adapter, used outside the training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub down: Mat<T>,
    pub up: Mat<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn param_count(&self) -> usize {
        self.rank * (self.down.rows + self.up.cols)
    }

    pub fn scale(&self) -> T {
        if self.rank == 0 {
            T::zero()
        } else {
            T::of(self.alpha / self.rank as f64)
        }
    }
}

/// The two task branches attached to one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedAdapters<T> {
    pub mmu: LoraAdapter<T>,
    pub t2i: LoraAdapter<T>,
}

impl<T> RoutedAdapters<T> {
    pub fn for_route(&self, route: TaskRoute) -> Option<&LoraAdapter<T>> {
        match route {
            TaskRoute::Mmu => Some(&self.mmu),
            TaskRoute::T2i => Some(&self.t2i),
            TaskRoute::None => None,
        }
    }
}

/// `x * W_in` plus the active route's scaled low-rank delta.
pub fn routed_projection<T: Real>(
    w_in: &Mat<T>,
    adapters: &RoutedAdapters<T>,
    x: &[T],
    route: TaskRoute,
    layer: usize,
) -> Result<Vec<T>> {
    if x.len() != w_in.rows {
        return Err(Error::Shape(format!(
            "input width {} vs projection rows {}",
            x.len(),
            w_in.rows
        )));
    }
    let mut out = vecmat(x, w_in);
    let Some(ad) = adapters.for_route(route) else {
        return Ok(out);
    };
    if ad.rank == 0 {
        return Ok(out);
    }
    if ad.down.rows != w_in.rows || ad.down.cols != ad.rank {
        return Err(Error::Adapter {
            layer,
            route: route.name(),
            detail: format!(
                "down is {}x{}, expected {}x{}",
                ad.down.rows, ad.down.cols, w_in.rows, ad.rank
            ),
        });
    }
    if ad.up.rows != ad.rank || ad.up.cols != w_in.cols {
        return Err(Error::Adapter {
            layer,
            route: route.name(),
            detail: format!(
                "up is {}x{}, expected {}x{}",
                ad.up.rows, ad.up.cols, ad.rank, w_in.cols
            ),
        });
    }
    let low = vecmat(x, &ad.down);
    let delta = vecmat(&low, &ad.up);
    let s = ad.scale();
    for (o, d) in out.iter_mut().zip(delta) {
        *o = *o + s * d;
    }
    Ok(out)
}

/// Graph version of [`routed_projection`] over a packed activation matrix.
pub(crate) fn routed_projection_var<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    w_in: ParamId,
    adapter: Option<AdapterIds>,
    scale: f64,
) -> Var {
    let base = tape.matmul(h, Var::Param(w_in));
    match adapter {
        Some(ad) if scale != 0.0 => {
            let low = tape.matmul(h, Var::Param(ad.down));
            let delta = tape.matmul(low, Var::Param(ad.up));
            let delta = tape.scale(delta, T::of(scale));
            tape.add(base, delta)
        }
        _ => base,
    }
}

/// Adapter parameters (both routes, all layers) relative to the backbone.
pub fn lora_param_fraction(config: &ModelConfig) -> f64 {
    config.lora_param_count() as f64 / config.backbone_param_count() as f64
}
