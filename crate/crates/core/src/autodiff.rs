//! Higher-order gradient support.
//!
//! candle detaches gradients during `backward` unless the process
//! environment contains `CANDLE_GRAD_DO_NOT_DETACH`, and it reads that
//! variable once per thread, on the thread's first backward pass. The
//! gradient penalty differentiates through a gradient, so it needs the
//! non-detached mode on the calling thread.

use std::cell::Cell;
use std::sync::Once;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};

const ENV_FLAG: &str = "CANDLE_GRAD_DO_NOT_DETACH";

static SET_ENV: Once = Once::new();

thread_local! {
    static CHECKED: Cell<Option<bool>> = const { Cell::new(None) };
}

/// Turn on graph-carrying gradients for every thread that has not run a
/// backward pass yet. Call this at program start.
pub fn enable_higher_order_grads() {
    SET_ENV.call_once(|| {
        if std::env::var_os(ENV_FLAG).is_none() {
            std::env::set_var(ENV_FLAG, "1");
        }
    });
}

fn probe() -> candle_core::Result<bool> {
    let v = Var::from_tensor(&Tensor::new(1.5f64, &Device::Cpu)?)?;
    let y = v.as_tensor().sqr()?;
    let grads = y.backward()?;
    let g = grads
        .get(v.as_tensor())
        .ok_or_else(|| candle_core::Error::Msg("probe gradient missing".into()))?;
    Ok(g.track_op() && g.dtype() == DType::F64)
}

/// Ensure gradients computed on this thread can be differentiated again.
pub fn ensure_higher_order_grads() -> Result<()> {
    enable_higher_order_grads();
    let ok = match CHECKED.with(Cell::get) {
        Some(ok) => ok,
        None => {
            let ok = probe()?;
            CHECKED.with(|c| c.set(Some(ok)));
            ok
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            "higher-order gradients are unavailable on this thread: a backward pass ran \
             before enable_higher_order_grads() was called",
        ))
    }
}
