//! Mount point for a pretrained latent-diffusion model.
//!
//! This build ships no model runtime. Selecting `backend = "sd-adapter"`
//! validates `S2S_MODEL_DIR` and then reports that the adapter is not
//! available, so configurations naming it fail loudly instead of silently
//! falling back to the toy backends.

use std::path::PathBuf;

use super::Backends;
use crate::error::{Error, Result};

pub const MODEL_DIR_ENV: &str = "S2S_MODEL_DIR";

pub fn model_dir() -> Result<PathBuf> {
    let dir = std::env::var_os(MODEL_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Capability(format!("{MODEL_DIR_ENV} is not set")))?;
    if !dir.is_dir() {
        return Err(Error::Capability(format!(
            "{MODEL_DIR_ENV}={} is not a directory",
            dir.display()
        )));
    }
    Ok(dir)
}

pub fn load_from_env() -> Result<Backends> {
    let dir = model_dir()?;
    Err(Error::Capability(format!(
        "sd-adapter: no model runtime compiled into this build (model dir {})",
        dir.display()
    )))
}
