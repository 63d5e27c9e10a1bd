//! The denoiser contract `f_theta` and its implementations.
//!
//! A backend returns the conditional prediction and, when asked, the
//! unconditional one; the sampler applies classifier-free guidance itself so
//! the misguidance diagnostic works without backend cooperation. Predictions
//! are treated as opaque fields (epsilon, velocity, ...), but every backend
//! feeding one run must share a parameterization.

pub mod remote;
pub mod toy;
pub mod wire;

use crate::schedule::ScheduleError;
use crate::tensor::{LatentVolume, TensorError};

pub use remote::{DecodeTiling, RemoteBackend, RemoteConfig};
pub use toy::{ToyBackend, ToyModelSpec};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Arguments of one `f_theta(z_i, x_L_i, c_i, tau)` call.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRequest {
    pub latent_tile: LatentVolume,
    pub lr_tile: LatentVolume,
    pub condition: String,
    pub timestep: f64,
    pub want_uncond: bool,
    /// Run seed, forwarded verbatim for server-side determinism.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoisePrediction {
    pub e_cond: LatentVolume,
    /// Absent when the backend opts out of unconditional predictions; guidance
    /// is then skipped.
    pub e_uncond: Option<LatentVolume>,
}

impl DenoisePrediction {
    /// Checks both fields against the request's latent tile.
    pub fn check_against(&self, req: &DenoiseRequest) -> Result<(), BackendError> {
        let want = &req.latent_tile;
        let fields = std::iter::once(&self.e_cond).chain(self.e_uncond.as_ref());
        for f in fields {
            if !f.same_shape(want) {
                return Err(BackendError::Contract(format!(
                    "prediction {}x{} does not match latent tile {}x{}",
                    f.extent(),
                    f.channels(),
                    want.extent(),
                    want.channels()
                )));
            }
            f.ensure_finite()
                .map_err(|e| BackendError::Contract(format!("prediction: {e}")))?;
        }
        Ok(())
    }
}

pub trait Denoiser: Send + Sync {
    fn id(&self) -> &str;

    /// Spatial ratio between latent tiles and LR tiles this backend expects.
    fn lr_scale(&self) -> usize {
        1
    }

    fn predict(&self, req: &DenoiseRequest) -> Result<DenoisePrediction, BackendError>;

    /// Maps the final full latent to output space.
    fn decode(&self, latent: &LatentVolume) -> Result<LatentVolume, BackendError>;
}
