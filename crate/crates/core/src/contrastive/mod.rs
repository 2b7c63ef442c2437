//! Self-supervised objectives (NT-Xent, swapped Sinkhorn assignment, BYOL)
//! and the heads they train alongside the encoder.

mod byol;
mod heads;
mod nt_xent;
mod swav;

pub use byol::{byol_loss, byol_regression, ema_update, TargetNetwork};
pub use heads::{normalize_rows, MlpHead, PrototypeBank, PREDICTOR, PROJECTOR, PROTOTYPES};
pub use nt_xent::{adjacent_pairs, nt_xent_loss};
pub use swav::{sinkhorn_assign, swav_loss, SwavParams};
