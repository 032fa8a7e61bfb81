//! Appearance-free tracklet link model.
//!
//! Each tracklet is reduced to a fixed 30x5 motion window of normalized
//! `(frame, x, y, w, h)` rows. A shared two-branch convolutional encoder
//! (7x1 kernels along time, 1x5 kernels across features) turns each window
//! into an embedding; the two embeddings are concatenated and an MLP
//! predicts whether the tracklets belong to the same identity.

mod net;
mod samples;
mod train;
mod weights;

pub use net::{
    backward, backward_batch, batch_loss, embed_windows, forward, forward_batch, loss, score_embeddings, Architecture,
    BatchOutput, ConvBn, Dense, ForwardTrace, LinkerParams, Mode, TensorView, BN_EPS, BN_MOMENTUM, SPATIAL_KERNEL,
    TEMPORAL_KERNEL,
};
pub use samples::{generate_samples, LinkSample};
pub use train::{cosine_lr, train, Adam, TrainConfig, TrainOutcome};
pub use weights::{load_params, read_params_file, save_params, write_params_file, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use thiserror::Error;

use crate::trackio::{Entry, Tracklet};

/// Frames per window.
pub const WINDOW_LEN: usize = 30;
/// Columns per window row: frame, x, y, w, h.
pub const NUM_FEATURES: usize = 5;
pub(crate) const WINDOW_SIZE: usize = WINDOW_LEN * NUM_FEATURES;

#[derive(Debug, Error)]
pub enum LinkerError {
    #[error("cannot build a window from an empty tracklet")]
    EmptyTracklet,
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Domain(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("not enough ground truth for sampling: {0}")]
    InsufficientData(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("weights: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LinkerError>;

/// Which end of a putative link a tracklet sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The earlier tracklet; its last frames are used.
    Predecessor,
    /// The later tracklet; its first frames are used.
    Successor,
}

/// Normalized 30x5 motion matrix, rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    data: [f64; WINDOW_SIZE],
}

impl Window {
    pub fn from_rows(rows: &[[f64; NUM_FEATURES]; WINDOW_LEN]) -> Self {
        let mut data = [0.0; WINDOW_SIZE];
        for (t, row) in rows.iter().enumerate() {
            data[t * NUM_FEATURES..(t + 1) * NUM_FEATURES].copy_from_slice(row);
        }
        Self { data }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * NUM_FEATURES..(t + 1) * NUM_FEATURES]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Builds the model input for one side of a candidate link.
///
/// Predecessors keep their last 30 entries and are padded at the start with
/// their first kept entry; successors keep their first 30 and are padded at
/// the end with their last kept entry. Both sides of a pair share one
/// anchor, the predecessor's last entry: frames become `(I - I_anchor) / 30`
/// and positions are offsets from the anchor box, with `x, w` divided by the
/// image width and `y, h` by the image height. Shared coordinates let the
/// encoder see the temporal gap and the spatial jump across the junction.
pub fn make_window(tracklet: &Tracklet, side: Side, anchor: &Entry, image_size: (f64, f64)) -> Result<Window> {
    let entries = tracklet.entries();
    if entries.is_empty() {
        return Err(LinkerError::EmptyTracklet);
    }
    let n = entries.len().min(WINDOW_LEN);
    let kept = match side {
        Side::Predecessor => &entries[entries.len() - n..],
        Side::Successor => &entries[..n],
    };
    let pad = WINDOW_LEN - n;
    let rows = (0..WINDOW_LEN).map(|t| match side {
        Side::Predecessor => &kept[t.saturating_sub(pad)],
        Side::Successor => &kept[t.min(n - 1)],
    });
    let (width, height) = image_size;
    let reference = f64::from(anchor.frame);
    let mut data = [0.0; WINDOW_SIZE];
    for (t, e) in rows.enumerate() {
        let b = e.bbox;
        let row = &mut data[t * NUM_FEATURES..(t + 1) * NUM_FEATURES];
        row[0] = (f64::from(e.frame) - reference) / WINDOW_LEN as f64;
        row[1] = (b.x - anchor.bbox.x) / width;
        row[2] = (b.y - anchor.bbox.y) / height;
        row[3] = b.w / width;
        row[4] = b.h / height;
    }
    Ok(Window { data })
}

/// Both windows of a candidate link, anchored at the predecessor's last entry.
pub fn pair_windows(pred: &Tracklet, succ: &Tracklet, image_size: (f64, f64)) -> Result<(Window, Window)> {
    let anchor = pred.entries().last().ok_or(LinkerError::EmptyTracklet)?;
    Ok((
        make_window(pred, Side::Predecessor, anchor, image_size)?,
        make_window(succ, Side::Successor, anchor, image_size)?,
    ))
}
