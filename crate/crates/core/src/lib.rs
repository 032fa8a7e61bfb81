//! Post-processing for multi-camera pedestrian tracking.
//!
//! * [`trackio`]: MOT-format track files and embedding files.
//! * [`lap`]: rectangular linear assignment with forbidden cells.
//! * [`linker`]: the appearance-free tracklet link network, its training and weights format.
//! * [`globallink`]: gating, scoring and merging of tracklet fragments within one camera.
//! * [`colorxfer`]: lαβ statistics transfer between camera styles, PPM images.
//! * [`ict`]: cross-camera association of tracklets by embedding distance.
//! * [`metrics`]: CLEAR-MOT and identity metrics.
//! * [`synth`]: synthetic scenes for exercising the whole pipeline.

pub mod colorxfer;
pub mod globallink;
pub mod ict;
pub mod lap;
pub mod linker;
pub mod metrics;
pub mod synth;
pub mod trackio;
mod unionfind;

pub use trackio::{BBox, Detection, EmbeddingTrack, Entry, TrackSet, Tracklet};
