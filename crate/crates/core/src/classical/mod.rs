//! Classical dense-flow estimators used as reference methods: FFT window
//! cross-correlation with sub-pixel peak fitting, and a coarse-to-fine
//! smoothness-regularized solver. Both consume plain images; spike windows
//! enter through their per-pixel count images.

pub mod hs;
pub mod xcorr;

use crate::error::Result;
use crate::flow::FlowField;
use crate::img::Image;
use crate::spike::SpikeStream;

pub use hs::{estimate_hs, HsConfig};
pub use xcorr::{estimate_xcorr, XcorrConfig, XcorrStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Xcorr,
    Variational,
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "xcorr" => Ok(Method::Xcorr),
            "variational" => Ok(Method::Variational),
            other => Err(crate::error::Error::invalid(format!(
                "unknown classical method {other:?} (expected xcorr or variational)"
            ))),
        }
    }
}

/// Runs a classical estimator on the count images of two spike windows.
/// The returned field carries `dt_frames` so downstream consumers know the
/// displacement's time base.
pub fn estimate_from_spikes(
    source: &SpikeStream,
    target: &SpikeStream,
    method: Method,
    dt_frames: u32,
) -> Result<FlowField> {
    let img0 = source.count_image();
    let img1 = target.count_image();
    estimate_from_images(&img0, &img1, method, dt_frames)
}

pub fn estimate_from_images(
    img0: &Image,
    img1: &Image,
    method: Method,
    dt_frames: u32,
) -> Result<FlowField> {
    let mut field = match method {
        Method::Xcorr => estimate_xcorr(img0, img1, &XcorrConfig::default())?.0,
        Method::Variational => estimate_hs(img0, img1, &HsConfig::default())?,
    };
    field.dt_frames = dt_frames;
    Ok(field)
}
