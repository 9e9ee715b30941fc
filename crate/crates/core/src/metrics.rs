//! Endpoint-error metrics for dense flow fields.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::img::Image;

/// Per-pixel endpoint error map plus its spatial mean.
#[derive(Debug, Clone)]
pub struct EpeReport {
    pub mean: f64,
    pub map: Image,
}

/// Euclidean distance between predicted and ground-truth displacement,
/// per pixel, with the scalar score being the spatial mean.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<EpeReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            "epe",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            ),
        ));
    }
    let n = pred.width * pred.height;
    let mut map = vec![0.0f64; n];
    let mut sum = 0.0;
    for (i, cell) in map.iter_mut().enumerate() {
        let du = pred.u[i] - gt.u[i];
        let dv = pred.v[i] - gt.v[i];
        let e = (du * du + dv * dv).sqrt();
        *cell = e;
        sum += e;
    }
    Ok(EpeReport {
        mean: sum / n as f64,
        map: Image {
            width: pred.width,
            height: pred.height,
            data: map,
        },
    })
}
