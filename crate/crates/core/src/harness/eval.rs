use super::checkpoint::Checkpoint;
use super::dataset::Sample;
use crate::error::Result;
use crate::metrics::{evaluate_detections, Detection, ImageResult, MetricReport};
use crate::numeric::ParamStore;
use crate::transformer::DtLsd;

/// Thresholds reported by default.
pub const DEFAULT_TAUS: [f64; 3] = [5.0, 10.0, 15.0];

/// Runs the model on every sample and keeps all queries as detections.
pub fn detect_all(model: &DtLsd, store: &ParamStore, data: &[Sample]) -> Result<Vec<ImageResult>> {
    data.iter()
        .map(|s| {
            let preds = model.predict(store, &s.image)?;
            Ok(ImageResult {
                detections: preds
                    .into_iter()
                    .map(|p| Detection {
                        line: p.line,
                        confidence: p.prob,
                    })
                    .collect(),
                gt: s.gt.clone(),
            })
        })
        .collect()
}

/// Metrics of a model over `data`.
pub fn evaluate_with(model: &DtLsd, store: &ParamStore, data: &[Sample], taus: &[f64]) -> Result<MetricReport> {
    evaluate_detections(&detect_all(model, store, data)?, taus)
}

/// Metrics of a checkpoint over `data`.
pub fn evaluate_model(ckpt: &Checkpoint, data: &[Sample], taus: &[f64]) -> Result<MetricReport> {
    let (model, store) = ckpt.build_model()?;
    evaluate_with(&model, &store, data, taus)
}
