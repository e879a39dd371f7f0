//! Volume inference with per-image feature caching: when key slices are
//! swept over a volume, each 3-slice image recurs in up to M slice groups,
//! so its conv5/conv6 maps are computed once and reused. Cached and
//! uncached runs produce identical detections because both paths run the
//! same per-image computation.

use super::net::{compute_image_features, detect_from_features, normalize_intensity, ImageFeatures, Model};
use crate::ct::{ImageVolume, SliceGroup};
use crate::det::Detection;
use crate::error::Result;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Conv1-6 outputs keyed by the (clamped) slice triple of one image.
#[derive(Default)]
pub struct FeatureCache {
    map: HashMap<[usize; 3], ImageFeatures>,
    pub hits: usize,
    pub misses: usize,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn triple_tensor(vol: &ImageVolume, triple: [usize; 3]) -> Tensor<f32> {
    let (_, ny, nx) = vol.dims;
    let mut data = Vec::with_capacity(3 * ny * nx);
    for &z in &triple {
        data.extend(vol.slice(z).iter().map(|&v| normalize_intensity::<f32>(v)));
    }
    Tensor::from_vec(vec![1, 3, ny, nx], data).expect("triple dims")
}

fn features_for_triple(model: &Model, vol: &ImageVolume, triple: [usize; 3], cache: Option<&mut FeatureCache>) -> Result<ImageFeatures> {
    match cache {
        Some(c) => {
            if let Some(f) = c.map.get(&triple) {
                c.hits += 1;
                return Ok(f.clone());
            }
            c.misses += 1;
            let f = compute_image_features(model, &triple_tensor(vol, triple))?;
            c.map.insert(triple, f.clone());
            Ok(f)
        }
        None => compute_image_features(model, &triple_tensor(vol, triple)),
    }
}

/// Detections for each requested key slice of a preprocessed volume.
/// Returns (key_slice, detections) pairs in the order requested.
pub fn infer_volume(
    model: &Model,
    vol: &ImageVolume,
    key_slices: &[usize],
    use_cache: bool,
) -> Result<Vec<(usize, Vec<Detection>)>> {
    let (nz, ny, nx) = vol.dims;
    let m = model.cfg.m;
    let mut cache = FeatureCache::new();
    let mut out = Vec::with_capacity(key_slices.len());
    for &key in key_slices {
        let indices = SliceGroup::slice_indices(m, key, nz);
        let mut features = Vec::with_capacity(m);
        for img in 0..m {
            let triple = [indices[img * 3], indices[img * 3 + 1], indices[img * 3 + 2]];
            let f = features_for_triple(model, vol, triple, if use_cache { Some(&mut cache) } else { None })?;
            features.push(f);
        }
        let dets = detect_from_features(model, &features, (nx as f32, ny as f32))?;
        out.push((key, dets));
    }
    Ok(out)
}
