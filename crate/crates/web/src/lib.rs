//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The demo renders a synthetic scene, scores the cloudy image against the
//! clear one, and shows how attentive selection prunes the similarity row of
//! a clicked patch. The plain functions below do the work and are tested
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use acacr::data::{CloudSettings, DatasetManifest, SamplePair};
use acacr::metrics::{evaluate_pair, SsimMode};
use acacr::network::{BlockVariant, NetworkConfig};
use acacr::trainer::initial_network;
use acacr::Tensor;
use wasm_bindgen::prelude::*;

/// Channel width of the demo network; small enough to stay interactive.
pub const DEMO_CHANNELS: usize = 16;

pub fn build_scene(seed: u32, size: usize, coverage: f64, softness: f64) -> Result<SamplePair, String> {
    let manifest = DatasetManifest::with_count(
        seed as u64,
        size,
        3,
        1,
        CloudSettings {
            coverage,
            softness,
            ..Default::default()
        },
    );
    manifest.validate().map_err(|e| e.to_string())?;
    manifest.generate(0).map_err(|e| e.to_string())
}

/// RGBA bytes of a 1- or 3-band `[0, 1]` image.
pub fn to_rgba(t: &Tensor<f32>) -> Vec<u8> {
    let c = t.shape()[2];
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    t.data()
        .chunks(c)
        .flat_map(|px| match px {
            [r, g, b] => [q(*r), q(*g), q(*b), 255],
            [v, ..] => [q(*v), q(*v), q(*v), 255],
            [] => [0, 0, 0, 255],
        })
        .collect()
}

/// Metrics of the cloudy image against the clear one, as JSON.
pub fn scene_metrics(pair: &SamplePair) -> Result<String, String> {
    let m = evaluate_pair("scene", &pair.cloudy, &pair.clear, SsimMode::Global).map_err(|e| e.to_string())?;
    Ok(serde_json::json!({
        "mae": m.mae,
        "mse": m.mse,
        "psnr_db": if m.psnr_db.is_finite() { Some(m.psnr_db) } else { None },
        "ssim": m.ssim,
        "sam_deg": m.sam_deg,
    })
    .to_string())
}

/// Similarity rows of the first attention block for the patch under
/// `(r, c)`, taken from a freshly initialized network.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct SimilarityRows {
    grid_rows: usize,
    grid_cols: usize,
    query_index: usize,
    s_p: Vec<f64>,
    s_att: Vec<f64>,
}

#[wasm_bindgen]
impl SimilarityRows {
    #[wasm_bindgen(getter)]
    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }
    #[wasm_bindgen(getter)]
    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }
    #[wasm_bindgen(getter)]
    pub fn query_index(&self) -> usize {
        self.query_index
    }
    /// Softmax similarity, as used by contextual attention.
    pub fn softmax_row(&self) -> Vec<f64> {
        self.s_p.clone()
    }
    /// Row after mean-centering, the learned linear map and ReLU.
    pub fn attentive_row(&self) -> Vec<f64> {
        self.s_att.clone()
    }
    pub fn pruned_count(&self) -> usize {
        self.s_att.iter().filter(|&&v| v == 0.0).count()
    }
}

pub fn similarity_rows(pair: &SamplePair, seed: u32, r: f64, c: f64) -> Result<SimilarityRows, String> {
    let config = NetworkConfig::new(3, DEMO_CHANNELS, BlockVariant::Ac);
    let net = initial_network::<f32>(config, seed as u64).map_err(|e| e.to_string())?;
    let (_, records) = net.forward_traced(&pair.cloudy, (r, c)).map_err(|e| e.to_string())?;
    let rec = records.into_iter().next().ok_or("network has no attention block")?;
    Ok(SimilarityRows {
        grid_rows: rec.grid.0,
        grid_cols: rec.grid.1,
        query_index: rec.query_index,
        s_p: rec.s_p_row().to_vec(),
        s_att: rec.s_att_row().ok_or("attention block has no selection")?.to_vec(),
    })
}

#[wasm_bindgen]
pub struct Scene {
    pair: SamplePair,
    seed: u32,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, coverage: f64, softness: f64) -> Result<Scene, JsValue> {
        let pair = build_scene(seed, size, coverage, softness).map_err(|e| JsValue::from_str(&e))?;
        Ok(Scene { pair, seed })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.pair.clear.shape()[0]
    }

    pub fn clear_rgba(&self) -> Vec<u8> {
        to_rgba(&self.pair.clear)
    }

    pub fn cloudy_rgba(&self) -> Vec<u8> {
        to_rgba(&self.pair.cloudy)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        to_rgba(&self.pair.mask)
    }

    pub fn metrics_json(&self) -> Result<String, JsValue> {
        scene_metrics(&self.pair).map_err(|e| JsValue::from_str(&e))
    }

    /// `r` and `c` are fractions of the image height and width.
    pub fn similarity(&self, r: f64, c: f64) -> Result<SimilarityRows, JsValue> {
        similarity_rows(&self.pair, self.seed, r, c).map_err(|e| JsValue::from_str(&e))
    }
}
