//! WebAssembly bindings for the static demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Image pixels plus a JSON description, as handed to the page.
#[wasm_bindgen]
pub struct Preview(demo::Preview);

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }

    /// `size × size × 4` bytes, ready for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn info(&self) -> String {
        self.0.info.clone()
    }
}

/// `task` is "seg" or "cls"; a negative `augment_seed` disables augmentation.
#[wasm_bindgen(js_name = syntheticPreview)]
pub fn synthetic_preview(
    task: &str,
    index: usize,
    size: usize,
    seed: u32,
    augment_seed: i32,
) -> Result<Preview, JsError> {
    let aug = (augment_seed >= 0).then_some(augment_seed as u64);
    demo::synthetic_preview(task, index, size, seed as u64, aug).map(Preview).map_err(js)
}

/// Model config JSON for "full", "toy" or "demo".
#[wasm_bindgen(js_name = presetConfig)]
pub fn preset_config(name: &str) -> Result<String, JsError> {
    demo::preset(name).map(|c| c.to_json()).map_err(js)
}

#[wasm_bindgen(js_name = countParams)]
pub fn count_params(config_json: &str, prompts: bool) -> Result<String, JsError> {
    demo::count_params_json(config_json, prompts).map_err(js)
}

#[wasm_bindgen]
pub struct Trainer(demo::Trainer);

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_seg: usize, n_cls: usize) -> Result<Trainer, JsError> {
        demo::Trainer::new(seed as u64, n_seg, n_cls).map(Trainer).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn epochs(&self) -> u32 {
        self.0.epochs() as u32
    }

    #[wasm_bindgen(getter, js_name = segCount)]
    pub fn seg_count(&self) -> usize {
        self.0.seg_count()
    }

    pub fn step(&mut self) -> Result<String, JsError> {
        self.0.step().map_err(js)
    }

    pub fn metrics(&self) -> Result<String, JsError> {
        self.0.metrics().map_err(js)
    }

    pub fn predict(&self, index: usize) -> Result<Preview, JsError> {
        self.0.predict(index).map(Preview).map_err(js)
    }
}
