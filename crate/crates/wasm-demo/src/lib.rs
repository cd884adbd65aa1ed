//! wasm-bindgen bindings for the static demo page in `www/`.

pub mod demo;

use eusml_core::enhance::Method;
use wasm_bindgen::prelude::*;

use demo::{kind_name, to_rgba, Session};

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(width: usize, height: usize, seed: u64) -> Result<Demo, JsError> {
        Ok(Demo { inner: Session::new(width, height, seed).map_err(|e| JsError::new(&e))? })
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.inner.width()
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.inner.height()
    }

    /// Generates a frame of `kind` and returns it as RGBA.
    pub fn generate(&mut self, kind: &str) -> Result<Vec<u8>, JsError> {
        self.inner.generate(kind).map(to_rgba).map_err(|e| JsError::new(&e))
    }

    /// RGBA preview of the current frame after `method`.
    pub fn enhance(&self, method: &str) -> Result<Vec<u8>, JsError> {
        self.inner.enhanced(method).map(|img| to_rgba(&img)).map_err(|e| JsError::new(&e))
    }

    /// Noise verdict for the current frame as JSON.
    pub fn classify(&self) -> Result<String, JsError> {
        let v = self.inner.classify().map_err(|e| JsError::new(&e))?;
        Ok(serde_json::json!({ "kind": kind_name(v.kind), "scores": v.scores }).to_string())
    }
}

#[wasm_bindgen]
pub fn methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.as_str().to_string()).collect()
}

#[wasm_bindgen(js_name = frameKinds)]
pub fn frame_kinds() -> Vec<String> {
    eusml_core::pipeline::NoiseKind::ALL.iter().map(|&k| kind_name(k).to_string()).collect()
}
