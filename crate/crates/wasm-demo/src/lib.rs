//! Browser demo over the core crate: voxelize a procedural exemplar, paint a
//! coarse conditioning slice, grow it with the degenerate infused kernel and
//! refine the result with sparse patch consistency.
//!
//! Point buffers are flat `[x, y, z, r, g, b]` rows in unit-cube coordinates.

pub mod session;

use wasm_bindgen::prelude::*;

pub use session::{DemoError, Session};

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    /// `seed` is 32-bit so that plain JS numbers can be passed.
    #[wasm_bindgen(constructor)]
    pub fn new(points: usize, seed: u32) -> Result<Demo, JsError> {
        Ok(Demo(Session::new(points, seed.into())?))
    }

    pub fn voxelize(&mut self, resolution: u32, eta_thres: f64) -> Result<usize, JsError> {
        Ok(self.0.voxelize(resolution, eta_thres)?)
    }

    pub fn resolution(&self) -> u32 {
        self.0.resolution()
    }

    pub fn exemplar_points(&self) -> Vec<f32> {
        self.0.exemplar_points()
    }

    pub fn conditioning_slice(&self, z: i32) -> Vec<u8> {
        self.0.conditioning_slice(z)
    }

    pub fn toggle_coarse(&mut self, x: i32, y: i32, z: i32) -> Result<bool, JsError> {
        Ok(self.0.toggle_coarse(x, y, z)?)
    }

    pub fn reset_conditioning(&mut self) {
        self.0.reset_conditioning()
    }

    pub fn grow(&mut self, steps: usize, radius: i32) -> Result<usize, JsError> {
        Ok(self.0.grow(steps, radius)?)
    }

    pub fn state_points(&self, t: usize) -> Vec<f32> {
        self.0.state_points(t)
    }

    pub fn refine(&mut self, iterations: usize) -> Result<usize, JsError> {
        Ok(self.0.refine(iterations)?)
    }

    pub fn refined_points(&self) -> Vec<f32> {
        self.0.refined_points()
    }

    pub fn iou(&self) -> f64 {
        self.0.iou()
    }

    pub fn unreached(&self) -> usize {
        self.0.unreached()
    }

    pub fn conditioning_json(&self) -> String {
        self.0.conditioning_json()
    }
}
