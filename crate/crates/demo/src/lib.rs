//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function returning
//! `Result<_, String>`, so the logic is testable off the browser.

use nowcast_core::data::{gen_synthetic, FrameDataset, SynthConfig, WindowSpec, Windows};
use nowcast_core::eval::evaluate;
use nowcast_core::optim::Cawrs;
use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// A generated blob world held on the wasm side.
#[wasm_bindgen]
pub struct World {
    ds: FrameDataset,
}

impl World {
    pub fn generate(seed: u64, size: usize, blobs: usize, velocity: f64, frames: usize) -> Result<World, String> {
        let cfg = SynthConfig {
            seed,
            frames,
            height: size,
            width: size,
            blobs,
            velocity_range: velocity,
            ..SynthConfig::default()
        };
        Ok(World { ds: gen_synthetic(&cfg).map_err(|e| e.to_string())? })
    }

    pub fn rgba(&self, t: usize, c: usize) -> Result<Vec<u8>, String> {
        if t >= self.ds.frames() || c >= self.ds.dynamic_channels() {
            return Err(format!("frame {t} / channel {c} out of range"));
        }
        Ok(rgba(self.ds.plane(t, c)))
    }

    pub fn persistence(&self, t_in: usize, t_out: usize) -> Result<Vec<f64>, String> {
        let spec = WindowSpec::new(t_in, t_out, (0..self.ds.dynamic_channels()).collect());
        let report = Windows::all(&self.ds, spec)
            .and_then(|w| evaluate(&[], &[], &w, 16))
            .map_err(|e| e.to_string())?;
        Ok(report.persistence().per_lead.clone())
    }
}

#[wasm_bindgen]
impl World {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, blobs: usize, velocity: f64, frames: usize) -> Result<World, JsError> {
        World::generate(seed, size, blobs, velocity, frames).map_err(js)
    }

    pub fn frames(&self) -> usize {
        self.ds.frames()
    }

    pub fn size(&self) -> usize {
        self.ds.height()
    }

    /// Names of the dynamic channels accepted by `frame_rgba`.
    pub fn channel_names(&self) -> Vec<String> {
        self.ds.names()[..self.ds.dynamic_channels()].to_vec()
    }

    /// Channel `c` of frame `t` as RGBA pixels, min-max scaled through a
    /// white-to-blue ramp.
    pub fn frame_rgba(&self, t: usize, c: usize) -> Result<Vec<u8>, JsError> {
        self.rgba(t, c).map_err(js)
    }

    /// Persistence MSE per lead time (normalized units) over every window.
    pub fn persistence_curve(&self, t_in: usize, t_out: usize) -> Result<Vec<f64>, JsError> {
        self.persistence(t_in, t_out).map_err(js)
    }
}

pub fn rgba(plane: &[f32]) -> Vec<u8> {
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    plane
        .iter()
        .flat_map(|&v| {
            let s = (v - lo) / span;
            let r = (255.0 * (1.0 - s)) as u8;
            let g = (255.0 * (1.0 - 0.6 * s)) as u8;
            [r, g, 255, 255]
        })
        .collect()
}

pub fn schedule(lr_max: f64, lr_min: f64, t0: usize, t_mult: usize, steps: usize) -> Result<Vec<f64>, String> {
    if t0 == 0 || t_mult == 0 || !(lr_min <= lr_max) {
        return Err("need t0 >= 1, t_mult >= 1 and lr_min <= lr_max".into());
    }
    let mut s = Cawrs::new(lr_max, lr_min, t0, t_mult);
    Ok((0..steps)
        .map(|_| {
            let lr = s.lr();
            s.step();
            lr
        })
        .collect())
}

/// Learning rate at each of the first `steps` optimizer steps of a cosine
/// schedule with warm restarts.
#[wasm_bindgen]
pub fn cawrs_curve(lr_max: f64, lr_min: f64, t0: usize, t_mult: usize, steps: usize) -> Result<Vec<f64>, JsError> {
    schedule(lr_max, lr_min, t0, t_mult, steps).map_err(js)
}
