//! Browser demo: three interactive views onto the core library, exported
//! through `wasm-bindgen` and driven by `www/index.html`.
//!
//! The exported wrappers only convert errors; the logic lives in plain
//! functions so it can be tested natively.

use wasm_bindgen::prelude::*;

use catpose::geometry::{
    min_symmetric_rotation_error, obb_iou, IouMethod, OrientedBox, Pose, RotationMatrix, SizeVec, Vec3,
    EVAL_CONTINUOUS_SAMPLES,
};
use catpose::synthdata::{generate_sample, DatasetConfig, PrimitiveKind, SceneSample};

/// `[exact, monte_carlo]` IoU of two boxes: `a` at the origin, `b` rotated
/// by `yaw_deg` about y and shifted by `dx` along x.
pub fn box_iou(a: [f64; 3], b: [f64; 3], yaw_deg: f64, dx: f64, samples: usize, seed: u64) -> Result<[f64; 2], String> {
    let sa = SizeVec::new(a[0], a[1], a[2]).map_err(|e| e.to_string())?;
    let sb = SizeVec::new(b[0], b[1], b[2]).map_err(|e| e.to_string())?;
    let ba = OrientedBox::new(Pose::identity(), sa);
    let pose = Pose::new(RotationMatrix::about_y(yaw_deg.to_radians()), Vec3::new(dx, 0.0, 0.0)).map_err(|e| e.to_string())?;
    let bb = OrientedBox::new(pose, sb);
    let mc = IouMethod::MonteCarlo { samples: samples.max(1), seed };
    Ok([obb_iou(&ba, &bb, IouMethod::Exact), obb_iou(&ba, &bb, mc)])
}

fn one_view(category: &str, seed: u64, occlusion: u8) -> Result<SceneSample, String> {
    let kind: PrimitiveKind = category.parse().map_err(|e: catpose::synthdata::SynthError| e.to_string())?;
    let cfg = DatasetConfig {
        categories: vec![kind],
        instances_per_category: 1,
        views_per_instance: 1,
        occlusion_percent: occlusion,
        seed,
        n_points: 1024,
        d_f: 8,
        ..DatasetConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    generate_sample(&cfg, 0).map_err(|e| e.to_string())
}

/// Observed depth image of one rendered view: row-major `height × width`,
/// zero where no point was observed.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthView {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub points: usize,
}

pub fn depth_view(category: &str, seed: u64, occlusion: u8) -> Result<DepthView, String> {
    let s = one_view(category, seed, occlusion)?;
    let k = &s.camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut depth = vec![0.0f32; w * h];
    for (p, px) in s.partial.points().iter().zip(&s.pixel_coords) {
        let (u, v) = (px[0] as usize, px[1] as usize);
        if u < w && v < h {
            depth[v * w + u] = p.z as f32;
        }
    }
    let points = depth.iter().filter(|d| **d > 0.0).count();
    Ok(DepthView { width: w, height: h, depth, points })
}

/// `[plain, symmetry_aware]` rotation error in degrees when the estimate is
/// the ground truth turned by `angle_deg` about the object's y axis.
pub fn rotation_errors(category: &str, seed: u64, angle_deg: f64) -> Result<[f64; 2], String> {
    let s = one_view(category, seed, 0)?;
    let gt = s.gt_pose.rotation;
    let pred = gt.compose(&RotationMatrix::about_y(angle_deg.to_radians()));
    let sym = min_symmetric_rotation_error(&pred, &gt, &s.symmetry, EVAL_CONTINUOUS_SAMPLES).map_err(|e| e.to_string())?;
    Ok([pred.angle_to(&gt).to_degrees(), sym])
}

#[wasm_bindgen(js_name = boxIou)]
pub fn box_iou_js(a: Vec<f64>, b: Vec<f64>, yaw_deg: f64, dx: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    let arr = |v: &[f64]| -> Result<[f64; 3], JsValue> { v.try_into().map_err(|_| JsValue::from_str("sizes need 3 values")) };
    box_iou(arr(&a)?, arr(&b)?, yaw_deg, dx, samples, seed).map(|r| r.to_vec()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct DepthImage {
    inner: DepthView,
}

#[wasm_bindgen]
impl DepthImage {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.inner.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.inner.height
    }

    #[wasm_bindgen(getter)]
    pub fn points(&self) -> usize {
        self.inner.points
    }

    pub fn depth(&self) -> Vec<f32> {
        self.inner.depth.clone()
    }
}

#[wasm_bindgen(js_name = renderView)]
pub fn render_view_js(category: &str, seed: u64, occlusion: u8) -> Result<DepthImage, JsValue> {
    depth_view(category, seed, occlusion).map(|inner| DepthImage { inner }).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = rotationErrors)]
pub fn rotation_errors_js(category: &str, seed: u64, angle_deg: f64) -> Result<Vec<f64>, JsValue> {
    rotation_errors(category, seed, angle_deg).map(|r| r.to_vec()).map_err(|e| JsValue::from_str(&e))
}
