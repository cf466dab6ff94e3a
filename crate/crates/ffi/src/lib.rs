//! C ABI for the calibration pipeline: load a trained checkpoint and run
//! iterative radar-camera extrinsic calibration from raw buffers.
//!
//! Every function is panic-safe and returns a status code; `NULL` handles and
//! buffers are rejected with a null-argument status. The last error detail is
//! available per thread via [`radcam_last_error_message`].

use radcam::fusion::iterate_calibration;
use radcam::geometry::{BevIntrinsics, CameraIntrinsics, PointCloud, RigidTransform, SensorTag};
use radcam::kernels::checkpoint::Checkpoint;
use radcam::model::{CalibNet, SceneParams};
use radcam::raster::{InfoMap, MapSource, ViewTag};
use radcam::synthdata::SampleData;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadcamStatus {
    RadcamStatusOk = 0,
    RadcamStatusNullArgument = 1,
    RadcamStatusInvalidUtf8 = 2,
    RadcamStatusIo = 3,
    RadcamStatusBadCheckpoint = 4,
    RadcamStatusBadDimensions = 5,
    RadcamStatusNumeric = 6,
    RadcamStatusPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    });
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn radcam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn radcam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque trained model handle.
pub struct RadcamModel {
    net: CalibNet,
}

/// Camera and BEV projection geometry for one calibration call.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RadcamSceneParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub bev_sx: f64,
    pub bev_sz: f64,
    pub bev_cx: f64,
    pub bev_cz: f64,
    pub camera_height: f64,
}

fn guard<F: FnOnce() -> RadcamStatus>(f: F) -> RadcamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in radcam".to_string());
            set_error(msg);
            RadcamStatus::RadcamStatusPanic
        }
    }
}

/// Loads a trained checkpoint from `path` into a new model handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer to receive the handle. Free the handle with [`radcam_model_free`].
#[no_mangle]
pub unsafe extern "C" fn radcam_model_load(
    path: *const c_char,
    out_model: *mut *mut RadcamModel,
) -> RadcamStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            set_error("null argument to radcam_model_load");
            return RadcamStatus::RadcamStatusNullArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8");
                return RadcamStatus::RadcamStatusInvalidUtf8;
            }
        };
        let ckpt = match Checkpoint::load(std::path::Path::new(path)) {
            Ok(c) => c,
            Err(e) => {
                set_error(format!("cannot read checkpoint: {e}"));
                return RadcamStatus::RadcamStatusIo;
            }
        };
        match CalibNet::from_checkpoint(&ckpt) {
            Ok(net) => {
                unsafe { *out_model = Box::into_raw(Box::new(RadcamModel { net })) };
                RadcamStatus::RadcamStatusOk
            }
            Err(e) => {
                set_error(format!("bad checkpoint: {e}"));
                RadcamStatus::RadcamStatusBadCheckpoint
            }
        }
    })
}

/// Releases a model handle. A NULL handle is a no-op.
///
/// # Safety
/// `model` must be a handle returned by [`radcam_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn radcam_model_free(model: *mut RadcamModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of refine-and-rerender iterations the model runs per calibration.
///
/// # Safety
/// `model` must be a live handle from [`radcam_model_load`].
#[no_mangle]
pub unsafe extern "C" fn radcam_model_iterations(model: *const RadcamModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.net.config.iterations as u32
}

/// Expected depth-map dimensions (rows, cols) for this model.
///
/// # Safety
/// `model` must be a live handle; `out_h`/`out_w` valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn radcam_model_depth_dims(
    model: *const RadcamModel,
    out_h: *mut u32,
    out_w: *mut u32,
) -> RadcamStatus {
    if model.is_null() || out_h.is_null() || out_w.is_null() {
        set_error("null argument to radcam_model_depth_dims");
        return RadcamStatus::RadcamStatusNullArgument;
    }
    let dims = unsafe { &*model }.net.config.fv_dims;
    unsafe {
        *out_h = dims.0 as u32;
        *out_w = dims.1 as u32;
    }
    RadcamStatus::RadcamStatusOk
}

/// Runs iterative calibration.
///
/// Inputs: `radar_xyz` is `radar_count * 3` floats (radar-frame points,
/// row-major XYZ); `depth` is a `depth_h x depth_w` row-major metric depth
/// map (0 = no return) matching the model's expected dimensions;
/// `t_init` is the initial radar-to-camera extrinsic as a row-major 4x4
/// matrix. Outputs: `out_t` receives the refined 4x4 extrinsic; when
/// `out_steps` is non-NULL it receives one row-major 4x4 per iteration
/// (`radcam_model_iterations` matrices).
///
/// # Safety
/// All pointers must be valid for the stated element counts; buffers must
/// not alias `out_t`/`out_steps`.
#[no_mangle]
pub unsafe extern "C" fn radcam_calibrate(
    model: *const RadcamModel,
    radar_xyz: *const f32,
    radar_count: usize,
    depth: *const f32,
    depth_h: usize,
    depth_w: usize,
    scene: RadcamSceneParams,
    t_init: *const f64,
    out_t: *mut f64,
    out_steps: *mut f64,
) -> RadcamStatus {
    guard(|| {
        if model.is_null()
            || (radar_xyz.is_null() && radar_count > 0)
            || depth.is_null()
            || t_init.is_null()
            || out_t.is_null()
        {
            set_error("null argument to radcam_calibrate");
            return RadcamStatus::RadcamStatusNullArgument;
        }
        let model = unsafe { &*model };
        if (depth_h, depth_w) != model.net.config.fv_dims {
            set_error(format!(
                "depth map is {}x{}, model expects {}x{}",
                depth_h, depth_w, model.net.config.fv_dims.0, model.net.config.fv_dims.1
            ));
            return RadcamStatus::RadcamStatusBadDimensions;
        }
        if scene.fx <= 0.0 || scene.fy <= 0.0 || scene.bev_sx <= 0.0 || scene.bev_sz <= 0.0 {
            set_error("intrinsics scales must be positive");
            return RadcamStatus::RadcamStatusBadDimensions;
        }

        let radar_slice = if radar_count == 0 {
            &[][..]
        } else {
            unsafe { std::slice::from_raw_parts(radar_xyz, radar_count * 3) }
        };
        let points: Vec<_> = radar_slice
            .chunks_exact(3)
            .map(|c| nalgebra::Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite() || !p.z.is_finite()) {
            set_error("radar points contain non-finite coordinates");
            return RadcamStatus::RadcamStatusNumeric;
        }

        let depth_slice = unsafe { std::slice::from_raw_parts(depth, depth_h * depth_w) };
        let mut depth_map = InfoMap::empty(depth_h, depth_w, ViewTag::Fv, MapSource::Image);
        for y in 0..depth_h {
            for x in 0..depth_w {
                let v = depth_slice[y * depth_w + x];
                if !v.is_finite() {
                    set_error("depth map contains non-finite values");
                    return RadcamStatus::RadcamStatusNumeric;
                }
                if v > 0.0 {
                    depth_map.set(y, x, v);
                }
            }
        }

        let t_init_slice = unsafe { std::slice::from_raw_parts(t_init, 16) };
        let mut m = [0.0f64; 16];
        m.copy_from_slice(t_init_slice);
        let t0 = RigidTransform::from_matrix4_rows(&m);

        let scene_params = SceneParams {
            k: CameraIntrinsics::new(scene.fx, scene.fy, scene.cx, scene.cy),
            kb: BevIntrinsics::new(scene.bev_sx, scene.bev_sz, scene.bev_cx, scene.bev_cz),
            cam_height: scene.camera_height,
        };
        let data = SampleData {
            id: 0,
            t_gt: RigidTransform::identity(),
            radar: PointCloud::new(points, SensorTag::Radar),
            lidar: PointCloud::new(vec![], SensorTag::Lidar),
            depth: depth_map,
        };
        let prepared = model.net.prepare_sample(&data, scene_params);
        let n = model.net.config.iterations;
        let pred = iterate_calibration(&model.net, &prepared, t0, n);
        if pred
            .final_t
            .to_matrix4_rows()
            .iter()
            .any(|v| !v.is_finite())
        {
            set_error("calibration produced non-finite transform");
            return RadcamStatus::RadcamStatusNumeric;
        }
        unsafe {
            let rows = pred.final_t.to_matrix4_rows();
            std::ptr::copy_nonoverlapping(rows.as_ptr(), out_t, 16);
            if !out_steps.is_null() {
                for (k, t) in pred.t_after.iter().enumerate() {
                    let rows = t.to_matrix4_rows();
                    std::ptr::copy_nonoverlapping(rows.as_ptr(), out_steps.add(k * 16), 16);
                }
            }
        }
        RadcamStatus::RadcamStatusOk
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use radcam::model::ModelConfig;
    use radcam::synthdata::{generate_dataset, GenConfig};

    fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
        let model = CalibNet::new(ModelConfig {
            channels: 8,
            ffn_hidden: 16,
            d_f: 32,
            d_z: 16,
            lstm_hidden: 16,
            seed: 4,
            ..ModelConfig::default()
        });
        let path = dir.join("model.ckpt");
        model.to_checkpoint().save(&path).unwrap();
        path
    }

    fn scene_params(gen: &GenConfig) -> RadcamSceneParams {
        RadcamSceneParams {
            fx: gen.k.fx,
            fy: gen.k.fy,
            cx: gen.k.cx,
            cy: gen.k.cy,
            bev_sx: gen.kb.sx,
            bev_sz: gen.kb.sz,
            bev_cx: gen.kb.cx,
            bev_cz: gen.kb.cz,
            camera_height: gen.cam_height,
        }
    }

    #[test]
    fn load_calibrate_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(dir.path());
        let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
        let mut handle: *mut RadcamModel = std::ptr::null_mut();
        let status = unsafe { radcam_model_load(cpath.as_ptr(), &mut handle) };
        assert_eq!(status, RadcamStatus::RadcamStatusOk);
        assert!(!handle.is_null());
        assert_eq!(unsafe { radcam_model_iterations(handle) }, 3);
        let (mut h, mut w) = (0u32, 0u32);
        assert_eq!(
            unsafe { radcam_model_depth_dims(handle, &mut h, &mut w) },
            RadcamStatus::RadcamStatusOk
        );
        assert_eq!((h, w), (48, 96));

        let gen = GenConfig {
            lidar_points: 50,
            ..GenConfig::default()
        };
        let sample = generate_dataset(7, 1, &gen).remove(0);
        let radar: Vec<f32> = sample
            .radar
            .points
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect();
        let depth: Vec<f32> = sample.depth.values().to_vec();
        let t_init = sample.t_gt.to_matrix4_rows();
        let mut out_t = [0.0f64; 16];
        let mut steps = [0.0f64; 48];
        let status = unsafe {
            radcam_calibrate(
                handle,
                radar.as_ptr(),
                radar.len() / 3,
                depth.as_ptr(),
                48,
                96,
                scene_params(&gen),
                t_init.as_ptr(),
                out_t.as_mut_ptr(),
                steps.as_mut_ptr(),
            )
        };
        assert_eq!(status, RadcamStatus::RadcamStatusOk);
        // Zero-initialized regression heads leave the estimate unchanged.
        for (a, b) in out_t.iter().zip(t_init.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(steps.iter().all(|v| v.is_finite()));
        unsafe { radcam_model_free(handle) };
    }

    #[test]
    fn null_and_bad_inputs_are_rejected() {
        let mut handle: *mut RadcamModel = std::ptr::null_mut();
        let status = unsafe { radcam_model_load(std::ptr::null(), &mut handle) };
        assert_eq!(status, RadcamStatus::RadcamStatusNullArgument);
        let msg = unsafe { CStr::from_ptr(radcam_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("null"));

        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let status = unsafe { radcam_model_load(missing.as_ptr(), &mut handle) };
        assert_eq!(status, RadcamStatus::RadcamStatusIo);

        // Wrong depth dimensions.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(dir.path());
        let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
        let status = unsafe { radcam_model_load(cpath.as_ptr(), &mut handle) };
        assert_eq!(status, RadcamStatus::RadcamStatusOk);
        let gen = GenConfig::default();
        let depth = vec![1.0f32; 10 * 10];
        let t = radcam::geometry::RigidTransform::identity().to_matrix4_rows();
        let mut out = [0.0f64; 16];
        let status = unsafe {
            radcam_calibrate(
                handle,
                std::ptr::null(),
                0,
                depth.as_ptr(),
                10,
                10,
                scene_params(&gen),
                t.as_ptr(),
                out.as_mut_ptr(),
                std::ptr::null_mut(),
            )
        };
        assert_eq!(status, RadcamStatus::RadcamStatusBadDimensions);
        unsafe { radcam_model_free(handle) };
        unsafe { radcam_model_free(std::ptr::null_mut()) };
    }

    #[test]
    fn version_is_present() {
        let v = unsafe { CStr::from_ptr(radcam_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }
}
