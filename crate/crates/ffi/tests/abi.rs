use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robosplat::camera::Camera;
use robosplat::checkpoint::write_checkpoint;
use robosplat::deform::{pose_splat, GradRequest, NetworkConfig, SplatModel};
use robosplat::kinematics::Pose;
use robosplat::math::Vec3;
use robosplat::raster::render;
use robosplat::robot::parse_urdf;
use robosplat::synth::build_blob_robot;
use robosplat_ffi::*;

const BG: [f64; 3] = [0.1, 0.2, 0.3];

fn model() -> SplatModel {
    let robot = parse_urdf(include_str!("../../core/assets/arm3.urdf")).unwrap();
    let blob = build_blob_robot(&robot, 200, 5).unwrap();
    let cfg = NetworkConfig {
        hidden: 16,
        hidden_layers: 2,
        ..Default::default()
    };
    let mut m = SplatModel::new(robot, blob.gaussians, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    // what a loaded checkpoint holds
    m.quantize_f32();
    m
}

fn camera() -> Camera {
    Camera::with_fov(24, 20, 1.0).look_at(&Vec3::new(1.1, -0.9, 0.8), &Vec3::new(0.1, 0.0, 0.3), &Vec3::z())
}

fn rs_camera(c: &Camera) -> RsCamera {
    RsCamera {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width as u32,
        height: c.height as u32,
        rotation: c.rotation,
        translation: c.translation,
    }
}

fn load(path: &Path) -> *mut RsModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { rs_model_load(c.as_ptr(), &mut h) }, RsStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rs_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn render_and_gradient_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.drbt");
    let m = model();
    write_checkpoint(&path, &m, &[]).unwrap();
    let h = load(&path);
    assert_eq!(unsafe { rs_model_dof(h) }, 3);
    assert_eq!(unsafe { rs_model_gaussian_count(h) }, m.gaussians.len());

    let cam = camera();
    let rc = rs_camera(&cam);
    let pose = [0.2, -0.3, 0.4];
    let n = cam.width * cam.height * 3;
    let mut out = vec![0f32; n];
    let st = unsafe { rs_render(h, pose.as_ptr(), 3, &rc, BG.as_ptr(), out.as_mut_ptr(), n) };
    assert_eq!(st, RsStatus::Ok);
    let posed = pose_splat(&m, &Pose(pose.to_vec()), GradRequest::NONE, None).unwrap();
    let img = render(&cam, &posed, BG);
    assert!(out.iter().zip(&img.data).all(|(a, b)| *a == *b as f32));

    // L = <c, I>; its pose gradient against central differences in f64
    let cot: Vec<f32> = (0..n).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect();
    let mut grad = [0.0; 3];
    let st = unsafe {
        rs_pose_gradient(
            h,
            pose.as_ptr(),
            3,
            &rc,
            BG.as_ptr(),
            cot.as_ptr(),
            n,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(st, RsStatus::Ok, "{}", last_error());
    let loss = |p: &[f64]| {
        let posed = pose_splat(&m, &Pose(p.to_vec()), GradRequest::NONE, None).unwrap();
        render(&cam, &posed, BG)
            .data
            .iter()
            .zip(&cot)
            .map(|(a, b)| a * f64::from(*b))
            .sum::<f64>()
    };
    let h_fd = 1e-5;
    for j in 0..3 {
        let mut a = pose.to_vec();
        let mut b = pose.to_vec();
        a[j] += h_fd;
        b[j] -= h_fd;
        let fd = (loss(&a) - loss(&b)) / (2.0 * h_fd);
        let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
        assert!(rel <= 1e-3, "joint {j}: tape {} fd {fd}", grad[j]);
    }
    unsafe { rs_model_free(h) };
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("absent.drbt").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { rs_model_load(missing.as_ptr(), &mut h) }, RsStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("absent.drbt"));

    let junk = dir.path().join("junk.drbt");
    std::fs::write(&junk, b"DRBT nonsense").unwrap();
    let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rs_model_load(junk_c.as_ptr(), &mut h) }, RsStatus::Format);

    assert_eq!(unsafe { rs_model_load(ptr::null(), &mut h) }, RsStatus::NullPointer);

    let path = dir.path().join("m.drbt");
    write_checkpoint(&path, &model(), &[]).unwrap();
    let h = load(&path);
    let rc = rs_camera(&camera());
    let mut out = vec![0f32; 10];
    let pose = [0.0; 3];
    let st = unsafe { rs_render(h, pose.as_ptr(), 3, &rc, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, RsStatus::InvalidArgument);
    assert!(last_error().contains("10 floats"));
    let st = unsafe { rs_render(h, pose.as_ptr(), 2, &rc, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, RsStatus::InvalidArgument);
    assert!(last_error().contains("degrees of freedom"));
    let st = unsafe {
        rs_render(
            ptr::null(),
            pose.as_ptr(),
            3,
            &rc,
            ptr::null(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, RsStatus::NullPointer);
    assert_eq!(unsafe { rs_model_dof(ptr::null()) }, 0);
    unsafe {
        rs_model_free(h);
        rs_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/robosplat.h")).unwrap();
    for name in [
        "rs_last_error",
        "rs_model_load",
        "rs_model_free",
        "rs_model_dof",
        "rs_model_gaussian_count",
        "rs_render",
        "rs_pose_gradient",
        "typedef struct RsModel RsModel",
        "RS_STATUS_OK = 0",
        "RsCamera",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // the header must also be valid C where a compiler is around
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/robosplat.h"))
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
