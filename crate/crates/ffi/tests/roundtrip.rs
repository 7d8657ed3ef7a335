//! Drive the C surface end to end from Rust: build from JSON, infer,
//! checkpoint round-trip, standalone conduction, and the error protocol.

use std::ffi::{CStr, CString};
use std::ptr;

use vheat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vheat_last_error()).to_string_lossy().into_owned() }
}

const CONFIG: &str = r#"{
    "layers": [1, 1, 1, 1],
    "channels": [8, 16, 32, 64],
    "mlp_ratio": 2,
    "drop_path": 0.0,
    "num_classes": 10,
    "input_extent": 32,
    "dtype": "f32",
    "k_mode": "predicted"
}"#;

#[test]
fn build_forward_save_load_forward_roundtrip() {
    let json = CString::new(CONFIG).unwrap();
    let mut model: *mut VheatModel = ptr::null_mut();
    unsafe {
        assert_eq!(vheat_model_build(json.as_ptr(), 7, &mut model), VHEAT_OK);
        assert!(!model.is_null());

        let mut params = 0usize;
        assert_eq!(vheat_model_num_params(model, &mut params), VHEAT_OK);
        assert!(params > 10_000, "suspiciously small model: {params}");

        let mut extent = 0usize;
        assert_eq!(vheat_model_input_extent(model, &mut extent), VHEAT_OK);
        assert_eq!(extent, 32);

        let batch = 2usize;
        let images: Vec<f32> =
            (0..batch * 3 * extent * extent).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let mut logits = vec![0.0f32; batch * 10];
        assert_eq!(
            vheat_model_forward(model, images.as_ptr(), images.len(), batch, logits.as_mut_ptr(), logits.len()),
            VHEAT_OK
        );
        assert!(logits.iter().all(|v| v.is_finite()));

        let dir = std::env::temp_dir().join(format!("vheat_ffi_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("roundtrip.ckpt");
        let ckpt_c = CString::new(ckpt.to_str().unwrap()).unwrap();
        assert_eq!(vheat_model_save(model, ckpt_c.as_ptr()), VHEAT_OK);

        let mut reloaded: *mut VheatModel = ptr::null_mut();
        assert_eq!(vheat_model_load(ckpt_c.as_ptr(), &mut reloaded), VHEAT_OK);
        let mut logits2 = vec![0.0f32; batch * 10];
        assert_eq!(
            vheat_model_forward(reloaded, images.as_ptr(), images.len(), batch, logits2.as_mut_ptr(), logits2.len()),
            VHEAT_OK
        );
        assert_eq!(logits, logits2, "checkpoint round-trip must preserve inference bitwise");

        vheat_model_free(model);
        vheat_model_free(reloaded);
        std::fs::remove_dir_all(&dir).ok();
    }
}

#[test]
fn error_protocol_reports_and_recovers() {
    unsafe {
        // Null output handle.
        let json = CString::new(CONFIG).unwrap();
        assert_eq!(vheat_model_build(json.as_ptr(), 0, ptr::null_mut()), VHEAT_ERR_ARGUMENT);
        assert!(!last_error().is_empty());

        // Unparseable config.
        let junk = CString::new("{not json").unwrap();
        let mut model: *mut VheatModel = ptr::null_mut();
        assert_eq!(vheat_model_build(junk.as_ptr(), 0, &mut model), VHEAT_ERR_CONFIG);
        assert!(model.is_null());
        assert!(last_error().contains("config parse"));

        // Structurally valid but rejected configuration.
        let bad = CString::new(CONFIG.replace("\"input_extent\": 32", "\"input_extent\": 13")).unwrap();
        let code = vheat_model_build(bad.as_ptr(), 0, &mut model);
        assert_ne!(code, VHEAT_OK);
        assert!(model.is_null());

        // Missing checkpoint file.
        let missing = CString::new("/definitely/not/here.ckpt").unwrap();
        assert_ne!(vheat_model_load(missing.as_ptr(), &mut model), VHEAT_OK);
        assert!(model.is_null());

        // Wrong buffer sizes on a healthy model.
        assert_eq!(vheat_model_build(json.as_ptr(), 0, &mut model), VHEAT_OK);
        let images = vec![0.0f32; 3 * 32 * 32];
        let mut logits = vec![0.0f32; 7]; // wrong: classes = 10
        assert_eq!(
            vheat_model_forward(model, images.as_ptr(), images.len(), 1, logits.as_mut_ptr(), logits.len()),
            VHEAT_ERR_ARGUMENT
        );
        assert!(last_error().contains("logits_len"));

        // The handle still works after a failed call.
        let mut logits = vec![0.0f32; 10];
        assert_eq!(
            vheat_model_forward(model, images.as_ptr(), images.len(), 1, logits.as_mut_ptr(), logits.len()),
            VHEAT_OK
        );
        vheat_model_free(model);

        // Freeing null is a no-op.
        vheat_model_free(ptr::null_mut());
    }
}

#[test]
fn conduction_preserves_the_mean_and_identity_at_k0() {
    let (c, m, n) = (2usize, 16usize, 16usize);
    let field: Vec<f32> = (0..c * m * n).map(|i| ((i * 13) % 17) as f32 - 8.0).collect();
    let mut out = vec![0.0f32; field.len()];
    unsafe {
        // k = 0 freezes the field.
        assert_eq!(
            vheat_hco_apply(field.as_ptr(), c, m, n, 0.0, 1.0, out.as_mut_ptr()),
            VHEAT_OK
        );
        for (a, b) in field.iter().zip(&out) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }

        // Positive k keeps each channel's mean.
        assert_eq!(
            vheat_hco_apply(field.as_ptr(), c, m, n, 1.0, 2.0, out.as_mut_ptr()),
            VHEAT_OK
        );
        for ch in 0..c {
            let mean = |v: &[f32]| {
                v[ch * m * n..(ch + 1) * m * n].iter().map(|&x| f64::from(x)).sum::<f64>()
                    / (m * n) as f64
            };
            assert!((mean(&field) - mean(&out)).abs() < 1e-5);
        }

        // Null pointer and zero extents are rejected.
        assert_eq!(
            vheat_hco_apply(ptr::null(), c, m, n, 1.0, 1.0, out.as_mut_ptr()),
            VHEAT_ERR_ARGUMENT
        );
        assert_eq!(
            vheat_hco_apply(field.as_ptr(), 0, m, n, 1.0, 1.0, out.as_mut_ptr()),
            VHEAT_ERR_ARGUMENT
        );
    }

    // Version string is a readable semver triple.
    let v = unsafe { CStr::from_ptr(vheat_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3);
}
