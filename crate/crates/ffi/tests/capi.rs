use std::ffi::{CStr, CString};
use std::ptr;

use matchattn::bsm::bilinear_softmax_forward;
use matchattn::checkpoint::save_checkpoint;
use matchattn::decoder::{init_decoder, reference_view, stack_views, DecoderConfig, Task};
use matchattn::harness::flops::flops_count;
use matchattn::train::predict;
use matchattn::Tensor;
use matchattn_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ma_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn tensor(shape: &[usize], data: &[f64]) -> *mut MaTensor {
    let mut t = ptr::null_mut();
    assert_eq!(ma_tensor_new(shape.as_ptr(), shape.len(), data.as_ptr(), &mut t), MaStatus::Ok);
    t
}

unsafe fn read(t: *const MaTensor) -> (Vec<usize>, Vec<f64>) {
    let mut shape = vec![0; ma_tensor_rank(t)];
    let mut data = vec![0.0; ma_tensor_len(t)];
    assert_eq!(ma_tensor_shape(t, shape.as_mut_ptr(), shape.len()), MaStatus::Ok);
    assert_eq!(ma_tensor_data(t, data.as_mut_ptr(), data.len()), MaStatus::Ok);
    (shape, data)
}

#[test]
fn tensor_round_trip() {
    let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
    unsafe {
        let t = tensor(&[3, 4], &data);
        assert_eq!(ma_tensor_rank(t), 2);
        assert_eq!(ma_tensor_len(t), 12);
        let (shape, back) = read(t);
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(back, data);

        let mut small = [0.0; 4];
        assert_eq!(ma_tensor_data(t, small.as_mut_ptr(), small.len()), MaStatus::BufferTooSmall);
        assert!(last_error().contains("need 12"));
        ma_tensor_free(t);
    }
}

#[test]
fn bad_arguments_report_status() {
    unsafe {
        let mut t = ptr::null_mut();
        let shape = [2usize, 2];
        assert_eq!(ma_tensor_new(shape.as_ptr(), 2, ptr::null(), &mut t), MaStatus::NullPointer);
        assert!(t.is_null());
        assert_eq!(ma_tensor_rank(ptr::null()), 0);
        assert_eq!(ma_tensor_shape(ptr::null(), ptr::null_mut(), 0), MaStatus::NullPointer);
        ma_tensor_free(ptr::null_mut());
        ma_model_free(ptr::null_mut());

        let mut f = MaFlops::default();
        assert_eq!(ma_flops_count(8, 8, 0, 4, 4, 3, &mut f), MaStatus::InvalidArgument);

        let sim = [0.0; 16];
        let mut out = [0.0; 16];
        assert_eq!(ma_bilinear_softmax(sim.as_ptr(), 3, 1.5, 0.0, out.as_mut_ptr()), MaStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        let path = CString::new("/nonexistent/model.mtck").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(ma_model_load(path.as_ptr(), &mut m), MaStatus::Io);
        assert!(m.is_null());
    }
}

#[test]
fn flops_match_library() {
    let mut f = MaFlops::default();
    assert_eq!(unsafe { ma_flops_count(16, 32, 2, 16, 8, 5, &mut f) }, MaStatus::Ok);
    let b = flops_count(16, 32, 2, 16, 8, 5);
    assert_eq!((f.qk_flops, f.bsm_flops, f.agg_flops), (1179648, 401408, 589824));
    assert_eq!(f.tensor_flops, b.tensor_flops);
    assert_eq!(f.attn_memory, 36864);
}

#[test]
fn bilinear_softmax_matches_library() {
    let sim: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
    let mut out = [0.0; 16];
    assert_eq!(unsafe { ma_bilinear_softmax(sim.as_ptr(), 3, 0.25, 0.6, out.as_mut_ptr()) }, MaStatus::Ok);
    let want = bilinear_softmax_forward(&sim, (0.25, 0.6), 3).unwrap();
    assert_eq!(out.to_vec(), want.weights);
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn model_infer_matches_library() {
    let cfg = DecoderConfig::desk(Task::Stereo);
    let store = init_decoder(&cfg, 3).unwrap();
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("capi_model.mtck");
    save_checkpoint(&path, &store, &cfg).unwrap();

    let (h, w) = (32, 64);
    let img = |phase: f64| -> Vec<f64> {
        (0..h * w * 3).map(|i| (0.5 + 0.4 * ((i as f64) * 0.013 + phase).sin()).clamp(0.0, 1.0)).collect()
    };
    let (a, b) = (img(0.0), img(0.7));

    let want = {
        let i0 = Tensor::new(vec![h, w, 3], a.clone()).unwrap();
        let i1 = Tensor::new(vec![h, w, 3], b.clone()).unwrap();
        let (r, _) = predict(&store, &cfg, &stack_views(&i0, &i1).unwrap()).unwrap();
        reference_view(&r).unwrap()
    };

    unsafe {
        let c = CString::new(path.to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(ma_model_load(c.as_ptr(), &mut m), MaStatus::Ok, "{}", last_error());
        let (l, r) = (tensor(&[h, w, 3], &a), tensor(&[h, w, 3], &b));
        let mut out = ptr::null_mut();
        assert_eq!(ma_model_infer(m, l, r, &mut out), MaStatus::Ok, "{}", last_error());
        let (shape, data) = read(out);
        assert_eq!(shape, vec![h, w, 2]);
        assert_eq!(data, want.data());

        let bad = tensor(&[h, w + 1, 3], &vec![0.5; h * (w + 1) * 3]);
        let mut none = ptr::null_mut();
        assert_ne!(ma_model_infer(m, l, bad, &mut none), MaStatus::Ok);
        assert!(none.is_null());

        for t in [l, r, out, bad] {
            ma_tensor_free(t);
        }
        ma_model_free(m);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(ma_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
