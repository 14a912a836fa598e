use std::ffi::CString;
use std::ptr;

use sslab::model::{Arch, DeskNet};
use sslab_ffi::*;

fn tensor(shape: &[usize], data: &[f64]) -> *mut SslTensor {
    let mut t = ptr::null_mut();
    let st = unsafe { ssl_tensor_new(shape.as_ptr(), shape.len(), data.as_ptr(), &mut t) };
    assert_eq!(st, SslStatus::Ok);
    t
}

fn values(t: *const SslTensor) -> Vec<f64> {
    let n = unsafe { ssl_tensor_numel(t) };
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { ssl_tensor_data(t, v.as_mut_ptr(), n) }, SslStatus::Ok);
    v
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { ssl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn tensor_round_trip_and_shape() {
    let t = tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
    assert_eq!(unsafe { ssl_tensor_rank(t) }, 2);
    let mut shape = [0usize; 2];
    assert_eq!(unsafe { ssl_tensor_shape(t, shape.as_mut_ptr(), 2) }, SslStatus::Ok);
    assert_eq!(shape, [2, 3]);
    assert_eq!(values(t), vec![1., 2., 3., 4., 5., 6.]);
    let mut small = [0.0; 2];
    assert_eq!(unsafe { ssl_tensor_data(t, small.as_mut_ptr(), 2) }, SslStatus::BufferTooSmall);
    unsafe { ssl_tensor_free(t) };
}

#[test]
fn errors_carry_messages() {
    let mut t = ptr::null_mut();
    let shape = [2usize, 2];
    let st = unsafe { ssl_tensor_new(shape.as_ptr(), 2, ptr::null(), &mut t) };
    assert_eq!(st, SslStatus::NullPointer);
    assert!(last_error().contains("data"));
    let mut k = 0;
    assert_eq!(unsafe { ssl_resolve_k(0.0, 4, 4, &mut k) }, SslStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { ssl_resolve_k(0.2, 16, 16, &mut k) }, SslStatus::Ok);
    assert_eq!(k, 52);
    assert_eq!(last_error(), "");
}

#[test]
fn topk_through_the_abi() {
    let x = tensor(&[1, 2, 2], &[0.1, -3.0, 2.0, 0.5]);
    let (mut y, mut m) = (ptr::null_mut(), ptr::null_mut());
    let st = unsafe { ssl_topk_forward(x, 0.5, SslVariant::Hard, &mut y, &mut m) };
    assert_eq!(st, SslStatus::Ok);
    assert_eq!(values(y), vec![0.0, -3.0, 2.0, 0.0]);
    assert_eq!(values(m), vec![0.0, 1.0, 1.0, 0.0]);
    unsafe {
        ssl_tensor_free(y);
        ssl_tensor_free(m);
    }
    let st = unsafe { ssl_topk_forward(x, 0.5, SslVariant::MeanReplacement, &mut y, &mut m) };
    assert_eq!(st, SslStatus::Ok);
    assert_eq!(values(y), vec![0.0, -0.5, -0.5, 0.0]);
    unsafe {
        ssl_tensor_free(y);
        ssl_tensor_free(m);
        ssl_tensor_free(x);
    }
}

#[test]
fn gram_connectivity_and_bias() {
    let x = tensor(&[2, 2, 2], &[1., 1., 1., 1., 2., 2., 2., 2.]);
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { ssl_gram(x, &mut g) }, SslStatus::Ok);
    assert_eq!(values(g), vec![1., 2., 2., 4.]);
    unsafe {
        ssl_tensor_free(g);
        ssl_tensor_free(x);
    }

    let mut plane = [0u8; 20];
    for i in [0, 1, 5, 6, 10, 11, 3, 4, 8, 9] {
        plane[i] = 1;
    }
    let mut c = 0.0;
    assert_eq!(unsafe { ssl_connectivity(plane.as_ptr(), 4, 5, &mut c) }, SslStatus::Ok);
    assert_eq!(c, 0.6);

    let preds = [0usize, 1, 5];
    let shapes = [0usize, 2, 3];
    let textures = [1usize, 1, 4];
    let mut r = SslBiasReport::default();
    let st = unsafe { ssl_bias_scores(preds.as_ptr(), shapes.as_ptr(), textures.as_ptr(), 3, &mut r) };
    assert_eq!(st, SslStatus::Ok);
    assert_eq!((r.n_correct_shape, r.n_correct_texture, r.n_other), (1, 1, 1));
    assert_eq!(r.shape_bias, 0.5);
    let none = [7usize, 7, 7];
    let st = unsafe { ssl_bias_scores(none.as_ptr(), shapes.as_ptr(), textures.as_ptr(), 3, &mut r) };
    assert_eq!(st, SslStatus::UndefinedBias);
}

#[test]
fn model_load_and_classify() {
    let arch = Arch {
        widths: vec![2, 3],
        image_size: 8,
        ..Arch::default()
    };
    let net = DeskNet::<f32>::new(arch, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sslm");
    net.save(&path).unwrap();

    let mut m = ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ssl_model_load(cpath.as_ptr(), &mut m) }, SslStatus::Ok);
    assert_eq!(unsafe { ssl_model_image_size(m) }, 8);

    let data: Vec<f64> = (0..2 * 3 * 64).map(|i| (i % 13) as f64 / 13.0).collect();
    let imgs = tensor(&[2, 3, 8, 8], &data);
    let mut preds = [99usize; 2];
    assert_eq!(unsafe { ssl_model_classify(m, imgs, preds.as_mut_ptr(), 2) }, SslStatus::Ok);
    let direct: Vec<sslab::Tensor<f32>> = data
        .chunks(192)
        .map(|c| sslab::Tensor::<f64>::new(vec![3, 8, 8], c.to_vec()).unwrap().cast())
        .collect();
    assert_eq!(preds.to_vec(), sslab::eval::classify(&net, &direct).unwrap());
    unsafe {
        ssl_tensor_free(imgs);
        ssl_model_free(m);
    }

    let missing = CString::new(dir.path().join("nope.sslm").to_str().unwrap()).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { ssl_model_load(missing.as_ptr(), &mut m2) }, SslStatus::Io);
    assert!(m2.is_null());
}
