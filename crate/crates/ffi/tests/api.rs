use std::ffi::{c_char, CStr, CString};
use std::ptr;

use careseg::net::checkpoint::Checkpoint;
use careseg::net::{CascadeModel, NetConfig};
use careseg::pipeline::{GridConfig, PipelineConfig};
use careseg_ffi::*;
use rand::SeedableRng;

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; cs_last_error_length() + 1];
    unsafe { cs_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn labels(dims: [usize; 3], data: &[u8]) -> *mut CsLabels {
    let mut out = ptr::null_mut();
    let st = unsafe { cs_labels_new(dims.as_ptr(), [1.0f32; 3].as_ptr(), data.as_ptr(), data.len(), &mut out) };
    assert_eq!(st, CsStatus::Ok, "{}", last_error());
    out
}

fn codes(l: *const CsLabels) -> Vec<u8> {
    let (mut p, mut n) = (ptr::null(), 0usize);
    assert_eq!(unsafe { cs_labels_data(l, &mut p, &mut n) }, CsStatus::Ok);
    unsafe { std::slice::from_raw_parts(p, n) }.to_vec()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(cs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cs_labels_read(ptr::null(), &mut out) }, CsStatus::NullPointer);
    assert!(last_error().contains("path"));
    let mut d = 0.0;
    assert_eq!(unsafe { cs_dice(ptr::null(), ptr::null(), 1, &mut d) }, CsStatus::NullPointer);
    unsafe {
        cs_labels_free(ptr::null_mut());
        cs_image_free(ptr::null_mut());
        cs_ensemble_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("nope.mvol"));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cs_labels_read(missing.as_ptr(), &mut out) }, CsStatus::Io);
    let junk = dir.path().join("junk.mvol");
    std::fs::write(&junk, b"not a volume at all, really not").unwrap();
    assert_eq!(unsafe { cs_labels_read(cpath(&junk).as_ptr(), &mut out) }, CsStatus::Format);
    assert!(out.is_null());

    // wrong length and codes outside the schema
    let mut l = ptr::null_mut();
    let st = unsafe { cs_labels_new([2usize; 3].as_ptr(), [1.0f32; 3].as_ptr(), [0u8; 7].as_ptr(), 7, &mut l) };
    assert_eq!(st, CsStatus::GeometryMismatch);
    let st = unsafe { cs_labels_new([1usize; 3].as_ptr(), [1.0f32; 3].as_ptr(), [9u8].as_ptr(), 1, &mut l) };
    assert_eq!(st, CsStatus::InvalidArgument);

    let a = labels([2, 1, 1], &[1, 0]);
    let b = labels([1, 2, 1], &[1, 0]);
    let mut d = 0.0;
    assert_eq!(unsafe { cs_dice(a, b, 1, &mut d) }, CsStatus::GeometryMismatch);
    assert_eq!(unsafe { cs_dice(a, a, 7, &mut d) }, CsStatus::InvalidArgument);
    let mut pp = ptr::null_mut();
    assert_eq!(unsafe { cs_postprocess(a, 64, &mut pp) }, CsStatus::InvalidArgument);
    unsafe {
        cs_labels_free(a);
        cs_labels_free(b);
    }
}

#[test]
fn success_clears_the_last_error() {
    let mut out = ptr::null_mut();
    unsafe { cs_labels_read(ptr::null(), &mut out) };
    assert!(cs_last_error_length() > 0);
    let a = labels([1, 1, 1], &[0]);
    assert_eq!(cs_last_error_length(), 0);
    unsafe { cs_labels_free(a) };
}

#[test]
fn error_message_is_truncated_to_the_buffer() {
    let mut out = ptr::null_mut();
    unsafe { cs_labels_read(ptr::null(), &mut out) };
    let mut buf = [1 as c_char; 4];
    assert_eq!(unsafe { cs_last_error_message(buf.as_mut_ptr(), 4) }, 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn metrics_round_trip() {
    // 4x4x1, LV in the left half of the prediction, left three columns in gt
    let pred: Vec<u8> = (0..16).map(|i| u8::from(i % 4 < 2)).collect();
    let gt: Vec<u8> = (0..16).map(|i| u8::from(i % 4 < 3)).collect();
    let (p, g) = (labels([4, 4, 1], &pred), labels([4, 4, 1], &gt));
    let mut d = 0.0;
    assert_eq!(unsafe { cs_dice(p, g, 1, &mut d) }, CsStatus::Ok);
    assert!((d - 100.0 * 2.0 * 8.0 / 20.0).abs() < 1e-12);
    let mut ml = 0.0;
    assert_eq!(unsafe { cs_volume_ml(g, 1, &mut ml) }, CsStatus::Ok);
    assert!((ml - 0.012).abs() < 1e-15);
    let mut sd = CsSurfaceDistances::default();
    assert_eq!(unsafe { cs_surface_distances(p, g, 1, &mut sd) }, CsStatus::Ok);
    assert_eq!(sd.hd, 1.0);
    assert_eq!(unsafe { cs_surface_distances(p, g, 3, &mut sd) }, CsStatus::Undefined);
    unsafe {
        cs_labels_free(p);
        cs_labels_free(g);
    }
}

#[test]
fn postprocess_and_file_io() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = vec![0u8; 8 * 8 * 3];
    for k in 0..3 {
        for j in 2..6 {
            for i in 2..6 {
                data[i + 8 * (j + 8 * k)] = 1;
            }
        }
    }
    data[0] = 2;
    let l = labels([8, 8, 3], &data);
    let mut pp = ptr::null_mut();
    let st = unsafe { cs_postprocess(l, CS_PP_DISCONNECTED_3D, &mut pp) };
    assert_eq!(st, CsStatus::Ok);
    let out = codes(pp);
    assert_eq!(out[0], 0);
    assert_eq!(out.iter().filter(|&&c| c == 1).count(), 48);

    let path = cpath(&dir.path().join("pp.mvol"));
    assert_eq!(unsafe { cs_labels_write(pp, path.as_ptr()) }, CsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { cs_labels_read(path.as_ptr(), &mut back) }, CsStatus::Ok);
    assert_eq!(codes(back), out);
    let (mut dims, mut sp) = ([0usize; 3], [0f32; 3]);
    assert_eq!(unsafe { cs_labels_geometry(back, dims.as_mut_ptr(), sp.as_mut_ptr()) }, CsStatus::Ok);
    assert_eq!((dims, sp), ([8, 8, 3], [1.0; 3]));
    unsafe {
        cs_labels_free(l);
        cs_labels_free(pp);
        cs_labels_free(back);
    }
}

#[test]
fn ensemble_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetConfig {
        levels: 2,
        base_filters: 2,
        dropout: 0.1,
    };
    for m in 0..2 {
        let model = CascadeModel::init(net, &mut rand_chacha::ChaCha8Rng::seed_from_u64(m)).unwrap();
        let ck = Checkpoint {
            step: 0,
            model,
            ema: None,
        };
        ck.save(dir.path().join(format!("model_{m}.ckpt"))).unwrap();
    }
    let mut cfg = PipelineConfig::desk();
    cfg.net = net;
    cfg.grid = GridConfig {
        dims: [8; 3],
        spacing: [1.5; 3],
    };
    let cfg_path = dir.path().join("cfg.json");
    cfg.save(&cfg_path).unwrap();

    let mut ens = ptr::null_mut();
    let st = unsafe { cs_ensemble_load(cpath(dir.path()).as_ptr(), cpath(&cfg_path).as_ptr(), &mut ens) };
    assert_eq!(st, CsStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { cs_ensemble_len(ens) }, 2);

    let dims = [10usize, 9, 4];
    let vals: Vec<f32> = (0..360).map(|i| ((i * 37) % 101) as f32).collect();
    let mut img = ptr::null_mut();
    let st = unsafe { cs_image_new(dims.as_ptr(), [1.0f32, 1.0, 3.0].as_ptr(), vals.as_ptr(), 360, &mut img) };
    assert_eq!(st, CsStatus::Ok);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cs_ensemble_predict(ens, img, CS_SUBGROUP_M1, 0, &mut out) }, CsStatus::Ok);
    let (mut d, mut s) = ([0usize; 3], [0f32; 3]);
    unsafe { cs_labels_geometry(out, d.as_mut_ptr(), s.as_mut_ptr()) };
    assert_eq!(d, dims);
    let c = codes(out);
    assert!(c.iter().all(|&v| v < 4), "chronic cases cannot carry MVO");

    assert_eq!(unsafe { cs_ensemble_predict(ens, img, 9, 0, &mut out) }, CsStatus::InvalidArgument);
    unsafe {
        cs_labels_free(out);
        cs_image_free(img);
        cs_ensemble_free(ens);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/careseg.h");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header])
        .status()
    else {
        eprintln!("no C compiler, skipped");
        return;
    };
    assert!(status.success());
}
