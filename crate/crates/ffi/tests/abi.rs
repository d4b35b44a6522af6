use std::ffi::{CStr, CString};
use std::ptr;

use segcodec::net::{Codec, NetConfig};
use segcodec_ffi::*;

fn model_bytes(seed: u64) -> Vec<u8> {
    Codec::new(NetConfig::tiny()).unwrap().init(seed).unwrap().to_bytes()
}

fn load(seed: u64) -> *mut SegcodecModel {
    let b = model_bytes(seed);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { segcodec_model_from_bytes(b.as_ptr(), b.len(), &mut m) }, SegcodecStatus::Ok);
    m
}

fn rgb(w: usize, h: usize) -> Vec<u8> {
    (0..3 * w * h).map(|i| ((i * 37) % 251) as u8).collect()
}

fn encode(m: *const SegcodecModel, px: &[u8], w: u32, h: u32, grid: u32, labels: Option<&[u32]>) -> (SegcodecStatus, Vec<u8>) {
    let (mut buf, mut len) = (ptr::null_mut(), 0usize);
    let lp = labels.map_or(ptr::null(), |l| l.as_ptr());
    let s = unsafe { segcodec_encode_rgb8(m, px.as_ptr(), w, h, grid, lp, &mut buf, &mut len) };
    let v = if s == SegcodecStatus::Ok { unsafe { std::slice::from_raw_parts(buf, len).to_vec() } } else { vec![] };
    unsafe { segcodec_buffer_free(buf, len) };
    (s, v)
}

fn decode(m: *const SegcodecModel, bytes: &[u8], labels: Option<&[u32]>) -> (SegcodecStatus, Vec<u8>, u32, u32) {
    let (mut buf, mut len, mut w, mut h) = (ptr::null_mut(), 0usize, 0u32, 0u32);
    let lp = labels.map_or(ptr::null(), |l| l.as_ptr());
    let s = unsafe { segcodec_decode_rgb8(m, bytes.as_ptr(), bytes.len(), lp, &mut buf, &mut len, &mut w, &mut h) };
    let v = if s == SegcodecStatus::Ok { unsafe { std::slice::from_raw_parts(buf, len).to_vec() } } else { vec![] };
    unsafe { segcodec_buffer_free(buf, len) };
    (s, v, w, h)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(segcodec_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn grid_round_trip_through_the_c_api() {
    let m = load(1);
    let px = rgb(70, 40);
    let (s, bytes) = encode(m, &px, 70, 40, 2, None);
    assert_eq!(s, SegcodecStatus::Ok);
    assert_eq!(&bytes[..4], b"SPIC");
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { segcodec_container_info(bytes.as_ptr(), bytes.len(), &mut w, &mut h) }, SegcodecStatus::Ok);
    assert_eq!((w, h), (70, 40));
    let (s, out, w, h) = decode(m, &bytes, None);
    assert_eq!(s, SegcodecStatus::Ok);
    assert_eq!((w, h, out.len()), (70, 40, 3 * 70 * 40));
    let (_, again, _, _) = decode(m, &bytes, None);
    assert_eq!(out, again);
    assert!(last_error().is_empty());
    unsafe { segcodec_model_free(m) };
}

#[test]
fn external_labels_are_required_to_decode() {
    let m = load(2);
    let px = rgb(64, 64);
    let labels: Vec<u32> = (0..64 * 64).map(|i| if i % 64 < 20 { 7 } else { 3 }).collect();
    let (s, bytes) = encode(m, &px, 64, 64, 0, Some(&labels));
    assert_eq!(s, SegcodecStatus::Ok);
    assert_eq!(decode(m, &bytes, None).0, SegcodecStatus::Usage);
    assert!(last_error().contains("region map"));
    assert_eq!(decode(m, &bytes, Some(&labels)).0, SegcodecStatus::Ok);
    unsafe { segcodec_model_free(m) };
}

#[test]
fn errors_map_to_status_codes() {
    let m = load(3);
    let other = load(4);
    assert_ne!(unsafe { segcodec_model_hash(m) }, unsafe { segcodec_model_hash(other) });
    assert_eq!(unsafe { segcodec_model_hash(ptr::null()) }, 0);
    let px = rgb(64, 64);
    let (_, bytes) = encode(m, &px, 64, 64, 4, None);
    assert_eq!(decode(other, &bytes, None).0, SegcodecStatus::Consistency);
    let mut bad = bytes.clone();
    bad[40] ^= 0x10;
    assert_eq!(decode(m, &bad, None).0, SegcodecStatus::Decode);
    assert_eq!(encode(m, &px, 64, 64, 9, None).0, SegcodecStatus::Usage);
    assert_eq!(encode(m, &px, 0, 64, 4, None).0, SegcodecStatus::Data);
    assert_eq!(encode(ptr::null(), &px, 64, 64, 4, None).0, SegcodecStatus::NullArgument);
    let junk = [1u8, 2, 3];
    let mut mm = ptr::null_mut();
    assert_eq!(unsafe { segcodec_model_from_bytes(junk.as_ptr(), 3, &mut mm) }, SegcodecStatus::Data);
    assert!(mm.is_null());
    let missing = CString::new("/nonexistent/w.spw").unwrap();
    assert_eq!(unsafe { segcodec_model_load(missing.as_ptr(), &mut mm) }, SegcodecStatus::Io);
    let name = unsafe { CStr::from_ptr(segcodec_status_name(SegcodecStatus::Decode)) };
    assert_eq!(name.to_str().unwrap(), "decode error");
    unsafe {
        segcodec_model_free(m);
        segcodec_model_free(other);
        segcodec_model_free(ptr::null_mut());
        segcodec_buffer_free(ptr::null_mut(), 0);
    }
}

#[test]
fn model_loads_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.spw");
    std::fs::write(&path, model_bytes(5)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { segcodec_model_load(c.as_ptr(), &mut m) }, SegcodecStatus::Ok);
    assert!(!m.is_null());
    unsafe { segcodec_model_free(m) };
}
