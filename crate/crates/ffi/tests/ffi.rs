use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsrh::model::{init_weights, save_model, Architecture};
use dsrh::retrieval::{save_codes, CodeDatabase, PackedCode};
use dsrh_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsrh_last_error_message()) }.to_str().unwrap().to_string()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn model_encode_matches_the_core() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = init_weights(&Architecture::two_block(4, 8, 6, 12), &mut rng).unwrap();
    save_model(&model, &path).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dsrh_model_load(cpath(&path).as_ptr(), &mut handle) }, DsrhStatus::Ok);
    assert_eq!(unsafe { dsrh_model_bits(handle) }, 12);
    assert_eq!(unsafe { dsrh_model_input_dim(handle) }, 4);
    assert_eq!(dsrh_code_bytes(12), 2);

    let feats: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0u8; 6];
    let s = unsafe { dsrh_model_encode(handle, feats.as_ptr(), 3, 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DsrhStatus::Ok);
    let rows: Vec<&[f64]> = feats.chunks(4).collect();
    let want: Vec<u8> = model
        .forward_binary(&rows)
        .unwrap()
        .iter()
        .flat_map(|c| PackedCode::pack(c).unwrap().to_bytes())
        .collect();
    assert_eq!(out, want);

    let s = unsafe { dsrh_model_encode(handle, feats.as_ptr(), 3, 4, out.as_mut_ptr(), 5) };
    assert_eq!(s, DsrhStatus::BufferTooSmall);
    assert!(last_error().contains("need 6 bytes"));
    let s = unsafe { dsrh_model_encode(handle, feats.as_ptr(), 4, 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, DsrhStatus::DimensionMismatch);
    unsafe { dsrh_model_free(handle) };
}

#[test]
fn load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = cpath(&dir.path().join("missing.bin"));
    assert_eq!(unsafe { dsrh_model_load(missing.as_ptr(), &mut handle) }, DsrhStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("missing.bin"));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { dsrh_model_load(cpath(&junk).as_ptr(), &mut handle) }, DsrhStatus::Format);
    let mut db = ptr::null_mut();
    assert_eq!(unsafe { dsrh_codes_load(cpath(&junk).as_ptr(), &mut db) }, DsrhStatus::Format);

    assert_eq!(unsafe { dsrh_model_load(ptr::null(), &mut handle) }, DsrhStatus::NullPointer);
    assert_eq!(unsafe { dsrh_model_bits(ptr::null()) }, 0);
    unsafe { dsrh_model_free(ptr::null_mut()) };
    unsafe { dsrh_codes_free(ptr::null_mut()) };
}

#[test]
fn search_over_built_and_loaded_databases() {
    let mut db = ptr::null_mut();
    assert_eq!(unsafe { dsrh_codes_new(10, &mut db) }, DsrhStatus::Ok);
    let codes: [[u8; 2]; 4] = [[0b0000_0000, 0], [0b0000_0111, 0], [0b0000_0001, 0], [0b1111_1111, 0b11]];
    for (i, c) in codes.iter().enumerate() {
        assert_eq!(unsafe { dsrh_codes_push(db, 10 + i as u64, c.as_ptr(), 2) }, DsrhStatus::Ok);
    }
    assert_eq!(unsafe { dsrh_codes_push(db, 10, codes[0].as_ptr(), 2) }, DsrhStatus::Format);
    assert_eq!(unsafe { dsrh_codes_push(db, 99, codes[0].as_ptr(), 1) }, DsrhStatus::BitsMismatch);
    // padding bits beyond K must be clear
    assert_ne!(unsafe { dsrh_codes_push(db, 98, [0u8, 0b100].as_ptr(), 2) }, DsrhStatus::Ok);
    assert_eq!(unsafe { dsrh_codes_len(db) }, 4);

    let (mut ids, mut dist, mut n) = ([0u64; 8], [0u32; 8], 0usize);
    let q = [0b0000_0001u8, 0];
    let s = unsafe { dsrh_codes_search(db, q.as_ptr(), 2, 8, ids.as_mut_ptr(), dist.as_mut_ptr(), 8, &mut n) };
    assert_eq!(s, DsrhStatus::Ok);
    assert_eq!(n, 4);
    assert_eq!(&ids[..4], &[12, 10, 11, 13]);
    assert_eq!(&dist[..4], &[0, 1, 2, 9]);
    // capacity bounds the output
    let s = unsafe { dsrh_codes_search(db, q.as_ptr(), 2, 8, ids.as_mut_ptr(), ptr::null_mut(), 2, &mut n) };
    assert_eq!((s, n), (DsrhStatus::Ok, 2));
    unsafe { dsrh_codes_free(db) };

    // the file path gives the same answers as the core
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut core_db = CodeDatabase::new(64).unwrap();
    for id in 0..200u64 {
        let c: Vec<i8> = (0..64).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        core_db.push(id * 3, &PackedCode::pack(&c).unwrap()).unwrap();
    }
    save_codes(&core_db, &path).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dsrh_codes_load(cpath(&path).as_ptr(), &mut loaded) }, DsrhStatus::Ok);
    assert_eq!(unsafe { dsrh_codes_bits(loaded) }, 64);
    let query = core_db.code(17);
    let qb = query.to_bytes();
    let (mut ids, mut n) = (vec![0u64; 20], 0usize);
    let s = unsafe { dsrh_codes_search(loaded, qb.as_ptr(), 8, 20, ids.as_mut_ptr(), ptr::null_mut(), 20, &mut n) };
    assert_eq!(s, DsrhStatus::Ok);
    let want: Vec<u64> = core_db.search_topk(&query, 20).unwrap().iter().map(|x| x.id).collect();
    assert_eq!(&ids[..n], &want[..]);
    unsafe { dsrh_codes_free(loaded) };
}

#[test]
fn hamming_and_metrics() {
    let (a, b) = ([0b1010_1010u8, 0b1], [0b0101_0101u8, 0b0]);
    let mut d = 0;
    assert_eq!(unsafe { dsrh_hamming_distance(a.as_ptr(), b.as_ptr(), 9, &mut d) }, DsrhStatus::Ok);
    assert_eq!(d, 9);
    assert_eq!(unsafe { dsrh_hamming_distance(a.as_ptr(), b.as_ptr(), 0, &mut d) }, DsrhStatus::InvalidArgument);

    let mut v = 0.0;
    let good = [2u32, 1, 0];
    assert_eq!(unsafe { dsrh_ndcg_at(good.as_ptr(), 3, 3, &mut v) }, DsrhStatus::Ok);
    assert_eq!(v, 1.0);
    let rev = [0u32, 1, 2];
    assert_eq!(unsafe { dsrh_ndcg_at(rev.as_ptr(), 3, 3, &mut v) }, DsrhStatus::Ok);
    assert!((v - 0.58688).abs() < 1e-5);
    let zeros = [0u32; 4];
    assert_eq!(unsafe { dsrh_ndcg_at(zeros.as_ptr(), 4, 2, &mut v) }, DsrhStatus::Excluded);
    assert_eq!(unsafe { dsrh_acg_at(rev.as_ptr(), 3, 2, &mut v) }, DsrhStatus::Ok);
    assert_eq!(v, 0.5);
    let levels = [0u32, 2, 0, 1];
    assert_eq!(unsafe { dsrh_average_precision_w(levels.as_ptr(), 4, 0, &mut v) }, DsrhStatus::Ok);
    assert_eq!(v, (1.0 + 0.75) / 2.0);
    assert_eq!(unsafe { dsrh_average_precision_w(levels.as_ptr(), 4, 1, &mut v) }, DsrhStatus::Excluded);
    assert_eq!(unsafe { dsrh_acg_at(ptr::null(), 3, 1, &mut v) }, DsrhStatus::NullPointer);
    assert_eq!(unsafe { dsrh_acg_at(ptr::null(), 0, 1, &mut v) }, DsrhStatus::Ok);
    assert_eq!(v, 0.0);

    assert_eq!(unsafe { CStr::from_ptr(dsrh_status_string(DsrhStatus::Excluded)) }.to_str().unwrap(), "undefined: no relevant item");
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/dsrh.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["dsrh_model_load", "dsrh_model_encode", "dsrh_codes_search", "dsrh_ndcg_at", "dsrh_last_error_message"] {
        assert!(text.contains(f), "{f} missing from the header");
    }
    let out_dir = tempfile::tempdir().unwrap();
    for (compiler, flags) in [("cc", vec!["-std=c11"]), ("c++", vec!["-x", "c++", "-std=c++17"])] {
        let status = Command::new(compiler)
            .args(&flags)
            .args(["-Wall", "-Wextra", "-Werror", "-c", "-I"])
            .arg(root.join("include"))
            .arg(root.join("tests/smoke.c"))
            .arg("-o")
            .arg(out_dir.path().join(format!("smoke-{compiler}.o")))
            .status()
            .unwrap_or_else(|e| panic!("running {compiler}: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}
