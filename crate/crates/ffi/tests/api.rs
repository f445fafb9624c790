use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ebkit_ffi::*;

fn last_error() -> String {
    let p = ebk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn mask(p: f64, epoch: usize, keep: &[u8]) -> *mut EbkMask {
    let mut m = ptr::null_mut();
    assert_eq!(ebk_mask_new(p, epoch, false, &mut m), EbkStatus::Ok);
    let name = CString::new("w").unwrap();
    let shape = [keep.len()];
    assert_eq!(
        ebk_mask_add_entry(m, name.as_ptr(), shape.as_ptr(), 1, keep.as_ptr()),
        EbkStatus::Ok
    );
    m
}

#[test]
fn magnitude_keep_prunes_smallest_with_index_ties() {
    let w = [0.5f32, -0.1, 0.1, 2.0, -3.0, 0.1];
    let mut keep = [9u8; 6];
    let s = unsafe { ebk_magnitude_keep_f32(0.5, w.as_ptr(), w.len(), keep.as_mut_ptr()) };
    assert_eq!(s, EbkStatus::Ok);
    assert_eq!(keep, [1, 0, 0, 1, 1, 0]);
    assert_eq!(ebk_pruned_count(0.29, 100), 29);

    let s = unsafe { ebk_magnitude_keep_f32(1.5, w.as_ptr(), w.len(), keep.as_mut_ptr()) };
    assert_eq!(s, EbkStatus::InvalidArgument);
    assert!(last_error().contains("1.5"));
}

#[test]
fn mask_distance_and_counts() {
    unsafe {
        let a = mask(0.5, 1, &[1, 0, 1, 0]);
        let b = mask(0.5, 2, &[1, 1, 0, 0]);
        let mut d = -1.0;
        assert_eq!(ebk_mask_distance(a, b, &mut d), EbkStatus::Ok);
        assert_eq!(d, 0.5);
        let (mut total, mut pruned) = (0, 0);
        assert_eq!(ebk_mask_counts(a, &mut total, &mut pruned), EbkStatus::Ok);
        assert_eq!((total, pruned), (4, 2));

        let c = mask(0.25, 3, &[1, 1, 1, 0]);
        assert_eq!(ebk_mask_distance(a, c, &mut d), EbkStatus::Mask);
        assert!(!last_error().is_empty());

        let bad_bits = [2u8, 0];
        let name = CString::new("v").unwrap();
        assert_eq!(
            ebk_mask_add_entry(a, name.as_ptr(), [2usize].as_ptr(), 1, bad_bits.as_ptr()),
            EbkStatus::Mask
        );
        // A failed add leaves the mask unchanged.
        assert_eq!(ebk_mask_counts(a, &mut total, &mut pruned), EbkStatus::Ok);
        assert_eq!(total, 4);

        assert_eq!(
            ebk_mask_distance(ptr::null(), b, &mut d),
            EbkStatus::NullPointer
        );
        for m in [a, b, c] {
            ebk_mask_free(m);
        }
        ebk_mask_free(ptr::null_mut());
    }
}

#[test]
fn mask_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = CString::new(dir.path().join("epoch_001").to_str().unwrap()).unwrap();
    unsafe {
        let a = mask(0.5, 1, &[0, 1, 1, 0]);
        assert_eq!(ebk_mask_save(a, stem.as_ptr()), EbkStatus::Ok);
        let mut b = ptr::null_mut();
        assert_eq!(ebk_mask_load(stem.as_ptr(), &mut b), EbkStatus::Ok);
        let mut d = 1.0;
        assert_eq!(ebk_mask_distance(a, b, &mut d), EbkStatus::Ok);
        assert_eq!(d, 0.0);
        let missing = CString::new("/nonexistent/epoch_001").unwrap();
        let mut c = ptr::null_mut();
        assert_ne!(ebk_mask_load(missing.as_ptr(), &mut c), EbkStatus::Ok);
        assert!(c.is_null());
        ebk_mask_free(a);
        ebk_mask_free(b);
    }
}

#[test]
fn streaming_detector_matches_offline() {
    // Distances 1.0, 0.5, 0.0 at epochs 2, 3, 4.
    let keeps: [&[u8]; 4] = [&[1, 1, 0, 0], &[0, 0, 1, 1], &[0, 1, 0, 1], &[0, 1, 0, 1]];
    unsafe {
        let mut det = ptr::null_mut();
        assert_eq!(ebk_detector_new(0.6, 1, 10, &mut det), EbkStatus::Ok);
        let mut fired_at = 0;
        for (i, keep) in keeps.iter().enumerate() {
            let m = mask(0.5, i + 1, keep);
            let mut found = false;
            assert_eq!(
                ebk_detector_observe(det, i + 1, m, &mut found),
                EbkStatus::Ok
            );
            if found && fired_at == 0 {
                fired_at = i + 1;
            }
            ebk_mask_free(m);
        }
        assert_eq!(fired_at, 3);
        assert_eq!(ebk_detector_ticket_epoch(det), 3);

        let mut len = 0;
        assert_eq!(
            ebk_detector_distances(det, ptr::null_mut(), 0, &mut len),
            EbkStatus::Ok
        );
        let mut buf = vec![0.0; len];
        assert_eq!(
            ebk_detector_distances(det, buf.as_mut_ptr(), len, &mut len),
            EbkStatus::Ok
        );
        assert_eq!(buf, [1.0, 0.5, 0.0]);

        let mut offline = 0;
        assert_eq!(
            ebk_detect_offline(buf.as_ptr(), len, 0.6, 1, 10, &mut offline),
            EbkStatus::Ok
        );
        assert_eq!(offline, 3);
        assert_eq!(
            ebk_detect_offline(buf.as_ptr(), len, 0.6, 3, 10, &mut offline),
            EbkStatus::Ok
        );
        assert_eq!(offline, 0);

        // Epochs must arrive in order.
        let m = mask(0.5, 9, &[1, 1, 0, 0]);
        assert_eq!(
            ebk_detector_observe(det, 9, m, ptr::null_mut()),
            EbkStatus::Sequencing
        );
        ebk_mask_free(m);
        ebk_detector_free(det);

        assert_eq!(ebk_detector_new(-1.0, 1, 10, &mut det), EbkStatus::Config);
    }
}

#[test]
fn memory_percent_change() {
    assert_eq!(ebk_memory_percent_change(200.0, 150.0), -25.0);
}

#[test]
fn run_pipeline_returns_report_json() {
    let toml = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny_vision.toml"),
    )
    .unwrap();
    let cfg = CString::new(toml).unwrap();
    let mut json = ptr::null_mut();
    let s = unsafe { ebk_run_pipeline(cfg.as_ptr(), &mut json) };
    assert_eq!(s, EbkStatus::Ok);
    let report: serde_json::Value =
        serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { ebk_string_free(json) };
    assert_eq!(report["status"], "ok");
    assert_eq!(report["config"]["run_id"], "tiny");

    let bad = CString::new("run_id = 3").unwrap();
    let s = unsafe { ebk_run_pipeline(bad.as_ptr(), &mut json) };
    assert_eq!(s, EbkStatus::Config);
    assert!(json.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ebkit.h");
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(
        src.path(),
        format!(
            "#include \"{}\"\nint main(void) {{ EbkMask *m = 0; return ebk_mask_new(0.5, 1, false, &m) == EBK_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(src.path())
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
