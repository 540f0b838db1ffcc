use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hicontrast_ffi::*;

const SMALL: &str = r#"
[environment]
lattice_size = 4
p = 0.2
seed = 3
volume_cap = 2

[discretization]
sub_resolution = 4
coarse_grid = 16
modes = 4

[convergence]
eps_list = [0.25, 0.125]
t = 0.01
tau_fine = 0.005
tau_limit = 0.005
"#;

fn setup(text: &str) -> (HcStatus, *mut HcSetup) {
    let toml = CString::new(text).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { hc_setup_new(toml.as_ptr(), &mut handle) };
    (status, handle)
}

fn last_error() -> String {
    let p = hc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn setup_reports_theta_and_fractions() {
    let (status, s) = setup(SMALL);
    assert_eq!(status, HcStatus::Ok, "{}", last_error());
    let mut theta = [0.0; 4];
    let mut alpha0 = 0.0;
    let mut types = 0usize;
    unsafe {
        assert_eq!(hc_setup_theta(s, theta.as_mut_ptr()), HcStatus::Ok);
        assert_eq!(hc_setup_fractions(s, &mut alpha0, &mut types), HcStatus::Ok);
    }
    assert_eq!(theta[1], theta[2]);
    assert!(theta[0] > 0.0 && theta[0] <= alpha0 + 1e-12);
    assert!(alpha0 > 0.0 && alpha0 <= 1.0);

    let mut buf = [0 as std::ffi::c_char; 32];
    unsafe {
        assert_eq!(
            hc_setup_config_hash(s, buf.as_mut_ptr(), buf.len()),
            HcStatus::Ok
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 16);
        assert_eq!(
            hc_setup_config_hash(s, buf.as_mut_ptr(), 4),
            HcStatus::OutOfRange
        );
        hc_setup_free(s);
    }
}

#[test]
fn bandset_starts_at_zero() {
    let (_, s) = setup(SMALL);
    let mut bands = ptr::null_mut();
    let (mut count, mut start, mut end, mut cap) = (0usize, -1.0, -1.0, 0.0);
    unsafe {
        assert_eq!(hc_spectrum_compute(s, &mut bands), HcStatus::Ok);
        assert_eq!(hc_bandset_band_count(bands, &mut count), HcStatus::Ok);
        assert!(count >= 1);
        assert_eq!(
            hc_bandset_band(bands, 0, &mut start, &mut end),
            HcStatus::Ok
        );
        assert_eq!(start, 0.0);
        assert!(end > 0.0);
        assert_eq!(hc_bandset_truncation_cap(bands, &mut cap), HcStatus::Ok);
        assert!(cap >= end);
        assert_eq!(
            hc_bandset_band(bands, count, &mut start, &mut end),
            HcStatus::OutOfRange
        );
        let mut w = 0.0;
        assert_eq!(hc_dispersion_eval(s, 0.0, &mut w), HcStatus::Ok);
        let (mut alpha0, mut types) = (0.0, 0usize);
        hc_setup_fractions(s, &mut alpha0, &mut types);
        assert!((w - 1.0 / alpha0).abs() < 1e-12);
        hc_bandset_free(bands);
        hc_setup_free(s);
    }
}

#[test]
fn convergence_rows_start_with_zero_error() {
    let (_, s) = setup(SMALL);
    let mut run = ptr::null_mut();
    let mut rows = 0usize;
    unsafe {
        assert_eq!(
            hc_convergence_run(s, &mut run),
            HcStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(hc_convergence_row_count(run, &mut rows), HcStatus::Ok);
        assert_eq!(rows, 4);
        let (mut eps, mut t, mut err) = (0.0, 0.0, 0.0);
        assert_eq!(
            hc_convergence_row(run, 0, &mut eps, &mut t, &mut err),
            HcStatus::Ok
        );
        assert_eq!((eps, t, err), (0.25, 0.0, 0.0));
        assert_eq!(
            hc_convergence_row(run, 1, &mut eps, &mut t, &mut err),
            HcStatus::Ok
        );
        assert!(t > 0.0 && err.is_finite());
        let mut passed = false;
        assert_eq!(hc_convergence_passed(run, &mut passed), HcStatus::Ok);
        hc_convergence_free(run);
        hc_setup_free(s);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (status, s) = setup("[environment]\nlattice_size = 4\np = 1.5\nseed = 1\nvolume_cap = 2\n");
    assert_eq!(status, HcStatus::InvalidConfig);
    assert!(s.is_null());
    assert!(last_error().contains("p = 1.5"));

    let (status, _) = setup("not toml [");
    assert_eq!(status, HcStatus::InvalidConfig);

    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { hc_setup_new(ptr::null(), &mut out) },
        HcStatus::NullPointer
    );
    let mut v = 0.0;
    assert_eq!(
        unsafe { hc_dispersion_eval(ptr::null(), 1.0, &mut v) },
        HcStatus::NullPointer
    );
    unsafe {
        hc_setup_free(ptr::null_mut());
        hc_bandset_free(ptr::null_mut());
        hc_convergence_free(ptr::null_mut());
    }
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(hc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hicontrast.h");
    let text = std::fs::read_to_string(&header).expect("generated header");
    for name in [
        "HC_STATUS_OK",
        "typedef struct HcSetup HcSetup",
        "hc_setup_new",
        "hc_setup_free",
        "hc_bandset_band",
        "hc_convergence_row",
        "hc_last_error_message",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
