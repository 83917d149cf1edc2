use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use metasr::checkpoint::{self, TrainingMeta};
use metasr::features::FeatureNetConfig;
use metasr::meta_upscale::WeightNetConfig;
use metasr::model::{Backend, MetaSr, ModelConfig};
use metasr_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = metasr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn save_tiny(path: &Path) {
    let mut weight_net = WeightNetConfig::new(4, 3);
    weight_net.hidden = 8;
    let cfg = ModelConfig {
        features: FeatureNetConfig {
            num_blocks: 1,
            convs_per_block: 1,
            growth_rate: 4,
            feature_channels: 4,
            image_channels: 3,
            kernel_size: 3,
        },
        weight_net,
        backend: Backend::Meta,
    };
    checkpoint::save(path, &MetaSr::<f32>::init(cfg, 3).unwrap(), None, &TrainingMeta::default()).unwrap();
}

fn gradient(w: usize, h: usize) -> Vec<u8> {
    (0..h * w * 3).map(|i| ((i * 7) % 256) as u8).collect()
}

#[test]
fn upscale_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.msr");
    save_tiny(&ck);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(metasr_model_load(cstr(&ck).as_ptr(), &mut model), MetasrStatus::Ok);
        let px = gradient(64, 48);
        let mut img = ptr::null_mut();
        assert_eq!(metasr_image_from_rgb8(px.as_ptr(), 64, 48, &mut img), MetasrStatus::Ok);
        let mut back = vec![0u8; px.len()];
        assert_eq!(metasr_image_copy_rgb8(img, back.as_mut_ptr(), back.len()), MetasrStatus::Ok);
        assert_eq!(back, px);

        let mut up = ptr::null_mut();
        assert_eq!(metasr_upscale(model, img, 2.5, &mut up), MetasrStatus::Ok);
        assert_eq!((metasr_image_height(up), metasr_image_width(up)), (120, 160));
        let mut n = 0;
        assert_eq!(metasr_output_len(48, 2.5, &mut n), MetasrStatus::Ok);
        assert_eq!(n, 120);

        let out = dir.path().join("up.png");
        assert_eq!(metasr_image_save_png(up, cstr(&out).as_ptr()), MetasrStatus::Ok);
        let mut reread = ptr::null_mut();
        assert_eq!(metasr_image_load(cstr(&out).as_ptr(), &mut reread), MetasrStatus::Ok);
        let (mut psnr, mut ssim) = (0.0, 0.0);
        assert_eq!(metasr_quality(reread, up, 2.5, &mut psnr, &mut ssim), MetasrStatus::Ok);
        assert_eq!((psnr, ssim), (f64::INFINITY, 1.0));

        let mut small = ptr::null_mut();
        assert_eq!(metasr_bicubic(img, 0.5, &mut small), MetasrStatus::Ok);
        assert_eq!((metasr_image_height(small), metasr_image_width(small)), (24, 32));

        for i in [img, up, reread, small] {
            metasr_image_free(i);
        }
        metasr_model_free(model);
    }
}

#[test]
fn failures_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(metasr_model_load(ptr::null(), &mut model), MetasrStatus::NullPointer);
        let missing = cstr(&dir.path().join("none.msr"));
        assert_eq!(metasr_model_load(missing.as_ptr(), &mut model), MetasrStatus::Io);
        assert!(last_error().contains("none.msr"));
        let junk = dir.path().join("junk.msr");
        std::fs::write(&junk, b"junk").unwrap();
        assert_eq!(metasr_model_load(cstr(&junk).as_ptr(), &mut model), MetasrStatus::Checkpoint);
        assert!(model.is_null());

        let px = gradient(8, 8);
        let mut img = ptr::null_mut();
        assert_eq!(metasr_image_from_rgb8(px.as_ptr(), 8, 8, &mut img), MetasrStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(metasr_bicubic(img, -2.0, &mut out), MetasrStatus::InvalidArgument);
        assert!(last_error().contains("-2"));
        assert_eq!(metasr_upscale(ptr::null(), img, 2.0, &mut out), MetasrStatus::NullPointer);
        let mut tiny = [0u8; 4];
        assert_eq!(metasr_image_copy_rgb8(img, tiny.as_mut_ptr(), 4), MetasrStatus::InvalidArgument);
        assert_eq!(metasr_image_width(ptr::null()), 0);
        metasr_image_free(img);
        metasr_image_free(ptr::null_mut());
        metasr_model_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(metasr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/metasr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["metasr_model_load", "metasr_upscale", "metasr_quality", "METASR_STATUS_CHECKPOINT"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"metasr.h\"\nint main(void) { MetasrModel *m = 0; return metasr_model_load(0, &m) == METASR_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; header syntax not checked");
        return;
    };
    assert!(status.success());
}
