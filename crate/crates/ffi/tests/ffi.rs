use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use parkloc::features::{extract, FeatureBackend};
use parkloc::gallery::{build_index, load_manifest};
use parkloc::imaging::load_image;
use parkloc::localizer::{localize_pyramid, LocalizeOptions};
use parkloc::matcher::{match_pyramids, MatchParams};
use parkloc::synth::{generate, SceneSpec};
use parkloc::vehicle_filter::{load_detections, DetectionFilter};
use parkloc_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pkl_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn noise(id: &str, w: usize, h: usize, seed: u64) -> *mut PklImage {
    let mut s = seed;
    let px: Vec<f32> = (0..w * h)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    let id = CString::new(id).unwrap();
    let mut out = ptr::null_mut();
    let st = unsafe { pkl_image_from_gray(id.as_ptr(), px.as_ptr(), w, h, &mut out) };
    assert_eq!(st, PklStatus::Ok, "{}", last_error());
    out
}

fn pyramid_of(img: *const PklImage) -> *mut PklPyramid {
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { pkl_extract(img, ptr::null(), &mut out) },
        PklStatus::Ok,
        "{}",
        last_error()
    );
    out
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    let st = unsafe { pkl_image_load(ptr::null(), 0, &mut out) };
    assert_eq!(st, PklStatus::NullArgument);
    assert!(last_error().contains("path"));
    assert!(out.is_null());
    unsafe {
        pkl_image_free(ptr::null_mut());
        pkl_pyramid_free(ptr::null_mut());
        pkl_match_list_free(ptr::null_mut());
        pkl_index_free(ptr::null_mut());
        pkl_localization_free(ptr::null_mut());
        assert_eq!(pkl_match_list_len(ptr::null()), 0);
        assert!(pkl_match_list_data(ptr::null()).is_null());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let missing = CString::new("/nonexistent/dir/x.png").unwrap();
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { pkl_image_load(missing.as_ptr(), 0, &mut img) }, PklStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/x.png"));

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { pkl_image_load(bad.as_ptr() as *const _, 0, &mut img) },
        PklStatus::InvalidUtf8
    );

    let id = CString::new("tiny").unwrap();
    let px = [0.5f32; 4];
    let st = unsafe { pkl_image_from_gray(id.as_ptr(), px.as_ptr(), 2, 2, &mut img) };
    assert_ne!(st, PklStatus::Ok);

    let img = noise("ok", 64, 48, 1);
    assert_eq!(last_error(), "");
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { pkl_image_size(img, &mut w, &mut h) }, PklStatus::Ok);
    assert_eq!((w, h), (64, 48));
    unsafe { pkl_image_free(img) };
}

#[test]
fn pyramid_round_trip_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let img = noise("rt", 64, 48, 7);
    let pyr = pyramid_of(img);
    let path = CString::new(dir.path().join("rt.pklf").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pkl_pyramid_save(pyr, path.as_ptr()) }, PklStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pkl_pyramid_load(path.as_ptr(), &mut back) }, PklStatus::Ok);
    let (mut r, mut c, mut t) = (0, 0, 0);
    assert_eq!(
        unsafe { pkl_pyramid_coarse_shape(back, &mut r, &mut c, &mut t) },
        PklStatus::Ok
    );
    assert_eq!((r, c), (6, 8));
    assert!(t > 0 && t <= 48);

    let garbage = dir.path().join("bad.pklf");
    std::fs::write(&garbage, b"not a pyramid").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { pkl_pyramid_load(garbage.as_ptr(), &mut none) },
        PklStatus::Format
    );
    unsafe {
        pkl_pyramid_free(back);
        pkl_pyramid_free(pyr);
        pkl_image_free(img);
    }
}

#[test]
fn matching_agrees_with_the_library() {
    let img = noise("a", 96, 64, 3);
    let pyr = pyramid_of(img);
    let mut list = ptr::null_mut();
    assert_eq!(unsafe { pkl_match(pyr, pyr, ptr::null(), &mut list) }, PklStatus::Ok);
    let got = unsafe { std::slice::from_raw_parts(pkl_match_list_data(list), pkl_match_list_len(list)) };

    let pixels: Vec<f32> = {
        let mut s = 3u64;
        (0..96 * 64)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            })
            .collect()
    };
    let lib_pyr = extract(
        &parkloc::imaging::Image::new("a", 96, 64, pixels).unwrap(),
        &FeatureBackend::BuiltinHog,
    )
    .unwrap();
    let want = match_pyramids(&lib_pyr, &lib_pyr, &MatchParams::default()).unwrap();
    assert_eq!(got.len(), want.len());
    assert!(!got.is_empty());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(
            [g.xa, g.ya, g.xb, g.yb, g.confidence],
            [w.point_a[0], w.point_a[1], w.point_b[0], w.point_b[1], w.confidence]
        );
        assert_eq!(g.clamped, w.clamped);
    }

    let mut params = pkl_match_params_default();
    params.window = 4;
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { pkl_match(pyr, pyr, &params, &mut none) },
        PklStatus::InvalidInput
    );
    assert!(none.is_null());

    let small = noise("b", 64, 64, 4);
    let other = pyramid_of(small);
    assert_eq!(unsafe { pkl_match(pyr, other, ptr::null(), &mut none) }, PklStatus::Ok);
    unsafe { pkl_match_list_free(none) };
    unsafe {
        pkl_match_list_free(list);
        pkl_pyramid_free(pyr);
        pkl_pyramid_free(other);
        pkl_image_free(img);
        pkl_image_free(small);
    }
}

#[test]
fn localization_agrees_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        n_sections: 3,
        queries_per_section: 1,
        ..SceneSpec::identity(5)
    };
    let out = generate(&spec, dir.path().join("corpus")).unwrap();
    let filter = DetectionFilter::default();
    let gd = load_detections(&out.gallery_detections, &filter).unwrap();
    let qd = load_detections(&out.query_detections, &filter).unwrap();
    let index = build_index(&out.gallery_manifest, &FeatureBackend::BuiltinHog, 256, &gd, &filter).unwrap();
    let index_dir = dir.path().join("index");
    index.save(&index_dir).unwrap();

    let c_dir = CString::new(index_dir.to_str().unwrap()).unwrap();
    let mut h_index = ptr::null_mut();
    assert_eq!(
        unsafe { pkl_index_load(c_dir.as_ptr(), &mut h_index) },
        PklStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { pkl_index_len(h_index) }, index.len());
    let first = unsafe { CStr::from_ptr(pkl_index_entry_section(h_index, 0)) };
    assert_eq!(first.to_str().unwrap(), index.entries[0].section_id);
    assert!(unsafe { pkl_index_entry_section(h_index, index.len()) }.is_null());

    for rec in load_manifest(&out.query_manifest, 2).unwrap() {
        let image = load_image(&rec.image_path, 256).unwrap();
        let dets = qd
            .get(&rec.source_id)
            .cloned()
            .unwrap_or_else(|| parkloc::vehicle_filter::DetectionSet::empty(rec.source_id.clone()))
            .to_image_frame(image.scale_from_original(), image.width(), image.height());
        let lib_pyr = extract(&image, &FeatureBackend::BuiltinHog).unwrap();
        let want = localize_pyramid(&lib_pyr, &dets, &index, &LocalizeOptions::default()).unwrap();

        let path = CString::new(rec.image_path.to_str().unwrap()).unwrap();
        let mut img = ptr::null_mut();
        assert_eq!(unsafe { pkl_image_load(path.as_ptr(), 256, &mut img) }, PklStatus::Ok);
        let pyr = pyramid_of(img);
        let boxes: Vec<PklBox> = dets
            .boxes
            .iter()
            .map(|b| PklBox {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            })
            .collect();
        let mut res = ptr::null_mut();
        let st = unsafe { pkl_localize(h_index, pyr, boxes.as_ptr(), boxes.len(), ptr::null(), true, &mut res) };
        assert_eq!(st, PklStatus::Ok, "{}", last_error());
        unsafe {
            assert_eq!(pkl_localization_best_index(res), want.best_index);
            assert_eq!(
                CStr::from_ptr(pkl_localization_best_entry(res)).to_str().unwrap(),
                want.best_entry
            );
            assert_eq!(
                CStr::from_ptr(pkl_localization_predicted_section(res))
                    .to_str()
                    .unwrap(),
                want.predicted_section
            );
            assert_eq!(pkl_localization_second_best_ratio(res), want.second_best_ratio);
            for i in 0..index.len() {
                let (mut c, mut raw) = (0, 0);
                assert_eq!(pkl_localization_count(res, i, &mut c, &mut raw), PklStatus::Ok);
                assert_eq!((c, raw), (want.counts[i], want.raw_counts[i]));
            }
            let (mut c, mut raw) = (0, 0);
            assert_eq!(
                pkl_localization_count(res, index.len(), &mut c, &mut raw),
                PklStatus::InvalidInput
            );
            pkl_localization_free(res);
            pkl_pyramid_free(pyr);
            pkl_image_free(img);
        }
    }
    let mut none = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_ne!(unsafe { pkl_index_load(missing.as_ptr(), &mut none) }, PklStatus::Ok);
    unsafe { pkl_index_free(h_index) };
}

#[test]
fn header_compiles_as_c_and_cxx() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/parkloc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "pkl_match",
        "pkl_localize",
        "pkl_last_error_message",
        "PKL_STATUS_PANIC",
        "PklBox",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"parkloc.h\"\nint main(void) { PklMatchParams p = pkl_match_params_default(); return p.window == 5 ? PKL_STATUS_OK : 1; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not available; skipping"),
        }
    }
}
