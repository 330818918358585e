use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;

use csvddnet::cli::config::PipelineConfig;
use csvddnet::cli::workflow::{describe_views, fit_balls, train_classifiers, train_dictionaries};
use csvddnet::ingest::GrayImage;
use csvddnet::pipeline::make_view_descriptor;
use csvddnet_ffi::*;

const SIDE: usize = 16;

/// Horizontal stripes for class 0, vertical for class 1, with a per-image
/// phase so the samples differ.
fn stripes(class: usize, phase: usize) -> GrayImage {
    let mut v = Vec::with_capacity(SIDE * SIDE);
    for i in 0..SIDE {
        for j in 0..SIDE {
            let t = if class == 0 { i } else { j } + phase;
            let base = if (t / 2).is_multiple_of(2) { 0.85 } else { 0.15 };
            v.push(base + 0.01 * ((i * 7 + j * 3 + phase) % 5) as f64);
        }
    }
    GrayImage::new(SIDE, SIDE, v).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    path: PathBuf,
    partial: PathBuf,
    images: Vec<GrayImage>,
    labels: Vec<usize>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = PipelineConfig::parse(
            "receptive_fields = 5\npooling_sizes = 2, 3\nsift_blocks = 2\ndictionary_size = 6\n\
             patches = 1500\nsvm_epochs = 5\nstack_folds = 2\nseed = 4\n",
            Path::new("."),
        )
        .unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for k in 0..24 {
            images.push(stripes(k % 2, k / 2));
            labels.push(k % 2);
        }
        let mut bundle = train_dictionaries(&cfg, &images).unwrap();
        fit_balls(&cfg, &mut bundle, &images).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let partial = dir.path().join("balls.bin");
        bundle.save(&partial).unwrap();
        let views = describe_views(&bundle, &images).unwrap();
        train_classifiers(&cfg, &mut bundle, &views, &labels, 2).unwrap();
        let path = dir.path().join("model.bin");
        bundle.save(&path).unwrap();
        Fixture {
            _dir: dir,
            path,
            partial,
            images,
            labels,
        }
    })
}

struct Handle(*mut CsvddModel);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { csvdd_model_free(self.0) }
    }
}

fn load(path: &Path) -> Handle {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { csvdd_model_load(c.as_ptr(), &mut h) };
    assert_eq!(st, CsvddStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    Handle(h)
}

fn last_error() -> String {
    let p = csvdd_last_error_message();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(csvdd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn csvdd_ball_radius_matches_sorted_distances() {
    // 1-D points 0, 0, 0, 4: mean 1, distances 1, 1, 1, 3. lambda = 0.5
    // leaves two points outside, so the radius is the third largest distance.
    let pts = [0.0, 0.0, 0.0, 4.0];
    let mut center = [f64::NAN];
    let mut radius = f64::NAN;
    let st = unsafe {
        csvdd_ball_fit(
            pts.as_ptr(),
            4,
            1,
            0.5,
            CSVDD_BALL_CSVDD,
            center.as_mut_ptr(),
            &mut radius,
        )
    };
    assert_eq!(st, CsvddStatus::Ok);
    assert_eq!(center, [1.0]);
    assert_eq!(radius, 1.0);
}

#[test]
fn svdd_ball_two_points() {
    let pts = [-1.0, 0.0, 3.0, 0.0];
    let mut center = [0.0; 2];
    let mut radius = 0.0;
    let st = unsafe {
        csvdd_ball_fit(
            pts.as_ptr(),
            2,
            2,
            1.0,
            CSVDD_BALL_SVDD,
            center.as_mut_ptr(),
            &mut radius,
        )
    };
    assert_eq!(st, CsvddStatus::Ok, "{}", last_error());
    assert!((center[0] - 1.0).abs() < 1e-4 && center[1].abs() < 1e-4, "{center:?}");
    assert!((radius - 2.0).abs() < 1e-4, "{radius}");
}

#[test]
fn ball_fit_errors_set_message() {
    let pts = [0.0, 1.0];
    let mut c = [0.0];
    let mut r = 0.0;
    let st = unsafe { csvdd_ball_fit(pts.as_ptr(), 2, 1, 1.0, 7, c.as_mut_ptr(), &mut r) };
    assert_eq!(st, CsvddStatus::InvalidArgument);
    assert!(last_error().contains("ball kind"));

    let st = unsafe { csvdd_ball_fit(ptr::null(), 2, 1, 1.0, CSVDD_BALL_CSVDD, c.as_mut_ptr(), &mut r) };
    assert_eq!(st, CsvddStatus::NullPointer);

    let st = unsafe { csvdd_ball_fit(pts.as_ptr(), 2, 1, -1.0, CSVDD_BALL_CSVDD, c.as_mut_ptr(), &mut r) };
    assert_ne!(st, CsvddStatus::Ok);
    assert!(!last_error().is_empty());

    // a later success clears the message
    let st = unsafe { csvdd_ball_fit(pts.as_ptr(), 2, 1, 1.0, CSVDD_BALL_CSVDD, c.as_mut_ptr(), &mut r) };
    assert_eq!(st, CsvddStatus::Ok);
    assert!(csvdd_last_error_message().is_null());
}

#[test]
fn load_failures() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { csvdd_model_load(missing.as_ptr(), &mut h) }, CsvddStatus::Io);
    assert!(h.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { csvdd_model_load(junk.as_ptr(), &mut h) }, CsvddStatus::Format);
    assert_eq!(
        unsafe { csvdd_model_load(ptr::null(), &mut h) },
        CsvddStatus::NullPointer
    );
    assert_eq!(
        unsafe { csvdd_model_load(missing.as_ptr(), ptr::null_mut()) },
        CsvddStatus::NullPointer
    );
    unsafe { csvdd_model_free(ptr::null_mut()) };
}

#[test]
fn views_describe_like_the_library() {
    let f = fixture();
    let h = load(&f.path);
    let bundle = csvddnet::cli::bundle::ModelBundle::load(&f.path).unwrap();
    assert_eq!(unsafe { csvdd_model_view_count(h.0) }, 2);
    assert_eq!(unsafe { csvdd_model_view_count(ptr::null()) }, 0);
    for (idx, v) in bundle.params.views.iter().enumerate() {
        let mut info = CsvddView::default();
        assert_eq!(unsafe { csvdd_model_view(h.0, idx, &mut info) }, CsvddStatus::Ok);
        assert_eq!((info.receptive_field, info.pooling, info.blocks), (v.r, v.p, v.m));
        assert_eq!(info.code_dim, 6);
        assert_eq!(info.descriptor_dim, 6 * 2 * 2 * 8);

        let img = &f.images[3];
        let mut out = vec![f64::NAN; info.descriptor_dim];
        let st =
            unsafe { csvdd_model_describe(h.0, idx, img.values().as_ptr(), SIDE, SIDE, out.as_mut_ptr(), out.len()) };
        assert_eq!(st, CsvddStatus::Ok, "{}", last_error());
        let want = make_view_descriptor(img, bundle.scale(v.r).unwrap(), *v, &bundle.params.descriptor).unwrap();
        assert_eq!(out, want.values);

        let st = unsafe {
            csvdd_model_describe(
                h.0,
                idx,
                img.values().as_ptr(),
                SIDE,
                SIDE,
                out.as_mut_ptr(),
                out.len() - 1,
            )
        };
        assert_eq!(st, CsvddStatus::BufferTooSmall);
    }
    let mut info = CsvddView::default();
    assert_eq!(
        unsafe { csvdd_model_view(h.0, 2, &mut info) },
        CsvddStatus::InvalidArgument
    );
}

#[test]
fn describe_rejects_bad_images() {
    let f = fixture();
    let h = load(&f.path);
    let mut out = vec![0.0; 1024];
    let tiny = [0.5; 9];
    let st = unsafe { csvdd_model_describe(h.0, 0, tiny.as_ptr(), 3, 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, CsvddStatus::DimensionMismatch);
    let bright = vec![2.0; SIDE * SIDE];
    let st = unsafe { csvdd_model_describe(h.0, 0, bright.as_ptr(), SIDE, SIDE, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, CsvddStatus::InvalidArgument);
}

#[test]
fn encode_patch_is_nonnegative_and_checks_size() {
    let f = fixture();
    let h = load(&f.path);
    let patch: Vec<f64> = (0..25).map(|i| (i % 5) as f64 / 4.0).collect();
    let mut code = [f64::NAN; 6];
    let st = unsafe { csvdd_model_encode_patch(h.0, 0, patch.as_ptr(), 25, code.as_mut_ptr(), 6) };
    assert_eq!(st, CsvddStatus::Ok, "{}", last_error());
    assert!(code.iter().all(|c| c.is_finite() && *c >= 0.0), "{code:?}");
    let st = unsafe { csvdd_model_encode_patch(h.0, 0, patch.as_ptr(), 24, code.as_mut_ptr(), 6) };
    assert_eq!(st, CsvddStatus::DimensionMismatch);
    let st = unsafe { csvdd_model_encode_patch(h.0, 0, patch.as_ptr(), 25, code.as_mut_ptr(), 5) };
    assert_eq!(st, CsvddStatus::BufferTooSmall);
}

#[test]
fn predict_separates_stripes() {
    let f = fixture();
    let h = load(&f.path);
    let mut classes = 0;
    assert_eq!(unsafe { csvdd_model_class_count(h.0, &mut classes) }, CsvddStatus::Ok);
    assert_eq!(classes, 2);
    let mut hits = 0;
    for (img, &label) in f.images.iter().zip(&f.labels) {
        let mut class = usize::MAX;
        let mut scores = [f64::NAN; 2];
        let st = unsafe {
            csvdd_model_predict(
                h.0,
                img.values().as_ptr(),
                SIDE,
                SIDE,
                &mut class,
                scores.as_mut_ptr(),
                2,
            )
        };
        assert_eq!(st, CsvddStatus::Ok, "{}", last_error());
        assert!(scores.iter().all(|s| s.is_finite()));
        assert_eq!(class, if scores[1] > scores[0] { 1 } else { 0 });
        hits += usize::from(class == label);
    }
    assert!(hits >= 22, "{hits}/24 training images classified correctly");

    let img = &f.images[0];
    let mut class = 0;
    let st = unsafe { csvdd_model_predict(h.0, img.values().as_ptr(), SIDE, SIDE, &mut class, ptr::null_mut(), 0) };
    assert_eq!(st, CsvddStatus::Ok);
    let mut short = [0.0; 1];
    let st = unsafe {
        csvdd_model_predict(
            h.0,
            img.values().as_ptr(),
            SIDE,
            SIDE,
            &mut class,
            short.as_mut_ptr(),
            1,
        )
    };
    assert_eq!(st, CsvddStatus::BufferTooSmall);
}

#[test]
fn bundle_without_classifiers() {
    let f = fixture();
    let h = load(&f.partial);
    let mut n = 0;
    assert_eq!(
        unsafe { csvdd_model_class_count(h.0, &mut n) },
        CsvddStatus::MissingMember
    );
    let img = &f.images[0];
    let mut class = 0;
    let st = unsafe { csvdd_model_predict(h.0, img.values().as_ptr(), SIDE, SIDE, &mut class, ptr::null_mut(), 0) };
    assert_eq!(st, CsvddStatus::MissingMember);
    // descriptors still work
    let mut info = CsvddView::default();
    assert_eq!(unsafe { csvdd_model_view(h.0, 0, &mut info) }, CsvddStatus::Ok);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/csvddnet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "csvdd_model_load",
        "csvdd_model_free",
        "csvdd_model_predict",
        "csvdd_ball_fit",
        "CSVDD_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(probe) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(probe.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"csvddnet.h\"\nint main(void) { CsvddModel *m = 0; CsvddStatus s = csvdd_model_load(\"x\", &m); \
         csvdd_model_free(m); return s == CSVDD_STATUS_OK; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
