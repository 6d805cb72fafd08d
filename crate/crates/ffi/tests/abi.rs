use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use esindy::dataset::{load_timeseries, Schema};
use esindy::model_file::ModelFile;
use esindy::simulate::evaluate_series;
use esindy_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = esindy_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Config for a quick basic fit on a short plant record.
fn write_config(dir: &Path, plant: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text =
        format!("seed = 3\nmethod = \"basic\"\n[data]\nplant = \"{plant}\"\nhorizon = 600\n[stls]\nlambda = 1.0\n");
    std::fs::write(&path, text).unwrap();
    path
}

fn identify(dir: &Path) -> *mut EsindyModel {
    let cfg = cstr(&write_config(dir, "surrogate-airpath"));
    let mut model = ptr::null_mut();
    let st = unsafe { esindy_identify(cfg.as_ptr(), &mut model) };
    assert_eq!(st, EsindyStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn identify_save_load_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let model = identify(dir.path());
    let mut dims = EsindyDims::default();
    assert_eq!(unsafe { esindy_model_dims(model, &mut dims) }, EsindyStatus::Ok);
    assert_eq!(
        (
            dims.states,
            dims.controls,
            dims.exogenous,
            dims.state_delays,
            dims.features
        ),
        (2, 2, 2, 1, 45)
    );
    assert!(dims.nonzero_terms > 0);

    let file = dir.path().join("model.json");
    assert_eq!(
        unsafe { esindy_model_save(model, cstr(&file).as_ptr()) },
        EsindyStatus::Ok
    );
    unsafe { esindy_model_free(model) };
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { esindy_model_load(cstr(&file).as_ptr(), &mut loaded) },
        EsindyStatus::Ok
    );

    // Rollout over a fresh record must match the library's own evaluation.
    let data = dir.path().join("data.csv");
    let plant = esindy::plants::surrogate_airpath();
    let ts = esindy::plants::generate(&plant, esindy::plants::ExcitationKind::Steps, 200, 77).unwrap();
    ts.write_csv(&data).unwrap();
    let names = ts.names();
    let schema = Schema {
        states: names.states.clone(),
        controls: names.controls.clone(),
        exogenous: names.exogenous.clone(),
        sample_period: ts.sample_period(),
    };
    let ts = load_timeseries(&data, &schema).unwrap();
    let reference_model = ModelFile::load(&file).unwrap().to_model().unwrap();
    let eval = evaluate_series(&reference_model, &ts).unwrap();
    let want = eval.long_term.in_original_units(reference_model.offsets());

    let horizon = ts.len() - 2;
    let sample_major = |m: &nalgebra::DMatrix<f64>, from: usize, count: usize| -> Vec<f64> {
        (from..from + count)
            .flat_map(|t| m.column(t).iter().copied().collect::<Vec<_>>())
            .collect()
    };
    let window = sample_major(ts.states(), 0, 2);
    // step k consumes the inputs of the newest window sample
    let u = sample_major(ts.controls(), 1, horizon);
    let d = sample_major(ts.exogenous(), 1, horizon);
    let mut pred = vec![0.0; 2 * horizon];
    let mut done = 0usize;
    let st = unsafe {
        esindy_model_simulate(
            loaded,
            window.as_ptr(),
            u.as_ptr(),
            d.as_ptr(),
            horizon,
            pred.as_mut_ptr(),
            &mut done,
        )
    };
    assert_eq!(st, EsindyStatus::Ok, "{}", last_error());
    assert_eq!(done, want.ncols());
    for t in 0..done {
        for c in 0..2 {
            assert_eq!(
                pred[t * 2 + c].to_bits(),
                want[(c, t)].to_bits(),
                "sample {t} channel {c}"
            );
        }
    }
    unsafe { esindy_model_free(loaded) };
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();

    let junk = CString::new("{\"format\": 3}").unwrap();
    assert_eq!(
        unsafe { esindy_model_from_json(junk.as_ptr(), &mut model) },
        EsindyStatus::Parse
    );
    assert!(model.is_null());
    assert!(last_error().contains("json"));

    let missing = cstr(&dir.path().join("absent.json"));
    assert_eq!(
        unsafe { esindy_model_load(missing.as_ptr(), &mut model) },
        EsindyStatus::Io
    );

    assert_eq!(
        unsafe { esindy_model_load(ptr::null(), &mut model) },
        EsindyStatus::NullArgument
    );
    assert_eq!(
        unsafe { esindy_model_dims(ptr::null(), ptr::null_mut()) },
        EsindyStatus::NullArgument
    );

    let bad_plant = cstr(&write_config(dir.path(), "teapot"));
    assert_eq!(
        unsafe { esindy_identify(bad_plant.as_ptr(), &mut model) },
        EsindyStatus::UnknownPlant
    );
    assert!(last_error().contains("teapot"));

    let flat = [2.0, 2.0, 2.0];
    let mut r2 = 0.0;
    assert_eq!(
        unsafe { esindy_r_squared(flat.as_ptr(), flat.as_ptr(), 3, &mut r2) },
        EsindyStatus::UndefinedR2
    );
    let (t, p) = ([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]);
    assert_eq!(
        unsafe { esindy_r_squared(t.as_ptr(), p.as_ptr(), 3, &mut r2) },
        EsindyStatus::Ok
    );
    assert_eq!(r2, -3.0);

    unsafe { esindy_model_free(ptr::null_mut()) };
    let version = unsafe { CStr::from_ptr(esindy_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/esindy.h")).unwrap();
    for name in [
        "esindy_last_error",
        "esindy_version",
        "esindy_model_load",
        "esindy_model_from_json",
        "esindy_model_save",
        "esindy_model_free",
        "esindy_model_dims",
        "esindy_model_simulate",
        "esindy_r_squared",
        "esindy_identify",
        "typedef struct EsindyModel EsindyModel",
        "ESINDY_STATUS_NO_MODEL = 11",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles the C smoke program against the generated header and the
/// static library, then runs it on a saved model.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        panic!("no C compiler on PATH");
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    // test binary lives in target/<profile>/deps
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libesindy_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = std::process::Command::new(cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let model = identify(dir.path());
    let file = dir.path().join("model.json");
    assert_eq!(
        unsafe { esindy_model_save(model, cstr(&file).as_ptr()) },
        EsindyStatus::Ok
    );
    unsafe { esindy_model_free(model) };
    let run = std::process::Command::new(&exe).arg(&file).output().unwrap();
    assert!(
        run.status.success(),
        "exit {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let line = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(&fields[..5], ["2", "2", "2", "1", "5"]);
    assert!(fields[5].parse::<f64>().unwrap().is_finite());
}
