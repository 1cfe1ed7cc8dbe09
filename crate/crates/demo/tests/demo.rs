use actta_demo::{curve, Session, FIELDS_PER_BATCH};

#[test]
fn identity_curve_matches_base() {
    let v = curve("swish", 0.0, 0.0, 0.0, -4.0, 4.0, 81).unwrap();
    assert_eq!(v.len(), 3 * 81);
    assert_eq!(&v[..81], &v[81..162]);
}

#[test]
fn slopes_show_up_in_the_derivative() {
    let v = curve("relu", 0.3, -0.2, 0.0, -50.0, 50.0, 3).unwrap();
    let d = &v[6..];
    assert!((d[0] + 0.2).abs() < 1e-9);
    assert!((d[2] - 1.3).abs() < 1e-9);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(curve("tanh", 0.0, 0.0, 0.0, -1.0, 1.0, 10).is_err());
    assert!(curve("relu", 0.0, 0.0, 0.0, 1.0, 1.0, 10).is_err());
    let s = Session::create(0, 2).unwrap();
    assert!(s.run("actta_star", "fog", 3, 1e-3, 5, 0).is_err());
    assert!(s.run("bogus", "scale", 3, 1e-3, 5, 0).is_err());
}

#[test]
fn adaptation_beats_the_frozen_model_under_mean_shift() {
    let s = Session::create(1, 10).unwrap();
    let mean_err = |v: &[f64]| v.chunks(FIELDS_PER_BATCH).map(|c| c[0]).sum::<f64>() / (v.len() / FIELDS_PER_BATCH) as f64;
    let frozen = s.run("none", "mean_shift", 5, 1e-3, 10, 0).unwrap();
    let star = s.run("actta_star", "mean_shift", 5, 1e-3, 10, 0).unwrap();
    assert_eq!(star.len(), 10 * FIELDS_PER_BATCH);
    assert!(mean_err(&star) < mean_err(&frozen));
}
