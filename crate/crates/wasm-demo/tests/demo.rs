use eusml_core::pipeline::NoiseKind;
use eusml_wasm::demo::{kind_name, parse_kind, to_rgba, Session};
use eusml_wasm::{frame_kinds, methods};

#[test]
fn every_generated_kind_is_recognized() {
    let mut s = Session::new(128, 96, 3).unwrap();
    for round in 0..4 {
        for kind in NoiseKind::ALL {
            s.generate(kind_name(kind)).unwrap();
            assert_eq!(s.classify().unwrap().kind, kind, "round {round}");
        }
    }
}

#[test]
fn enhancement_keeps_the_frame_shape() {
    let mut s = Session::new(64, 48, 1).unwrap();
    s.generate("clean").unwrap();
    for m in methods() {
        let out = s.enhanced(&m).unwrap();
        assert!(out.same_shape(s.frame()), "{m}");
        assert_eq!(to_rgba(&out).len(), 64 * 48 * 4);
    }
    assert_eq!(s.enhanced("none").unwrap(), *s.frame());
    assert!(s.enhanced("sharpen").is_err());
}

#[test]
fn rgba_is_opaque_and_keeps_colour() {
    let s = Session::new(40, 32, 0).unwrap();
    let rgba = to_rgba(s.frame());
    assert!(rgba.chunks_exact(4).all(|p| p[3] == 255));
    assert_eq!(&rgba[..3], s.frame().pixel(0, 0));
}

#[test]
fn names_round_trip_and_bad_input_is_rejected() {
    for name in frame_kinds() {
        assert_eq!(kind_name(parse_kind(&name).unwrap()), name);
    }
    assert_eq!(methods().len(), 6);
    assert!(parse_kind("smudge").is_err());
    assert!(Session::new(16, 16, 0).is_err());
    let mut s = Session::new(64, 64, 2).unwrap();
    assert!(s.generate("smudge").is_err());
}

#[test]
fn same_seed_gives_same_frames() {
    let mut a = Session::new(64, 64, 9).unwrap();
    let mut b = Session::new(64, 64, 9).unwrap();
    for kind in ["pink", "green_pointer", "clean"] {
        assert_eq!(a.generate(kind).unwrap(), b.generate(kind).unwrap());
    }
}
