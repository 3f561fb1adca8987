use std::path::Path;

use fxpnet::modelio::netdef::NetDef;
use fxpnet::modelio::params::{blobs_of, decode_params, encode_params, params_from_blobs};
use fxpnet::modelio::report::{read_history_csv, write_history_csv};
use fxpnet::modelio::{parse_profile, profile_sha256, profile_to_text, SchemeFile};
use fxpnet::Error;
use fxpnet_core::finetune::HistoryEntry;
use fxpnet_core::net::lenet;
use fxpnet_core::quantflow::Probe;
use fxpnet_core::stats::{build_scheme, profile_activations, PartBits};
use fxpnet_core::{LayerKind, LayerSpec, Model, Part, PartSet, SchemeMode};
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn small_model(seed: u64) -> Model {
    let mut m = Model::new(
        [1, 6, 6],
        vec![
            LayerSpec::new("c1", LayerKind::Convolution { num_output: 2, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::new("p1", LayerKind::AvgPool { kernel: 2, stride: 2 }),
            LayerSpec::new("r1", LayerKind::ReLU),
            LayerSpec::new("fc", LayerKind::InnerProduct { num_output: 3 }),
            LayerSpec::new("loss", LayerKind::SoftmaxLoss),
        ],
    )
    .unwrap();
    m.init_params(seed);
    m
}

#[test]
fn lenet_fixture_parses_to_builtin_lenet() {
    let def = NetDef::load(&fixture("lenet.net")).unwrap();
    let model = def.model().unwrap();
    assert_eq!(model.layers(), lenet().layers());
    assert_eq!(model.input_shape(), [1, 28, 28]);
    let norm = def.normalization().unwrap();
    assert_eq!((norm.mean, norm.std), (0.1307, 0.3081));
}

#[test]
fn netdef_round_trip() {
    let mut def = NetDef::from_model(&small_model(0));
    def.set_meta("final_lr", 3.125e-5);
    let text = def.to_text();
    let back = NetDef::parse(&text).unwrap();
    assert_eq!(back, def);
    assert_eq!(back.meta_f64("final_lr").unwrap(), Some(3.125e-5));
    assert_eq!(back.model().unwrap().layers(), small_model(0).layers());
    assert_eq!(NetDef::parse(&back.to_text()).unwrap().to_text(), text);
}

#[test]
fn netdef_rejects_bad_input() {
    let good = NetDef::from_model(&small_model(0)).to_text();
    let cases = [
        good.replace("fxpnet-netdef 1", "fxpnet-netdef 2"),
        good.replace("fxpnet-netdef 1", "caffe-prototxt 1"),
        good.replace("  kernel 3\n", "  kernel 3\n  dilation 2\n"),
        good.replace("kind relu", "kind gelu"),
        good.replace("  num_output 3\n", ""),
        good.replace("input 1 6 6", "input 1 6"),
        good.replace("input 1 6 6", "input 0 6 6"),
        good.replace("layer p1", "layer c1"),
        good.replace("end\n", ""),
        good.replace("  kernel 3\n", "  kernel three\n"),
        good.replace("  kernel 3\n", "  kernel 3\n  kernel 3\n"),
        format!("{good}bogus 1\n"),
        String::new(),
    ];
    for (i, text) in cases.iter().enumerate() {
        assert!(NetDef::parse(text).is_err(), "case {i} parsed:\n{text}");
    }
    match NetDef::parse(&cases[0]) {
        Err(Error::Version { found: 2, expected: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    match NetDef::parse(&cases[2]) {
        Err(Error::Parse { msg, .. }) => assert!(msg.contains("dilation"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn params_round_trip_is_bitwise() {
    let m = small_model(3);
    let bytes = encode_params(&m);
    let params = params_from_blobs(&m, decode_params(&bytes).unwrap()).unwrap();
    for (a, b) in params.tensors().zip(m.params().tensors()) {
        let bits = |t: &fxpnet_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.params");
    fxpnet::modelio::save_params(&m, &path).unwrap();
    let mut loaded = small_model(99);
    fxpnet::modelio::load_params(&mut loaded, &path).unwrap();
    assert_eq!(loaded, m);
}

#[test]
fn params_errors_are_distinct() {
    let m = small_model(1);
    let bytes = encode_params(&m);

    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(decode_params(&v2), Err(Error::Version { found: 2, .. })));

    assert!(matches!(decode_params(&bytes[..bytes.len() - 10]), Err(Error::Truncated(_))));
    assert!(matches!(decode_params(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
    assert!(matches!(decode_params(&bytes[..3]), Err(Error::Truncated(_))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 6;
    flipped[mid] ^= 0x10;
    assert!(matches!(decode_params(&flipped), Err(Error::Checksum { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_params(&magic), Err(Error::ParamMagic)));

    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_params(&long).is_err());

    let other = small_model(1);
    let mut blobs = blobs_of(&other);
    blobs.pop();
    assert!(matches!(params_from_blobs(&m, blobs), Err(Error::ParamMismatch(_))));
    let mut blobs = blobs_of(&other);
    blobs[0].shape = vec![2, 9];
    assert!(matches!(params_from_blobs(&m, blobs), Err(Error::ParamMismatch(_))));
    let mut blobs = blobs_of(&other);
    blobs[0].name = "c9.weight".into();
    assert!(matches!(params_from_blobs(&m, blobs), Err(Error::ParamMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn corrupted_params_never_load_silently(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let m = small_model(5);
        let mut bytes = encode_params(&m);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_params(&bytes).is_err());
    }

    #[test]
    fn truncated_params_never_load(cut in 0usize..1000) {
        let m = small_model(6);
        let bytes = encode_params(&m);
        let cut = cut % bytes.len();
        prop_assert!(decode_params(&bytes[..cut]).is_err());
    }
}

fn scheme_file() -> (Model, SchemeFile) {
    let m = small_model(2);
    let data = fxpnet_core::data::Dataset::new(
        fxpnet_core::Tensor::from_fn(&[4, 1, 6, 6], |i| ((i * 7) % 11) as f32 / 11.0),
        vec![0, 1, 2, 0],
        3,
    )
    .unwrap();
    let prof = profile_activations(&m, &data, 4, 2).unwrap();
    let scheme = build_scheme(&prof, PartBits { conv_weights: 4, fc_weights: 6, layer_outputs: 8 }, SchemeMode::Dynamic)
        .unwrap()
        .restricted_to(PartSet::only(Part::FcWeights).with(Part::LayerOutputs));
    let mut f = SchemeFile::new(scheme);
    f.provenance.profile_sha256 = Some(profile_sha256(&prof));
    f.provenance.budget = Some(1.0);
    f.provenance.traces = vec![(
        "fc_weights".into(),
        vec![Probe { bits: 9, accuracy: 99.25 }, Probe { bits: 5, accuracy: 98.125 }],
    )];
    f.provenance.notes = vec!["widened fc_weights".into()];
    (m, f)
}

#[test]
fn scheme_round_trip() {
    let (m, f) = scheme_file();
    let text = f.to_text();
    let back = SchemeFile::parse_for(&text, &m).unwrap();
    assert_eq!(back, f);
    let none = SchemeFile::new(f.scheme.restricted_to(PartSet::NONE));
    assert_eq!(SchemeFile::parse(&none.to_text()).unwrap(), none);
}

#[test]
fn scheme_errors() {
    let (m, f) = scheme_file();
    let text = f.to_text();
    let v9 = text.replace("fxpnet-scheme 1", "fxpnet-scheme 9");
    assert!(matches!(SchemeFile::parse(&v9), Err(Error::Version { found: 9, .. })));
    let dangling = text.replace("layer fc ", "layer fc9 ");
    assert!(SchemeFile::parse(&dangling).is_ok());
    assert!(matches!(
        SchemeFile::parse_for(&dangling, &m),
        Err(Error::Core(fxpnet_core::Error::DanglingReference(n))) if n == "fc9"
    ));
    let missing = text.replace("input_fl", "# input_fl");
    assert!(SchemeFile::parse(&missing).is_err());
    assert!(SchemeFile::parse(&text.replace("mode dynamic", "mode adaptive")).is_err());
    assert!(SchemeFile::parse(&text.replace("parts fc_weights", "parts biases")).is_err());
    assert!(SchemeFile::parse(&format!("{text}colour blue\n")).is_err());
}

#[test]
fn profile_dump_round_trip_and_hash() {
    let m = small_model(4);
    let img = fxpnet_core::data::Dataset::new(
        fxpnet_core::Tensor::from_fn(&[3, 1, 6, 6], |i| (i as f32 * 0.13).sin()),
        vec![0, 1, 2],
        3,
    )
    .unwrap();
    let p = profile_activations(&m, &img, 3, 3).unwrap();
    let text = profile_to_text(&p);
    assert_eq!(parse_profile(&text).unwrap(), p);
    let h = profile_sha256(&p);
    assert_eq!(h.len(), 64);
    let mut q = p.clone();
    q.input_max_abs = Some(q.input_max_abs.unwrap() * 2.0);
    assert_ne!(profile_sha256(&q), h);
}

#[test]
fn history_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    let h = vec![
        HistoryEntry { iteration: 0, train_loss: None, val_accuracy: 98.25 },
        HistoryEntry { iteration: 100, train_loss: Some(0.125), val_accuracy: 98.5 },
    ];
    write_history_csv(&path, &h).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("iteration,train_loss,val_accuracy\n0,,98.25\n"), "{text}");
    assert_eq!(read_history_csv(&path).unwrap(), h);
}
