use std::fs;

use cstn::config::RunConfig;
use cstn::{checkpoint, cst, png_export, volume, Error};
use cstn_core::model::{CstnConfig, CstnWeights};
use cstn_core::phantom::generate_phantom;
use cstn_core::swin::RstbConfig;
use cstn_core::Tensor;
use proptest::prelude::*;

fn tiny_model() -> CstnConfig {
    CstnConfig {
        num_rstb: 1,
        rstb: RstbConfig {
            depth: 2,
            num_heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
            window_size: 4,
        },
        in_echoes: 2,
        target_size: (16, 16),
        shallow_channels: 4,
        head_channels: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cst_round_trips_bit_exactly(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let t = Tensor::from_fn(&shape, |i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97) & 0xbf7f_ffff));
        let bytes = cst::encode(&t);
        let back = cst::decode(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(cst::encode(&back), bytes);
    }

    #[test]
    fn cst_rejects_every_truncation(cut in 0usize..22) {
        let bytes = cst::encode(&Tensor::from_fn(&[2, 2], |i| i as f32));
        prop_assert!(cst::decode(&bytes[..cut.min(bytes.len() - 1)]).is_err());
    }
}

#[test]
fn cst_layout_and_errors() {
    let bytes = cst::encode(&Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let mut want = b"CST1".to_vec();
    want.extend([0u8, 1]);
    want.extend(2u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(cst::decode(&trailing).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(cst::decode(&bad_magic).is_err());
    let mut bad_dtype = bytes;
    bad_dtype[4] = 7;
    assert!(cst::decode(&bad_dtype).is_err());

    let dir = tempfile::tempdir().unwrap();
    let missing = cst::load(&dir.path().join("none.cst")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
    assert_eq!(missing.exit_code(), 2);
}

#[test]
fn checkpoint_resave_is_byte_identical() {
    let cfg = tiny_model();
    let w = CstnWeights::init(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cstck"), dir.path().join("b.cstck"));
    checkpoint::save(&a, &cfg, &w).unwrap();
    let ck = checkpoint::load(&a).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.weights, w);
    checkpoint::save(&b, &ck.config, &ck.weights).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn checkpoint_rejects_truncation_and_mismatch() {
    let cfg = tiny_model();
    let bytes = checkpoint::encode(&cfg, &CstnWeights::init(&cfg, 1).unwrap());
    let p = std::path::Path::new("x.cstck");
    for cut in [0, 3, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut], p).is_err(), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(1);
    assert!(checkpoint::decode(&extra, p).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cstck");
    fs::write(&path, &bytes).unwrap();
    let mut other = cfg;
    other.rstb.embed_dim = 16;
    let err = checkpoint::load_matching(&path, &other).unwrap_err();
    assert!(err.to_string().contains("model.embed_dim"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(checkpoint::load_matching(&path, &cfg).is_ok());
}

#[test]
fn volume_round_trip_and_resave() {
    let (v, maps) = generate_phantom(5, 32, 32, &[14.0, 27.0, 40.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    volume::save(&a, &v).unwrap();
    volume::save_maps(&a, &maps).unwrap();
    let back = volume::load(&a).unwrap();
    assert_eq!(back.echo_times_ms(), v.echo_times_ms());
    assert_eq!(back.magnitude_stack(), v.magnitude_stack());
    assert_eq!(back.phase_stack(), v.phase_stack());
    volume::save(&b, &back).unwrap();
    for f in [volume::MAGNITUDE_FILE, volume::PHASE_FILE, volume::ECHOES_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(cst::load(&a.join(volume::MAPS_FILE)).unwrap().shape(), &[5, 32, 32]);

    fs::write(a.join(volume::ECHOES_FILE), "# echo times (ms)\n14\nabc\n").unwrap();
    assert!(matches!(volume::load(&a), Err(Error::Format { .. })));
}

#[test]
fn config_text_round_trips_and_flags_local_defaults() {
    let mut cfg = RunConfig::default();
    cfg.assign("train.total_steps=17").unwrap();
    cfg.assign("smwi.combine=rss").unwrap();
    let text = cfg.to_text();
    assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    assert!(text.contains("model.num_rstb=6\n"));
    assert!(text.contains("model.in_echoes=3\n"));
    assert!(text.contains("train.learning_rate=0.0002  # not from paper"));

    let err = RunConfig::from_text("model.num_rsbt=6").unwrap_err();
    assert!(err.to_string().contains("model.num_rsbt"));
    assert_eq!(err.exit_code(), 1);
    assert_eq!(RunConfig::from_text("train.batch_size=four").unwrap_err().exit_code(), 1);
    assert!(RunConfig::from_text("no equals sign").is_err());
}

#[test]
fn config_load_applies_overrides_after_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.txt");
    fs::write(&path, "# desk run\ntrain.seed=3\ntrain.batch_size=2  # small\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &["train.seed=9".to_string()]).unwrap();
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.train.batch_size, 2);
    assert!(RunConfig::load(None, &["eval.protocol=300".to_string()]).is_err());
}

#[test]
fn png_export_windows_and_records_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    let t = Tensor::new(&[2, 3], vec![-1.0, 0.0, 1.0, 3.0, 2.0, -1.0]).unwrap();
    let win = png_export::export(&t, &path).unwrap();
    assert_eq!((win.min, win.max), (-1.0, 3.0));
    let side = fs::read_to_string(png_export::sidecar_path(&path)).unwrap();
    assert_eq!(side, "min=-1\nmax=3\n");

    let dec = png::Decoder::new(fs::File::open(&path).unwrap());
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (3, 2));
    assert_eq!(&buf[..6], &[0, 64, 128, 255, 191, 0]);

    let flat = png_export::Window { min: 2.0, max: 2.0 };
    assert_eq!(flat.to_u8(2.0), 0);
    assert!(png_export::export(&Tensor::zeros(&[2, 2, 2]), &path).is_err());
}
