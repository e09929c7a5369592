use fusionseg::checkpoint::{Checkpoint, MAGIC};
use fusionseg::models::{FusionConfig, SegConfig};
use fusionseg::train::{FusionState, SegState};
use fusionseg::{Error, Tensor};
use proptest::prelude::*;

fn states() -> (FusionState, SegState) {
    (FusionState::new(FusionConfig::default(), 3).unwrap(), SegState::new(SegConfig::default(), 3).unwrap())
}

#[test]
fn save_load_save_is_byte_identical() {
    let (f, s) = states();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.f4sg");
    Checkpoint::from_states(&f, Some(&s)).save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let path2 = dir.path().join("b.f4sg");
    loaded.save(&path2).unwrap();
    assert_eq!(first, std::fs::read(&path2).unwrap());
}

#[test]
fn header_layout() {
    let ck = Checkpoint { entries: vec![("w".into(), Tensor::new(vec![2], vec![1.0, -2.5]).unwrap())] };
    let b = ck.to_bytes();
    assert_eq!(&b[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
    // name_len, name, dtype, ndim, dim, two f32, crc
    assert_eq!(b.len(), 12 + 4 + 1 + 1 + 4 + 4 + 8 + 4);
    assert_eq!(&b[b.len() - 12..b.len() - 8], &1.0f32.to_le_bytes());
    let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
}

#[test]
fn corruption_is_rejected() {
    let (f, _) = states();
    let good = Checkpoint::from_states(&f, None).to_bytes();
    let mut flipped = good.clone();
    flipped[40] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("crc")));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(m)) if m.contains("magic")));

    assert!(Checkpoint::from_bytes(&good[..good.len() - 9]).is_err());
    assert!(Checkpoint::from_bytes(b"F4SG").is_err());
}

#[test]
fn unknown_version_and_dtype_are_rejected() {
    let ck = Checkpoint { entries: vec![("w".into(), Tensor::scalar(1.0))] };
    let reseal = |mut b: Vec<u8>| {
        b.truncate(b.len() - 4);
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    };
    let mut v2 = ck.to_bytes();
    v2[4] = 2;
    assert!(Checkpoint::from_bytes(&reseal(v2)).unwrap_err().to_string().contains("version"));
    let mut dt = ck.to_bytes();
    dt[12 + 4 + 1] = 1;
    assert!(Checkpoint::from_bytes(&reseal(dt)).unwrap_err().to_string().contains("dtype"));
}

#[test]
fn restore_rebuilds_the_architecture_and_values() {
    let cfg = FusionConfig { cross_attention: false, decoder: false, ..FusionConfig::default() };
    let f = FusionState::new(cfg.clone(), 9).unwrap();
    let ck = Checkpoint::from_states(&f, None);
    let (arch, seg) = ck.arch().unwrap();
    assert_eq!(arch, cfg);
    assert!(seg.is_none());
    let (g, s) = ck.restore().unwrap();
    assert!(s.is_none());
    for ((n1, t1), (n2, t2)) in f.params.iter().zip(g.params.iter()) {
        assert_eq!(n1, n2);
        // Stored as f32.
        assert!(t1.max_abs_diff(t2) < 1e-6);
    }
}

#[test]
fn missing_parameters_fail_restore() {
    let (f, s) = states();
    let mut ck = Checkpoint::from_states(&f, Some(&s));
    ck.entries.retain(|(n, _)| !n.starts_with("seg."));
    assert!(matches!(ck.restore(), Err(Error::Checkpoint(_))));
    let mut no_arch = Checkpoint::from_states(&f, None);
    no_arch.entries.remove(0);
    assert!(no_arch.restore().is_err());
}

#[test]
fn loading_a_missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("none.f4sg")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_entries_round_trip(entries in prop::collection::vec(
        ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u32>()),
        0..5,
    )) {
        let ck = Checkpoint {
            entries: entries
                .into_iter()
                .map(|(name, shape, seed)| {
                    let t = Tensor::from_fn(&shape, |i| f64::from(((seed as usize + i) % 1000) as f32 * 0.37f32));
                    (name, t)
                })
                .collect(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
