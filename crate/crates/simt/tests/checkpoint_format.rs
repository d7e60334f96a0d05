use std::path::Path;

use proptest::prelude::*;
use simt::checkpoint::{decode, encode, load, save, MAGIC, VERSION};
use simt_core::model::{Checkpoint, EncoderMode, ModelConfig, Stage};
use simt_core::nn::Parameters;
use simt_core::tailor::TailorConfig;

fn config() -> ModelConfig {
    ModelConfig {
        src_vocab: 9,
        tgt_vocab: 11,
        embed_dim: 4,
        ffn_dim: 6,
        n_layers: 1,
        n_heads: 2,
        dropout: 0.1,
        encoder_mode: EncoderMode::Causal,
        max_len: 8,
    }
}

fn checkpoint(values: Vec<f64>) -> Checkpoint {
    let mut params = Parameters::new();
    let n = values.len();
    params.add("a.w", 1, n, values.clone());
    params.add("b", n, 1, values.into_iter().rev().collect());
    Checkpoint {
        config: config(),
        tailor: Some(TailorConfig::default()),
        stage: Stage::Finetuned,
        k: Some(3),
        seed: 42,
        params,
    }
}

fn bits(ck: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    ck.params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn exit_code(bytes: &[u8]) -> i32 {
    decode(bytes, Path::new("x.ckpt"))
        .map(|_| 0)
        .unwrap_or_else(|e| e.exit_code())
}

proptest! {
    #[test]
    fn round_trip_preserves_every_bit(
        raw in proptest::collection::vec(any::<u64>().prop_filter("finite", |b| f64::from_bits(*b).is_finite()), 1..20)
    ) {
        // Arbitrary finite bit patterns include -0.0 and subnormals.
        let ck = checkpoint(raw.iter().map(|&b| f64::from_bits(b)).collect());
        let bytes = encode(&ck);
        let back = decode(&bytes, Path::new("x.ckpt")).unwrap();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn any_single_byte_flip_is_an_integrity_failure(pos in 0usize..10_000, flip in 1u8..=255) {
        let bytes = encode(&checkpoint(vec![0.5, -1.25, 3.0]));
        let mut bad = bytes.clone();
        let pos = pos % bad.len();
        bad[pos] ^= flip;
        prop_assert_eq!(exit_code(&bad), 4);
    }
}

#[test]
fn non_finite_parameters_are_rejected() {
    let bytes = encode(&checkpoint(vec![1.0, f64::NAN]));
    assert_eq!(exit_code(&bytes), 4);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode(&checkpoint(vec![1.0, 2.0, 3.0, 4.0]));
    for len in 0..bytes.len() {
        assert_eq!(exit_code(&bytes[..len]), 4, "prefix of {len} bytes accepted");
    }
}

#[test]
fn foreign_magic_and_future_version_are_named() {
    let bytes = encode(&checkpoint(vec![1.0]));
    let mut foreign = bytes.clone();
    foreign[0] = b'X';
    let e = decode(&foreign, Path::new("m.ckpt")).unwrap_err();
    assert!(matches!(e, simt::Error::BadMagic(_)), "{e}");

    let mut future = bytes;
    future[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let e = decode(&future, Path::new("v.ckpt")).unwrap_err();
    assert!(
        matches!(e, simt::Error::Version { version, .. } if version == VERSION + 1),
        "{e}"
    );
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/dir/model.ckpt");
    let ck = checkpoint(vec![0.1, 0.2, 0.3]);
    save(&ck, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), encode(&ck));
    let back = load(&path).unwrap();
    assert_eq!(back, ck);
    assert!(!path.with_extension("ckpt.tmp").exists());

    let missing = load(&dir.path().join("absent.ckpt")).unwrap_err();
    assert_eq!(missing.exit_code(), 3, "{missing}");
}
