use meshgen::data::{
    decode_checkpoint, decode_embeddings, encode_checkpoint, encode_embeddings, read_embeddings, write_embeddings,
    Checkpoint, EmbeddingFile, EmbeddingRecord,
};
use meshgen::synthetic::sign_pattern_pairs;
use meshgen::textcnn::{LossWeights, TextCnnConfig, TextCnnModel};
use meshgen::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embeddings() -> EmbeddingFile {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    EmbeddingFile {
        dim: 16,
        records: (0..12)
            .map(|i| EmbeddingRecord {
                id: format!("img{i}.png"),
                values: (0..16).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
            })
            .collect(),
    }
}

fn checkpoint() -> Checkpoint {
    let cfg = TextCnnConfig {
        embed_dim: 4,
        filter_widths: vec![2, 3],
        maps_per_width: 3,
        branch_dense_units: 2,
        dropout: 0.5,
        num_classes: 3,
        loss_weights: LossWeights::default(),
        seq_len: 8,
    };
    let model = TextCnnModel::new(cfg, 12, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut ck = model.to_checkpoint(serde_json::json!({"note": "fixture"}));
    ck.tensors.push(("extra.scalar".into(), Tensor::scalar(0.25)));
    ck
}

fn is_rejection(e: &Error) -> bool {
    matches!(e, Error::Corruption { .. } | Error::Format(_))
}

#[test]
fn embedding_reader_rejects_every_random_truncation() {
    let bytes = encode_embeddings(&embeddings()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let cut = rng.gen_range(0..bytes.len());
        let err = decode_embeddings(&bytes[..cut]).expect_err("truncated file accepted");
        assert!(is_rejection(&err), "cut {cut}: {err}");
    }
}

#[test]
fn checkpoint_reader_rejects_every_random_truncation() {
    let bytes = encode_checkpoint(&checkpoint()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let cut = rng.gen_range(0..bytes.len());
        let err = decode_checkpoint(&bytes[..cut]).expect_err("truncated checkpoint accepted");
        assert!(is_rejection(&err), "cut {cut}: {err}");
    }
}

#[test]
fn embedding_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let file = embeddings();
    write_embeddings(&path, &file).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), file);
    assert!(matches!(
        read_embeddings(&dir.path().join("missing.bin")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ck = checkpoint();
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back, ck);
    assert!(matches!(TextCnnModel::from_checkpoint(&back), Err(Error::Format(_))));
    let mut plain = back;
    plain.tensors.pop();
    let (_, extra) = TextCnnModel::from_checkpoint(&plain).unwrap();
    assert_eq!(extra["note"], "fixture");
}

#[test]
fn sign_pattern_images_are_distinct() {
    let pairs = sign_pattern_pairs(20, 8, 3, 1);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            assert_ne!(pairs[i].image, pairs[j].image);
        }
    }
}
