//! Seeded synthetic datasets with known structure, for tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CorpusRecord, EmbeddingFile, EmbeddingRecord};
use crate::preprocess::{LabelVector, UNK};
use crate::seqgen::SeqPair;
use crate::textcnn::LabeledReport;

/// Reports over a vocabulary where token `UNK + 1 + j` marks class `j` and
/// everything above `UNK + num_classes` is filler. Each report carries one to
/// three class tokens spread over two or three segments. Returns the reports
/// and the vocabulary size.
pub fn token_rule_reports(n: usize, num_classes: usize, filler: usize, seed: u64) -> (Vec<LabeledReport>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_class = UNK + 1;
    let first_filler = first_class + num_classes;
    let vocab = first_filler + filler;
    let reports = (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=3.min(num_classes));
            let mut classes: Vec<usize> = (0..num_classes).collect();
            classes.shuffle(&mut rng);
            // Cover every class at least once.
            classes[0] = i % num_classes;
            classes.truncate(k);
            classes.dedup();
            let mut labels = LabelVector::zeros(num_classes);
            let mut tokens: Vec<usize> = (0..rng.gen_range(4..9))
                .map(|_| rng.gen_range(first_filler..vocab))
                .collect();
            for &c in &classes {
                labels.set(c);
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, first_class + c);
            }
            let parts = rng.gen_range(2..=3).min(tokens.len());
            let cut = tokens.len().div_ceil(parts);
            let segments = tokens.chunks(cut).map(<[usize]>::to_vec).collect();
            LabeledReport { segments, labels }
        })
        .collect();
    (reports, vocab)
}

/// Pairs whose caption is a function of the signs of the first `bits`
/// embedding coordinates: position `j` holds term `UNK + 1 + 2j + sign_j`.
/// Vocabulary size is `UNK + 1 + 2·bits`.
pub fn sign_pattern_pairs(n: usize, dim: usize, bits: usize, seed: u64) -> Vec<SeqPair> {
    assert!(bits <= dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let image: Vec<f64> = (0..dim)
                .map(|_| {
                    let mag = rng.gen_range(0.2..1.0);
                    if rng.gen::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let caption = (0..bits)
                .map(|j| UNK + 1 + 2 * j + usize::from(image[j] > 0.0))
                .collect();
            SeqPair { image, caption }
        })
        .collect()
}

pub fn sign_pattern_vocab_size(bits: usize) -> usize {
    UNK + 1 + 2 * bits
}

const PATHOLOGIES: [&str; 6] = [
    "cardiomegaly",
    "opacity",
    "nodule",
    "effusion",
    "atelectasis",
    "emphysema",
];
const DESCRIPTORS: [&str; 6] = ["left", "right", "mild", "severe", "lower lobe", "upper lobe"];
const FILLER: [&str; 10] = [
    "the", "study", "shows", "chest", "view", "seen", "there", "is", "stable", "noted",
];
const NEGATED: [&str; 4] = [
    "no pneumothorax",
    "no pleural effusion",
    "negative for acute disease",
    "without focal consolidation",
];

/// Corpus records plus one image embedding per record for an end-to-end run.
///
/// Each record mentions its pathology and descriptor words in the text,
/// adds filler sentences and a negated sentence, and gets an embedding whose
/// coordinates encode the caption in disjoint blocks plus noise.
pub fn two_stage_corpus(n: usize, dim: usize, seed: u64) -> (Vec<CorpusRecord>, EmbeddingFile) {
    assert!(dim >= 2 * (PATHOLOGIES.len() + DESCRIPTORS.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.gen_range(0..PATHOLOGIES.len());
        let d = rng.gen_range(0..DESCRIPTORS.len());
        let pathology = PATHOLOGIES[p];
        let descriptor = DESCRIPTORS[d];
        let filler: Vec<&str> = (0..rng.gen_range(3..7))
            .map(|_| *FILLER.choose(&mut rng).unwrap())
            .collect();
        let negated = NEGATED.choose(&mut rng).unwrap();
        let mut sentences = [
            format!("{} {descriptor} {pathology}", filler.join(" ")),
            negated.to_string(),
            format!("{pathology} is {descriptor}"),
        ];
        sentences.shuffle(&mut rng);
        let exam_id = format!("exam{i:04}");
        let image_id = format!("{exam_id}_pa.png");
        records.push(CorpusRecord {
            exam_id,
            report_text: sentences.join(". ") + ".",
            mesh_raw: format!("{pathology}/{descriptor}"),
            image_refs: vec![image_id.clone()],
        });
        let mut values: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
        values[2 * p] += 2.0;
        values[2 * (PATHOLOGIES.len() + d) + 1] += 2.0;
        embeddings.push(EmbeddingRecord { id: image_id, values });
    }
    (
        records,
        EmbeddingFile {
            dim,
            records: embeddings,
        },
    )
}
