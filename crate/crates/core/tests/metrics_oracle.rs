use meshgen::metrics::{bleu_n, classification_report, classification_report_with, UndefinedPolicy};
use meshgen::preprocess::LabelVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn count(seq: &[u8], gram: &[u8]) -> usize {
    if seq.len() < gram.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

fn oracle_bleu(cand: &[u8], refs: &[Vec<u8>], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        if cand.len() < k {
            return 0.0;
        }
        let total = cand.len() + 1 - k;
        let mut seen: Vec<&[u8]> = Vec::new();
        let mut matched = 0;
        for i in 0..total {
            let gram = &cand[i..i + k];
            if seen.contains(&gram) {
                continue;
            }
            seen.push(gram);
            let max_ref = refs.iter().map(|r| count(r, gram)).max().unwrap();
            matched += count(cand, gram).min(max_ref);
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln() / n as f64;
    }
    let c = cand.len();
    let mut r = refs[0].len();
    for x in refs {
        let (d, best) = (x.len().abs_diff(c), r.abs_diff(c));
        if d < best || (d == best && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

#[test]
fn bleu_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut nonzero = 0;
    for _ in 0..100 {
        let word = |rng: &mut ChaCha8Rng| rng.gen_range(0u8..5);
        let cand: Vec<u8> = (0..rng.gen_range(0..9)).map(|_| word(&mut rng)).collect();
        let refs: Vec<Vec<u8>> = (0..rng.gen_range(1..4))
            .map(|_| (0..rng.gen_range(1..9)).map(|_| word(&mut rng)).collect())
            .collect();
        for n in 1..=4 {
            let got = bleu_n(&cand, &refs, n).unwrap();
            let want = oracle_bleu(&cand, &refs, n);
            assert!((got - want).abs() <= 1e-12, "{cand:?} {refs:?} n={n}: {got} vs {want}");
            if want > 0.0 {
                nonzero += 1;
            }
        }
    }
    assert!(nonzero > 100);
}

fn naive_mean(values: Vec<Option<f64>>) -> f64 {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[test]
fn over_class_and_over_sample_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (n, k) = (rng.gen_range(1..8), rng.gen_range(1..6));
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
            (0..n).map(|_| (0..k).map(|_| rng.gen_bool(0.4)).collect()).collect()
        };
        let (p, t) = (draw(&mut rng), draw(&mut rng));
        let pred: Vec<LabelVector> = p.iter().cloned().map(LabelVector::from_bits).collect();
        let truth: Vec<LabelVector> = t.iter().cloned().map(LabelVector::from_bits).collect();
        let rep = classification_report(&pred, &truth).unwrap();

        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let mut p_oc = Vec::new();
        let mut r_oc = Vec::new();
        for j in 0..k {
            let tp = (0..n).filter(|&i| p[i][j] && t[i][j]).count();
            let pp = (0..n).filter(|&i| p[i][j]).count();
            let ap = (0..n).filter(|&i| t[i][j]).count();
            p_oc.push(ratio(tp, pp));
            r_oc.push(ratio(tp, ap));
        }
        let mut p_os = Vec::new();
        let mut r_os = Vec::new();
        for i in 0..n {
            let tp = (0..k).filter(|&j| p[i][j] && t[i][j]).count();
            let pp = (0..k).filter(|&j| p[i][j]).count();
            let ap = (0..k).filter(|&j| t[i][j]).count();
            p_os.push(ratio(tp, pp));
            r_os.push(ratio(tp, ap));
        }
        assert_eq!(rep.precision_oc, naive_mean(p_oc));
        assert_eq!(rep.recall_oc, naive_mean(r_oc));
        assert_eq!(rep.precision_os, naive_mean(p_os));
        assert_eq!(rep.recall_os, naive_mean(r_os));
    }
}

#[test]
fn worked_two_by_two_example() {
    let truth = [
        LabelVector::from_bits(vec![true, false]),
        LabelVector::from_bits(vec![true, true]),
    ];
    let pred = [
        LabelVector::from_bits(vec![true, true]),
        LabelVector::from_bits(vec![true, false]),
    ];
    let rep = classification_report(&pred, &truth).unwrap();
    assert!((rep.precision - 2.0 / 3.0).abs() < 1e-15);
    assert!((rep.recall - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(rep.recall_oc, 0.5);
    assert_eq!(rep.recall_os, 0.75);
    let zero = classification_report_with(&pred, &truth, Some(&[1]), UndefinedPolicy::Zero).unwrap();
    assert_eq!(zero.classes, 1);
}
