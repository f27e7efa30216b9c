use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn recall(pairs: usize, queries: usize, seed: u64) -> TaskConfig {
    TaskConfig {
        task: TaskKind::KvRecall,
        vocab: 41,
        seq_len: 48,
        pairs,
        queries,
        min_pairs: None,
        corpus: None,
        split: Split::Train,
        examples: 20,
        seed,
    }
}

#[test]
fn recall_hand_case() {
    let x = vec![7, 33, 9, 35, SEP, 9, SEP];
    let y = derive_targets(TaskKind::KvRecall, &x).unwrap();
    assert_eq!(y, vec![-1, -1, -1, -1, -1, 35, -1]);
}

#[test]
fn copy_hand_case() {
    let x = vec![4, 2, 4, SEP, 4, 2];
    let y = derive_targets(TaskKind::Copy, &x).unwrap();
    assert_eq!(y[3..], [4, 2, 4]);
    let c = TaskConfig {
        task: TaskKind::Copy,
        seq_len: 7,
        ..recall(0, 0, 3)
    };
    let ds = generate(&c).unwrap();
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        assert_eq!(&y[3..6], &x[..3].iter().map(|&t| t as i64).collect::<Vec<_>>()[..]);
    }
}

#[test]
fn capacity_is_enforced() {
    assert!(matches!(generate(&recall(20, 10, 0)), Err(TaskError::Capacity(_))));
    assert!(matches!(generate(&recall(21, 1, 0)), Err(TaskError::Capacity(_))));
    assert!(generate(&recall(4, 5, 0)).is_err());
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate(&recall(8, 4, 5)).unwrap(), generate(&recall(8, 4, 5)).unwrap());
    assert_ne!(generate(&recall(8, 4, 5)).unwrap(), generate(&recall(8, 4, 6)).unwrap());
}

#[test]
fn char_lm_uses_bundled_corpus() {
    let c = TaskConfig {
        task: TaskKind::CharLm,
        vocab: 64,
        seq_len: 32,
        ..recall(0, 0, 1)
    };
    let vocab = c.effective_vocab().unwrap();
    assert!(vocab <= 64 && vocab > 26);
    for split in [Split::Train, Split::Eval] {
        let ds = generate(&TaskConfig { split, ..c.clone() }).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            assert_eq!(derive_targets(TaskKind::CharLm, x).unwrap(), *y);
            assert!(x.iter().all(|&t| t < vocab));
        }
    }
    let tight = TaskConfig { vocab: 10, ..c };
    assert!(matches!(generate(&tight), Err(TaskError::Capacity(_))));
}

#[test]
fn line_format_round_trips() {
    let ds = generate(&recall(6, 3, 2)).unwrap();
    let mut buf = Vec::new();
    ds.write_lines(&mut buf).unwrap();
    assert_eq!(Dataset::read_lines(buf.as_slice()).unwrap(), ds);
    assert!(Dataset::read_lines(&b"1 2\n-1\n"[..]).is_err());
    assert!(Dataset::read_lines(&b"1 2\n"[..]).is_err());
}

struct Oracle(Vec<Vec<i64>>, usize);

impl Predictor for Oracle {
    fn predict(&self, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>, TaskError> {
        Ok(inputs
            .iter()
            .zip(&self.0)
            .map(|(x, y)| {
                Tensor::from_fn(&[x.len(), self.1], |i| {
                    let (t, c) = (i / self.1, i % self.1);
                    if y[t] == c as i64 {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect())
    }
}

struct Uniform(usize);

impl Predictor for Uniform {
    fn predict(&self, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>, TaskError> {
        Ok(inputs.iter().map(|x| Tensor::zeros(&[x.len(), self.0])).collect())
    }
}

struct Noise(u64, usize);

impl Predictor for Noise {
    fn predict(&self, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>, TaskError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        Ok(inputs
            .iter()
            .map(|x| Tensor::from_fn(&[x.len(), self.1], |_| rng.gen::<f64>()))
            .collect())
    }
}

#[test]
fn metric_examples() {
    let ds = generate(&recall(8, 4, 1)).unwrap();
    assert_eq!(evaluate(&Oracle(ds.targets.clone(), 41), &ds, Metric::Accuracy).unwrap(), 1.0);
    let loss = evaluate(&Uniform(41), &ds, Metric::TokenLoss).unwrap();
    assert!((loss - 41f64.ln()).abs() <= 1e-12);
}

#[test]
fn random_guessing_is_near_one_over_vocab() {
    let c = TaskConfig {
        examples: 2000,
        ..recall(8, 4, 7)
    };
    let ds = generate(&c).unwrap();
    let n = ds.supervised() as f64;
    let p = 1.0 / 41.0;
    let acc = evaluate(&Noise(3, 41), &ds, Metric::Accuracy).unwrap();
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((acc - p).abs() <= 4.0 * sigma, "{acc} vs {p} ± {sigma}");
}

#[test]
fn metrics_ignore_example_order() {
    let ds = generate(&recall(8, 4, 2)).unwrap();
    let logits = Noise(1, 41).predict(&ds.inputs).unwrap();
    let a = score(&logits, &ds.targets, Metric::TokenLoss).unwrap();
    let mut rev_l = logits.clone();
    rev_l.reverse();
    let mut rev_t = ds.targets.clone();
    rev_t.reverse();
    let b = score(&rev_l, &rev_t, Metric::TokenLoss).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn targets_are_rederivable(pairs in 1usize..15, q in 1usize..15, seed in any::<u64>(), copy in any::<bool>()) {
        let queries = q.min(pairs);
        let c = if copy {
            TaskConfig { task: TaskKind::Copy, seq_len: 2 * pairs + 1, ..recall(pairs, queries, seed) }
        } else {
            recall(pairs, queries, seed)
        };
        let ds = generate(&c).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            prop_assert_eq!(x.len(), c.seq_len);
            prop_assert_eq!(derive_targets(c.task, x).unwrap(), y.clone());
        }
        if !copy {
            prop_assert_eq!(ds.supervised(), queries * c.examples);
        }
    }
}

#[test]
fn variable_pair_counts() {
    let c = TaskConfig { min_pairs: Some(2), ..recall(9, 4, 3) };
    let ds = generate(&c).unwrap();
    let counts: BTreeSet<usize> = ds.inputs.iter().map(|x| x.iter().position(|&t| t == SEP).unwrap() / 2).collect();
    assert!(counts.len() > 1 && counts.iter().all(|n| (2..=9).contains(n)));
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        assert_eq!(derive_targets(TaskKind::KvRecall, x).unwrap(), *y);
    }
    assert!(generate(&TaskConfig { min_pairs: Some(0), ..c.clone() }).is_err());
    assert!(generate(&TaskConfig { min_pairs: Some(10), ..c }).is_err());
}
