use paritylab::metrics_diagnostics::normalized_attention_entropy;
use paritylab::numerics::{dot, masked_softmax_columns, Matrix, RngStream};
use paritylab::parity_data::{gen_batch, gen_sequence, sample_secret_set, OrderPolicy};
use paritylab::simplified_model::{forward, init_embeddings, init_params_structured};
use paritylab::standard_model::{gpt_forward, gpt_init, GPTConfig};
use paritylab::theory_construct::{build_construction, build_construction_weights, default_margin, verify_perfect_accuracy, VerifyMode};
use paritylab::training_harness::{run, streams, Learner, ModelKind, OptimizerKind, TrainConfig};
use proptest::prelude::*;

fn small_simplified(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelKind::Simplified,
        n: 8,
        k: 2,
        embed_dim: 32,
        ffn_half_width: 4,
        batch_size: 8,
        budget_samples: 80,
        eval_every: 5,
        val_size: 16,
        optimizer: OptimizerKind::Sgd,
        lr: 5.0,
        halt_on_perfect: false,
        seed,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn zero_attention_columns_are_uniform(seed in any::<u64>(), n in 2usize..12, d in 4usize..24) {
        let k = 1 + (seed as usize % (n / 2).max(1));
        let mut rng = RngStream::new(seed, 0);
        let task = sample_secret_set(n, k, OrderPolicy::Ascending, &mut rng).unwrap();
        let emb = init_embeddings(n + k + 1, d, &mut rng).unwrap();
        let params = init_params_structured(&task, &emb, 3, 0.1, &mut rng).unwrap();
        let seq = gen_sequence(&task, true, &mut rng);
        let tr = forward(&params, &emb, seq.bits()).unwrap();
        for i in 1..=seq.len() {
            for j in 1..=seq.len() {
                let want = if j <= i { 1.0 / i as f64 } else { 0.0 };
                prop_assert_eq!(tr.pattern[(j - 1, i - 1)], want);
            }
        }
        prop_assert_eq!(normalized_attention_entropy(&tr.pattern).unwrap(), 1.0);
    }

    #[test]
    fn standard_model_is_causal(seed in any::<u64>(), len in 2usize..14, cut in 1usize..13) {
        let cut = cut.min(len - 1);
        let cfg = GPTConfig { layers: 2, heads: 2, d_model: 8, d_ff: 16, max_len: 16, ..GPTConfig::default() };
        let mut rng = RngStream::new(seed, 1);
        let p = gpt_init(&cfg, &mut rng).unwrap();
        let tokens: Vec<u8> = (0..len).map(|_| rng.bit()).collect();
        let mut other = tokens.clone();
        for t in other.iter_mut().skip(cut) {
            *t ^= 1;
        }
        let a = gpt_forward(&p, &tokens).unwrap();
        let b = gpt_forward(&p, &other).unwrap();
        for i in 0..cut {
            prop_assert_eq!(a.logits[(0, i)], b.logits[(0, i)]);
            prop_assert_eq!(a.logits[(1, i)], b.logits[(1, i)]);
        }
    }

    #[test]
    fn entropy_permutation_invariant(seed in any::<u64>(), t in 2usize..10, col in 1usize..10, swap in 0usize..100) {
        let col = col.min(t - 1);
        let mut rng = RngStream::new(seed, 2);
        let scores = Matrix::from_fn(t, t, |_, _| 3.0 * rng.normal());
        let p = masked_softmax_columns(&scores).unwrap();
        let mut q = p.clone();
        let (a, b) = (swap % (col + 1), (swap / 7) % (col + 1));
        let tmp = q[(a, col)];
        q[(a, col)] = q[(b, col)];
        q[(b, col)] = tmp;
        let (ep, eq) = (normalized_attention_entropy(&p).unwrap(), normalized_attention_entropy(&q).unwrap());
        prop_assert!((ep - eq).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ep));
    }

    #[test]
    fn construction_indicator_property(seed in any::<u64>(), n in 4usize..15) {
        let k = 1 + seed as usize % (n / 2);
        let d = 16 * k;
        let task = sample_secret_set(n, k, OrderPolicy::Ascending, &mut RngStream::new(seed, streams::TASK)).unwrap();
        let emb = init_embeddings(n + 1, d, &mut RngStream::new(seed, streams::EMBEDDING)).unwrap();
        let parts = build_construction(&task, &emb, default_margin(n)).unwrap();
        for (t, &j) in task.secret().iter().enumerate() {
            for b in 0..2u8 {
                let u = parts.u.row(2 * t + b as usize);
                for (t2, &j2) in task.secret().iter().enumerate() {
                    for b2 in 0..2u8 {
                        let want = if (t, b) == (t2, b2) { 1.0 } else { 0.0 };
                        prop_assert!((dot(u, emb.vector(j2, b2)) - want).abs() < 1e-8);
                    }
                }
            }
            for b in 0..2u8 {
                prop_assert!((dot(parts.v.row(t), emb.vector(j, b)) - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn frozen_quantities_survive_training(seed in any::<u64>()) {
        let cfg = small_simplified(seed);
        let task = paritylab::training_harness::build_task(&cfg).unwrap();
        let before = Learner::new(&cfg, &task).unwrap();
        let after = run(&cfg).unwrap().learner;
        match (before, after) {
            (Learner::Simplified { params: p0, emb: e0, .. }, Learner::Simplified { params: p1, emb: e1, .. }) => {
                prop_assert_eq!(p0.h(), p1.h());
                prop_assert_eq!(e0, e1);
            }
            _ => prop_assert!(false, "expected simplified learners"),
        }
    }

    #[test]
    fn one_pass_sample_accounting(seed in any::<u64>(), batches in 1u64..6, batch in 1usize..9) {
        let cfg = TrainConfig { batch_size: batch, budget_samples: batches * batch as u64, ..small_simplified(seed) };
        let rec = run(&cfg).unwrap().record;
        prop_assert_eq!(rec.samples_seen, rec.steps * batch as u64);
        prop_assert_eq!(rec.steps, batches);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn construction_is_exhaustively_perfect(seed in any::<u64>(), n in 4usize..13) {
        let k = 1 + seed as usize % (n / 2);
        let d = 16 * k;
        let task = sample_secret_set(n, k, OrderPolicy::Ascending, &mut RngStream::new(seed, streams::TASK)).unwrap();
        let emb = init_embeddings(n + 1, d, &mut RngStream::new(seed, streams::EMBEDDING)).unwrap();
        let (params, parts) = build_construction_weights(&task, &emb, default_margin(n)).unwrap();
        prop_assume!(parts.condition < 1e4);
        let rep = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Exhaustive, &mut RngStream::new(0, 0)).unwrap();
        prop_assert_eq!(rep.accuracy, 1.0);
        prop_assert_eq!(rep.inputs_tested, 1u64 << n);
    }
}

#[test]
fn multipass_sample_accounting() {
    let cfg = TrainConfig { passes: 3, dataset_size: 20, batch_size: 8, ..small_simplified(5) };
    let rec = run(&cfg).unwrap().record;
    assert_eq!(rec.samples_seen, 3 * 20);
    assert_eq!(rec.steps, 3 * 3);
}

#[test]
fn run_is_independent_of_thread_count() {
    let cfg = TrainConfig {
        model: ModelKind::Standard,
        n: 8,
        k: 2,
        d_model: 16,
        d_ff: 32,
        batch_size: 16,
        budget_samples: 160,
        eval_every: 3,
        val_size: 40,
        halt_on_perfect: false,
        ..TrainConfig::default()
    };
    let csv_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&cfg).unwrap().record.metrics_csv())
    };
    let one = csv_with(1);
    assert_eq!(one, csv_with(4));
    assert_eq!(one, csv_with(1));
}

#[test]
fn validation_and_training_streams_differ() {
    let ids = [streams::TASK, streams::EMBEDDING, streams::INIT, streams::TRAIN, streams::VALIDATION, streams::SHUFFLE];
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            assert_ne!(a, b);
        }
    }
    let task = sample_secret_set(30, 3, OrderPolicy::Ascending, &mut RngStream::new(0, streams::TASK)).unwrap();
    let train = gen_batch(&task, true, 64, &mut RngStream::new(0, streams::TRAIN));
    let val = gen_batch(&task, true, 64, &mut RngStream::new(0, streams::VALIDATION));
    assert!(train.iter().all(|s| !val.contains(s)));
}
