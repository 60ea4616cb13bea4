//! Property tests over the pure building blocks.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sftok::config::{parse_config, Profile, RunConfig};
use sftok::data::BatchStream;
use sftok::multistep::{make_schedule, sfvr_replace, MaskState, ScheduleMode};
use sftok::quantizer::nearest_ids;
use sftok::teacher::TeacherTokens;
use sftok::theory::{
    ce, entropy, kl, random_joint, single_step_min_loss, verify_accuracy_inequality, verify_loss_inequality,
    InstanceLimits, PredictorCoupling,
};
use sftok::Execution;

fn mode() -> impl Strategy<Value = ScheduleMode> {
    prop_oneof![Just(ScheduleMode::Cosine), Just(ScheduleMode::Uniform)]
}

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn schedules_cover_the_grid((len, steps) in (1usize..300).prop_flat_map(|l| (Just(l), 1..=l)), m in mode()) {
        let s = make_schedule(steps, len, m).unwrap();
        prop_assert_eq!(s.steps(), steps);
        prop_assert_eq!(s.counts.iter().sum::<usize>(), len);
        prop_assert!(s.counts.iter().all(|&c| c >= 1));
        if steps == 1 {
            prop_assert_eq!(&s.counts, &vec![len]);
        }
    }

    #[test]
    fn schedules_reject_impossible_step_counts(len in 1usize..64, extra in 1usize..8, m in mode()) {
        prop_assert!(make_schedule(len + extra, len, m).is_err());
        prop_assert!(make_schedule(0, len, m).is_err());
    }

    #[test]
    fn cosine_front_loads_less_than_uniform(len in 16usize..256, steps in 2usize..16) {
        let c = make_schedule(steps, len, ScheduleMode::Cosine).unwrap();
        let u = make_schedule(steps, len, ScheduleMode::Uniform).unwrap();
        prop_assert!(c.counts[0] <= u.counts[0]);
        prop_assert!(c.counts[steps - 1] >= u.counts[steps - 1]);
    }

    #[test]
    fn nearest_ids_is_the_arg_min(
        dim in 1usize..6,
        n in 1usize..24,
        q in 1usize..24,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let queries: Vec<f64> = (0..q * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids = nearest_ids(&queries, &codes, dim, Execution::Parallel);
        prop_assert_eq!(&ids, &nearest_ids(&queries, &codes, dim, Execution::Sequential));
        for (i, &id) in ids.iter().enumerate() {
            let d = |j: usize| -> f64 {
                (0..dim).map(|k| (queries[i * dim + k] - codes[j * dim + k]).powi(2)).sum()
            };
            let best = d(id as usize);
            for j in 0..n {
                prop_assert!(best <= d(j));
                if d(j) == best {
                    prop_assert!(id as usize <= j, "ties go to the lowest index");
                }
            }
        }
        // Quantizing a code returns that code (or an identical earlier one).
        let again = nearest_ids(&codes, &codes, dim, Execution::Sequential);
        for (j, &id) in again.iter().enumerate() {
            prop_assert!(id as usize <= j);
        }
    }

    #[test]
    fn sfvr_extremes_pick_one_source(
        batch in 1usize..4,
        len in 2usize..12,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = TeacherTokens { ids: (0..(batch * len) as u32).map(|x| x % 7).collect(), batch, len };
        let pred = TeacherTokens { ids: truth.ids.iter().map(|x| x + 100).collect(), batch, len };
        let reveal: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let mut p: Vec<usize> = (0..len).collect();
                p.shuffle(&mut rng);
                p.truncate(len / 2);
                p
            })
            .collect();
        let state = MaskState::masked(batch, len);
        for (ratio, source) in [(0.0, &truth), (1.0, &pred)] {
            let out = sfvr_replace(&state, &pred, &reveal, ratio, &truth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (row, ps) in reveal.iter().enumerate() {
                for p in 0..len {
                    let i = row * len + p;
                    prop_assert_eq!(out.resolved[i], ps.contains(&p));
                    if out.resolved[i] {
                        prop_assert_eq!(out.tokens[i], source.ids[i]);
                    }
                }
            }
        }
        prop_assert!(sfvr_replace(&state, &pred, &reveal, 1.5, &truth, &mut rng).is_err());
    }

    #[test]
    fn information_measures(p in simplex(5), q in simplex(5)) {
        let k = kl(&p, &q).unwrap();
        prop_assert!(k >= -1e-12);
        prop_assert!(kl(&p, &p).unwrap().abs() < 1e-12);
        prop_assert!((ce(&p, &q).unwrap() - k - entropy(&p).unwrap()).abs() < 1e-12);
        prop_assert!(entropy(&p).unwrap() <= 5f64.ln() + 1e-12);
    }

    #[test]
    fn multi_step_never_loses(seed in any::<u64>()) {
        let limits = InstanceLimits { max_contexts: 4, max_positions: 3, max_vocab: 4, max_coupled_entries: 4_000 };
        let joint = random_joint(&mut ChaCha8Rng::seed_from_u64(seed), &limits);
        for coupling in [PredictorCoupling::TeacherForced, PredictorCoupling::Independent] {
            let r = verify_loss_inequality(&joint, &coupling).unwrap();
            prop_assert!(r.holds && r.identity_holds);
            prop_assert!((r.single - single_step_min_loss(&joint)).abs() < 1e-12);
            prop_assert!((r.gap - r.mi_sum).abs() < 1e-10);
            let a = verify_accuracy_inequality(&joint, &coupling).unwrap();
            prop_assert!(a.holds);
        }
    }

    #[test]
    fn batches_are_in_range_and_reproducible(len in 1usize..200, batch in 1usize..64, seed in any::<u64>(), step in 0usize..50) {
        let s = BatchStream::new(len, batch, seed).unwrap();
        let idx = s.indices(step);
        prop_assert_eq!(idx.len(), batch);
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert_eq!(&idx, &BatchStream::new(len, batch, seed).unwrap().indices(step));
    }

    #[test]
    fn config_survives_toml(stage in 1u8..=3, seed in any::<u32>(), ci in any::<bool>()) {
        let mut c = RunConfig::defaults(stage, if ci { Profile::Ci } else { Profile::Desk }).unwrap();
        c.experiment.seed = seed as u64;
        let back = parse_config(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        let mut resumed = c.clone();
        resumed.experiment.resume_training = !c.experiment.resume_training;
        prop_assert_eq!(resumed.hash(), c.hash());
    }
}

#[test]
fn one_epoch_is_a_permutation() {
    let s = BatchStream::new(50, 10, 9).unwrap();
    let mut all: Vec<usize> = (0..5).flat_map(|k| s.indices(k)).collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
}
