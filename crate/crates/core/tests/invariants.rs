mod common;

use memsteer::action_space::{so3_exp, so3_log, ActionChunk, GripperMode, Vec3};
use memsteer::guidance::{guidance_start_time, snapped_steps, GuidanceConfig};
use memsteer::memory::{accumulate_progress, MemoryEntry, RetrievalKey, SuccessMemory};
use memsteer::retrieval::{
    consistency_filter, dtw_distance, median, retrieve, softmax_weights, Candidate, CandidateSet, CandidateStage,
    RetrievalConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn chunk_from_seed(seed: u64, h: usize) -> ActionChunk {
    common::random_chunk(&mut ChaCha8Rng::seed_from_u64(seed), h)
}

fn unit(v: Vec<f64>) -> Option<RetrievalKey> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| RetrievalKey::new(v.iter().map(|x| x / n).collect()).unwrap())
}

fn entry(key: RetrievalKey, chunk: ActionChunk, episode: u64) -> MemoryEntry {
    MemoryEntry {
        key,
        chunk,
        episode_id: episode,
        timestep: 0,
        task_id: "T".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_is_a_symmetric_nonnegative_dissimilarity(sa in any::<u64>(), sb in any::<u64>(), ha in 1usize..6, hb in 1usize..6) {
        let cfg = RetrievalConfig::default();
        let (a, b) = (chunk_from_seed(sa, ha), chunk_from_seed(sb, hb));
        let ab = dtw_distance(&a, &b, &cfg);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - dtw_distance(&b, &a, &cfg)).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(dtw_distance(&a, &a, &cfg), 0.0);
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant(
        s in prop::collection::vec(0.99f64..1.0, 1..12),
        shift in -0.5f64..0.5,
        tau in 0.001f64..1.0,
    ) {
        let w = softmax_weights(&s, tau).unwrap();
        let sum: f64 = w.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
        let w2 = softmax_weights(&shifted, tau).unwrap();
        for (a, b) in w.as_slice().iter().zip(w2.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        prop_assert_eq!(arg(w.as_slice()), arg(&s));
    }

    #[test]
    fn progress_recurrence_stays_in_range(v in 0.0f64..=1.0, c in -1.0f64..=1.0) {
        let next = accumulate_progress(v, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&next));
        if c >= 0.0 {
            prop_assert!(next >= v);
            prop_assert_eq!(accumulate_progress(1.0, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn start_time_is_bounded_and_decreasing(a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let cfg = GuidanceConfig::default();
        let (ta, tb) = (guidance_start_time(a, &cfg), guidance_start_time(b, &cfg));
        prop_assert!((cfg.t_min..=1.0).contains(&ta));
        if a < b {
            prop_assert!(ta >= tb);
        }
        let k = snapped_steps(ta, cfg.num_steps);
        prop_assert!(k as f64 >= ta * cfg.num_steps as f64 - 1e-9);
    }

    #[test]
    fn so3_log_inverts_exp_inside_the_pi_ball(x in -1.7f64..1.7, y in -1.7f64..1.7, z in -1.7f64..1.7) {
        let w = Vec3::new(x, y, z);
        prop_assume!(w.norm() < std::f64::consts::PI - 1e-6);
        let back = so3_log(&so3_exp(&w).unwrap()).unwrap();
        prop_assert!((back - w).norm() < 1e-9);
    }

    #[test]
    fn fifo_memory_keeps_the_newest_entries(cap in 0usize..20, n in 0usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SuccessMemory::new(Some(cap), 3, 1, GripperMode::Continuous);
        let mut pushed = Vec::new();
        for i in 0..n {
            let key = unit(common::random_vec3(&mut rng, 1.0).iter().copied().collect()).unwrap();
            pushed.push(key.clone());
            m.push(entry(key, common::random_chunk(&mut rng, 1), i as u64)).unwrap();
            prop_assert!(m.len() <= cap);
        }
        let kept: Vec<u64> = m.entries().map(|e| e.episode_id).collect();
        let want: Vec<u64> = (n.saturating_sub(cap)..n).map(|i| i as u64).collect();
        prop_assert_eq!(kept, want);
        // the flat key buffer stays aligned with the entries
        for (row, e) in m.key_rows().chunks_exact(3).zip(m.entries()) {
            prop_assert_eq!(row, e.key.as_slice());
            prop_assert_eq!(row, pushed[e.episode_id as usize].as_slice());
        }
    }

    #[test]
    fn retrieval_matches_a_sorted_scan(n in 0usize..40, k in 1usize..8, gate in -0.5f64..0.9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SuccessMemory::new(None, 3, 1, GripperMode::Continuous);
        for i in 0..n {
            let key = unit(common::random_vec3(&mut rng, 1.0).iter().copied().collect()).unwrap();
            m.push(entry(key, common::random_chunk(&mut rng, 1), i as u64)).unwrap();
        }
        let q = unit(common::random_vec3(&mut rng, 1.0).iter().copied().collect()).unwrap();
        let cfg = RetrievalConfig { k, gamma_sim: gate, ..Default::default() };
        let got = retrieve(&m, &q, "T", &cfg).unwrap();

        let mut reference: Vec<(f64, u64)> = m
            .entries()
            .map(|e| (e.key.as_slice().iter().zip(q.as_slice()).map(|(a, b)| a * b).sum::<f64>(), e.episode_id))
            .filter(|(s, _)| *s >= gate)
            .collect();
        reference.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        reference.truncate(k);
        prop_assert_eq!(got.len(), reference.len());
        for (c, (s, id)) in got.candidates.iter().zip(&reference) {
            prop_assert_eq!(c.entry.episode_id, *id);
            prop_assert!((c.similarity - s).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_filter_never_empties(n in 1usize..9, seed in any::<u64>(), h in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = RetrievalKey::new(vec![1.0]).unwrap();
        let entries: Vec<MemoryEntry> = (0..n)
            .map(|i| entry(key.clone(), common::random_chunk(&mut rng, h), i as u64))
            .collect();
        let set = CandidateSet {
            candidates: entries
                .iter()
                .map(|e| Candidate { entry: e, similarity: 1.0, inconsistency: 0.0, weight: 0.0 })
                .collect(),
            stage: CandidateStage::SimilarityGated,
        };
        let cfg = RetrievalConfig::default();
        let out = consistency_filter(set, &cfg);
        prop_assert!(!out.is_empty());
        prop_assert_eq!(out.stage, CandidateStage::ConsistencyFiltered);
        if n > 2 {
            // every survivor sits at or below the removal cut of the full set
            let r: Vec<f64> = entries
                .iter()
                .map(|a| {
                    let d: Vec<f64> = entries
                        .iter()
                        .filter(|b| b.episode_id != a.episode_id)
                        .map(|b| dtw_distance(&a.chunk, &b.chunk, &cfg))
                        .collect();
                    median(&d)
                })
                .collect();
            let med = median(&r);
            let mad = median(&r.iter().map(|x| (x - med).abs()).collect::<Vec<_>>());
            for c in &out.candidates {
                prop_assert!(mad == 0.0 || c.inconsistency <= med + cfg.dtw_mad_lambda * mad + 1e-9);
            }
        } else {
            prop_assert_eq!(out.len(), n);
        }
    }
}
