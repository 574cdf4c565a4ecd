//! Teacher–student distillation on synthetic piecewise-constant data.

mod checkpoint;
mod eval;
mod model;
mod optim;
mod synth;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use eval::{
    boundary_matches, evaluate, posthoc_subsample_eval, precision_recall_f1, EvalReport, PoolMethod, PosthocReport,
    BOUNDARY_TOLERANCE,
};
pub use model::{
    oracle_trace, Attention, Dense, Forward, Student, StudentConfig, StudentParams, SubState, SubsamplerConfig,
    TeacherConfig, ToyTeacher,
};
pub use optim::{Adam, AdamConfig};
pub use synth::{segment_rate_hz, synth_data, SynthConfig, Utterance};
pub use train::{
    batch_loss, train, utterance_loss, write_loss_log, Prepared, TrainConfig, TrainOutput, Trainer, UtteranceLoss,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cif::{pool_with_weights, Activation};
    use crate::guidance::{distill_loss, DistanceConfig, LossWeights, Topology};
    use crate::seqcore::{grad_check, grad_check_piecewise};

    fn small_data(n: usize, seed: u64) -> Vec<Utterance> {
        synth_data(&SynthConfig {
            seed,
            n_utterances: n,
            min_len: 16,
            max_len: 20,
            dim: 4,
            latent_dim: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn teacher() -> ToyTeacher {
        ToyTeacher::new(4, &TeacherConfig::default()).unwrap()
    }

    fn flat(p: &StudentParams) -> Vec<f64> {
        p.tensors().concat()
    }

    fn with_flat(student: &Student, v: &[f64]) -> Student {
        let mut s = student.clone();
        let mut it = v.iter();
        for t in s.params.tensors_mut() {
            for x in t.iter_mut() {
                *x = *it.next().unwrap();
            }
        }
        s
    }

    fn check_student(student_cfg: StudentConfig, cfg: TrainConfig) {
        let data = small_data(1, 3);
        let t = teacher();
        let trainer = Trainer::new(student_cfg, cfg.clone(), 4, 4).unwrap();
        let student = &trainer.student;
        let u = &data[0];
        let targets = t.targets(&u.features, &student.config.heads).unwrap();
        let analytic = flat(&utterance_loss(student, u, &targets, &cfg).unwrap().grad);
        let f = |v: &[f64]| utterance_loss(&with_flat(student, v), u, &targets, &cfg).unwrap().total;
        let piece = |v: &[f64]| {
            let s = with_flat(student, v);
            s.forward(&u.features, Some(&u.segmentation))
                .unwrap()
                .sub
                .trace()
                .map(|tr| tr.pattern())
        };
        let report = grad_check_piecewise(f, piece, &flat(&student.params), &analytic, 1e-5).unwrap();
        assert!(report.passes(1e-4), "{:?} max rel err {}", student.config.subsampler, report.max_rel_err);
        assert!(report.rel_errors.len() > report.excluded.len() / 2);
    }

    fn smooth_cfg(topology: Topology) -> TrainConfig {
        TrainConfig {
            topology,
            distance: DistanceConfig::euclidean_sq(),
            ..TrainConfig::default()
        }
    }

    fn student_with(sub: SubsamplerConfig) -> StudentConfig {
        StudentConfig {
            subsampler: sub,
            hidden_dim: 5,
            encoder_layers: 2,
            heads: vec![2, 4],
            ..StudentConfig::default()
        }
    }

    #[test]
    fn end_to_end_gradients_fixed() {
        for topology in [Topology::SubsampleUpsample, Topology::SubsampleTargets] {
            for sub in [
                SubsamplerConfig::None,
                SubsamplerConfig::Avg { stride: 3 },
                SubsamplerConfig::Conv { stride: 2 },
                SubsamplerConfig::Oracle,
            ] {
                check_student(student_with(sub), smooth_cfg(topology));
            }
        }
    }

    #[test]
    fn end_to_end_gradients_frontend_attention() {
        let cfg = StudentConfig {
            frontend_dim: Some(3),
            attention: true,
            ..student_with(SubsamplerConfig::Avg { stride: 2 })
        };
        check_student(cfg, smooth_cfg(Topology::SubsampleTargets));
        let cosine = TrainConfig {
            distance: DistanceConfig {
                kind: crate::guidance::DistanceKind::CosineLogsig,
                cosine_weight: 1.0,
            },
            ..smooth_cfg(Topology::SubsampleUpsample)
        };
        check_student(student_with(SubsamplerConfig::Conv { stride: 3 }), cosine);
    }

    #[test]
    fn end_to_end_gradients_cif() {
        let sub = SubsamplerConfig::Cif {
            hidden: 6,
            activation: Activation::Tanh,
            initial_alpha: 0.4,
        };
        for topology in [Topology::SubsampleUpsample, Topology::SubsampleTargets] {
            let cfg = TrainConfig {
                weights: LossWeights {
                    card: 0.5,
                    seg: 0.0,
                    frame: 0.0,
                },
                ..smooth_cfg(topology)
            };
            check_student(
                StudentConfig {
                    frontend_dim: Some(3),
                    ..student_with(sub)
                },
                cfg,
            );
        }
    }

    #[test]
    fn identity_student_descends() {
        let data = small_data(6, 1);
        let t = ToyTeacher::new(4, &TeacherConfig { depth: 1, seed: 2 }).unwrap();
        let student = StudentConfig {
            encoder_layers: 0,
            heads: vec![1],
            ..StudentConfig::default()
        };
        let cfg = TrainConfig {
            steps: 100,
            batch_size: 6,
            distance: DistanceConfig::euclidean_sq(),
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let log = train(&data, &t, &student, &cfg).unwrap().log;
        for w in log.windows(2) {
            assert!(w[1].total < w[0].total, "step {}: {} -> {}", w[1].step, w[0].total, w[1].total);
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let data = small_data(8, 4);
        let student = student_with(SubsamplerConfig::cif());
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 3,
            weights: LossWeights::default(),
            ..TrainConfig::default()
        };
        let a = train(&data, &teacher(), &student, &cfg).unwrap();
        let b = train(&data, &teacher(), &student, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.student, b.student);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_loss_log(&a.log, &mut buf_a).unwrap();
        write_loss_log(&b.log, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        assert_eq!(String::from_utf8(buf_a).unwrap().lines().count(), 5);
    }

    #[test]
    fn unit_stride_topologies_agree() {
        let data = small_data(4, 5);
        let student = student_with(SubsamplerConfig::Avg { stride: 1 });
        let mk = |topology| TrainConfig {
            steps: 4,
            batch_size: 2,
            topology,
            ..TrainConfig::default()
        };
        let a = train(&data, &teacher(), &student, &mk(Topology::SubsampleUpsample)).unwrap();
        let b = train(&data, &teacher(), &student, &mk(Topology::SubsampleTargets)).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn unguided_cif_objective_is_pooled_distill() {
        let data = small_data(1, 6);
        let t = teacher();
        let cfg = TrainConfig::default();
        let trainer = Trainer::new(student_with(SubsamplerConfig::cif()), cfg.clone(), 4, 4).unwrap();
        let s = &trainer.student;
        let u = &data[0];
        let targets = t.targets(&u.features, &s.config.heads).unwrap();
        let fwd = s.forward(&u.features, None).unwrap();
        let trace = fwd.sub.trace().unwrap();
        let pooled: Vec<_> = targets.iter().map(|x| pool_with_weights(x, &trace.weights).unwrap()).collect();
        let direct = distill_loss(&pooled, fwd.output.as_ref().unwrap(), &s.params.heads, &cfg.distance).unwrap();
        let loss = utterance_loss(s, u, &targets, &cfg).unwrap();
        // per-element mean over compared vectors and teacher dims
        assert_eq!(loss.total, direct.value / (direct.compared * targets[0].dim()) as f64);
        assert_eq!(loss.card + loss.seg + loss.frame, 0.0);
    }

    #[test]
    fn checkpoint_resumes_bit_exactly() {
        let data = small_data(6, 7);
        let t = teacher();
        let student = StudentConfig {
            frontend_dim: Some(3),
            ..student_with(SubsamplerConfig::cif())
        };
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            weights: LossWeights::default(),
            ..TrainConfig::default()
        };
        let prepared = Prepared::new(data, &t, &student.heads).unwrap();
        let mut trainer = Trainer::new(student, cfg, 4, 4).unwrap();
        for _ in 0..3 {
            trainer.step(&prepared).unwrap();
        }
        let bytes = encode_checkpoint(&trainer).unwrap();
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
        let mut resumed = decode_checkpoint(&bytes).unwrap();
        assert_eq!(resumed, trainer);
        let a = trainer.run(&prepared).unwrap();
        let b = resumed.run(&prepared).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].step, 3);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(crate::Error::MalformedHeader(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let data = small_data(2, 8);
        let cfg = TrainConfig {
            steps: 50,
            optimizer: AdamConfig {
                lr: 1e300,
                ..AdamConfig::default()
            },
            distance: DistanceConfig::euclidean_sq(),
            ..TrainConfig::default()
        };
        let err = train(&data, &teacher(), &student_with(SubsamplerConfig::None), &cfg).unwrap_err();
        match err {
            crate::Error::Divergence { step } => assert!((1..50).contains(&step)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn avg_rate_is_half() {
        let data = synth_data(&SynthConfig {
            n_utterances: 3,
            min_len: 20,
            max_len: 20,
            dim: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let s = Student::new(student_with(SubsamplerConfig::Avg { stride: 2 }), 4, 4, &mut rng).unwrap();
        let r = evaluate(&s, &teacher(), &data, Topology::SubsampleTargets, &DistanceConfig::default()).unwrap();
        assert_eq!(r.frame_rate_hz, 25.0);
        assert_eq!(r.frame_period_ms, 40.0);
        let oracle = Student::new(student_with(SubsamplerConfig::Oracle), 4, 4, &mut rng).unwrap();
        let r = evaluate(&oracle, &teacher(), &data, Topology::SubsampleTargets, &DistanceConfig::default()).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.frame_rate_hz, segment_rate_hz(&data));
        assert!(evaluate(&oracle, &teacher(), &[], Topology::SubsampleTargets, &DistanceConfig::default()).is_err());
    }

    use rand::SeedableRng;

    #[test]
    fn posthoc_bookkeeping() {
        let data = small_data(3, 9);
        let t = teacher();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = Student::new(student_with(SubsamplerConfig::None), 4, 4, &mut rng).unwrap();
        let cfg = DistanceConfig::default();
        let plain = evaluate(&s, &t, &data, Topology::SubsampleTargets, &cfg).unwrap();
        for method in [PoolMethod::Cat, PoolMethod::Avg] {
            let r = posthoc_subsample_eval(&s, &t, &data, 1, method, &cfg).unwrap();
            assert!((r.distill_loss - plain.distill_loss).abs() < 1e-12);
        }
        let r = posthoc_subsample_eval(&s, &t, &data, 2, PoolMethod::Cat, &cfg).unwrap();
        assert_eq!((r.frame_period_ms, r.frame_rate_hz), (40.0, 25.0));
        let r = posthoc_subsample_eval(&s, &t, &data, 8, PoolMethod::Avg, &cfg).unwrap();
        assert_eq!((r.frame_period_ms, r.frame_rate_hz), (160.0, 6.25));
        assert!(posthoc_subsample_eval(&s, &t, &data, 100, PoolMethod::Avg, &cfg).is_err());
        let sub = Student::new(student_with(SubsamplerConfig::Avg { stride: 2 }), 4, 4, &mut rng).unwrap();
        assert!(posthoc_subsample_eval(&sub, &t, &data, 2, PoolMethod::Avg, &cfg).is_err());
    }

    /// Exhaustive maximum bipartite matching for tiny inputs.
    fn max_matching(refs: &[usize], preds: &[usize], tol: usize) -> usize {
        fn go(refs: &[usize], preds: &[usize], used: &mut Vec<bool>, tol: usize) -> usize {
            let Some((&r, rest)) = refs.split_first() else { return 0 };
            let mut best = go(rest, preds, used, tol);
            for i in 0..preds.len() {
                if !used[i] && preds[i].abs_diff(r) <= tol {
                    used[i] = true;
                    best = best.max(1 + go(rest, preds, used, tol));
                    used[i] = false;
                }
            }
            best
        }
        go(refs, preds, &mut vec![false; preds.len()], tol)
    }

    #[test]
    fn boundary_scoring() {
        assert_eq!(boundary_matches(&[5, 10, 20], &[6, 13, 20], 20, 2), (1, 2, 2));
        assert_eq!(precision_recall_f1(1, 2, 2), (0.5, 0.5, 0.5));
        assert_eq!(precision_recall_f1(0, 3, 0), (0.0, 0.0, 0.0));
        // sorted, well-separated reference boundaries: greedy is optimal
        let refs = [4, 9, 14, 19];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..200 {
            let mut preds: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(1..24)).collect();
            preds.sort();
            preds.dedup();
            let (hits, _, _) = boundary_matches(&refs, &preds, 24, 2);
            assert_eq!(hits, max_matching(&refs, &preds, 2), "{preds:?}");
        }
    }

    #[test]
    fn grad_check_rejects_wrong_gradient() {
        // sanity: the end-to-end checker notices a corrupted gradient
        let data = small_data(1, 3);
        let cfg = smooth_cfg(Topology::SubsampleTargets);
        let trainer = Trainer::new(student_with(SubsamplerConfig::None), cfg.clone(), 4, 4).unwrap();
        let s = &trainer.student;
        let targets = teacher().targets(&data[0].features, &s.config.heads).unwrap();
        let mut g = flat(&utterance_loss(s, &data[0], &targets, &cfg).unwrap().grad);
        g[0] += 1.0;
        let f = |v: &[f64]| utterance_loss(&with_flat(s, v), &data[0], &targets, &cfg).unwrap().total;
        assert!(!grad_check(f, &flat(&s.params), &g, 1e-5).unwrap().passes(1e-4));
    }
}
