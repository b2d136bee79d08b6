mod common;

use cil_core::learners::*;
use cil_core::model::CompositeNet;
use common::{small_config, small_stream};

fn params(net: &CompositeNet) -> Vec<u64> {
    net.parameter_vector(false).0.iter().map(|v| v.to_bits()).collect()
}

fn train_all(cfg: &LearnerConfig) -> Box<dyn Learner> {
    let stream = small_stream(11);
    let mut learner = build_learner(cfg).unwrap();
    run_stream(learner.as_mut(), &stream).unwrap();
    learner
}

#[test]
fn zero_distillation_lwf_is_finetune() {
    let lwf = train_all(&small_config(AlgorithmConfig::Lwf(DistillConfig {
        temperature: 2.0,
        kd_weight: KdWeight::Fixed(0.0),
    })));
    let ft = train_all(&small_config(AlgorithmConfig::Finetune));
    assert_eq!(params(lwf.network()), params(ft.network()));
}

#[test]
fn zero_lambda_ewc_is_finetune() {
    let ewc = train_all(&small_config(AlgorithmConfig::Ewc(EwcConfig {
        lambda: 0.0,
        fisher_samples: 10,
    })));
    let ft = train_all(&small_config(AlgorithmConfig::Finetune));
    assert_eq!(params(ewc.network()), params(ft.network()));
}

#[test]
fn coil_without_transfer_trains_like_icarl() {
    let coil = train_all(&small_config(AlgorithmConfig::Coil(CoilConfig {
        transfer_weight: 0.0,
        prospective: false,
        ..CoilConfig::default()
    })));
    let icarl = train_all(&small_config(AlgorithmConfig::Icarl(DistillConfig::default())));
    assert_eq!(params(coil.network()), params(icarl.network()));
}

#[test]
fn der_never_changes_frozen_branches() {
    let stream = small_stream(3);
    let mut der = build_learner(&small_config(AlgorithmConfig::Der(DerConfig::default()))).unwrap();
    let mut snapshots: Vec<Vec<u64>> = Vec::new();
    for task in stream.tasks() {
        der.observe(task).unwrap();
        let net = der.network();
        for (b, snap) in snapshots.iter().enumerate() {
            let now: Vec<u64> = net.branches()[b]
                .layers()
                .iter()
                .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).map(|v| v.to_bits()))
                .collect();
            assert_eq!(&now, snap, "branch {b} changed");
        }
        let last = net.branches().last().unwrap();
        snapshots.push(
            last.layers()
                .iter()
                .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).map(|v| v.to_bits()))
                .collect(),
        );
        assert_eq!(net.branches().len(), task.index + 1);
        assert!(net.frozen_mask()[..task.index].iter().all(|&f| f));
    }
}

#[test]
fn past_task_data_is_never_read_again() {
    for algorithm in Algorithm::ALL {
        let stream = small_stream(5);
        let mut learner = build_learner(&small_config(AlgorithmConfig::default_for(algorithm))).unwrap();
        let mut reads_after: Vec<usize> = Vec::new();
        for (b, task) in stream.tasks().iter().enumerate() {
            learner.observe(task).unwrap();
            for (k, past) in stream.tasks()[..b].iter().enumerate() {
                assert_eq!(past.train.reads(), reads_after[k], "{algorithm} re-read task {k} at task {b}");
            }
            reads_after.push(task.train.reads());
        }
    }
}

#[test]
fn every_learner_predicts_within_seen_classes_and_budget() {
    let stream = small_stream(9);
    for algorithm in Algorithm::ALL {
        let cfg = small_config(AlgorithmConfig::default_for(algorithm));
        let mut learner = build_learner(&cfg).unwrap();
        let out = run_stream(learner.as_mut(), &stream).unwrap();
        assert_eq!(out.seen_classes, vec![2, 4, 6], "{algorithm}");
        for (b, &m) in out.memory_sizes.iter().enumerate() {
            assert!(m <= cfg.memory_size, "{algorithm} stage {b}: {m}");
            assert_eq!(m > 0, algorithm.uses_memory());
        }
        let preds = learner.predict(stream.eval_pool(2).unwrap().instances()).unwrap();
        assert!(preds.iter().all(|&p| p < 6));
    }
}

#[test]
fn runs_are_bitwise_repeatable() {
    for algorithm in [Algorithm::Bic, Algorithm::Podnet, Algorithm::Gem] {
        let cfg = small_config(AlgorithmConfig::default_for(algorithm));
        let stream = small_stream(13);
        let run = || {
            let mut l = build_learner(&cfg).unwrap();
            let o = run_stream(l.as_mut(), &stream).unwrap();
            (params(l.network()), o)
        };
        assert_eq!(run(), run(), "{algorithm}");
    }
}

#[test]
fn predict_before_training_is_an_error() {
    let learner = build_learner(&small_config(AlgorithmConfig::Finetune)).unwrap();
    let x = cil_core::Tensor::matrix(1, 8, vec![0.0; 8]).unwrap();
    assert!(learner.predict(&x).is_err());
}

#[test]
fn tasks_must_arrive_in_order() {
    let stream = small_stream(1);
    let mut learner = build_learner(&small_config(AlgorithmConfig::Finetune)).unwrap();
    assert!(learner.observe(&stream.tasks()[1]).is_err());
}
