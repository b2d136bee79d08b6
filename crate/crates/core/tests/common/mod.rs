#![allow(dead_code)]

pub mod oracles;

use cil_core::engine::OptimConfig;
use cil_core::learners::{AlgorithmConfig, LearnerConfig};
use cil_core::model::BackboneSpec;
use cil_core::stream::{generate_synthetic, standardize, Dataset, StreamConfig, SyntheticSpec, TaskStream};

/// Dataset whose instances encode (class, index) so membership can be traced.
pub fn traced_dataset(classes: usize, per_class: usize) -> Dataset {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            data.extend([c as f64, i as f64]);
            labels.push(c);
        }
    }
    Dataset::from_rows(2, data, labels, classes).unwrap()
}

/// Small well-separated stream: 6 classes in 3 tasks of 2.
pub fn small_stream(seed: u64) -> TaskStream {
    let spec = SyntheticSpec {
        num_classes: 6,
        dim: 8,
        train_per_class: 40,
        test_per_class: 20,
        separation: 3.0,
        std: 1.0,
        seed,
    };
    let data = generate_synthetic(&spec).unwrap();
    let (train, test) = standardize(&data.train, &data.test).unwrap();
    TaskStream::build(&train, &test, &StreamConfig::new(2, 2, 6)).unwrap()
}

pub fn small_config(algorithm: AlgorithmConfig) -> LearnerConfig {
    LearnerConfig {
        backbone: BackboneSpec::new("mlp-16x16", 8, vec![16, 16]).unwrap(),
        optim: OptimConfig::with_default_schedule(0.05, 4, 16),
        memory_size: 24,
        seed: 7,
        algorithm,
    }
}
