#![allow(dead_code)]

use fbnn::arch::ArchSpec;
use fbnn::data::{synthetic_stream, SyntheticStream};
use fbnn::encode::Encoding;
use fbnn::replay::{BufferSize, ScenarioSpec, Strategy, Stream, Variant};

pub const ENC: Encoding = Encoding::Tycc { n: 4 };
pub const SIZE: usize = 8;

pub fn stream(pretrain: usize, tasks: usize, per_task: usize, train: usize, test: usize, seed: u64) -> SyntheticStream {
    synthetic_stream(pretrain, tasks, per_task, train, test, SIZE, seed).unwrap()
}

pub fn view(s: &SyntheticStream) -> Stream<'_> {
    Stream {
        train: &s.train,
        test: &s.test,
        split: &s.split,
    }
}

/// Desk-speed settings for the tiny model.
pub fn spec(strategy: Strategy, variant: Variant, buffer: BufferSize, seed: u64, max_epochs: usize) -> ScenarioSpec {
    let mut s = ScenarioSpec::new(strategy, variant, buffer, ArchSpec::tiny([SIZE, SIZE, ENC.channels()]), ENC, seed);
    for t in [&mut s.train, &mut s.pretrain_train] {
        t.batch_size = 32;
        t.initial_lr = 1e-2;
        t.plateau_patience = 3;
        t.stop_patience = 8;
        t.max_epochs = max_epochs;
    }
    s
}
