#![allow(dead_code)]

use std::ffi::CString;
use std::path::Path;

use densecap::data::checkpoint::Checkpoint;
use densecap::data::config::Config;
use densecap::data::features::write_features;
use densecap::data::synthetic::{generate_dataset, SyntheticSpec};
use densecap::model::ModelConfig;
use densecap::pipeline::{new_trainer, train_until};

pub struct Fixture {
    pub _dir: tempfile::TempDir,
    pub ckpt: CString,
    pub video: CString,
    pub data: Checkpoint,
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        videos: 2,
        window: 16,
        d_in: 4,
        min_event_len: 4,
        max_event_len: 8,
        ..SyntheticSpec::default()
    };
    let videos = generate_dataset(&spec).unwrap();
    let config = Config {
        model: ModelConfig {
            window: 16,
            d_in: 4,
            d_model: 8,
            d_ff: 8,
            heads: 2,
            kernels: vec![4, 8],
            ..ModelConfig::default()
        },
        ..Config::default()
    };
    let mut trainer = new_trainer(&config, &videos).unwrap();
    train_until(&mut trainer, 3, |_| {}).unwrap();
    let ckpt = Checkpoint::from_trainer(&trainer, &config);
    let ckpt_path = dir.path().join("m.ckpt");
    ckpt.save(&ckpt_path).unwrap();
    let video_path = dir.path().join("v.mevc");
    write_features(&video_path, &videos[0]).unwrap();
    Fixture {
        ckpt: c_path(&ckpt_path),
        video: c_path(&video_path),
        data: ckpt,
        _dir: dir,
    }
}
