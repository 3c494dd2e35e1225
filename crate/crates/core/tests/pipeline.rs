use moss::synthdata::{gen_motion_dataset, load_dataset, save_dataset, MotionSpec};
use moss::train::{evaluate, train_loop, Checkpoint, Classifier, MetricLine, ModelConfig, RunOptions, Split, TrainConfig};
use moss::Exec;

fn short_config() -> TrainConfig {
    TrainConfig {
        batch: 4,
        iters: 12,
        eval_every: 4,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn dataset_survives_disk() {
    let clips = gen_motion_dataset(3, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &clips, &MotionSpec::default()).unwrap();
    let (back, manifest) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.clips.len(), clips.len());
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!((a.label, a.seed, a.index), (b.label, b.seed, b.index));
        assert_eq!(a.pixels, b.pixels);
    }
}

#[test]
fn reversed_dataset_swaps_labels() {
    for clip in gen_motion_dataset(2, 8).unwrap() {
        let r = clip.reversed();
        assert_eq!(r.label, clip.label.reversed());
        assert_eq!(r.reversed().pixels, clip.pixels);
    }
}

#[test]
fn checkpoint_reproduces_evaluation() {
    let model = Classifier::<f32>::new(ModelConfig::toy(&[1])).unwrap();
    let train = Split::from_clips(&model, &gen_motion_dataset(4, 1).unwrap()).unwrap();
    let held = Split::from_clips(&model, &gen_motion_dataset(2, 2).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let cfg = short_config();
    let mut lines: Vec<String> = Vec::new();
    let opts = RunOptions {
        exec: Exec::best(),
        checkpoint: Some(path.clone()),
    };
    let outcome = train_loop(&model, model.init(0).unwrap(), &cfg, &train, Some(&held), &opts, &mut |m: &MetricLine| {
        lines.push(serde_json::to_string(m).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(lines.len(), cfg.iters);
    assert_eq!(lines.iter().filter(|l| l.contains("eval_acc")).count(), 3);

    let ck = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(ck.model, model.config);
    assert_eq!(ck.train, cfg);
    assert_eq!(ck.metrics, outcome.metrics);
    let reloaded = Classifier::<f32>::new(ck.model.clone()).unwrap();
    let again = evaluate(&reloaded, &ck.params, &held, Exec::Sequential).unwrap();
    let before = outcome.eval.unwrap();
    assert_eq!(again.accuracy, before.accuracy);
    assert_eq!(again.predictions, before.predictions);
    assert_eq!(ck.eval.unwrap().accuracy, before.accuracy);
}

#[test]
fn training_does_not_depend_on_execution_mode() {
    let model = Classifier::<f32>::new(ModelConfig::toy(&[1])).unwrap();
    let train = Split::from_clips(&model, &gen_motion_dataset(2, 3).unwrap()).unwrap();
    let cfg = TrainConfig { iters: 4, ..short_config() };
    let run = |exec| {
        let opts = RunOptions { exec, checkpoint: None };
        train_loop(&model, model.init(1).unwrap(), &cfg, &train, None, &opts, &mut |_: &MetricLine| Ok(())).unwrap()
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    assert_eq!(a.metrics, b.metrics);
    for (name, e) in a.params.iter() {
        assert_eq!(&e.value, b.params.value(name).unwrap(), "{name}");
    }
}
