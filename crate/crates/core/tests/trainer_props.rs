use nfs_core::data::{synth_dataset, SynthSource, SynthSpec};
use nfs_core::model::{Ablation, NfsModel};
use nfs_core::trainer::{
    batch_gradients, evaluate, load_model, tiny_check_setup, train, TrainConfig, TrainOutput,
};
use nfs_gradcore::RAdamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_run(seed: u64) -> (Vec<nfs_core::data::PairedRecord>, NfsModel, TrainConfig) {
    let (model, _, loss) = tiny_check_setup(seed, Ablation::default()).unwrap();
    let spec = SynthSpec::new(vec![SynthSource::fixed([0.8, 0.5, 0.0], 0.1), SynthSource::fixed([-0.3, -0.9, 0.2], 0.1)]);
    let recs = synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let cfg = TrainConfig {
        batch: 2,
        lr0: 1e-2,
        crop_ms: 10.0,
        steps_per_epoch: Some(2),
        max_steps: Some(5),
        seed,
        val_fraction: 0.5,
        loss,
        ..TrainConfig::default()
    };
    (recs, model, cfg)
}

#[test]
fn one_step_moves_every_parameter_with_gradient() {
    let (mut model, item, loss) = tiny_check_setup(2, Ablation::default()).unwrap();
    let before = model.params().clone();
    let (_, grads) = batch_gradients(&model, std::slice::from_ref(&item), &loss, Some(9)).unwrap();
    let mut opt = RAdamState::new(model.params(), 1e-3);
    opt.step(model.params_mut(), &grads).unwrap();
    let mut moved = 0;
    for (((name, old), new), g) in before.iter().zip(model.params().values()).zip(&grads) {
        let gmax = g.data().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if gmax > 1e-12 {
            assert!(old.data() != new.data(), "{name} has gradient {gmax:e} but did not move");
        }
        moved += (gmax > 1e-12) as usize;
        for ((a, b), d) in old.data().iter().zip(new.data()).zip(g.data()) {
            if *d == 0.0 {
                assert_eq!(a, b, "{name} moved without gradient");
            }
        }
    }
    assert!(moved * 10 >= before.len() * 9, "{moved} of {} groups moved", before.len());
}

#[test]
fn shifter_ablation_trains_without_shifter_parameters() {
    let ab = Ablation { shifter: false, ..Ablation::default() };
    let (model, item, loss) = tiny_check_setup(2, ab).unwrap();
    assert!(model.params().iter().all(|(n, _)| !n.contains("shifter")));
    let (b, grads) = batch_gradients(&model, std::slice::from_ref(&item), &loss, None).unwrap();
    assert!(b.total.is_finite());
    assert_eq!(grads.len(), model.params().len());
}

#[test]
fn training_is_deterministic_and_checkpoints_reload() {
    let (recs, model, cfg) = short_run(4);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let a = train(&recs, model.clone(), &cfg, Some(&out)).unwrap();
    let b = train(&recs, model, &cfg, None).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.model.params().values(), b.model.params().values());
    assert_eq!(a.report.steps.len(), 5);
    for s in &a.report.steps {
        assert_eq!(s.lr, cfg.lr_at(s.step / 2));
        assert!(!s.skipped && s.grad_norm.is_finite());
    }
    assert!(!a.report.validations.is_empty());

    let log = std::fs::read_to_string(out.log_path()).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("step,epoch,lr,grad_norm,skipped,l2,phase,iid,stft,total"));

    let back = load_model(out.last_path()).unwrap();
    assert_eq!(back.params().values(), a.model.params().values());
    let e1 = evaluate(&recs, &a.model, &cfg.loss).unwrap();
    let e2 = evaluate(&recs, &back, &cfg.loss).unwrap();
    assert_eq!(e1.mean, e2.mean);
    assert_eq!(e1.to_csv(), e2.to_csv());

    let best = load_model(out.best_path()).unwrap();
    let best_mem = a.best.expect("validation ran");
    assert_eq!(best.params().values(), best_mem.params().values());
}

#[test]
fn different_seeds_diverge() {
    let (recs, model, cfg) = short_run(4);
    let a = train(&recs, model.clone(), &TrainConfig { max_steps: Some(2), ..cfg.clone() }, None).unwrap();
    let b = train(&recs, model, &TrainConfig { max_steps: Some(2), seed: 5, ..cfg }, None).unwrap();
    assert_ne!(a.model.params().values(), b.model.params().values());
}

#[test]
fn bad_configs_are_rejected() {
    let (recs, model, cfg) = short_run(1);
    assert!(train(&recs, model.clone(), &TrainConfig { batch: 0, ..cfg.clone() }, None).is_err());
    assert!(train(&recs, model.clone(), &TrainConfig { lr0: -1.0, ..cfg.clone() }, None).is_err());
    assert!(train(&[], model.clone(), &cfg, None).is_err());
    assert!(train(&recs, model, &TrainConfig { crop_ms: 1000.0, ..cfg }, None).is_err());
}
