mod common;

use common::{negative_rate, records, small_model};
use vlpix::model::{load_checkpoint, LossMode};
use vlpix::synth::{gen_dataset, SynthConfig};
use vlpix::train::{
    eval_retrieval, train, Dataset, RunLog, Split, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    RUNLOG_FILE,
};
use vlpix::Error;

fn config(mode: LossMode, data: &Dataset, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(seed);
    cfg.model = data.model_config(&small_model(mode)).unwrap();
    cfg.batch_size = 4;
    cfg.max_steps = 12;
    cfg.eval_every = 4;
    cfg.lr = 1e-3;
    cfg
}

fn param_bits(t: &Trainer) -> Vec<u64> {
    t.model().params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn runs_are_bit_identical() {
    for mode in LossMode::ALL {
        let data = Dataset::new(records(1, 40, 24)).unwrap();
        let cfg = config(mode, &data, 9);
        let mut a = Trainer::new(&cfg, &data).unwrap();
        let mut b = Trainer::new(&cfg, &data).unwrap();
        let (la, lb) = (a.run().unwrap().log, b.run().unwrap().log);
        assert_eq!(la.to_csv(), lb.to_csv(), "{mode}");
        assert_eq!(param_bits(&a), param_bits(&b));
        assert_eq!(la.split(Split::Val).count(), 3);
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(
        40,
        4,
        &dir.path().join("data"),
        &SynthConfig {
            image_size: 24,
            seg_fraction: 0.5,
        },
    )
    .unwrap();
    for mode in [LossMode::Ssul, LossMode::Spl] {
        let data = Dataset::new(vlpix::synth::load_all(&manifest).unwrap()).unwrap();
        let mut cfg = config(mode, &data, 2);
        cfg.data = Some(manifest.clone());

        cfg.out_dir = Some(dir.path().join(format!("{mode}-full")));
        let full = train(&cfg, false).unwrap();

        cfg.out_dir = Some(dir.path().join(format!("{mode}-split")));
        cfg.max_steps = 8;
        train(&cfg, false).unwrap();
        cfg.max_steps = 12;
        let resumed = train(&cfg, true).unwrap();

        assert_eq!(full.log.to_csv(), resumed.log.to_csv(), "{mode}");
        let read = |run: &str, file: &str| std::fs::read(dir.path().join(run).join(file)).unwrap();
        let (f, s) = (format!("{mode}-full"), format!("{mode}-split"));
        assert_eq!(read(&f, RUNLOG_FILE), read(&s, RUNLOG_FILE));
        assert_eq!(read(&f, BEST_CHECKPOINT), read(&s, BEST_CHECKPOINT));
        // last.ckpt also records the run's paths and limits, so compare its content
        let a = load_checkpoint(&dir.path().join(&f).join(LAST_CHECKPOINT)).unwrap();
        let b = load_checkpoint(&dir.path().join(&s).join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(a.params, b.params);
        let (sa, sb) = (a.state.unwrap(), b.state.unwrap());
        assert_eq!(sa.tensors, sb.tensors);
        assert_eq!(sa.log, sb.log);
        for key in ["step", "adam_t"] {
            assert_eq!(sa.meta.get(key), sb.meta.get(key));
        }

        // a changed setting refuses to resume
        cfg.lr *= 2.0;
        assert!(matches!(train(&cfg, true), Err(Error::Config(_))));
    }
}

#[test]
fn best_checkpoint_is_the_validation_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::new(records(3, 40, 24)).unwrap();
    let mut cfg = config(LossMode::Segl, &data, 3);
    cfg.max_steps = 20;
    cfg.out_dir = Some(dir.path().to_path_buf());
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let out = t.run().unwrap();
    let log = RunLog::load(&dir.path().join(RUNLOG_FILE)).unwrap();
    let min = log.split(Split::Val).map(|r| r.total).fold(f64::INFINITY, f64::min);
    let best = log.best().unwrap();
    assert_eq!(best.total, min);
    assert_eq!(out.best_step, Some(best.step));

    // re-evaluating the stored best model reproduces its logged row
    let ckpt = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    let row = vlpix::train::evaluate(&ckpt.model().unwrap(), t.config(), &data, best.step).unwrap();
    assert_eq!(row, *best);
}

#[test]
fn segl_needs_annotations() {
    let mut recs = records(5, 30, 24);
    for r in &mut recs {
        r.seg = None;
    }
    let data = Dataset::new(recs).unwrap();
    let cfg = config(LossMode::None, &data, 1);
    assert!(Trainer::new(&cfg, &data).is_ok());
    let mut cfg = cfg;
    cfg.model.loss_mode = LossMode::Segl;
    assert!(matches!(Trainer::new(&cfg, &data), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_batch_ids() {
    let data = Dataset::new(records(6, 30, 24)).unwrap();
    let mut cfg = config(LossMode::None, &data, 1);
    cfg.lr = 1e300;
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let err = (0..5).map(|_| t.train_step()).find_map(|r| r.err()).expect("diverges");
    match err {
        Error::Aborted { reason, .. } => assert!(reason.contains("batch records"), "{reason}"),
        other => panic!("{other}"),
    }
}

#[test]
fn seed_is_required() {
    let kv = vlpix::kv::KvMap::parse("lr = 0.001\n").unwrap();
    assert!(matches!(TrainConfig::from_kv(&kv), Err(Error::Config(_))));
}

#[test]
fn negatives_are_half_of_pairs() {
    let rate = negative_rate(10_000, 8);
    assert!((0.47..=0.53).contains(&rate), "{rate}");
}

#[test]
fn untrained_retrieval_is_at_chance() {
    let data = Dataset::new(records(7, 120, 24)).unwrap();
    let cfg = config(LossMode::None, &data, 4);
    let t = Trainer::new(&cfg, &data).unwrap();
    let held = records(77, 100, 24);
    let table = eval_retrieval(t.model(), data.vocab(), &held, &[1, 5, 10]).unwrap();
    for dir in [&table.text_retrieval, &table.image_retrieval] {
        assert!((0.0..=0.05).contains(&dir[0]), "{table:?}");
        assert!(dir.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn small_corpus_overfits() {
    let data = Dataset::new(records(8, 56, 24)).unwrap();
    let mut cfg = config(LossMode::None, &data, 5);
    cfg.model.init_std = 0.1;
    cfg.batch_size = 16;
    cfg.max_steps = 5000;
    cfg.negative_rate = 0.0;
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let mut recent = Vec::new();
    let mut reached = None;
    while t.step() < cfg.max_steps {
        recent.push(t.train_step().unwrap().total);
        if recent.len() > 20 {
            recent.remove(0);
        }
        if recent.len() == 20 && recent.iter().sum::<f64>() / 20.0 < 0.05 {
            reached = Some(t.step());
            break;
        }
    }
    assert!(reached.is_some(), "training total stayed at {:?}", recent.last());
}
