use tcp_core::config::RunConfig;
use tcp_core::error::Error;
use tcp_core::selftest::{gradcheck, gradcheck_config, GRADCHECK_TOL};
use tcp_core::train::{
    load_checkpoint, metrics_csv, save_checkpoint, train_run, Checkpoint, Experiment, Mode, TrainOptions,
};

fn tiny(mode: Mode, steps: usize) -> RunConfig {
    let mut c = RunConfig::tiny();
    c.train.mode = mode;
    c.train.batch_size = 4;
    c.train.max_steps = Some(steps);
    c
}

fn run(config: &RunConfig, start: Option<Checkpoint>) -> (Checkpoint, String) {
    let exp = Experiment::prepare(config).unwrap();
    let start = start.unwrap_or_else(|| exp.initial_checkpoint().unwrap());
    let out = train_run(&exp, start, &TrainOptions::default()).unwrap();
    (out.checkpoint, metrics_csv(&out.metrics))
}

#[test]
fn gradients_match_finite_differences_for_every_mode() {
    for mode in Mode::ALL {
        let mut c = gradcheck_config();
        c.train.mode = mode;
        let r = gradcheck(&c).unwrap();
        assert!(r.max_rel_error < GRADCHECK_TOL, "{mode}: {}", r.max_rel_error);
        let expected = if mode.has_tke() { 64 } else { 16 };
        assert_eq!(r.coordinates, expected);
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut c = tiny(Mode::Tcp, 10);
    c.train.epochs = 0;
    let exp = Experiment::prepare(&c).unwrap();
    let start = exp.initial_checkpoint().unwrap();
    let out = train_run(&exp, start.clone(), &TrainOptions::default()).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.checkpoint, start);
}

#[test]
fn runs_are_bit_identical() {
    let c = tiny(Mode::Tcp, 12);
    let (a, ma) = run(&c, None);
    let (b, mb) = run(&c, None);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(ma.lines().count(), 13);
}

#[test]
fn resume_equals_straight_run() {
    for mode in [Mode::Coop, Mode::Tcp] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (half, m1) = run(&tiny(mode, 7), None);
        save_checkpoint(&half, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, half);
        let (resumed, m2) = run(&tiny(mode, 14), Some(loaded));
        let (straight, m_all) = run(&tiny(mode, 14), None);
        assert_eq!(resumed.prompt, straight.prompt);
        assert_eq!(resumed.adam, straight.adam);
        assert_eq!(resumed.step, 14);
        let tail: String = m2.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert_eq!(format!("{m1}{tail}"), m_all);
    }
}

#[test]
fn checkpoint_mode_mismatch_is_reported() {
    let (coop, _) = run(&tiny(Mode::Coop, 2), None);
    let exp = Experiment::prepare(&tiny(Mode::Tcp, 4)).unwrap();
    let err = train_run(&exp, coop, &TrainOptions::default()).err().unwrap();
    assert!(matches!(err, Error::Mismatch(_)), "{err}");

    let (tcp, _) = run(&tiny(Mode::Tcp, 2), None);
    let mut other = tiny(Mode::Tcp, 4);
    other.prompt.tke_mid_dim = 3;
    let exp = Experiment::prepare(&other).unwrap();
    assert!(matches!(train_run(&exp, tcp, &TrainOptions::default()), Err(Error::Mismatch(_))));
}

#[test]
fn checkpoint_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = run(&tiny(Mode::Tcp, 1), None);
    let path = dir.path().join("c.json");
    save_checkpoint(&ck, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"version\": 1", "\"version\": 9")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 9, .. })));
    std::fs::write(&path, "{\"format\": \"other\"}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint(dir.path().join("none.json")), Err(Error::Io { .. })));
}

#[test]
fn only_prompt_parameters_change() {
    let c = tiny(Mode::Tcp, 10);
    let exp = Experiment::prepare(&c).unwrap();
    let (enc, clip) = (exp.encoder.checksum(), exp.w_clip.checksum());
    let start = exp.initial_checkpoint().unwrap();
    let out = train_run(&exp, start.clone(), &TrainOptions::default()).unwrap();
    assert_eq!(exp.encoder.checksum(), enc);
    assert_eq!(exp.w_clip.checksum(), clip);
    for (a, b) in start.prompt.tensors().iter().zip(out.checkpoint.prompt.tensors()) {
        assert!(!a.bit_eq(b));
    }
}

#[test]
fn large_consistency_weight_pulls_toward_zero_shot() {
    for mode in [Mode::KgCoop, Mode::Tcp] {
        let mut c = tiny(Mode::Tcp, 150);
        c.train.mode = mode;
        c.train.learning_rate = 1e-2;
        let (_, m8) = run(&c, None);
        c.loss.kg_weight = 1e4;
        let (_, m_big) = run(&c, None);
        let last_kg = |csv: &str| -> f64 {
            csv.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap()
        };
        assert!(last_kg(&m_big) < last_kg(&m8), "{mode}: {} vs {}", last_kg(&m_big), last_kg(&m8));
    }
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.json");
    let mut c = tiny(Mode::Coop, 5);
    c.loss.temperature = 1e-5;
    let exp = Experiment::prepare(&c).unwrap();
    let start = exp.initial_checkpoint().unwrap();
    let options = TrainOptions {
        checkpoint_path: Some(path.clone()),
        checkpoint_every_epoch: false,
    };
    let err = train_run(&exp, start.clone(), &options).err().unwrap();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    assert_eq!(load_checkpoint(&path).unwrap(), start);
}
