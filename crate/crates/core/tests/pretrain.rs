use codebrain::checkpoint::Checkpoint;
use codebrain::numerics::{Tape, Tensor};
use codebrain::pretrain::*;
use codebrain::signal::{dominant_bins, patch, preprocess, synth_generate, PatchGrid, SynthSpec};
use codebrain::ssm::SsmConfig;
use codebrain::tokenizer::{PreparedSample, Tokenizer, TokenizerConfig};
use codebrain::Error;
use proptest::prelude::*;
use std::fs;
use std::path::Path;

fn grids(records: usize, seed: u64) -> Vec<(PatchGrid, Option<i32>)> {
    let spec = SynthSpec { channels: 2, seconds: 4, records, ..SynthSpec::desk() };
    synth_generate(&spec, seed)
        .unwrap()
        .iter()
        .map(|r| (patch(&preprocess(r).unwrap(), 1.0).unwrap(), r.label))
        .collect()
}

fn tok_cfg() -> TokenizerConfig {
    TokenizerConfig {
        hidden: 16,
        depth: 1,
        heads: 2,
        mlp: 16,
        codebook_size: 16,
        code_dim: 4,
        max_positions: 8,
        ..TokenizerConfig::desk()
    }
}

fn ssm_cfg() -> SsmConfig {
    SsmConfig { features: 8, blocks: 1, kernel_len: 8, base_len: 2, window: 4, heads: 2, codebook_size: 16, ..SsmConfig::desk() }
}

fn tok_train() -> TrainConfig {
    TrainConfig { batch_size: 2, max_steps: Some(12), ..TrainConfig::tokenizer_desk() }
}

fn ssm_train() -> TrainConfig {
    TrainConfig { batch_size: 2, max_steps: Some(12), ..TrainConfig::ssm_desk() }
}

fn prepared(n: usize) -> Vec<PreparedSample> {
    grids(n, 3).iter().map(|(g, l)| PreparedSample::new(g, *l).unwrap()).collect()
}

fn tokenized(n: usize) -> Vec<TokenizedSample> {
    let tok = Tokenizer::new(tok_cfg(), 1).unwrap();
    grids(n, 4).iter().map(|(g, l)| TokenizedSample::from_tokenizer(&tok, g, *l).unwrap()).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn mask_extremes_and_rate() {
    assert_eq!(sample_mask(7, 9, 0.0, 1).unwrap().count(), 0);
    assert_eq!(sample_mask(7, 9, 1.0, 1).unwrap().count(), 63);
    let m = sample_mask(100, 100, 0.5, 42).unwrap();
    assert!((0.48..=0.52).contains(&m.fraction()), "{}", m.fraction());
    assert_eq!(m, sample_mask(100, 100, 0.5, 42).unwrap());
    assert_ne!(m.bits, sample_mask(100, 100, 0.5, 43).unwrap().bits);
    assert!(matches!(sample_mask(2, 2, -0.1, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(sample_mask(2, 2, 1.5, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn step_masks_are_never_empty() {
    for step in 0..50 {
        let m = step_mask(3, 0.05, 9, step).unwrap();
        assert!(m.count() > 0);
        assert_eq!(m, step_mask(3, 0.05, 9, step).unwrap());
    }
}

fn logits_var(tape: &mut Tape, rows: usize, k: usize, f: impl Fn(usize, usize) -> f32) -> codebrain::numerics::Var {
    let data = (0..rows * k).map(|i| f(i / k, i % k)).collect();
    tape.input(&Tensor::new(vec![rows, k], data).unwrap())
}

#[test]
fn uniform_logits_give_two_log_k() {
    let k = 256;
    let mut tape = Tape::new();
    let a = logits_var(&mut tape, 6, k, |_, _| 0.0);
    let b = logits_var(&mut tape, 6, k, |_, _| 0.0);
    let z: Vec<usize> = (0..6).map(|i| i * 40).collect();
    let mask = [true, false, true, true, false, true];
    let l = masked_token_loss(&mut tape, a, b, &z, &z, &mask).unwrap();
    assert!((tape.value(l)[0] - 2.0 * (k as f64).ln()).abs() < 1e-9);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let k = 16;
    let z: Vec<usize> = vec![3, 0, 15, 7];
    let mut tape = Tape::new();
    let a = logits_var(&mut tape, 4, k, |r, c| if c == z[r] { 40.0 } else { 0.0 });
    let b = logits_var(&mut tape, 4, k, |r, c| if c == z[r] { 40.0 } else { 0.0 });
    let l = masked_token_loss(&mut tape, a, b, &z, &z, &[true; 4]).unwrap();
    assert!(tape.value(l)[0] < 1e-6);
}

#[test]
fn unmasked_rows_get_no_gradient() {
    let k = 5;
    let mut tape = Tape::new();
    let a = logits_var(&mut tape, 4, k, |r, c| (r * 3 + c) as f32 * 0.1);
    let b = logits_var(&mut tape, 4, k, |r, c| (r + c * 2) as f32 * 0.2);
    let mask = [false, true, false, true];
    let z = [1, 2, 3, 4];
    let l = masked_token_loss(&mut tape, a, b, &z, &z, &mask).unwrap();
    let g = tape.backward(l).unwrap();
    for v in [a, b] {
        let gv = g.wrt(v).unwrap();
        for (r, m) in mask.iter().enumerate() {
            let row = &gv[r * k..(r + 1) * k];
            if *m {
                assert!(row.iter().any(|x| x.abs() > 1e-6));
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }
    let mut tape = Tape::new();
    let a = logits_var(&mut tape, 2, k, |_, _| 0.0);
    assert!(matches!(masked_token_loss(&mut tape, a, a, &[0, 1], &[0, 1], &[false, false]), Err(Error::InvalidArgument(_))));
}

#[test]
fn accuracy_counts_masked_argmax_hits() {
    let logits = [0.0, 1.0, 0.5, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0];
    assert_eq!(masked_accuracy(&logits, 3, &[1, 0, 1], &[true, true, true]), 2.0 / 3.0);
    assert_eq!(masked_accuracy(&logits, 3, &[1, 0, 2], &[false, true, false]), 1.0);
    assert_eq!(masked_accuracy(&logits, 3, &[1, 0, 2], &[false; 3]), 0.0);
}

#[test]
fn schedule_runs_from_peak_to_floor() {
    let c = TrainConfig::ssm_desk();
    let s = c.schedule(500).unwrap();
    assert!((s.lr(0) - c.peak_lr).abs() < 1e-15);
    assert!((s.lr(500) - c.min_lr).abs() < 1e-15);
    assert!((1..500).all(|i| s.lr(i) <= s.lr(i - 1)));
    let w = TrainConfig { warmup_steps: 4, ..c.clone() }.schedule(20).unwrap();
    assert!((w.lr(3) - c.peak_lr).abs() < 1e-15 && w.lr(0) < w.lr(1));
    assert!(TrainConfig { warmup_steps: 20, ..c }.schedule(20).is_err());
}

#[test]
fn presets_validate() {
    for c in [TrainConfig::tokenizer_paper(), TrainConfig::tokenizer_desk(), TrainConfig::ssm_paper(), TrainConfig::ssm_desk()] {
        c.validate().unwrap();
    }
    assert!(TrainConfig { mask_ratio: 1.0, ..TrainConfig::ssm_desk() }.validate().is_err());
    assert!(TrainConfig { peak_lr: 1e-6, ..TrainConfig::ssm_desk() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::ssm_desk() }.validate().is_err());
}

#[test]
fn stage_one_clips_every_step() {
    let data = prepared(6);
    let mut t = TokenizerTrainer::new(tok_cfg(), TrainConfig { clip_norm: 0.5, ..tok_train() }, 0).unwrap();
    for s in 1..=8 {
        t.run(&data, Some(s)).unwrap();
        assert!(t.model.store.grad_norm() <= 0.5 + 1e-4, "step {s}: {}", t.model.store.grad_norm());
    }
    assert!(t.history.iter().any(|r| r.grad_norm > 0.5));
}

#[test]
fn stage_one_is_deterministic_and_resumes_exactly() {
    let data = prepared(6);
    let full = train_tokenizer(tok_cfg(), tok_train(), &data, Default::default()).unwrap();
    let again = train_tokenizer(tok_cfg(), tok_train(), &data, Default::default()).unwrap();
    assert_eq!(full.history, again.history);
    assert_eq!(full.history.len(), 12);

    let tmp = tempfile::tempdir().unwrap();
    let mut part = TokenizerTrainer::new(tok_cfg(), tok_train(), tok_train().seed).unwrap();
    part.run(&data, Some(2)).unwrap();
    let a = tmp.path().join("a");
    part.to_checkpoint().save(&a).unwrap();
    let ck = Checkpoint::load(&a).unwrap();
    let b = tmp.path().join("b");
    ck.save(&b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let mut resumed = TokenizerTrainer::resume(&ck, tok_cfg(), tok_train(), tok_train().seed).unwrap();
    resumed.run(&data, None).unwrap();
    assert_eq!(resumed.history.len(), 12);
    for (x, y) in resumed.history.iter().zip(&full.history).skip(2) {
        assert!((x.total - y.total).abs() < 1e-5, "step {}: {} vs {}", x.step, x.total, y.total);
    }
    assert_eq!(resumed.epochs, full.epochs);

    let other = TrainConfig { peak_lr: 1e-3, ..tok_train() };
    assert!(matches!(TokenizerTrainer::resume(&ck, tok_cfg(), other, tok_train().seed), Err(Error::InvalidState(_))));
    assert!(TokenizerTrainer::resume(&ck, tok_cfg(), tok_train(), 99).is_err());
}

#[test]
fn stage_one_reports_per_epoch_usage() {
    let data = prepared(6);
    let t = train_tokenizer(tok_cfg(), tok_train(), &data, Default::default()).unwrap();
    assert_eq!(t.epochs.len(), 4);
    assert_eq!(t.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let last = t.epochs.last().unwrap();
    assert_eq!((last.unused_t, last.unused_f), dataset_unused(&t.model, &data, 4).unwrap());
    for r in &t.history {
        assert!(r.unused_t <= 16 && r.unused_f <= 16);
        assert!((r.freq_recon - r.amp_recon - r.phase_recon).abs() < 1e-9 * r.freq_recon.max(1.0));
    }
}

#[test]
fn stage_one_codes_stay_on_the_sphere() {
    let data = prepared(4);
    let mut t = TokenizerTrainer::new(tok_cfg(), tok_train(), 0).unwrap();
    t.run(&data, Some(3)).unwrap();
    for book in [&t.model.temporal, &t.model.frequency] {
        for row in book.codes(&t.model.store).chunks(4) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn divergence_stops_and_keeps_last_good() {
    let data = prepared(4);
    let tmp = tempfile::tempdir().unwrap();
    let train = TrainConfig { peak_lr: 1e39, min_lr: 0.0, ..tok_train() };
    let policy = CheckpointPolicy { dir: Some(tmp.path().to_path_buf()), every: None };
    let err = train_tokenizer(tok_cfg(), train, &data, policy).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1 }), "{err}");
    let ck = Checkpoint::load(&tmp.path().join("last-good")).unwrap();
    assert_eq!(ck.step, 0);
    assert!(ck.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite())));
}

#[test]
fn periodic_checkpoints_land_on_schedule() {
    let data = prepared(4);
    let tmp = tempfile::tempdir().unwrap();
    let policy = CheckpointPolicy { dir: Some(tmp.path().to_path_buf()), every: Some(4) };
    train_tokenizer(tok_cfg(), TrainConfig { max_steps: Some(8), ..tok_train() }, &data, policy).unwrap();
    let mut names: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into()).collect();
    names.sort();
    assert_eq!(names, vec!["step-000004", "step-000008"]);
    assert_eq!(Checkpoint::load(&tmp.path().join("step-000008")).unwrap().losses.len(), 8);
}

#[test]
fn csv_headers() {
    let one = stage_one_csv(&[]);
    assert_eq!(
        one.trim(),
        "step,lr,total,freq_recon,amp_recon,phase_recon,temporal_recon,contrastive,codebook,grad_norm,unused_t,unused_f"
    );
    assert_eq!(stage_two_csv(&[]).trim(), "step,lr,loss,acc_t,acc_f,masked,grad_norm");
    assert_eq!(epoch_usage_csv(&[EpochUsage { epoch: 1, unused_t: 2, unused_f: 3 }]), "epoch,unused_t,unused_f\n1,2,3\n");
    let row = StageTwoRow { step: 1, lr: 0.5, loss: 2.0, acc_t: 0.25, acc_f: 0.0, masked: 3, grad_norm: 1.0 };
    let csv = stage_two_csv(&[row]);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 7);
}

#[test]
fn planted_tokens_follow_the_spectrum() {
    let (g, _) = &grids(1, 5)[0];
    let t = planted_tokens(g).unwrap();
    assert_eq!(t.len(), g.len());
    for i in 0..g.len() {
        assert_eq!((t.z_t[i], t.z_f[i]), dominant_bins(g.flat(i)).unwrap());
    }
}

#[test]
fn stage_two_starts_at_chance_and_resumes_exactly() {
    let data = tokenized(6);
    let full = train_eegssm(ssm_cfg(), ssm_train(), &data, None, Default::default()).unwrap();
    let l = full.losses();
    assert_eq!(l.len(), 12);
    assert!((l[0] - 2.0 * 16f64.ln()).abs() < 0.05 * 2.0 * 16f64.ln(), "{}", l[0]);
    assert_eq!(full.history, train_eegssm(ssm_cfg(), ssm_train(), &data, None, Default::default()).unwrap().history);

    let mut part = SsmTrainer::new(ssm_cfg(), ssm_train(), ssm_train().seed).unwrap();
    part.run(&data, Some(5)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    part.to_checkpoint().save(tmp.path()).unwrap();
    let ck = Checkpoint::load(tmp.path()).unwrap();
    let mut resumed = SsmTrainer::resume(&ck, ssm_cfg(), ssm_train(), ssm_train().seed, None).unwrap();
    resumed.run(&data, None).unwrap();
    for (x, y) in resumed.history.iter().zip(&full.history).skip(5) {
        assert!((x.loss - y.loss).abs() < 1e-5);
    }
    assert!(SsmTrainer::resume(&ck, ssm_cfg(), ssm_train(), ssm_train().seed, Some("abc".into())).is_err());
}

#[test]
fn stage_two_clips_and_checks_tokenizer_shape() {
    let data = tokenized(4);
    let mut t = SsmTrainer::new(ssm_cfg(), TrainConfig { clip_norm: 0.1, ..ssm_train() }, 0).unwrap();
    for s in 1..=4 {
        t.run(&data, Some(s)).unwrap();
        assert!(t.model.store.grad_norm() <= 0.1 + 1e-4);
    }
    let tok = Tokenizer::new(TokenizerConfig { codebook_size: 32, ..tok_cfg() }, 0).unwrap();
    assert!(train_eegssm(ssm_cfg(), ssm_train(), &data, Some(&tok), Default::default()).is_err());
    let tok = Tokenizer::new(tok_cfg(), 0).unwrap();
    let t = train_eegssm(ssm_cfg(), TrainConfig { max_steps: Some(1), ..ssm_train() }, &data, Some(&tok), Default::default()).unwrap();
    assert!(t.tokenizer_hash.is_some());
}

#[test]
fn masked_eval_is_read_only() {
    let data = tokenized(3);
    let t = SsmTrainer::new(ssm_cfg(), ssm_train(), 0).unwrap();
    let before = t.model.store.clone();
    let a = evaluate_masked(&t.model, &data, 0.5, 1).unwrap();
    assert_eq!(a, evaluate_masked(&t.model, &data, 0.5, 1).unwrap());
    assert!((a.loss - 2.0 * 16f64.ln()).abs() < 0.5);
    assert!(before.iter().zip(t.model.store.iter()).all(|(x, y)| x.1.data() == y.1.data()));
}

proptest! {
    #[test]
    fn each_epoch_is_a_partial_permutation(n in 2usize..60, b in 1usize..8, seed in any::<u64>(), epoch in 0usize..5) {
        prop_assume!(n >= b);
        let per = n / b;
        let mut seen: Vec<usize> = (0..per).flat_map(|s| batch_indices(n, b, seed, epoch * per + s)).collect();
        prop_assert_eq!(seen.len(), per * b);
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), per * b);
        prop_assert!(seen.iter().all(|&i| i < n));
    }

    #[test]
    fn mask_count_matches_bits(rows in 1usize..20, cols in 1usize..20, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_mask(rows, cols, r, seed).unwrap();
        prop_assert_eq!(m.bits.len(), rows * cols);
        prop_assert_eq!(m.count(), m.bits.iter().filter(|&&x| x).count());
        prop_assert!((0.0..=1.0).contains(&m.fraction()));
    }
}
