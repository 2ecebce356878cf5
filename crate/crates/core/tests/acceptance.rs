//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always show.

use std::path::Path;
use std::time::Instant;

use malimg::analysis::{cluster_quality, export_embeddings};
use malimg::cli;
use malimg::dataset::{stratified_split, synth_corpus_sized, train_count, LabeledCorpus, LabeledSample, SplitSpec};
use malimg::ema::{ema_update, init_teacher, EmaConfig};
use malimg::losses::{
    composite_loss, cross_entropy, data2vec_loss, smooth_l1, LossConfig, OneHotLabel,
};
use malimg::masking::MaskConfig;
use malimg::model::{
    init_model, load_checkpoint, ClassProbs, EmbeddingBlock, Mode, ModelConfig, ModelParams, Network,
};
use malimg::preprocess::{binary_to_image, ByteStream, GrayImage, IMAGE_SIZE, ROW_WIDTH};
use malimg::trainer::{read_metrics, StepContext, TrainConfig, TrainMode, Trainer};
use rand::{Rng, SeedableRng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Runs a criterion, turning panics and errors into failures.
fn guarded(f: impl FnOnce() -> Result<Outcome, String> + std::panic::UnwindSafe) -> Outcome {
    match std::panic::catch_unwind(f) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => outcome(false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. architecture shape

fn valid_conv(n: usize) -> usize {
    (n - 5) / 2 + 1
}

fn criterion_1() -> Result<Outcome, String> {
    let cfg = ModelConfig::default();
    let mut oracle = vec![400usize; 4];
    let mut n = 400;
    for _ in 0..6 {
        n = valid_conv(n);
        oracle.push(n);
    }
    let chain = cfg.spatial_chain();
    let net = Network::new(&cfg).map_err(e2s)?;
    let params: ModelParams<f32> = init_model(&cfg, 0).map_err(e2s)?;
    let image = GrayImage::from_pixels(
        IMAGE_SIZE,
        IMAGE_SIZE,
        (0..IMAGE_SIZE * IMAGE_SIZE).map(|i| (i % 251) as f32 / 255.0).collect(),
    )
    .map_err(e2s)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let emb = net.encoder_forward(&params, &image, Mode::Eval, &mut rng).map_err(e2s)?;
    let pass = chain == oracle
        && chain[3..] == [400, 198, 97, 47, 22, 9, 3]
        && emb.shape() == (3, 3, 256)
        && emb.values.len() == 2304;
    Ok(outcome(
        pass,
        format!("chain {chain:?}, embedding {:?} ({} values)", emb.shape(), emb.values.len()),
    ))
}

// ---------------------------------------------------------------------------
// 2. loss and EMA examples, gradient check

fn probs(v: Vec<f64>) -> ClassProbs<f64> {
    ClassProbs { probs: v }
}

fn criterion_2() -> Result<Outcome, String> {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let y = |c: usize, k: usize| OneHotLabel::new(c, k).unwrap();
    note(cross_entropy(&[probs(vec![0.0, 1.0, 0.0])], &[y(1, 3)], &cfg).map_err(e2s)?, 0.0);
    note(
        cross_entropy(&[probs(vec![1.0 / 61.0; 61])], &[y(7, 61)], &cfg).map_err(e2s)?,
        61f64.ln(),
    );
    note(
        cross_entropy(&[probs(vec![0.5, 0.5]), probs(vec![0.75, 0.25])], &[y(0, 2), y(1, 2)], &cfg).map_err(e2s)?,
        (2f64.ln() + 4f64.ln()) / 2.0,
    );

    let block = |v: Vec<f64>| EmbeddingBlock::new(1, 1, v.len(), v).unwrap();
    let z = block(vec![0.3, -1.2, 4.0]);
    note(data2vec_loss(&[z.clone()], &[z.clone()], &cfg).map_err(e2s)?, 0.0);
    note(data2vec_loss(&[block(vec![0.0])], &[block(vec![0.25])], &cfg).map_err(e2s)?, 0.0625);
    note(data2vec_loss(&[block(vec![0.0])], &[block(vec![2.0])], &cfg).map_err(e2s)?, 1.75);
    note(data2vec_loss(&[block(vec![0.0])], &[block(vec![0.5])], &cfg).map_err(e2s)?, 0.25);
    note(smooth_l1(0.5 - 1e-12, 0.5), 0.25);
    note(smooth_l1(0.5 + 1e-12, 0.5), 0.25);

    note(composite_loss(1.0, 0.5, &cfg).map_err(e2s)?, 1.5);
    let off = LossConfig {
        lambda_weight: 0.0,
        ..cfg
    };
    note(composite_loss(2.5, 123.0, &off).map_err(e2s)?, 2.5);
    let heavy = LossConfig {
        lambda_weight: 7.0,
        ..cfg
    };
    note(composite_loss(0.0, 0.0, &heavy).map_err(e2s)?, 0.0);

    // EMA examples
    let tiny = ModelConfig::tiny(2);
    let mut student: ModelParams<f64> = ModelParams::zeros(&tiny, malimg::model::Role::Student);
    let mut teacher = init_teacher(&student);
    teacher
        .params
        .tensors
        .iter_mut()
        .flat_map(|t| t.data.iter_mut())
        .for_each(|x| *x = 1.0);
    let before = teacher.clone();
    ema_update(&mut teacher, &student, &EmaConfig { tau: 1.0, warmup: None }).map_err(e2s)?;
    let fixed_point = teacher.params.tensors == before.params.tensors;
    let mut t09 = before.clone();
    ema_update(&mut t09, &student, &EmaConfig { tau: 0.9, warmup: None }).map_err(e2s)?;
    note(t09.params.tensors[0].data[0], 0.9);
    student.tensors[0].data[0] = 0.37;
    let mut t0 = before.clone();
    ema_update(&mut t0, &student, &EmaConfig { tau: 0.0, warmup: None }).map_err(e2s)?;
    let full_copy = t0.params.tensors == student.tensors;

    let fd = gradient_check()?;
    let pass = worst <= 1e-6 && fixed_point && full_copy && fd <= 1e-4;
    Ok(outcome(
        pass,
        format!("max example error {worst:.2e} (tol 1e-6), tau=1 fixed {fixed_point}, tau=0 copy {full_copy}, max |analytic - numeric| {fd:.2e} (tol 1e-4)"),
    ))
}

/// Largest deviation between analytic and central-difference gradients of
/// the composite objective on the 32×32 plan, in f64.
fn gradient_check() -> Result<f64, String> {
    let model = ModelConfig::tiny(3);
    let network = Network::new(&model).map_err(e2s)?;
    let loss = LossConfig::default();
    let mask = MaskConfig {
        block_size: 8,
        mask_ratio: 0.5,
    };
    let corpus = synth_corpus_sized(3, 2, 4, 32).map_err(e2s)?;
    let batch: Vec<&LabeledSample> = corpus.samples.iter().collect();
    // off the leaky kink that zero biases and zero-filled mask blocks sit on
    let mut student: ModelParams<f64> = init_model::<f32>(&model, 21).map_err(e2s)?.cast();
    let mut jitter = rand_chacha::ChaCha8Rng::seed_from_u64(98);
    for v in student.tensors.iter_mut().flat_map(|t| t.data.iter_mut()) {
        *v += jitter.gen_range(-0.05..0.05);
    }
    let teacher: ModelParams<f64> = init_model::<f32>(&model, 22).map_err(e2s)?.cast();
    let ctx = StepContext {
        network: &network,
        loss: &loss,
        mask: &mask,
        mode: TrainMode::Composite,
        seed: 5,
        step: 2,
    };
    let f = |p: &ModelParams<f64>| ctx.batch_pass(p, &teacher, &batch, false).unwrap().report.composite;
    let grads = ctx.batch_pass(&student, &teacher, &batch, true).map_err(e2s)?.grads.unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, tensor) in student.tensors.iter().enumerate() {
        for _ in 0..tensor.data.len().min(4) {
            let i = rng.gen_range(0..tensor.data.len());
            let mut p = student.clone();
            p.tensors[t].data[i] += h;
            let up = f(&p);
            p.tensors[t].data[i] -= 2.0 * h;
            let down = f(&p);
            worst = worst.max(((up - down) / (2.0 * h) - grads.tensors[t].data[i]).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// 3. stop-gradient and EMA

fn criterion_3() -> Result<Outcome, String> {
    let mut cfg = TrainConfig {
        model: ModelConfig::tiny(3),
        batch_size: 4,
        learning_rate: 1e-2,
        max_steps: 5,
        ..TrainConfig::default()
    };
    cfg.mask.block_size = 8;
    cfg.ema.tau = 0.9;
    let corpus = synth_corpus_sized(3, 4, 2, 32).map_err(e2s)?;
    let trainer = Trainer::new(cfg.clone()).map_err(e2s)?;
    let mut state = trainer.init_state().map_err(e2s)?;
    // move the teacher off the student first so the checks are not trivial
    for _ in 0..2 {
        let idx = trainer.batch_indices(state.step, corpus.len());
        let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &corpus.samples[i]).collect();
        trainer.train_step(&mut state, &batch).map_err(e2s)?;
    }
    let mut untouched = true;
    let mut ema_err: f64 = 0.0;
    for _ in 0..3 {
        let idx = trainer.batch_indices(state.step, corpus.len());
        let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &corpus.samples[i]).collect();
        let bits = |p: &ModelParams<f32>| -> Vec<u32> {
            p.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
        };
        let teacher_before = bits(&state.teacher.params);
        let (_, grads) = trainer.compute_gradients(&state, &batch).map_err(e2s)?;
        trainer.apply_optimizer(&mut state, &grads);
        untouched &= bits(&state.teacher.params) == teacher_before;
        let prior = state.teacher.params.clone();
        trainer.update_teacher(&mut state).map_err(e2s)?;
        state.step += 1;
        for ((t, p), s) in state
            .teacher
            .params
            .tensors
            .iter()
            .zip(&prior.tensors)
            .zip(&state.student.tensors)
        {
            for ((&a, &b), &c) in t.data.iter().zip(&p.data).zip(&s.data) {
                let want = 0.9 * b as f64 + 0.1 * c as f64;
                ema_err = ema_err.max((a as f64 - want).abs());
            }
        }
    }
    let mut edge = state.teacher.clone();
    ema_update(&mut edge, &state.student, &EmaConfig { tau: 1.0, warmup: None }).map_err(e2s)?;
    let tau1 = edge.params.tensors == state.teacher.params.tensors;
    ema_update(&mut edge, &state.student, &EmaConfig { tau: 0.0, warmup: None }).map_err(e2s)?;
    let tau0 = edge.params.tensors == state.student.tensors;
    let pass = untouched && ema_err <= 1e-6 && tau1 && tau0;
    Ok(outcome(
        pass,
        format!(
            "teacher bit-identical through backward+optimizer {untouched}, max EMA error {ema_err:.2e} (tol 1e-6), tau=1 exact {tau1}, tau=0 exact {tau0}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. preprocessing oracle

fn brute_force_image(bytes: &[u8]) -> Vec<f32> {
    let rows = bytes.len().div_ceil(ROW_WIDTH);
    let sy = rows as f64 / IMAGE_SIZE as f64;
    let sx = ROW_WIDTH as f64 / IMAGE_SIZE as f64;
    let value = |r: usize, c: usize| bytes.get(r * ROW_WIDTH + c).map_or(0.0, |&b| b as f64 / 255.0);
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for i in 0..IMAGE_SIZE {
        let (y0, y1) = (i as f64 * sy, (i + 1) as f64 * sy);
        for j in 0..IMAGE_SIZE {
            let (x0, x1) = (j as f64 * sx, (j + 1) as f64 * sx);
            let mut acc = 0.0;
            for r in (y0.floor() as usize)..(y1.ceil() as usize).min(rows) {
                let oy = y1.min(r as f64 + 1.0) - y0.max(r as f64);
                for c in (x0.floor() as usize)..(x1.ceil() as usize).min(ROW_WIDTH) {
                    let ox = x1.min(c as f64 + 1.0) - x0.max(c as f64);
                    acc += oy * ox * value(r, c);
                }
            }
            out.push((acc / (sy * sx)) as f32);
        }
    }
    out
}

fn criterion_4() -> Result<Outcome, String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
    let mut lens = vec![1, 100_000];
    lens.extend((0..48).map(|_| rng.gen_range(1..=100_000usize)));
    let mut worst: f64 = 0.0;
    let mut deterministic = true;
    for (k, &n) in lens.iter().enumerate() {
        let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let stream = ByteStream::new(bytes.clone(), format!("s{k}"));
        let img = binary_to_image(&stream).map_err(e2s)?;
        let again = binary_to_image(&stream).map_err(e2s)?;
        deterministic &= img.pixels.iter().zip(&again.pixels).all(|(a, b)| a.to_bits() == b.to_bits());
        for (&a, &b) in img.pixels.iter().zip(&brute_force_image(&bytes)) {
            worst = worst.max((a as f64 - b as f64).abs());
        }
    }
    Ok(outcome(
        worst <= 1e-9 && deterministic,
        format!("50 streams, max |pipeline - brute force| {worst:.2e} (tol 1e-9), bit-deterministic {deterministic}"),
    ))
}

// ---------------------------------------------------------------------------
// 5 and 6. desk-scale comparison

const DESK_FAMILIES: usize = 5;
const DESK_PER_FAMILY: usize = 200;
const DESK_CORPUS_SEED: u64 = 7;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_STEPS: u64 = 300;
const DESK_BATCH: usize = 16;
const DESK_LR: f64 = 1e-3;
const DESK_TAU: f64 = 0.99;
const DESK_MASK_BLOCK: usize = 10;
const TAIL: usize = 50;

struct DeskRun {
    accuracy: f64,
    silhouette: f64,
    tail_d2v: f64,
}

fn desk_config(mode: TrainMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig::desk(DESK_FAMILIES),
        batch_size: DESK_BATCH,
        learning_rate: DESK_LR,
        max_steps: DESK_STEPS,
        checkpoint_every: DESK_STEPS,
        seed,
        mode,
        ..TrainConfig::default()
    };
    cfg.ema.tau = DESK_TAU;
    cfg.mask.block_size = DESK_MASK_BLOCK;
    cfg
}

fn desk_run(corpus: &LabeledCorpus, mode: TrainMode, seed: u64) -> Result<DeskRun, String> {
    let cfg = desk_config(mode, seed);
    let (train, test) = stratified_split(
        corpus,
        &SplitSpec {
            train_fraction: cfg.train_fraction,
            seed,
        },
    )
    .map_err(e2s)?;
    let trainer = Trainer::new(cfg).map_err(e2s)?;
    let out = trainer.train(&train, Some(&test), None, None).map_err(e2s)?;
    let tail = &out.metrics[out.metrics.len() - TAIL..];
    let table = export_embeddings(trainer.network(), &out.state.student, &test).map_err(e2s)?;
    Ok(DeskRun {
        accuracy: out.report.ok_or("no evaluation report")?.accuracy,
        silhouette: cluster_quality(&table).map_err(e2s)?,
        tail_d2v: tail.iter().map(|m| m.d2v).sum::<f64>() / TAIL as f64,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn desk_experiment() -> Result<(Vec<DeskRun>, Vec<DeskRun>), String> {
    let corpus = synth_corpus_sized(DESK_FAMILIES, DESK_PER_FAMILY, DESK_CORPUS_SEED, 100).map_err(e2s)?;
    let mut composite = Vec::new();
    let mut ce_only = Vec::new();
    for &seed in &DESK_SEEDS {
        for (mode, sink) in [(TrainMode::Composite, &mut composite), (TrainMode::CeOnly, &mut ce_only)] {
            let start = Instant::now();
            let r = desk_run(&corpus, mode, seed)?;
            println!(
                "    {:<9} seed {seed}: accuracy {:.3}, silhouette {:.4}, final-{TAIL} d2v {:.5} ({:.0} s)",
                mode.as_str(),
                r.accuracy,
                r.silhouette,
                r.tail_d2v,
                start.elapsed().as_secs_f64()
            );
            sink.push(r);
        }
    }
    Ok((composite, ce_only))
}

fn criterion_5(comp: &[DeskRun], ce: &[DeskRun]) -> Outcome {
    let acc_c: Vec<f64> = comp.iter().map(|r| r.accuracy).collect();
    let acc_e: Vec<f64> = ce.iter().map(|r| r.accuracy).collect();
    let sil_c = mean(&comp.iter().map(|r| r.silhouette).collect::<Vec<_>>());
    let sil_e = mean(&ce.iter().map(|r| r.silhouette).collect::<Vec<_>>());
    let a = mean(&acc_c) >= mean(&acc_e);
    let b = std_dev(&acc_c) <= std_dev(&acc_e) + 0.01;
    let c = sil_c > sil_e;
    outcome(
        a && b && c,
        format!(
            "(a) mean acc composite {:.4} vs ce_only {:.4} [{}]; (b) std {:.4} vs {:.4} + 0.01 [{}]; (c) mean silhouette {:.4} vs {:.4} [{}]",
            mean(&acc_c),
            mean(&acc_e),
            ok(a),
            std_dev(&acc_c),
            std_dev(&acc_e),
            ok(b),
            sil_c,
            sil_e,
            ok(c)
        ),
    )
}

fn criterion_6(comp: &[DeskRun], ce: &[DeskRun]) -> Outcome {
    let c = mean(&comp.iter().map(|r| r.tail_d2v).collect::<Vec<_>>());
    let e = mean(&ce.iter().map(|r| r.tail_d2v).collect::<Vec<_>>());
    let per_seed: Vec<String> = comp
        .iter()
        .zip(ce)
        .map(|(a, b)| format!("{:.1}x", b.tail_d2v / a.tail_d2v))
        .collect();
    outcome(
        e >= 10.0 * c,
        format!(
            "final-{TAIL}-step d2v ce_only {e:.5} vs composite {c:.5}, ratio {:.1} (need >= 10; per seed {})",
            e / c,
            per_seed.join(", ")
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

// ---------------------------------------------------------------------------
// 7. split protocol

fn criterion_7() -> Result<Outcome, String> {
    // families of uneven size, including the minimum of 2
    let sizes = [200usize, 10, 2, 37, 11];
    let mut samples = Vec::new();
    for (f, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            samples.push(LabeledSample {
                image: GrayImage::zeros(4, 4),
                family_id: f,
                source_id: format!("f{f}-{i}"),
            });
        }
    }
    let names = (0..sizes.len()).map(|f| format!("fam{f}")).collect();
    let corpus = LabeledCorpus::new(samples, names).map_err(e2s)?;
    let spec = SplitSpec {
        train_fraction: 0.9,
        seed: 3,
    };
    let (train, test) = stratified_split(&corpus, &spec).map_err(e2s)?;
    let (train2, test2) = stratified_split(&corpus, &spec).map_err(e2s)?;
    let ids = |c: &LabeledCorpus| c.samples.iter().map(|s| s.source_id.clone()).collect::<Vec<_>>();
    let deterministic = ids(&train) == ids(&train2) && ids(&test) == ids(&test2);
    let (other, _) = stratified_split(&corpus, &SplitSpec { seed: 4, ..spec }).map_err(e2s)?;
    let seed_matters = ids(&other) != ids(&train);
    let tc = train.family_counts();
    let sc = test.family_counts();
    let expected: Vec<(usize, usize)> = sizes
        .iter()
        .map(|&n| {
            let t = ((0.9 * n as f64) + 1e-9).floor() as usize;
            let t = t.min(n - 1);
            (t, n - t)
        })
        .collect();
    let got: Vec<(usize, usize)> = tc.iter().copied().zip(sc.iter().copied()).collect();
    let every_family_tested = sc.iter().all(|&c| c >= 1);
    let rule_agrees = sizes.iter().all(|&n| train_count(n, 0.9) == expected[sizes.iter().position(|&m| m == n).unwrap()].0);
    let pass = got == expected && every_family_tested && deterministic && seed_matters && rule_agrees;
    Ok(outcome(
        pass,
        format!(
            "train/test per family {got:?} (expected {expected:?}), every family in test {every_family_tested}, seed-deterministic {deterministic}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. reproducibility through the command line

fn train_cli(corpus: &Path, runs: &Path, resume: bool) -> Result<std::path::PathBuf, String> {
    let mut args = vec![
        "malimg", "train", "--corpus", corpus.to_str().unwrap(), "--runs", runs.to_str().unwrap(), "--preset",
        "tiny", "--seed", "5", "--max-steps", "12", "--batch-size", "4", "--learning-rate", "1e-3",
        "--checkpoint-every", "6",
    ];
    if resume {
        args.push("--resume");
    }
    let code = cli::run(args);
    if code != cli::EXIT_OK {
        return Err(format!("train exited with {code}"));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(runs).map_err(e2s)?.map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs.pop().ok_or_else(|| "no run directory".to_string())
}

fn criterion_8() -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let corpus = tmp.path().join("corpus");
    let code = cli::run([
        "malimg", "synth", "-o", corpus.to_str().unwrap(), "--families", "3", "--per-family", "8", "--image-size", "32",
    ]);
    if code != cli::EXIT_OK {
        return Err(format!("synth exited with {code}"));
    }
    let run_a = train_cli(&corpus, &tmp.path().join("a"), false)?;
    let run_b = train_cli(&corpus, &tmp.path().join("b"), false)?;
    let ma = read_metrics(&run_a.join("metrics.jsonl")).map_err(e2s)?;
    let mb = read_metrics(&run_b.join("metrics.jsonl")).map_err(e2s)?;
    let diff = |x: &[malimg::trainer::MetricsRecord], y: &[malimg::trainer::MetricsRecord], n: usize| {
        x.iter()
            .zip(y)
            .take(n)
            .map(|(p, q)| (p.ce - q.ce).abs().max((p.d2v - q.d2v).abs()).max((p.composite - q.composite).abs()))
            .fold(0.0f64, f64::max)
    };
    let rerun = diff(&ma, &mb, 10);

    // interrupt after the step-6 checkpoint: drop the later checkpoint and resume
    let runs_c = tmp.path().join("c");
    let run_c = train_cli(&corpus, &runs_c, false)?;
    let last = run_c.join("checkpoints/step_00000012.ckpt");
    std::fs::remove_file(&last).map_err(e2s)?;
    std::fs::remove_file(last.with_extension("json")).map_err(e2s)?;
    let resumed = train_cli(&corpus, &runs_c, true)?;
    let mc = read_metrics(&resumed.join("metrics.jsonl")).map_err(e2s)?;
    let resume_metrics = diff(&ma, &mc, 12);
    let model = ModelConfig::tiny(3);
    let (_, pa) = load_checkpoint(&run_a.join("checkpoints/step_00000012.ckpt"), &model).map_err(e2s)?;
    let (_, pc) = load_checkpoint(&resumed.join("checkpoints/step_00000012.ckpt"), &model).map_err(e2s)?;
    let resume_params = ["student", "teacher"]
        .iter()
        .map(|g| pa[*g].max_abs_diff(&pc[*g]))
        .fold(0.0f64, f64::max);
    let pass = ma.len() == 12 && mc.len() == 12 && rerun <= 1e-6 && resume_metrics <= 1e-6 && resume_params <= 1e-6;
    Ok(outcome(
        pass,
        format!(
            "rerun metrics max diff {rerun:.2e} over 10 steps, resumed vs uninterrupted: metrics {resume_metrics:.2e}, weights {resume_params:.2e} (tol 1e-6)"
        ),
    ))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "architecture shape", guarded(criterion_1)));
    results.push((2, "loss, EMA and gradient suite", guarded(criterion_2)));
    results.push((3, "stop-gradient and EMA update", guarded(criterion_3)));
    results.push((4, "preprocessing oracle", guarded(criterion_4)));
    println!("running the desk-scale comparison ({} seeds x 2 modes, {DESK_STEPS} steps each)", DESK_SEEDS.len());
    match std::panic::catch_unwind(desk_experiment) {
        Ok(Ok((comp, ce))) => {
            results.push((5, "desk-scale comparison", criterion_5(&comp, &ce)));
            results.push((6, "logged regression-loss separation", criterion_6(&comp, &ce)));
        }
        Ok(Err(e)) => {
            results.push((5, "desk-scale comparison", outcome(false, format!("error: {e}"))));
            results.push((6, "logged regression-loss separation", outcome(false, "no runs")));
        }
        Err(_) => {
            results.push((5, "desk-scale comparison", outcome(false, "panicked")));
            results.push((6, "logged regression-loss separation", outcome(false, "no runs")));
        }
    }
    results.push((7, "stratified split protocol", guarded(criterion_7)));
    results.push((8, "reproducibility and resume", guarded(criterion_8)));

    println!();
    for (id, name, o) in &results {
        println!("criterion {id} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} of {} criteria passed in {:.0} s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
