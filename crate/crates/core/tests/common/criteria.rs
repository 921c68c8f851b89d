//! End-to-end checks, each returning a verdict line rather than panicking so
//! a runner can report every one of them.
#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};

use kneegrade_core::backbone::{build_network, forward, ForwardOptions, NetworkConfig, NUM_STAGES};
use kneegrade_core::data::{
    planted_samples, stratified_split, synth_samples, AugmentationPolicy, Dataset, GradeRecord, Split, SplitOptions,
    SplitRatios,
};
use kneegrade_core::gradcam::{gradcam, LAYER_MERGED};
use kneegrade_core::metrics::{accuracy, confusion, mae, qwk};
use kneegrade_core::objective::{default_penalty_matrix, ordinal_loss, LossKind};
use kneegrade_core::train::{train, Checkpoint, EpochLog, LoadOptions, RunConfig, TrainOptions, TrainOutcome};
use kneegrade_core::{CheckpointError, Error, Tensor};
use rand_chacha::ChaCha8Rng;

use super::cases::{network_gradcheck, primitive_cases};
use super::oracles::{self, random_distribution, random_labels, COHORT_TEST, COHORT_TOTAL, COHORT_TRAIN, COHORT_VAL};
use super::rng;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

/// Learning rate for the small synthetic runs; see README.
pub const TOY_LR: f64 = 2e-3;
const TOY: usize = 64;

pub fn toy_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = NetworkConfig::toy();
    cfg.train.learning_rate = TOY_LR;
    cfg.train.epochs = epochs;
    cfg.train.seed = Some(seed);
    cfg.augment = AugmentationPolicy::disabled();
    cfg
}

fn synth(n_per_grade: usize, seed: u64) -> Dataset {
    Dataset::from_synth(&synth_samples(n_per_grade, TOY, seed).expect("synth"), TOY).expect("dataset")
}

// ---------------------------------------------------------------- gradients

pub fn gradients() -> Verdict {
    let mut worst_name = String::new();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let cases = primitive_cases();
    for c in &cases {
        let e = c.error();
        if e > worst {
            worst = e;
            worst_name = c.name.clone();
        }
        if !(e < c.tol) {
            failures.push(format!("{} ({e:.2e})", c.name));
        }
    }
    let (net, checked) = network_gradcheck(7);
    if !(net < 1e-3) {
        failures.push(format!("toy network ({net:.2e})"));
    }
    let detail = format!(
        "{} primitive cases, worst {worst:.1e} ({worst_name}); toy network {net:.1e} over {checked} tensors",
        cases.len()
    );
    if failures.is_empty() {
        Verdict::new(true, detail)
    } else {
        Verdict::fail(format!("{detail}; over tolerance: {}", failures.join(", ")))
    }
}

// ----------------------------------------------------------------- oracles

pub fn ordinal_oracle() -> Verdict {
    let c = default_penalty_matrix();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let p = random_distribution(&mut r);
        let v = i % 5;
        match ordinal_loss(&p, v, &c) {
            Ok(l) => worst = worst.max((l - oracles::ordinal_loss(&p, v)).abs()),
            Err(e) => return Verdict::fail(format!("pair {i}: {e}")),
        }
    }
    let one_hot = |k: usize| std::array::from_fn::<f64, 5, _>(|u| if u == k { 1.0 } else { 0.0 });
    let mut monotone = 0;
    for v in 0..5usize {
        if ordinal_loss(&one_hot(v), v, &c).unwrap() != 0.0 {
            return Verdict::fail(format!("one-hot at truth {v} is not 0"));
        }
        for u in 0..5usize {
            for w in 0..5usize {
                if u.abs_diff(v) > w.abs_diff(v) {
                    let (lu, lw) = (ordinal_loss(&one_hot(u), v, &c).unwrap(), ordinal_loss(&one_hot(w), v, &c).unwrap());
                    if lu < lw {
                        return Verdict::fail(format!("truth {v}: grade {u} costs {lu} < grade {w} at {lw}"));
                    }
                    monotone += 1;
                }
            }
        }
    }
    Verdict::new(
        worst < 1e-9,
        format!("1000 pairs, max |Δ| {worst:.1e}; one-hot = 0; {monotone} distance-ordered pairs monotone"),
    )
}

pub fn metrics_oracle() -> Verdict {
    let mut r = rng(99);
    let mut worst = 0.0f64;
    let mut undefined = 0;
    for i in 0..500 {
        let (t, p) = random_labels(&mut r, 2 + i % 300);
        let cm = confusion(&t, &p).unwrap();
        worst = worst
            .max((accuracy(&cm).unwrap() - oracles::accuracy(&t, &p)).abs())
            .max((mae(&t, &p).unwrap() - oracles::mae(&t, &p)).abs());
        match (qwk(&cm), oracles::qwk(&t, &p)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(Error::UndefinedKappa(_)), None) => undefined += 1,
            (a, b) => return Verdict::fail(format!("vector {i}: kappa {a:?} vs oracle {b:?}")),
        }
    }
    let perfect = qwk(&confusion(&[0, 1, 2, 3, 4, 2], &[0, 1, 2, 3, 4, 2]).unwrap()).unwrap();
    let opposite = qwk(&confusion(&[0, 4], &[4, 0]).unwrap()).unwrap();
    Verdict::new(
        worst < 1e-9 && perfect == 1.0 && opposite == -1.0,
        format!(
            "500 vectors, max |Δ| {worst:.1e} ({undefined} undefined-kappa agreed); κ(perfect) = {perfect}; κ(0↔4) = {opposite}"
        ),
    )
}

// ---------------------------------------------------------------- topology

pub fn topology() -> Verdict {
    match topology_inner() {
        Ok(d) => Verdict::new(true, d),
        Err(d) => Verdict::fail(d),
    }
}

fn topology_inner() -> Result<String, String> {
    let mut notes = Vec::new();
    for (label, cfg) in [("toy", NetworkConfig::toy()), ("default", NetworkConfig::default())] {
        let params = build_network::<f32>(&cfg, 3).map_err(|e| e.to_string())?;
        let s = cfg.input_size;
        let x = Tensor::<f32>::zeros(&[1, cfg.in_channels, s, s]);
        let (fw, logits) = forward(&cfg, &params, &x, ForwardOptions::eval()).map_err(|e| e.to_string())?;
        let shape = |name: &str| fw.tapped(name).map(|v| fw.graph.value(v).shape().to_vec());
        let top = cfg.stage1_size();
        for stage in 1..=NUM_STAGES {
            for j in 1..=NUM_STAGES {
                let got = shape(&format!("stage{stage}.branch{j}"));
                if j > stage {
                    if got.is_some() {
                        return Err(format!("{label}: stage {stage} has a branch {j}"));
                    }
                    continue;
                }
                let side = top >> (j - 1);
                let want = vec![1, cfg.width(j - 1), side, side];
                if got.as_ref() != Some(&want) {
                    return Err(format!("{label}: stage{stage}.branch{j} is {got:?}, expected {want:?}"));
                }
            }
        }
        let merged = shape(LAYER_MERGED).ok_or("no merged map")?;
        let (c, h, w) = (merged[1], merged[2], merged[3]);
        if shape("cbam.channel_map") != Some(vec![1, c, 1, 1]) || shape("cbam.spatial_map") != Some(vec![1, 1, h, w]) {
            return Err(format!(
                "{label}: gate shapes {:?} / {:?} for a {c}×{h}×{w} map",
                shape("cbam.channel_map"),
                shape("cbam.spatial_map")
            ));
        }
        if fw.graph.value(logits).shape() != [1, 5] {
            return Err(format!("{label}: logits {:?}", fw.graph.value(logits).shape()));
        }
        let with = cfg.trainable_count().map_err(|e| e.to_string())?;
        let without = NetworkConfig {
            attention: false,
            ..cfg.clone()
        }
        .trainable_count()
        .map_err(|e| e.to_string())?;
        let analytic = cfg.cbam.param_count(cfg.head_width).map_err(|e| e.to_string())?;
        if with - without != analytic {
            return Err(format!("{label}: attention adds {} parameters, analytic {analytic}", with - without));
        }
        notes.push(format!(
            "{label}: widths {:?} at sides {top}/{}/{}/{}, gates {c}×1×1 & 1×{h}×{w}, Δparams {analytic}",
            cfg.branch_widths(),
            top / 2,
            top / 4,
            top / 8
        ));
    }
    Ok(notes.join("; "))
}

// ------------------------------------------------------------- overfitting

fn resume_in_chunks(
    cfg: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    max_epochs: usize,
    chunk: usize,
    mut done: impl FnMut(&[EpochLog]) -> bool,
) -> kneegrade_core::Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    let mut state: Option<Checkpoint> = None;
    while logs.len() < max_epochs && !done(&logs) {
        let mut c = cfg.clone();
        c.train.epochs = (logs.len() + chunk).min(max_epochs);
        let TrainOutcome { last, logs: l, .. } = train(
            &c,
            train_ds,
            val_ds,
            TrainOptions {
                resume: state.take(),
                ..Default::default()
            },
        )?;
        logs.extend(l);
        state = Some(last);
    }
    Ok(logs)
}

/// Train accuracy is measured in eval mode after every epoch; a seed passes
/// once it reaches 95 % and its epoch-10 loss is below its epoch-1 loss.
pub fn overfit() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=3u64 {
        let ds = synth(10, seed);
        let cfg = toy_config(seed, 200);
        let reached = |logs: &[EpochLog]| logs.len() >= 10 && logs.iter().any(|l| l.val.accuracy >= 0.95);
        let logs = match resume_in_chunks(&cfg, &ds, &ds, 200, 10, reached) {
            Ok(l) => l,
            Err(e) => return Verdict::fail(format!("seed {seed}: {e}")),
        };
        let hit = logs.iter().find(|l| l.val.accuracy >= 0.95).map(|l| l.epoch);
        let best = logs.iter().map(|l| l.val.accuracy).fold(0.0, f64::max);
        let falling = logs[9].train_loss < logs[0].train_loss;
        pass &= hit.is_some() && falling;
        lines.push(format!(
            "seed {seed}: {} (best {best:.2}), loss e1 {:.3} → e10 {:.3}",
            hit.map_or("never ≥95%".to_string(), |e| format!("≥95% at epoch {e}")),
            logs[0].train_loss,
            logs[9].train_loss
        ));
    }
    Verdict::new(pass, lines.join("; "))
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_EPOCHS: usize = 60;

/// Validation metrics of the epoch with the best validation accuracy.
fn ablation_run(seed: u64, kind: LossKind, attention: bool) -> kneegrade_core::Result<(f64, f64)> {
    let train_ds = synth(14, 100 + seed);
    let val_ds = synth(10, 200 + seed);
    let mut cfg = toy_config(seed, ABLATION_EPOCHS);
    cfg.model.attention = attention;
    cfg.loss.kind = kind;
    let out = train(&cfg, &train_ds, &val_ds, TrainOptions::default())?;
    let best = out.best.as_ref().map_or(0, |b| b.best_epoch) as usize;
    let log = &out.logs[best.max(1) - 1];
    Ok((log.val.accuracy, log.val.mae))
}

pub fn ablation() -> Verdict {
    let arms = [
        ("ordinal+cbam", LossKind::Ordinal, true),
        ("ce+cbam", LossKind::CrossEntropy, true),
        ("ordinal-cbam", LossKind::Ordinal, false),
    ];
    let mut acc = [0.0f64; 3];
    let mut err = [0.0f64; 3];
    for seed in 1..=3u64 {
        for (a, &(name, kind, attention)) in arms.iter().enumerate() {
            match ablation_run(seed, kind, attention) {
                Ok((ac, m)) => {
                    acc[a] += ac / 3.0;
                    err[a] += m / 3.0;
                }
                Err(e) => return Verdict::fail(format!("{name} seed {seed}: {e}")),
            }
        }
    }
    let loss_ok = err[0] <= err[1];
    let attention_ok = acc[0] >= acc[2];
    Verdict::new(
        loss_ok && attention_ok,
        format!(
            "MAE ordinal {:.3} vs CE {:.3} [{}]; accuracy +CBAM {:.3} vs -CBAM {:.3} [{}]",
            err[0],
            err[1],
            if loss_ok { "ok" } else { "reversed" },
            acc[0],
            acc[2],
            if attention_ok { "ok" } else { "reversed" }
        ),
    )
}

// ------------------------------------------------------------------- split

/// Records shaped like the reference cohort: per-grade totals, 1-based
/// names so path order differs from creation order.
pub fn cohort_records() -> Vec<GradeRecord> {
    COHORT_TOTAL
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| (0..n).map(move |i| GradeRecord::new(format!("kl{g}/{:05}.png", (i * 7919) % n + 1), g)))
        .collect()
}

pub fn split_fidelity() -> Verdict {
    let records = cohort_records();
    let m = match stratified_split(&records, SplitRatios::default(), 17, SplitOptions::default()) {
        Ok(m) => m,
        Err(e) => return Verdict::fail(e.to_string()),
    };
    let counts = m.counts();
    let reference = [COHORT_TRAIN, COHORT_TEST, COHORT_VAL];
    let ratio = [0.7, 0.2, 0.1];
    let mut worst_exact = 0.0f64;
    let mut worst_table = 0usize;
    for s in Split::ALL {
        for g in 0..5 {
            let n = counts[s.index()][g];
            worst_exact = worst_exact.max((n as f64 - COHORT_TOTAL[g] as f64 * ratio[s.index()]).abs());
            worst_table = worst_table.max(n.abs_diff(reference[s.index()][g]));
        }
    }
    let totals = m.split_totals();
    let table_totals = [5778usize, 1656, 826];
    let total_gap = (0..3).map(|i| totals[i].abs_diff(table_totals[i])).max().unwrap();
    let grades_ok = m.grade_totals() == COHORT_TOTAL;
    Verdict::new(
        grades_ok && worst_exact <= 1.0 && total_gap <= 10,
        format!(
            "totals {}/{}/{} vs 5778/1656/826 (max gap {total_gap}); per grade ≤ {worst_exact:.1} from exact 7:2:1, ≤ {worst_table} from the reference cohort",
            totals[0], totals[1], totals[2]
        ),
    )
}

// ----------------------------------------------------------------- gradcam

/// Share of each heatmap's top-decile mass (after upsampling to the input
/// size) that falls in the top-left quadrant, pooled over `images`.
pub fn quadrant_share(cfg: &RunConfig, params: &kneegrade_core::backbone::ModelParams<f32>, images: &[Tensor<f32>], layer: &str) -> kneegrade_core::Result<f64> {
    let s = cfg.model.input_size;
    let (mut inside, mut total) = (0.0, 0.0);
    for x in images {
        let h = gradcam(&cfg.model, params, x, 4, layer)?;
        let up = h.resized(s, s);
        let mut sorted = up.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let threshold = sorted[up.len() / 10 - 1];
        for (i, &v) in up.iter().enumerate() {
            if v >= threshold && v > 0.0 {
                total += v;
                if i / s < s / 2 && i % s < s / 2 {
                    inside += v;
                }
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

pub fn gradcam_localization() -> Verdict {
    let run = || -> kneegrade_core::Result<Verdict> {
        let items = |n, seed| -> kneegrade_core::Result<Vec<_>> {
            Ok(planted_samples(n, TOY, seed)?.into_iter().map(|(img, g, _)| (img, g)).collect())
        };
        let train_ds = Dataset::from_gray(&items(25, 1)?, TOY)?;
        let test_ds = Dataset::from_gray(&items(10, 2)?, TOY)?;
        let cfg = toy_config(1, 30);
        let out = train(&cfg, &train_ds, &test_ds, TrainOptions::default())?;
        let params = out.last.params;
        let acc = out.logs.last().map_or(0.0, |l| l.val.accuracy);

        let planted: Vec<Tensor<f32>> = (0..test_ds.len())
            .filter(|&k| test_ds.grades[k] == 4)
            .map(|k| test_ds.batch::<f32, ChaCha8Rng>(&[k], 3, None).map(|b| b.0))
            .collect::<kneegrade_core::Result<_>>()?;
        let share = quadrant_share(&cfg, &params, &planted, LAYER_MERGED)?;
        let fine = quadrant_share(&cfg, &params, &planted, "stage4.branch1")?;

        let mut zeroed = params.clone();
        zeroed.get_mut("classifier.weight").unwrap().value.data_mut().fill(0.0);
        let zero_map = gradcam(&cfg.model, &zeroed, &planted[0], 4, LAYER_MERGED)?;

        Ok(Verdict::new(
            share >= 0.7 && zero_map.is_zero(),
            format!(
                "test accuracy {acc:.2}; top-decile share in planted quadrant {share:.3} at `{LAYER_MERGED}` \
                 (diagnostic: {fine:.3} at `stage4.branch1`); zero-gradient map all zero: {}",
                zero_map.is_zero()
            ),
        ))
    };
    run().unwrap_or_else(|e| Verdict::fail(e.to_string()))
}

// ------------------------------------------------------------- persistence

fn persistence_config(epochs: usize) -> RunConfig {
    let mut cfg = toy_config(5, epochs);
    cfg.train.batch_size = 8;
    // Exercise the generator state as well as the weights.
    cfg.augment = AugmentationPolicy::default();
    cfg
}

/// Every way of damaging `bytes` that must be rejected cleanly.
pub fn corruptions(bytes: &[u8]) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![("empty".to_string(), Vec::new())];
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xff;
    out.push(("magic".into(), magic));
    for cut in [4, 10, 13, 40, bytes.len() / 3, bytes.len() / 2, bytes.len() - 33, bytes.len() - 1] {
        out.push((format!("truncated at {cut}"), bytes[..cut].to_vec()));
    }
    let mut trailing = bytes.to_vec();
    trailing.extend_from_slice(b"xx");
    out.push(("trailing bytes".into(), trailing));
    let mut hash = bytes.to_vec();
    let n = hash.len();
    hash[n - 5] ^= 0x55;
    out.push(("hash".into(), hash));
    let mut count = bytes.to_vec();
    count[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
    out.push(("entry count".into(), count));
    out
}

pub fn persistence() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    pool.install(|| persistence_inner().unwrap_or_else(|e| Verdict::fail(e.to_string())))
}

fn persistence_inner() -> kneegrade_core::Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let train_ds = synth(4, 31);
    let val_ds = synth(2, 32);

    let straight = train(&persistence_config(10), &train_ds, &val_ds, TrainOptions::default())?;
    let first = dir.path().join("first");
    train(
        &persistence_config(5),
        &train_ds,
        &val_ds,
        TrainOptions {
            out_dir: Some(&first),
            ..Default::default()
        },
    )?;
    let saved = Checkpoint::load(&first.join("last.ckpt"), LoadOptions::default())?;
    let resumed = train(
        &persistence_config(10),
        &train_ds,
        &val_ds,
        TrainOptions {
            resume: Some(saved.clone()),
            ..Default::default()
        },
    )?;
    let a = straight.last.to_bytes()?;
    let b = resumed.last.to_bytes()?;
    let logs_match = straight.logs[5..] == resumed.logs[..];
    let on_disk = std::fs::read(first.join("last.ckpt")).map_err(|e| Error::io(&first, e))?;
    let reload_identical = saved.to_bytes()? == on_disk;

    let mut structured = 0;
    let cases = corruptions(&on_disk);
    for (name, data) in &cases {
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
        match catch_unwind(AssertUnwindSafe(|| Checkpoint::load(&path, LoadOptions::default()))) {
            Ok(Err(Error::Checkpoint(_))) => structured += 1,
            Ok(Err(e)) => return Ok(Verdict::fail(format!("{name}: unexpected error kind {e}"))),
            Ok(Ok(_)) => return Ok(Verdict::fail(format!("{name}: accepted"))),
            Err(_) => return Ok(Verdict::fail(format!("{name}: panicked"))),
        }
    }
    // Random single-byte damage anywhere must never crash the decoder.
    let mut flips = 0;
    for pos in (0..on_disk.len()).step_by(on_disk.len() / 200 + 1) {
        let mut data = on_disk.clone();
        data[pos] ^= 0xa5;
        if catch_unwind(AssertUnwindSafe(|| Checkpoint::from_bytes(&data, LoadOptions::default()))).is_err() {
            return Ok(Verdict::fail(format!("byte flip at {pos} panicked")));
        }
        flips += 1;
    }
    let hash_rejected = matches!(
        Checkpoint::from_bytes(&cases.iter().find(|c| c.0 == "hash").unwrap().1, LoadOptions::default()),
        Err(Error::Checkpoint(CheckpointError::HashMismatch { .. }))
    );
    Ok(Verdict::new(
        a == b && logs_match && reload_identical && hash_rejected,
        format!(
            "10 straight vs 5 + resume 5: state {}, epoch logs {}; reload byte-identical: {reload_identical}; \
             {structured}/{} corrupt files rejected with checkpoint errors; {flips} byte flips without a crash",
            if a == b { "identical" } else { "differs" },
            if logs_match { "identical" } else { "differ" },
            cases.len()
        ),
    ))
}
