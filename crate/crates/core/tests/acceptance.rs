//! Acceptance report: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use akd::ablation::{from_csv, run_ablation, score, to_csv, AblationAxis, AblationInputs};
use akd::distill::{
    ag_loss_value, aggregate_heads, aggregate_heads_alt, interpolate_attention, kl_divergence, AgCase, Aggregation,
    ClassAttention, DistillConfig, Interpolation,
};
use akd::gradcheck::{run_suite, FD_STEP, GRAD_TOL};
use akd::io::{generate_splits, Dataset, ModelFile, RunConfig, ShapeSpec};
use akd::train::{pretrain_classifier, run_distillation, DistillOutcome, DistillSetup, StudentState};
use akd::vit::{vit_forward, BlockForm, PosEmbed, ViTConfig, ViTParams};
use akd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.json");
const SMALL: &str = include_str!("../../../configs/small.json");

const CASES: usize = 1000;
const DIST_TOL: f64 = 1e-6;
const KL_EQ_TOL: f64 = 1e-9;
const REDUCTION_TOL: f64 = 1e-6;
const RESAMPLE_TOL: f64 = 1e-6;
const EPS: f64 = 1e-8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const TEACHER_MIN_ACC: f64 = 0.90;
const KNN_MARGIN: f64 = 0.10;

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

fn report(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id} {} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(1e-6..1.0) })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 1e-3 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

fn distribution_error(p: &[f64]) -> f64 {
    let neg = p.iter().fold(0.0f64, |m, &v| m.max(-v));
    let finite = if p.iter().all(|v| v.is_finite()) { 0.0 } else { f64::INFINITY };
    neg.max((p.iter().sum::<f64>() - 1.0).abs()).max(finite)
}

fn aggregate(heads: &[Vec<f64>], s: Aggregation, t: f64) -> Vec<f64> {
    match s {
        Aggregation::LogSum => aggregate_heads(heads, t, EPS).unwrap(),
        other => aggregate_heads_alt(heads, other, EPS).unwrap(),
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

const MODES: [Interpolation; 3] = [Interpolation::Bicubic, Interpolation::Bilinear, Interpolation::Nearest];
const STRATEGIES: [Aggregation; 4] = [Aggregation::LogSum, Aggregation::Mean, Aggregation::Min, Aggregation::Max];

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let suite = match run_suite(&[1, 2, 3]) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = suite.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let failures: Vec<_> = suite.failures().map(|c| format!("{}#{}", c.name, c.seed)).collect();
    outcome(
        suite.passed() && elapsed < GRAD_BUDGET,
        format!(
            "{} checks over seeds 1-3, h={FD_STEP:e}, max relative error {worst:.2e} (tol {GRAD_TOL:e}), {:.1}s (budget {}s){}",
            suite.checks.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(" ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Attention rows of random encoders.
    let mut attn_err = 0.0f64;
    let mut rows_checked = 0;
    for case in 0..CASES {
        let form = if case % 2 == 0 { BlockForm::PaperEq4 } else { BlockForm::PreLn };
        let pos = if case % 3 == 0 { PosEmbed::FixedSincos } else { PosEmbed::Learnable };
        let cfg = ViTConfig::new(8, 4, rng.gen_range(1..=2), rng.gen_range(1..=3), 4)
            .with_block_form(form)
            .with_pos_embed(pos);
        let params = ViTParams::init(&cfg, &mut rng).unwrap();
        let scale = rng.gen_range(0.1..5.0);
        let img: Vec<f64> = (0..3 * 64).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let out = vit_forward(&Tensor::new([3, 8, 8], img).unwrap(), &params, &cfg, true).unwrap();
        for layer in &out.attention.layers {
            for map in layer.full.as_ref().unwrap() {
                let n = map.shape()[1];
                for r in 0..map.shape()[0] {
                    attn_err = attn_err.max(distribution_error(&map.data()[r * n..(r + 1) * n]));
                    rows_checked += 1;
                }
            }
            for row in &layer.class_rows {
                attn_err = attn_err.max(distribution_error(row));
            }
        }
    }
    // Interpolated vectors.
    let mut interp_err = 0.0f64;
    for case in 0..CASES {
        let gt = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let gs = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let row = random_distribution(&mut rng, gt.0 * gt.1 + 1);
        let out = interpolate_attention(&row, gt, gs, MODES[case % 3]).unwrap();
        interp_err = interp_err.max(distribution_error(&out.values));
    }
    // Aggregated vectors.
    let mut agg_err = 0.0f64;
    for case in 0..CASES {
        let h = rng.gen_range(1..=6);
        let n = rng.gen_range(2..=65);
        let heads: Vec<_> = (0..h).map(|_| random_distribution(&mut rng, n)).collect();
        let t = rng.gen_range(0.1..100.0);
        agg_err = agg_err.max(distribution_error(&aggregate(&heads, STRATEGIES[case % 4], t)));
    }
    // KL.
    let mut kl_ok = true;
    let mut min_distinct = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..CASES {
        let n = rng.gen_range(2..=30);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let pq = kl_divergence(&p, &q, EPS).unwrap();
        let pp = kl_divergence(&p, &p, EPS).unwrap();
        max_self = max_self.max(pp.abs());
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if pq < 0.0 || pp.abs() > KL_EQ_TOL || (gap > KL_EQ_TOL && pq <= 0.0) {
            kl_ok = false;
        }
        if gap > KL_EQ_TOL {
            min_distinct = min_distinct.min(pq);
        }
    }
    let pass = attn_err <= DIST_TOL && interp_err <= DIST_TOL && agg_err <= DIST_TOL && kl_ok;
    outcome(
        pass,
        format!(
            "{CASES} cases each; max deviation from a distribution: attention {attn_err:.1e} ({rows_checked} rows), \
             interpolated {interp_err:.1e}, aggregated {agg_err:.1e} (tol {DIST_TOL:e}); \
             KL(p,p) max {max_self:.1e}, KL(p,q) min over distinct pairs {min_distinct:.1e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b_vs_a = 0.0f64;
    for case in 0..CASES {
        let h = rng.gen_range(1..=4);
        let g = rng.gen_range(1..=6);
        let record = |rng: &mut ChaCha8Rng| {
            ClassAttention::new((0..h).map(|_| random_distribution(rng, g * g + 1)).collect(), (g, g)).unwrap()
        };
        let (t, s) = (record(&mut rng), record(&mut rng));
        let cfg = DistillConfig {
            interpolation: MODES[case % 3],
            ..DistillConfig::default()
        };
        let a = ag_loss_value(&t, &s, &DistillConfig { case: Some(AgCase::A), ..cfg.clone() }).unwrap();
        let b = ag_loss_value(&t, &s, &DistillConfig { case: Some(AgCase::B), ..cfg }).unwrap();
        b_vs_a = b_vs_a.max((a - b).abs());
    }
    let mut identity = 0.0f64;
    for _ in 0..CASES {
        let n = rng.gen_range(2..=65);
        let p = random_distribution(&mut rng, n);
        let out = aggregate_heads(std::slice::from_ref(&p), 1.0, EPS).unwrap();
        identity = identity.max(p.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let mut argmax_ok = 0;
    let mut argmax_bad = 0;
    for _ in 0..CASES {
        let h = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=30);
        let heads: Vec<_> = (0..h).map(|_| random_distribution(&mut rng, n)).collect();
        let logits: Vec<f64> = (0..n).map(|i| heads.iter().map(|r| r[i].max(EPS).ln()).sum()).collect();
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] <= 1e-9 {
            continue;
        }
        let reference = argmax(&aggregate_heads(&heads, 1.0, EPS).unwrap());
        if [0.5, 10.0, 100.0].iter().all(|&t| argmax(&aggregate_heads(&heads, t, EPS).unwrap()) == reference) {
            argmax_ok += 1;
        } else {
            argmax_bad += 1;
        }
    }
    outcome(
        b_vs_a <= REDUCTION_TOL && identity <= REDUCTION_TOL && argmax_bad == 0,
        format!(
            "case b vs a max |diff| {b_vs_a:.1e}; H=1,T=1 aggregation vs identity {identity:.1e} (tol {REDUCTION_TOL:e}); \
             argmax stable over T in {{0.5,1,10,100}} for {argmax_ok}/{} untied cases",
            argmax_ok + argmax_bad
        ),
    )
}

/// Reference resampler: each output cell is a direct 2-D weighted sum over
/// the clamped input taps, without separable passes or weight matrices.
fn reference_resample(field: &[f64], (wi, hi): (usize, usize), (wo, ho): (usize, usize), mode: Interpolation) -> Vec<f64> {
    let at = |x: i64, y: i64| {
        let cx = x.clamp(0, wi as i64 - 1) as usize;
        let cy = y.clamp(0, hi as i64 - 1) as usize;
        field[cy * wi + cx]
    };
    let cubic = |x: f64| {
        let a = -0.5;
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
        } else if x < 2.0 {
            a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    };
    let tent = |x: f64| (1.0 - x.abs()).max(0.0);
    let mut out = Vec::with_capacity(wo * ho);
    for yo in 0..ho {
        for xo in 0..wo {
            let sx = (xo as f64 + 0.5) * wi as f64 / wo as f64;
            let sy = (yo as f64 + 0.5) * hi as f64 / ho as f64;
            let v = match mode {
                Interpolation::Nearest => at(sx.floor() as i64, sy.floor() as i64),
                Interpolation::Bilinear | Interpolation::Bicubic => {
                    let (cx, cy) = (sx - 0.5, sy - 0.5);
                    let mut acc = 0.0;
                    for ty in cy.floor() as i64 - 3..=cy.floor() as i64 + 3 {
                        for tx in cx.floor() as i64 - 3..=cx.floor() as i64 + 3 {
                            let (dx, dy) = (cx - tx as f64, cy - ty as f64);
                            let w = if mode == Interpolation::Bilinear {
                                tent(dx) * tent(dy)
                            } else {
                                cubic(dx) * cubic(dy)
                            };
                            acc += w * at(tx, ty);
                        }
                    }
                    acc
                }
            };
            out.push(v);
        }
    }
    out
}

fn reference_interpolate(head: &[f64], gt: (usize, usize), gs: (usize, usize), mode: Interpolation) -> Vec<f64> {
    let a0 = head[0];
    let mut patches: Vec<f64> = reference_resample(&head[1..], gt, gs, mode).into_iter().map(|v| v.max(0.0)).collect();
    let mass: f64 = patches.iter().sum();
    let n = patches.len() as f64;
    for p in &mut patches {
        *p = if mass > 0.0 { *p * (1.0 - a0) / mass } else { (1.0 - a0) / n };
    }
    std::iter::once(a0).chain(patches).collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    let small: Vec<(usize, usize)> = (1..=4).flat_map(|w| (1..=4).map(move |h| (w, h))).collect();
    let large: Vec<(usize, usize)> = (1..=8).flat_map(|w| (1..=8).map(move |h| (w, h))).collect();
    let mut grids: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for &a in &small {
        for &b in &large {
            grids.push((a, b));
            grids.push((b, a));
        }
    }
    grids.sort();
    grids.dedup();
    for (gt, gs) in grids {
        for mode in MODES {
            let row = random_distribution(&mut rng, gt.0 * gt.1 + 1);
            let lib = interpolate_attention(&row, gt, gs, mode).unwrap().values;
            let reference = reference_interpolate(&row, gt, gs, mode);
            worst = worst.max(lib.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            pairs += 1;
        }
    }
    outcome(
        worst <= RESAMPLE_TOL,
        format!("{pairs} (grid pair, mode) cases up to 4x4->8x8 and 8x8->4x4, max |diff| {worst:.1e} (tol {RESAMPLE_TOL:e})"),
    )
}

struct Directional {
    teacher_acc: f64,
    random_knn: f64,
    pa_knn: f64,
    pa_ag_knn: f64,
    runs: Vec<DistillOutcome>,
    teacher_unchanged: bool,
    train_len: usize,
    epochs: usize,
    elapsed: Duration,
}

fn directional() -> akd::Result<Directional> {
    let start = Instant::now();
    let cfg = RunConfig::from_json(DESK)?;
    let (train, val) = generate_splits(2024, 5000, 1000, ShapeSpec::default())?;
    let (teacher, history) = pretrain_classifier(&cfg.vit_teacher, &train, Some(&val), cfg.pretrain())?;
    let teacher_acc = history.last().and_then(|h| h.val_accuracy).unwrap_or(0.0);
    let before = teacher.to_checkpoint()?.to_bytes();
    let random = StudentState::init(&cfg.vit_student, cfg.vit_teacher.embed_dim(), &cfg.distill, cfg.train.seed)?;
    let (random_knn, _) = score(&random.to_model(), &train, &val, &cfg.eval)?;
    let mut runs = Vec::new();
    let mut knn = Vec::new();
    for lambda in [0.0, cfg.distill.lambda] {
        let distill = DistillConfig {
            lambda,
            ..cfg.distill.clone()
        };
        let setup = DistillSetup {
            teacher: &teacher,
            data: &train,
            distill: &distill,
            train: &cfg.train,
        };
        let out = run_distillation(&setup, &cfg.vit_student, None)?;
        knn.push(score(&out.student.to_model(), &train, &val, &cfg.eval)?.0);
        runs.push(out);
    }
    Ok(Directional {
        teacher_acc,
        random_knn,
        pa_knn: knn[0],
        pa_ag_knn: knn[1],
        runs,
        teacher_unchanged: teacher.to_checkpoint()?.to_bytes() == before,
        train_len: train.len(),
        epochs: cfg.train.total_epochs,
        elapsed: start.elapsed(),
    })
}

fn criterion_5(d: &akd::Result<Directional>) -> Outcome {
    let d = match d {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let teacher_ok = d.teacher_acc >= TEACHER_MIN_ACC;
    let ordering = d.pa_ag_knn >= d.pa_knn;
    let margin = d.pa_knn >= d.random_knn + KNN_MARGIN && d.pa_ag_knn >= d.random_knn + KNN_MARGIN;
    let in_time = d.elapsed < ABLATION_BUDGET;
    outcome(
        teacher_ok && ordering && margin && in_time,
        format!(
            "teacher val acc {:.3} (need {TEACHER_MIN_ACC}); k-NN random {:.3}, PA {:.3}, PA+AG {:.3}; \
             (i) PA+AG >= PA: {}; (ii) both >= random + {KNN_MARGIN}: {}; {} epochs; runtime {:.1} min (budget {} min)",
            d.teacher_acc,
            d.random_knn,
            d.pa_knn,
            d.pa_ag_knn,
            ordering,
            margin,
            d.epochs,
            d.elapsed.as_secs_f64() / 60.0,
            ABLATION_BUDGET.as_secs() / 60
        ),
    )
}

fn criterion_6(d: &akd::Result<Directional>) -> Outcome {
    let d = match d {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let epochs: Vec<usize> = d.runs.iter().map(|r| r.metrics.len()).collect();
    let one_view = d
        .runs
        .iter()
        .all(|r| r.metrics.iter().all(|m| m.samples == d.train_len && m.views == d.train_len));
    outcome(
        d.teacher_unchanged && one_view && epochs.iter().all(|&e| e == d.epochs),
        format!(
            "teacher checkpoint bytes unchanged: {}; views per epoch == samples ({}) in every epoch: {one_view}; \
             effective epochs {epochs:?} == training epochs {}",
            d.teacher_unchanged, d.train_len, d.epochs
        ),
    )
}

struct Small {
    cfg: RunConfig,
    teacher: ModelFile,
    train: Dataset,
    val: Dataset,
}

fn small() -> akd::Result<Small> {
    let cfg = RunConfig::from_json(SMALL)?;
    let spec = ShapeSpec {
        size: cfg.vit_teacher.image_size,
        classes: 4,
    };
    let (train, val) = generate_splits(7, 256, 128, spec)?;
    let (teacher, _) = pretrain_classifier(&cfg.vit_teacher, &train, None, cfg.pretrain())?;
    Ok(Small {
        cfg,
        teacher: ModelFile {
            head: None,
            ..teacher
        },
        train,
        val,
    })
}

fn metrics_without_time(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}

fn criterion_7(s: &Small) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |dir: &Path| {
        pool.install(|| {
            let setup = DistillSetup {
                teacher: &s.teacher,
                data: &s.train,
                distill: &s.cfg.distill,
                train: &s.cfg.train,
            };
            run_distillation(&setup, &s.cfg.vit_student, Some(dir)).unwrap();
        });
        (metrics_without_time(dir), std::fs::read(dir.join("student.akd")).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, ca) = run(a.path());
    let (mb, cb) = run(b.path());
    outcome(
        ma == mb && ca == cb,
        format!(
            "two single-thread runs, {} epochs: metric logs identical (wall time excluded): {}; final checkpoints \
             bitwise identical ({} bytes): {}",
            ma.len(),
            ma == mb,
            ca.len(),
            ca == cb
        ),
    )
}

const CSV_COLUMNS: [&str; 15] = [
    "axis",
    "variant",
    "student",
    "ag_case",
    "lambda",
    "aggregation",
    "attention_layers",
    "align_patch_tokens",
    "epochs",
    "status",
    "final_loss_pa",
    "final_loss_ag",
    "knn_accuracy",
    "linear_accuracy",
    "wall_time_s",
];

fn criterion_8(s: &Small) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let inputs = AblationInputs {
        config: &s.cfg,
        teacher: &s.teacher,
        train: &s.train,
        val: &s.val,
    };
    let rows = match run_ablation(AblationAxis::Aggregation, &inputs, Some(dir.path())) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let path = dir.path().join("ablation_aggregation.csv");
    std::fs::write(&path, to_csv(&rows).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
    let parsed = from_csv(&text);
    let header_ok = header == CSV_COLUMNS;
    let (rows_ok, variants) = match &parsed {
        Ok(p) => {
            let variants: Vec<&str> = p.iter().map(|r| r.variant.as_str()).collect();
            let ok = p.len() == 5
                && variants == ["pa", "log_sum", "mean", "min", "max"]
                && p.iter().all(|r| {
                    r.status == "ok"
                        && r.ag_case == "d"
                        && r.knn_accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))
                        && r.linear_accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))
                        && r.final_loss_pa.is_some_and(f64::is_finite)
                });
            (ok, variants.join("/"))
        }
        Err(e) => (false, format!("unparseable: {e}")),
    };
    let knn: Vec<String> = rows
        .iter()
        .map(|r| format!("{}={:.3}", r.variant, r.knn_accuracy.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        header_ok && rows_ok,
        format!(
            "CSV with {} columns (header valid: {header_ok}), variants {variants}, rows schema-valid: {rows_ok}; k-NN {}",
            header.len(),
            knn.join(" ")
        ),
    )
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient suite", criterion_1);
    all &= report(2, "distribution invariants", criterion_2);
    all &= report(3, "case-reduction oracle", criterion_3);
    all &= report(4, "interpolation oracle", criterion_4);
    let s = small();
    match &s {
        Ok(s) => {
            all &= report(7, "reproducibility", || criterion_7(s));
            all &= report(8, "aggregation ablation harness", || criterion_8(s));
        }
        Err(e) => {
            all &= report(7, "reproducibility", || outcome(false, format!("setup failed: {e}")));
            all &= report(8, "aggregation ablation harness", || outcome(false, format!("setup failed: {e}")));
        }
    }
    let d = directional();
    all &= report(5, "directional ablation", || criterion_5(&d));
    all &= report(6, "teacher freeze and single view", || criterion_6(&d));
    println!("acceptance: {}", if all { "all criteria PASS" } else { "some criteria FAIL" });
    if !all {
        std::process::exit(1);
    }
}
