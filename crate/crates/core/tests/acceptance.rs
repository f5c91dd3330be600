//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The training criteria run the desk-scale recipes (tens of minutes on a
//! single core). `LOROT_ACCEPTANCE_SCALE=smoke` swaps in the seconds-scale
//! recipes for exercising this runner; thresholds are unchanged, so smoke
//! results are not meaningful.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lorot::data::{build_imbalanced, imbalance_counts, ImbalanceSpec, LabeledDataset, Split};
use lorot::eval::{auroc, auroc_brute_force, eval_adversarial};
use lorot::experiment::recipes::recipe_plan;
use lorot::experiment::{recipe_names, run_recipe, training_set, RecipeScale, Report, RunCache};
use lorot::rng::{self, tag};
use lorot::train::{pgd_attack, AdversarialConfig, PgdConfig, TrainOutcome};
use lorot::ImageTensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const TRANSFORM_CASES: usize = 100_000;
const GRADIENT_COORDS: usize = 100;
const GRADIENT_REL_TOL: f64 = 1e-5;
const GRADIENT_MAX_PARAMS: usize = 1000;
const AUROC_INSTANCES: usize = 1000;
const AUROC_MAX_SIZE: usize = 50;
const AFFINITY_GAP: f64 = 20.0;
const ACCURACY_SLACK: f64 = 0.3;
const AUROC_GAIN: f64 = 2.0;
const EPSILON: f64 = 8.0 / 255.0;
const LAMBDA_SPREAD: f64 = 1.5;
const IMBALANCE_EXPECTED: [usize; 10] = [5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50];

const MINUTE: Duration = Duration::from_secs(60);

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

type Check = lorot::Result<Outcome>;

struct Ctx {
    scale: RecipeScale,
    out: PathBuf,
    cache: RunCache,
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    (
        elapsed <= budget,
        format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn mean(report: &Report, arm: &str, metric: &str) -> f64 {
    report.mean(arm, metric).unwrap_or(f64::NAN)
}

fn transforms() -> Check {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let mut failures = Vec::new();
    for _ in 0..TRANSFORM_CASES {
        if let Err(e) = common::transform_case(&mut rng) {
            failures.push(e);
        }
    }
    // each label check covers all 16 labels of one random image
    for _ in 0..TRANSFORM_CASES / 16 {
        let half = rng.gen_range(2..=16);
        let channels = rng.gen_range(1..=3);
        let img = common::random_image(&mut rng, 2 * half, channels);
        if let Err(e) = common::check_lorot_e_labels(&img, &mut rng) {
            failures.push(e);
        }
    }
    let (fast, time) = within(t.elapsed(), MINUTE);
    Ok(outcome(
        failures.is_empty() && fast,
        format!(
            "{} rotation cases, {} LoRot-E label cases, {} failures{}; {time}",
            TRANSFORM_CASES,
            TRANSFORM_CASES / 16 * 16,
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    ))
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let (worst, params) = common::gradient_check(&mut rng, GRADIENT_COORDS);
    let (fast, time) = within(t.elapsed(), MINUTE);
    Ok(outcome(
        worst < GRADIENT_REL_TOL && params <= GRADIENT_MAX_PARAMS && fast,
        format!("{params} f64 params, {GRADIENT_COORDS} coordinates, worst relative error {worst:.2e}; {time}"),
    ))
}

fn auroc_oracle() -> Check {
    let t = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let mut mismatches = 0;
    for k in 0..AUROC_INSTANCES {
        let n = rng.gen_range(1..=AUROC_MAX_SIZE);
        let m = rng.gen_range(1..=AUROC_MAX_SIZE);
        let (a, b) = if k % 2 == 0 {
            (common::tied_scores(&mut rng, n), common::tied_scores(&mut rng, m))
        } else {
            let draw = |rng: &mut StdRng, len| (0..len).map(|_| rng.gen::<f64>()).collect::<Vec<_>>();
            (draw(&mut rng, n), draw(&mut rng, m))
        };
        let fast = auroc(&a, &b)?;
        if fast != common::pair_count_auroc(&a, &b) || fast != auroc_brute_force(&a, &b)? {
            mismatches += 1;
        }
    }
    let (fast, time) = within(t.elapsed(), MINUTE);
    Ok(outcome(
        mismatches == 0 && fast,
        format!("{AUROC_INSTANCES} instances, {mismatches} inexact; {time}"),
    ))
}

fn affinity_gap(ctx: &Ctx) -> Check {
    let t = Instant::now();
    let r = run_recipe("affinity-table2-desk", &ctx.scale, &ctx.out, &ctx.cache)?;
    let rot = mean(&r, "baseline", "affinity_global_rotation");
    let i = mean(&r, "baseline", "affinity_lorot_i");
    let e = mean(&r, "baseline", "affinity_lorot_e");
    let id = mean(&r, "baseline", "affinity_identity");
    let (fast, time) = within(t.elapsed(), 30 * MINUTE);
    Ok(outcome(
        i - rot >= AFFINITY_GAP && e - rot >= AFFINITY_GAP && id == 100.0 && fast,
        format!("rotation {rot:.2}, LoRot-I {i:.2}, LoRot-E {e:.2}, identity {id:.2}; {time}"),
    ))
}

fn strategy_order(ctx: &Ctx) -> Check {
    let t = Instant::now();
    let r = run_recipe("strategy-table1-desk", &ctx.scale, &ctx.out, &ctx.cache)?;
    let acc = |arm| mean(&r, arm, "accuracy");
    let (base, da, mt, i, e) = (
        acc("baseline"),
        acc("rot-da"),
        acc("rot-mt"),
        acc("lorot-i-mt"),
        acc("lorot-e-mt"),
    );
    let (fast, time) = within(t.elapsed(), 45 * MINUTE);
    Ok(outcome(
        da < base && mt < base && i >= base - ACCURACY_SLACK && e >= base - ACCURACY_SLACK && fast,
        format!(
            "{}-seed means: baseline {base:.2}, Rot(DA) {da:.2}, Rot(MT) {mt:.2}, LoRot-I {i:.2}, LoRot-E {e:.2}; {time}",
            ctx.scale.seeds.len()
        ),
    ))
}

fn ood_gain(ctx: &Ctx) -> Check {
    let t = Instant::now();
    let r = run_recipe("ood-table1-desk", &ctx.scale, &ctx.out, &ctx.cache)?;
    let au = |arm, set: &str| mean(&r, arm, &format!("auroc_{set}"));
    let base = au("baseline", "textures");
    let i = au("lorot-i-mt", "textures");
    let e = au("lorot-e-mt", "textures");
    let held = [
        au("baseline", "held-out-glyphs"),
        au("lorot-i-mt", "held-out-glyphs"),
        au("lorot-e-mt", "held-out-glyphs"),
    ];
    let (fast, time) = within(t.elapsed(), 45 * MINUTE);
    Ok(outcome(
        i - base >= AUROC_GAIN && e - base >= AUROC_GAIN && fast,
        format!(
            "textures AUROC (KL to uniform): baseline {base:.2}, LoRot-I {i:.2}, LoRot-E {e:.2}; \
             held-out glyphs (not gated): {:.2} / {:.2} / {:.2}; {time}",
            held[0], held[1], held[2]
        ),
    ))
}

/// 5000 indexed placeholder images per class.
fn indexed_dataset(per_class: usize, classes: usize) -> lorot::Result<LabeledDataset> {
    let samples = (0..per_class * classes)
        .map(|i| {
            let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| if y == 0 && x == 0 { i as f32 / 65536.0 } else { 0.0 })?;
            Ok((img, i % classes))
        })
        .collect::<lorot::Result<Vec<_>>>()?;
    LabeledDataset::new("indexed", Split::Train, (0..classes).map(|c| c.to_string()).collect(), samples)
}

fn imbalance(ctx: &Ctx) -> Check {
    let t = Instant::now();
    let spec = ImbalanceSpec::exponential(0.01);
    let counts = imbalance_counts(&[5000; 10], &spec)?;
    let full = indexed_dataset(5000, 10)?;
    let lt = build_imbalanced(&full, &spec, &mut rng::stream(0, &[tag::SUBSAMPLE]))?;
    let mut ids: Vec<u32> = lt.samples().iter().map(|(img, _)| (img.data()[0] * 65536.0) as u32).collect();
    let kept_in_order = ids.windows(2).all(|w| w[0] < w[1]);
    ids.dedup();
    let builder_ok = counts == IMBALANCE_EXPECTED && lt.class_counts() == IMBALANCE_EXPECTED && kept_in_order && ids.len() == lt.len();

    let scale = RecipeScale {
        mus: vec![0.01],
        ..ctx.scale.clone()
    };
    let r = run_recipe("imbalance-mu001-desk", &scale, &ctx.out, &ctx.cache)?;
    let base = mean(&r, "baseline-mu0.01", "accuracy");
    let e = mean(&r, "lorot-e-mt-mu0.01", "accuracy");
    let (fast, time) = within(t.elapsed(), 30 * MINUTE);
    Ok(outcome(
        builder_ok && e >= base && fast,
        format!(
            "counts {:?}; {}-seed accuracy baseline {base:.2}, LoRot-E {e:.2}; {time}",
            lt.class_counts(),
            scale.seeds.len()
        ),
    ))
}

/// Trained models of a recipe, taken from the cache.
fn cached_models(ctx: &Ctx, recipe: &str) -> lorot::Result<Vec<(String, std::sync::Arc<TrainOutcome>)>> {
    let mut out = Vec::new();
    for cfg in recipe_plan(recipe, &ctx.scale, &ctx.out.join(recipe))? {
        let train = training_set(&cfg)?;
        let spec = cfg.model.spec_for(&train, cfg.training.pretext.num_classes())?;
        let tcfg = lorot::train::TrainingConfig {
            seed: cfg.seeds[0],
            ..cfg.training.clone()
        };
        out.push((cfg.name.clone(), ctx.cache.train(&tcfg, &spec, &train)?));
    }
    Ok(out)
}

fn pgd(ctx: &Ctx) -> Check {
    let models = cached_models(ctx, "strategy-table1-desk")?;
    let t = Instant::now();
    let cfg = &recipe_plan("strategy-table1-desk", &ctx.scale, &ctx.out)?[0];
    let test = cfg.data.registry()?.load(&cfg.data.test, Split::Test)?;
    let test = test.take(ctx.scale.adv_test_count.min(test.len()));
    let adv = AdversarialConfig::default();
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for (name, run) in &models {
        let rep = eval_adversarial(&run.model, &test, &adv, 20, 0)?;
        if rep.robust_accuracy > rep.clean_accuracy || rep.max_linf > EPSILON {
            problems.push(format!("{name}: {rep:?}"));
        }
        summary.push(format!("{name} {:.1}/{:.1}", rep.clean_accuracy, rep.robust_accuracy));
    }
    // direct feasibility and the ε = 0 degeneracy on raw attack output
    let model = &models[0].1.model;
    let images: Vec<ImageTensor> = test.samples().iter().map(|(i, _)| i.clone()).collect();
    let labels = test.labels();
    let attack = PgdConfig {
        epsilon: EPSILON,
        alpha: 2.0 / 255.0,
        steps: 20,
        random_start: true,
    };
    let attacked = pgd_attack(model, &images, &labels, &attack, &mut rng::stream(9, &[tag::ATTACK]))?;
    let mut worst = 0.0f64;
    let mut out_of_range = 0usize;
    for (a, x) in attacked.iter().zip(&images) {
        for (&p, &q) in a.data().iter().zip(x.data()) {
            worst = worst.max((f64::from(p) - f64::from(q)).abs());
            out_of_range += !(0.0..=1.0).contains(&p) as usize;
        }
    }
    let zero = pgd_attack(
        model,
        &images,
        &labels,
        &PgdConfig {
            epsilon: 0.0,
            ..attack
        },
        &mut rng::stream(9, &[tag::ATTACK]),
    )?;
    let exact = zero.iter().zip(&images).all(|(a, x)| {
        a.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    if worst > EPSILON || out_of_range > 0 {
        problems.push(format!("raw attack: max ℓ∞ {worst:e}, {out_of_range} values outside [0, 1]"));
    }
    if !exact {
        problems.push("ε = 0 changed inputs".into());
    }
    let (fast, time) = within(t.elapsed(), 5 * MINUTE);
    Ok(outcome(
        problems.is_empty() && fast,
        format!(
            "{} models on {} images, clean/robust(PGD-20): {}; max ℓ∞ {:.5} (ε {:.5}); ε=0 bit-exact {exact}{}; {time}",
            models.len(),
            test.len(),
            summary.join(", "),
            worst,
            EPSILON,
            problems.first().map(|p| format!("; {p}")).unwrap_or_default()
        ),
    ))
}

fn lambda_robustness(ctx: &Ctx) -> Check {
    let t = Instant::now();
    let r = run_recipe("lambda-sweep-desk", &ctx.scale, &ctx.out, &ctx.cache)?;
    let accs: Vec<f64> = ctx
        .scale
        .lambdas
        .iter()
        .map(|l| mean(&r, &format!("lorot-i-mt-lambda{l}"), "accuracy"))
        .collect();
    let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let (fast, time) = within(t.elapsed(), 45 * MINUTE);
    let shown: Vec<String> = ctx.scale.lambdas.iter().zip(&accs).map(|(l, a)| format!("λ={l}: {a:.2}")).collect();
    Ok(outcome(
        spread < LAMBDA_SPREAD && fast,
        format!("{}; spread {spread:.2}; {time}", shown.join(", ")),
    ))
}

fn determinism(root: &Path) -> Check {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let scale = RecipeScale::smoke();
    let mut diffs = Vec::new();
    for name in recipe_names() {
        let run = |dir: &str| pool.install(|| run_recipe(name, &scale, &root.join(dir), &RunCache::new()));
        let (a, b) = (run("first")?, run("second")?);
        if a.checksum() != b.checksum() || a.histories != b.histories || a.histories.is_empty() {
            diffs.push(name.to_string());
        }
    }
    Ok(outcome(
        diffs.is_empty(),
        format!(
            "{} smoke-scale recipes rerun with fresh caches on one worker; differing: {:?}",
            recipe_names().len(),
            diffs
        ),
    ))
}

fn main() -> ExitCode {
    let scale = match std::env::var("LOROT_ACCEPTANCE_SCALE").as_deref() {
        Ok("smoke") => RecipeScale::smoke(),
        _ => RecipeScale::desk(),
    };
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    let ctx = Ctx {
        scale,
        out: root.join("recipes"),
        cache: RunCache::new(),
    };
    println!("acceptance: {} images/arm, {} epochs, seeds {:?}", ctx.scale.train_count, ctx.scale.epochs, ctx.scale.seeds);
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("transform correctness", Box::new(transforms)),
        ("multitask gradient check", Box::new(gradients)),
        ("AUROC oracle equivalence", Box::new(auroc_oracle)),
        ("affinity gap", Box::new(|| affinity_gap(&ctx))),
        ("strategy ordering", Box::new(|| strategy_order(&ctx))),
        ("OOD improvement", Box::new(|| ood_gain(&ctx))),
        ("imbalance builder and training", Box::new(|| imbalance(&ctx))),
        ("PGD feasibility and degeneracy", Box::new(|| pgd(&ctx))),
        ("λ robustness", Box::new(|| lambda_robustness(&ctx))),
        ("determinism", Box::new(|| determinism(&root.join("determinism")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += !o.pass as usize;
        println!("{} [{:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
