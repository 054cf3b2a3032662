//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

use std::sync::Arc;
use std::time::Instant;

use granu::checkpoint::Checkpoint;
use granu::dataset::Dataset;
use granu::eval::{evaluate, score_click, EvalConfig};
use granu::mask::{box_of, Grid};
use granu::matching::{hungarian_totals, match_click, CostWeights, Strategy};
use granu::net::{Forward, Model, ModelConfig};
use granu::objective::{gating, loss_for_box_prompt, loss_for_click, require, GtCount, LossKind, LossWeights};
use granu::prompt::{click_to_anchor, noise_box, PromptKind, DEFAULT_CLICK_EPS};
use granu::scene::{generate, stacks_for, ConceptVocab, DataSample, DataType, GranularityStack, SceneConfig};
use granu::trainer::{matching_stack, step_rng, TrainConfig};
use granu_cli::commands::{ablate, Ablation, gen_dataset, heldout_scenes, train, train_config_for, GenConfig};
use granu_cli::server::{router, AppState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn brute_force(c: &Array2<f64>) -> f64 {
    fn go(c: &Array2<f64>, row: usize, used: &mut [bool], need: usize) -> f64 {
        if need == 0 {
            return 0.0;
        }
        if c.nrows() - row < need {
            return f64::INFINITY;
        }
        let mut best = go(c, row + 1, used, need);
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                best = best.min(c[[row, j]] + go(c, row + 1, used, need - 1));
                used[j] = false;
            }
        }
        best
    }
    let need = c.nrows().min(c.ncols());
    go(c, 0, &mut vec![false; c.ncols()], need)
}

fn assignment_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for k in 0..1000 {
        let (n, m) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        // small integer costs make ties common
        let hi = if k % 2 == 0 { 4 } else { 100 };
        let c = Array2::from_shape_fn((n, m), |_| rng.gen_range(0..hi) as f64);
        let a = hungarian_totals(&c).unwrap();
        let total: f64 = a.pairs.iter().map(|&(i, j)| c[[i, j]]).sum();
        if a.pairs.len() != n.min(m) || total != brute_force(&c) || a.cost != total {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatches in 1000 matrices up to 7x7, {secs:.2}s"),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let grid = Grid::square(16).unwrap();
    let cfg = ModelConfig {
        grid,
        width: 16,
        concept_width: 8,
        ffn_width: 16,
        color_width: 8,
        ..ModelConfig::tiny(5, 7)
    };
    let model = Model::init(cfg, 5).unwrap();
    let scene = SceneConfig {
        grid,
        data_type: DataType::PartLevel,
        instances: (1, 1),
        object_size: (10, 14),
        part_prob: 1.0,
        ..SceneConfig::default()
    };
    let sample = generate(&scene, 3).unwrap();
    let stack = stacks_for(&sample, 1, 0).remove(0);
    let stack = matching_stack(stack, DataType::PartLevel, &mut step_rng(0, 0));
    let (cx, cy) = grid.center_of(stack.click);
    let anchor = click_to_anchor(cx, cy, DEFAULT_CLICK_EPS).unwrap();
    let target = stack.levels[0].clone();
    let noisy = noise_box(box_of(&target.mask).unwrap(), 0.2, 9).unwrap();
    let assignment = {
        let mut f = Forward::new(&model);
        let enc = f.encode_image(&sample.image).unwrap();
        let dec = f.decode(&enc, anchor, PromptKind::Click).unwrap();
        let preds = dec.predictions(&f);
        match_click(&preds, &stack, Strategy::ManyToMany, DataType::PartLevel, CostWeights::default())
            .unwrap()
            .1
    };
    // the confidence target is a stop-gradient function of the outputs
    let weights = LossWeights {
        confidence: 0.0,
        ..LossWeights::default()
    };
    let loss = |m: &Model, grads: bool| {
        let mut f = Forward::new(m);
        let enc = f.encode_image(&sample.image).unwrap();
        let dec = f.decode(&enc, anchor, PromptKind::Click).unwrap();
        let click = loss_for_click(&mut f, &dec, &stack.levels, &assignment, DataType::PartLevel, &weights).unwrap();
        let bdec = f.decode(&enc, noisy, PromptKind::Box).unwrap();
        let boxed = loss_for_box_prompt(&mut f, &bdec, &target, DataType::PartLevel, &weights).unwrap();
        let total = f.tape.add(click.total, boxed.total).unwrap();
        (f.tape.scalar(total), grads.then(|| f.backward(total).unwrap()))
    };
    let grads = loss(&model, true).1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for _ in 0..200 {
        let slot = rng.gen_range(0..model.params().len());
        let (r, c) = model.params().value(slot).dim();
        let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let analytic = grads.get(slot).map_or(0.0, |g| g[[i, j]]);
        let mut plus = model.clone();
        plus.params_mut().values_mut()[slot][[i, j]] += h;
        let mut minus = model.clone();
        minus.params_mut().values_mut()[slot][[i, j]] -= h;
        let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{}[{i},{j}]", model.params().name(slot));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e} at {worst_at} over 200 coordinates, {secs:.1}s"),
    )
}

fn gating_table() -> Outcome {
    let expect = [
        (DataType::ClassAgnostic, [false, false, true, true], GtCount::Many),
        (DataType::ObjectLevel, [false, true, true, true], GtCount::One),
        (DataType::PartLevel, [true, true, true, true], GtCount::One),
    ];
    let model = Model::init(ModelConfig::tiny(5, 7), 1).unwrap();
    let grid = model.config().grid;
    let mut cells = 0;
    let mut wrong = Vec::new();
    for (dt, want, count) in expect {
        let sample = generate(
            &SceneConfig {
                grid,
                data_type: dt,
                instances: (1, 1),
                object_size: (6, 8),
                part_prob: 1.0,
                ..SceneConfig::default()
            },
            4,
        )
        .unwrap();
        // the losses a real sample of this type produces; labeled samples
        // are matched against their finest level so a part-level sample
        // exercises the part head
        let stack = stacks_for(&sample, 1, 0).remove(0);
        let stack = match gating(dt).gt_in_matching {
            GtCount::Many => stack,
            GtCount::One => GranularityStack::single(stack.click, stack.smallest().clone()),
        };
        let (cx, cy) = grid.center_of(stack.click);
        let mut f = Forward::new(&model);
        let enc = f.encode_image(&sample.image).unwrap();
        let dec = f.decode(&enc, click_to_anchor(cx, cy, DEFAULT_CLICK_EPS).unwrap(), PromptKind::Click).unwrap();
        let preds = dec.predictions(&f);
        let (_, a) = match_click(&preds, &stack, Strategy::ManyToMany, dt, CostWeights::default()).unwrap();
        let r = loss_for_click(&mut f, &dec, &stack.levels, &a, dt, &LossWeights::default())
            .unwrap()
            .report;
        let active = [r.part_cls > 0.0, r.object_cls > 0.0, r.box_l1 + r.box_giou > 0.0, r.mask_bce + r.mask_dice > 0.0];
        let g = gating(dt);
        for (k, kind) in [LossKind::Part, LossKind::Object, LossKind::Box, LossKind::Mask].into_iter().enumerate() {
            cells += 1;
            if g.allows(kind) != want[k] || require(dt, kind).is_ok() != want[k] || active[k] != want[k] {
                wrong.push(format!("{dt:?}/{kind:?}"));
            }
        }
        if g.gt_in_matching != count {
            wrong.push(format!("{dt:?}/matching"));
        }
    }
    check(wrong.is_empty(), format!("{cells} cells checked on one sample per data type, wrong: {wrong:?}"))
}

fn metric_identities(models: &[(&str, &Model, bool)], held: &[DataSample]) -> Outcome {
    let (mut clicks, mut depth1, mut bad) = (0, 0, 0);
    for (_, model, labeled) in models {
        for (i, s) in held.iter().enumerate() {
            let stacks = stacks_for(s, 8, i as u64);
            let anchors: Vec<_> = stacks
                .iter()
                .map(|st| {
                    let (x, y) = s.grid.center_of(st.click);
                    click_to_anchor(x, y, DEFAULT_CLICK_EPS).unwrap()
                })
                .collect();
            let preds = model.predict_many(&s.image, &anchors, PromptKind::Click).unwrap();
            for (p, st) in preds.iter().zip(&stacks) {
                let c = score_click(p, st, *labeled, 0.5).unwrap();
                clicks += 1;
                if c.point_oracle < c.point_max {
                    bad += 1;
                }
                if st.depth() == 1 {
                    depth1 += 1;
                    if c.all_granularity != c.point_oracle {
                        bad += 1;
                    }
                }
            }
        }
    }
    let names: Vec<&str> = models.iter().map(|m| m.0).collect();
    check(
        bad == 0 && depth1 > 0,
        format!("{clicks} clicks ({depth1} at depth 1) on {names:?} models, {bad} violations"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = gen_dataset(&GenConfig {
        count: 1,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 500,
        lr: 3e-3,
        ..train_config_for(&data)
    };
    let ck = train(&cfg, &data).unwrap().checkpoint;
    let r = evaluate(&ck.model, ck.labeled, &data.samples, &EvalConfig::default()).unwrap();
    check(
        r.all_granularity_1iou > 0.9,
        format!(
            "mean matched mask IoU {:.4} over {} clicks on the training scene after 500 steps (oracle {:.4}), {:.0}s",
            r.all_granularity_1iou,
            r.n_clicks,
            r.point_oracle_1iou,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn part_transfer() -> Outcome {
    let start = Instant::now();
    let withheld = 1;
    let data = gen_dataset(&GenConfig {
        count: 300,
        mixture: [1.0 / 3.0; 3],
        withhold_parts_for: Some(withheld),
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 2500,
        stage1_fraction: 0.2,
        mixture: [0.2, 0.2, 0.6],
        ..TrainConfig::default()
    };
    let ck = train(&cfg, &data).unwrap().checkpoint;
    let held = heldout_scenes(0, 80, DataType::PartLevel).unwrap();
    let eval = EvalConfig {
        transfer_object: Some(withheld),
        ..EvalConfig::default()
    };
    let r = evaluate(&ck.model, ck.labeled, &held, &eval).unwrap();
    let t = r.part_transfer.unwrap();
    check(
        t.clicks > 0 && t.accuracy >= 2.0 * t.chance,
        format!(
            "top-1 part accuracy {:.4} on {} parts of withheld object {:?} vs chance {:.4} (needs {:.4}), {:.0}s",
            t.accuracy,
            t.clicks,
            data.vocab.object_name(withheld),
            t.chance,
            2.0 * t.chance,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn determinism(ck: &Checkpoint) -> Outcome {
    let data = gen_dataset(&GenConfig {
        count: 6,
        seed: 3,
        mixture: [0.5, 0.25, 0.25],
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 25,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &data).unwrap().checkpoint.to_bytes();
    let b = train(&cfg, &data).unwrap().checkpoint.to_bytes();
    let same_ckpt = a == b;

    let serve_data = Dataset::new(ck.vocab.clone(), heldout_scenes(0, 8, DataType::ClassAgnostic).unwrap());
    let state = Arc::new(AppState::new(&ck.to_bytes(), serve_data).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (serial, burst) = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}/click", listener.local_addr().unwrap());
        let app = router(state);
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        let c = reqwest::Client::new();
        let body = |i: usize| serde_json::json!({"scene": i % 8, "x": (i as f64 + 0.5) / 32.0, "y": 0.5});
        let mut serial = Vec::new();
        for i in 0..32 {
            let r = c.post(&url).json(&body(i)).send().await.unwrap();
            serial.push((r.status().as_u16(), r.text().await.unwrap()));
        }
        let tasks: Vec<_> = (0..32)
            .map(|i| {
                let (c, url, b) = (c.clone(), url.clone(), body(i));
                tokio::spawn(async move {
                    let r = c.post(url).json(&b).send().await.unwrap();
                    (r.status().as_u16(), r.text().await.unwrap())
                })
            })
            .collect();
        let mut burst = Vec::new();
        for t in tasks {
            burst.push(t.await.unwrap());
        }
        (serial, burst)
    });
    let ok = serial.iter().all(|r| r.0 == 200);
    let same_serve = serial == burst;
    check(
        same_ckpt && ok && same_serve,
        format!(
            "repeat training bit-identical: {same_ckpt}; 32 concurrent clicks all 200: {ok}, identical to serial replay: {same_serve}"
        ),
    )
}

struct AblationRun {
    ablation: Ablation,
    held: Vec<DataSample>,
    seconds: f64,
}

fn ablation_run() -> AblationRun {
    let start = Instant::now();
    let data = gen_dataset(&GenConfig {
        count: 200,
        ..GenConfig::default()
    })
    .unwrap();
    let held = heldout_scenes(0, 60, DataType::ClassAgnostic).unwrap();
    let ablation = ablate(
        &train_config_for(&data),
        &data,
        &held,
        &EvalConfig::default(),
        &[Strategy::ManyToOne, Strategy::ManyToMany],
    )
    .unwrap();
    for line in ablation.to_table().lines() {
        println!("    {line}");
    }
    AblationRun {
        ablation,
        held,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn strategy_gap(run: &AblationRun) -> Outcome {
    let m2o = &run.ablation.arm(Strategy::ManyToOne).unwrap().report;
    let m2m = &run.ablation.arm(Strategy::ManyToMany).unwrap().report;
    let gap = m2m.all_granularity_deep_1iou - m2o.all_granularity_deep_1iou;
    check(
        gap >= 0.10 && run.seconds < 300.0,
        format!(
            "all-granularity 1-IoU on {} depth>=2 clicks: many2many {:.4} vs many2one {:.4}, gap {:.1} points, {:.0}s",
            m2m.deep_clicks,
            m2m.all_granularity_deep_1iou,
            m2o.all_granularity_deep_1iou,
            gap * 100.0,
            run.seconds
        ),
    )
}

fn level_ordering(run: &AblationRun) -> Outcome {
    let r = &run.ablation.arm(Strategy::ManyToMany).unwrap().report;
    check(
        r.level_order_pairs > 0 && r.level_order_rate < 0.5,
        format!(
            "{} of {} confident output pairs out of area order ({:.4}) for the many2many model",
            r.level_order_violations, r.level_order_pairs, r.level_order_rate
        ),
    )
}

fn identities_after_training(run: &AblationRun) -> Outcome {
    let untrained = Model::init(ModelConfig::for_vocab(&ConceptVocab::default()), 0).unwrap();
    let mut models = vec![("untrained", &untrained, false)];
    for arm in &run.ablation.arms {
        models.push((arm.strategy.name(), &arm.checkpoint.model, arm.checkpoint.labeled));
    }
    metric_identities(&models, &run.held)
}

const CRITERIA: [&str; 9] = [
    "assignment oracle",
    "gradient fidelity",
    "loss gating table",
    "matching strategy ablation",
    "metric identities",
    "single-sample overfit",
    "part concept transfer",
    "level ordering",
    "determinism",
];

/// Criteria scored on the two models the ablation trains.
const USES_ABLATION: [&str; 4] = ["matching strategy ablation", "metric identities", "level ordering", "determinism"];

/// Runs every criterion, or those whose names contain one of the positional arguments.
fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // cargo passes libtest flags such as --list; this harness only runs
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    println!("acceptance suite");
    let mut run: Option<AblationRun> = None;
    let mut results: Vec<(&str, bool)> = Vec::new();
    for name in CRITERIA.into_iter().filter(|n| wanted(n)) {
        if run.is_none() && USES_ABLATION.contains(&name) {
            run = Some(ablation_run());
        }
        let o = match name {
            "assignment oracle" => assignment_oracle(),
            "gradient fidelity" => gradient_fidelity(),
            "loss gating table" => gating_table(),
            "matching strategy ablation" => strategy_gap(run.as_ref().unwrap()),
            "metric identities" => identities_after_training(run.as_ref().unwrap()),
            "single-sample overfit" => overfit(),
            "part concept transfer" => part_transfer(),
            "level ordering" => level_ordering(run.as_ref().unwrap()),
            _ => determinism(&run.as_ref().unwrap().ablation.arm(Strategy::ManyToMany).unwrap().checkpoint),
        };
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o.pass));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
