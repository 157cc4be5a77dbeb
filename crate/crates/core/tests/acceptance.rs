//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unicon::adapters::{lora_forward, AdapterRegistry, LoraModule, RoutingKey};
use unicon::foundation::FrozenFoundation;
use unicon::heads::{deephit_loss, mtlr_loss, DeepHitParams, SurvivalRecord, TAIL_EPS};
use unicon::metrics::{concordance_index, dice_score};
use unicon::optim::AdamWConfig;
use unicon::params::{Binder, Parameters};
use unicon::tasks::{
    build_prognosis, build_seg_ct, build_seg_ctpet, class_prompt_ids, image_features,
    prognosis_forward, prognosis_reference, report_tokenizer, route_output, segmentation_reference,
    CaseInput, PrognosisInputs, PrognosisPlan, SegmentationPlan,
};
use unicon::trainer::config::{Step1Section, Step2Section, Step3Section};
use unicon::trainer::sequence::{audit_routes, prognosis_dataset, segmentation_dataset};
use unicon::trainer::{
    parse_config, run_sequence, train_prognosis, train_segmentation, PrognosisTrainConfig,
    RunConfig, SegmentationTrainConfig, SequenceOutcome,
};
use unicon::verify::gradcheck_suite;
use unicon::{Tape, Tensor};

const SEED: u64 = 0;
const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.cfg");

fn report(n: usize, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2}: {verdict} ({:.1} s) {detail}",
        elapsed.as_secs_f64()
    );
}

fn default_config() -> RunConfig {
    parse_config("[step1]\n[step2]\n[step3]\n", &[]).unwrap()
}

fn toy_config() -> RunConfig {
    parse_config(&std::fs::read_to_string(TOY).unwrap(), &[]).unwrap()
}

/// Default-size base pre-trained at 32³, shared by every criterion that needs it.
fn base() -> &'static FrozenFoundation {
    static BASE: OnceLock<FrozenFoundation> = OnceLock::new();
    BASE.get_or_init(|| {
        let cfg = parse_config("", &[]).unwrap();
        run_sequence(&cfg, SEED, None).unwrap().model
    })
}

fn toy_run() -> &'static SequenceOutcome {
    static RUN: OnceLock<SequenceOutcome> = OnceLock::new();
    RUN.get_or_init(|| run_sequence(&toy_config(), 7, None).unwrap())
}

fn prompts(model: &FrozenFoundation) -> Vec<Vec<usize>> {
    class_prompt_ids(&report_tokenizer(model).unwrap())
}

fn prognosis_plan(s1: &Step1Section) -> PrognosisPlan {
    PrognosisPlan {
        model: s1.model,
        bins: s1.bins,
        rank: s1.rank,
        alpha: s1.alpha,
        hidden: s1.hidden,
    }
}

fn segmentation_plan(s2: &Step2Section, resolution: usize) -> SegmentationPlan {
    SegmentationPlan {
        shape: [resolution; 3],
        patch: s2.patch,
        rank: s2.rank,
        alpha: s2.alpha,
        decoder_init_std: s2.decoder_init_std,
    }
}

fn seg_train_config(steps: usize, lr: f64, wd: f64) -> SegmentationTrainConfig {
    SegmentationTrainConfig {
        optim: AdamWConfig::new(lr, wd),
        steps,
        ..SegmentationTrainConfig::default()
    }
}

#[test]
fn criterion_01_fresh_compositions_reproduce_the_frozen_baseline() {
    let model = base();
    let mut cfg = default_config();
    cfg.data.prognosis_cases = 6;
    cfg.data.segmentation_cases = 6;
    let s1 = cfg.step1.clone().unwrap();
    let s2 = cfg.step2.clone().unwrap();
    let s3 = cfg.step3.clone().unwrap();
    let prompts = prompts(model);
    let t = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (_, prog_probes) = prognosis_dataset(&cfg, SEED, model).unwrap();
    let seg = segmentation_dataset(&cfg, SEED, model, s2.resolution).unwrap();
    assert_eq!(prog_probes.len(), 16);
    assert_eq!(seg.probes.len(), 16);

    let cls = RoutingKey::classification();
    let mut registry = AdapterRegistry::base();
    let cls_before: Vec<Tensor> = prog_probes
        .iter()
        .map(|x| route_output(model, &registry.route(&cls).unwrap(), x, &prompts).unwrap())
        .collect();

    let mut mismatches = Vec::new();
    let vols: Vec<&Tensor> = prog_probes.iter().map(|x| &x.ct).collect();
    let images = image_features(model, &vols).unwrap();
    let texts: Vec<Vec<usize>> = prog_probes.iter().map(|x| x.text.clone()).collect();
    let mut prog = None;
    for mode in [
        PrognosisInputs::ImageText,
        PrognosisInputs::TextOnly,
        PrognosisInputs::ImageOnly,
    ] {
        let comp = build_prognosis(model, &prognosis_plan(&s1), &mut rng).unwrap();
        let mut tape = Tape::new();
        let y = prognosis_forward(
            &mut tape,
            &mut Binder::frozen(),
            &mut Binder::frozen(),
            model,
            &comp,
            mode.image().then_some(&images),
            mode.text().then_some(&texts[..]),
        )
        .unwrap();
        let reference =
            prognosis_reference(model, &comp, texts.len(), mode.text().then_some(&texts[..]))
                .unwrap();
        if tape.value(y) != &reference {
            mismatches.push(format!("prognosis {mode:?}"));
        }
        prog.get_or_insert(comp);
    }

    let seg_ct = build_seg_ct(model, &segmentation_plan(&s2, s2.resolution), &mut rng).unwrap();
    let plan3 = SegmentationPlan {
        rank: s3.rank,
        alpha: s3.alpha,
        ..segmentation_plan(&s2, s2.resolution)
    };
    let seg_ctpet = build_seg_ctpet(model, &seg_ct, &plan3, s3.hidden, &mut rng).unwrap();
    for comp in [&seg_ct, &seg_ctpet] {
        for x in &seg.probes {
            let y = route_output(model, comp, x, &prompts).unwrap();
            if y != segmentation_reference(model, comp, &x.ct).unwrap() {
                mismatches.push(comp.key.label());
                break;
            }
        }
    }

    registry
        .register(RoutingKey::prognosis(), prog.unwrap())
        .unwrap();
    registry.register(RoutingKey::seg_ct(), seg_ct).unwrap();
    registry
        .register(RoutingKey::seg_ctpet(), seg_ctpet)
        .unwrap();
    let cls_after: Vec<Tensor> = prog_probes
        .iter()
        .map(|x| route_output(model, &registry.route(&cls).unwrap(), x, &prompts).unwrap())
        .collect();
    if cls_after != cls_before {
        mismatches.push("Cls".into());
    }

    let elapsed = t.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(10);
    report(
        1,
        pass,
        elapsed,
        &format!("16 probes, 3 prognosis modes, Seg(C), Seg(CP), Cls; mismatches {mismatches:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_lora_matches_dense_update() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..24);
        let h = rng.random_range(2..24);
        let n = rng.random_range(1..8);
        let rank = rng.random_range(1..=d.min(h) / 2);
        let lora = LoraModule {
            target: "w".into(),
            rank,
            alpha: rng.random_range(0.5..16.0),
            down: Tensor::randn(&[d, rank], 1.0, &mut rng),
            up: Tensor::randn(&[rank, h], 1.0, &mut rng),
        };
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let w = Tensor::randn(&[d, h], 1.0, &mut rng);

        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(&x).unwrap(), tape.constant(&w).unwrap());
        let (dv, uv) = (
            tape.constant(&lora.down).unwrap(),
            tape.constant(&lora.up).unwrap(),
        );
        let y = lora_forward(&mut tape, xv, wv, dv, uv, &lora).unwrap();

        let s = lora.alpha / rank as f64;
        let mut dense = vec![0.0; d * h];
        for i in 0..d {
            for j in 0..h {
                let low: f64 = (0..rank)
                    .map(|r| lora.down.data()[i * rank + r] * lora.up.data()[r * h + j])
                    .sum();
                dense[i * h + j] = w.data()[i * h + j] + s * low;
            }
        }
        for a in 0..n {
            for j in 0..h {
                let want: f64 = (0..d).map(|i| x.data()[a * d + i] * dense[i * h + j]).sum();
                worst = worst.max((tape.value(y).data()[a * h + j] - want).abs());
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-12 && elapsed < Duration::from_secs(5);
    report(
        2,
        pass,
        elapsed,
        &format!("100 instances, max abs diff {worst:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let t = Instant::now();
    let checks = gradcheck_suite(20).unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.pass())
        .map(|c| c.family.as_str())
        .collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let composed = checks.iter().filter(|c| c.composed).count();
    let pass = failed.is_empty()
        && checks.iter().all(|c| c.seeds >= 20)
        && elapsed < Duration::from_secs(120);
    report(
        3,
        pass,
        elapsed,
        &format!(
            "{} op families, {composed} composed paths, 20 seeds, worst rel error {worst:.2e}, failed {failed:?}",
            checks.len() - composed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_earlier_routes_never_move() {
    let t = Instant::now();
    let out = toy_run();
    let model = &out.model;
    let prompts = prompts(model);
    let mut problems = Vec::new();

    if out.audits.len() != 3 {
        problems.push(format!("{} audits", out.audits.len()));
    }
    for (i, a) in out.audits.iter().enumerate() {
        if a.after_step != i + 1 || a.routes.len() != i + 1 {
            problems.push(format!(
                "audit {i} covers {} routes after step {}",
                a.routes.len(),
                a.after_step
            ));
        }
        if !a.pass || a.routes.iter().any(|r| r.max_abs_deviation != 0.0) {
            problems.push(format!("audit after step {} deviated", a.after_step));
        }
    }

    // Fault injection: one prognosis array nudged by 1e-9.
    let mut tampered = AdapterRegistry::new();
    for (key, comp) in out.registry.iter() {
        let mut c = (**comp).clone();
        if *key == RoutingKey::prognosis() {
            let mut done = false;
            c.visit_mut(&mut |_, t| {
                if !done {
                    t.data_mut()[0] += 1e-9;
                    done = true;
                }
            });
        }
        tampered.register(*key, c).unwrap();
    }
    let audit = audit_routes(model, &tampered, &out.probes, 3, &prompts).unwrap();
    let dev: BTreeMap<String, f64> = audit
        .routes
        .iter()
        .map(|r| (r.route.clone(), r.max_abs_deviation))
        .collect();
    let prog_dev = dev[&RoutingKey::prognosis().to_string()];
    if audit.pass || prog_dev == 0.0 {
        problems.push("perturbed prognosis composition went unnoticed".into());
    }
    if audit
        .routes
        .iter()
        .filter(|r| r.route != RoutingKey::prognosis().to_string())
        .any(|r| !r.pass)
    {
        problems.push("perturbation leaked into other routes".into());
    }

    // Fault injection: one base weight nudged.
    let mut edited = model.clone().into_unfrozen();
    let name = edited.params().iter().next().unwrap().0.clone();
    edited
        .params_mut()
        .unwrap()
        .get_mut(&name)
        .unwrap()
        .data_mut()[0] += 1e-6;
    edited.freeze();
    let base_audit = audit_routes(&edited, &out.registry, &out.probes, 3, &prompts).unwrap();
    if base_audit.pass {
        problems.push("edited base went unnoticed".into());
    }
    if edited.base_hash() == model.base_hash() {
        problems.push("edited base kept its hash".into());
    }

    let elapsed = t.elapsed();
    let pass = problems.is_empty() && elapsed < Duration::from_secs(60);
    report(
        4,
        pass,
        elapsed,
        &format!(
            "3 audits at deviation 0; injected deviation {prog_dev:.2e}; problems {problems:?}"
        ),
    );
    assert!(pass);
}

/// `O(n²)` pair enumeration.
fn c_index_oracle(risk: &[f64], time: &[f64], event: &[bool]) -> Option<f64> {
    let (mut score, mut pairs) = (0.0, 0.0);
    for i in 0..risk.len() {
        for j in 0..risk.len() {
            if event[i] && time[i] < time[j] {
                pairs += 1.0;
                score += match risk[i].partial_cmp(&risk[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| score / pairs)
}

/// Log-likelihood of one record under an event-bin distribution.
fn record_log_lik(pi: &[f64], r: &SurvivalRecord) -> f64 {
    if r.event {
        pi[r.bin].ln()
    } else if r.bin + 1 < pi.len() {
        pi[r.bin + 1..].iter().sum::<f64>().ln()
    } else {
        TAIL_EPS.ln()
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Enumerates the monotone 0/1 sequences over `K−1` thresholds; the
/// sequence whose first 1 sits at `j` (or none, `j = K−1`) is bin `j`.
fn mtlr_oracle(scores: &[Vec<f64>], records: &[SurvivalRecord]) -> f64 {
    let km1 = scores[0].len();
    let mut total = 0.0;
    for (s, r) in scores.iter().zip(records) {
        let mut by_bin = vec![0.0; km1 + 1];
        for bits in 0u32..(1 << km1) {
            let y: Vec<u32> = (0..km1).map(|i| (bits >> i) & 1).collect();
            if y.windows(2).any(|w| w[0] > w[1]) {
                continue;
            }
            let bin = y.iter().position(|&b| b == 1).unwrap_or(km1);
            by_bin[bin] = y.iter().zip(s).map(|(&b, v)| b as f64 * v).sum();
        }
        total -= record_log_lik(&softmax(&by_bin), r);
    }
    total / records.len() as f64
}

fn deephit_oracle(logits: &[Vec<f64>], records: &[SurvivalRecord], p: DeepHitParams) -> f64 {
    let pis: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let nll = -pis
        .iter()
        .zip(records)
        .map(|(pi, r)| record_log_lik(pi, r))
        .sum::<f64>()
        / records.len() as f64;
    let cdf = |i: usize, k: usize| pis[i][..=k].iter().sum::<f64>();
    let (mut rank, mut pairs) = (0.0, 0usize);
    for (i, ri) in records.iter().enumerate() {
        for (j, rj) in records.iter().enumerate() {
            if ri.event && ri.time < rj.time {
                rank += (-(cdf(i, ri.bin) - cdf(j, ri.bin)) / p.sigma).exp();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        nll
    } else {
        nll + p.lambda_rank * rank / pairs as f64
    }
}

fn random_records(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<SurvivalRecord> {
    (0..n)
        .map(|_| {
            let bin = rng.random_range(0..k);
            SurvivalRecord {
                time: bin as f64 + rng.random_range(0.1..1.0),
                event: rng.random_bool(0.6),
                bin,
            }
        })
        .collect()
}

#[test]
fn criterion_05_metrics_and_losses_match_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut problems = Vec::new();

    let mut cohorts = 0;
    while cohorts < 200 {
        let n = rng.random_range(2..40);
        // Small value ranges force tied times and tied risks.
        let time: Vec<f64> = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let risk: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 * 0.25)
            .collect();
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|i| SurvivalRecord {
                time: time[i],
                event: event[i],
                bin: 0,
            })
            .collect();
        match (
            c_index_oracle(&risk, &time, &event),
            concordance_index(&risk, &records),
        ) {
            (Some(want), Ok(got)) if want == got => cohorts += 1,
            (None, Err(_)) => {}
            (want, got) => {
                problems.push(format!("C-index {want:?} vs {got:?}"));
                cohorts += 1;
            }
        }
    }

    for pair in 0..200 {
        let shape = [
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..6),
        ];
        let (dp, dt) = if pair % 20 == 0 {
            (0.0, 0.0)
        } else {
            (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        };
        let numel = shape.iter().product::<usize>();
        let pred: Vec<bool> = (0..numel).map(|_| rng.random_bool(dp)).collect();
        let truth: Vec<bool> = (0..numel).map(|_| rng.random_bool(dt)).collect();
        let both = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let sizes = pred.iter().filter(|a| **a).count() + truth.iter().filter(|b| **b).count();
        let want = if sizes == 0 {
            1.0
        } else {
            2.0 * both as f64 / sizes as f64
        };
        let as_tensor =
            |m: &[bool]| Tensor::new(&shape, m.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let got = dice_score(&as_tensor(&pred), &as_tensor(&truth)).unwrap();
        if got != want {
            problems.push(format!("Dice {want} vs {got}"));
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..=4);
        let b = rng.random_range(1..=5);
        let records = random_records(&mut rng, b, k);

        let scores: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..k - 1).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let v = tape
            .constant(&Tensor::new(&[b, k - 1], scores.concat()).unwrap())
            .unwrap();
        let loss = mtlr_loss(&mut tape, v, &records).unwrap().loss;
        let got = tape.value(loss).item();
        worst = worst.max((got - mtlr_oracle(&scores, &records)).abs());

        let params = DeepHitParams {
            // Below the default 0.1 the ranking term reaches 1e5 and an
            // absolute 1e-10 is finer than one ulp.
            sigma: rng.random_range(0.1..1.0),
            lambda_rank: rng.random_range(0.0..1.0),
        };
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let v = tape
            .constant(&Tensor::new(&[b, k], logits.concat()).unwrap())
            .unwrap();
        let loss = deephit_loss(&mut tape, v, &records, params).unwrap().loss;
        let got = tape.value(loss).item();
        worst = worst.max((got - deephit_oracle(&logits, &records, params)).abs());
    }
    if worst >= 1e-10 {
        problems.push(format!("survival loss deviation {worst:.3e}"));
    }

    let elapsed = t.elapsed();
    let pass = problems.is_empty() && elapsed < Duration::from_secs(30);
    report(
        5,
        pass,
        elapsed,
        &format!("200 C-index cohorts, 200 Dice pairs, 200 MTLR+DeepHit batches (max diff {worst:.2e}); problems {problems:?}"),
    );
    assert!(pass);
}

/// Mean over folds of the selected validation C-index.
fn prognosis_cv(
    model: &FrozenFoundation,
    data: &unicon::trainer::PrognosisData,
    s1: &Step1Section,
    folds: usize,
    inputs: PrognosisInputs,
) -> (f64, Vec<f64>) {
    let tcfg = PrognosisTrainConfig {
        optim: AdamWConfig::new(s1.lr, s1.weight_decay),
        epochs: s1.epochs,
        batch_size: s1.batch_size,
        inputs,
        model: s1.model,
        ..PrognosisTrainConfig::default()
    };
    let per_fold: Vec<f64> = (0..folds)
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + f as u64);
            let comp = build_prognosis(model, &prognosis_plan(s1), &mut rng).unwrap();
            train_prognosis(model, comp, data, f, &tcfg, &mut rng)
                .unwrap()
                .best_metric
        })
        .collect();
    (per_fold.iter().sum::<f64>() / folds as f64, per_fold)
}

#[test]
fn criterion_06_prognosis_learns_planted_signal() {
    let model = base();
    let cfg = default_config();
    let s1 = cfg.step1.clone().unwrap();
    let folds = cfg.data.folds;
    let t = Instant::now();
    let (data, _) = prognosis_dataset(&cfg, SEED, model).unwrap();
    let (image_text, it_folds) = prognosis_cv(model, &data, &s1, folds, PrognosisInputs::ImageText);
    let (text, _) = prognosis_cv(model, &data, &s1, folds, PrognosisInputs::TextOnly);
    let shuffled_data = data.with_shuffled_labels(&mut ChaCha8Rng::seed_from_u64(606));
    let (shuffled, _) = prognosis_cv(
        model,
        &shuffled_data,
        &s1,
        folds,
        PrognosisInputs::ImageText,
    );
    let elapsed = t.elapsed();
    let pass = data.len() == 300
        && image_text >= 0.70
        && image_text >= text - 0.02
        && (0.40..=0.60).contains(&shuffled)
        && elapsed < Duration::from_secs(600);
    report(
        6,
        pass,
        elapsed,
        &format!(
            "{} cases, {folds}-fold C-index: image+text {image_text:.3} {it_folds:.3?}, text {text:.3}, shuffled {shuffled:.3}",
            data.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_segmentation_learns_and_pet_helps() {
    let model = base();
    let cfg = default_config();
    let s2 = cfg.step2.clone().unwrap();
    let s3: Step3Section = cfg.step3.clone().unwrap();
    let steps = 1280;
    let plan = segmentation_plan(&s2, s2.resolution);
    let t = Instant::now();

    let mut easy_cfg = cfg.clone();
    easy_cfg.data.complementarity = false;
    let easy = segmentation_dataset(&easy_cfg, SEED, model, s2.resolution).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    let comp = build_seg_ct(model, &plan, &mut rng).unwrap();
    let tcfg = seg_train_config(steps, s2.lr, s2.weight_decay);
    let easy_ct = train_segmentation(model, comp, &easy.train, &easy.val, &tcfg, &mut rng).unwrap();

    let hard = segmentation_dataset(&cfg, SEED, model, s2.resolution).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(702);
    let comp = build_seg_ct(model, &plan, &mut rng).unwrap();
    let ct = train_segmentation(model, comp, &hard.train, &hard.val, &tcfg, &mut rng).unwrap();
    let plan3 = SegmentationPlan {
        rank: s3.rank,
        alpha: s3.alpha,
        ..plan
    };
    let comp = build_seg_ctpet(model, &ct.composition, &plan3, s3.hidden, &mut rng).unwrap();
    let tcfg3 = seg_train_config(steps, s3.lr, s3.weight_decay);
    let ctpet = train_segmentation(model, comp, &hard.train, &hard.val, &tcfg3, &mut rng).unwrap();

    let elapsed = t.elapsed();
    let pass = easy_ct.best_metric >= 0.80
        && ctpet.best_metric >= ct.best_metric + 0.02
        && elapsed < Duration::from_secs(900);
    report(
        7,
        pass,
        elapsed,
        &format!(
            "{} train / {} val, {steps} steps: easy CT Dice {:.3}; complementary CT {:.3}, CT+PET {:.3}",
            hard.train.len(),
            hard.val.len(),
            easy_ct.best_metric,
            ct.best_metric,
            ctpet.best_metric
        ),
    );
    assert!(pass);
}

fn outputs(
    model: &FrozenFoundation,
    comp: &unicon::adapters::AdapterComposition,
    xs: &[CaseInput],
    p: &[Vec<usize>],
) -> Vec<Tensor> {
    xs.iter()
        .map(|x| route_output(model, comp, x, p).unwrap())
        .collect()
}

#[test]
fn criterion_08_base_adapts_to_a_new_resolution() {
    let model = base();
    let mut cfg = default_config();
    cfg.data.segmentation_cases = 12;
    cfg.data.complementarity = false;
    let s2 = cfg.step2.clone().unwrap();
    let prompts = prompts(model);
    let t = Instant::now();

    let native = segmentation_dataset(&cfg, SEED, model, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(801);
    let seg32 = build_seg_ct(model, &segmentation_plan(&s2, 32), &mut rng).unwrap();
    let cls = AdapterRegistry::base()
        .route(&RoutingKey::classification())
        .unwrap();
    let seg_before = outputs(model, &seg32, &native.probes, &prompts);
    let cls_before = outputs(model, &cls, &native.probes, &prompts);
    let hash_before = model.compute_hash();

    let hi = segmentation_dataset(&cfg, SEED, model, 48).unwrap();
    let comp = build_seg_ct(model, &segmentation_plan(&s2, 48), &mut rng).unwrap();
    let outcome = train_segmentation(
        model,
        comp,
        &hi.train,
        &hi.val,
        &seg_train_config(200, s2.lr, s2.weight_decay),
        &mut rng,
    )
    .unwrap();
    let first = outcome.history.first().unwrap();
    let last = outcome.history.last().unwrap();

    let identical = outputs(model, &seg32, &native.probes, &prompts) == seg_before
        && outputs(model, &cls, &native.probes, &prompts) == cls_before
        && model.compute_hash() == hash_before;
    let elapsed = t.elapsed();
    let pass = last.steps == 200
        && last.train_loss < first.train_loss
        && identical
        && elapsed < Duration::from_secs(300);
    report(
        8,
        pass,
        elapsed,
        &format!(
            "48^3 over {} steps: first-pass loss {:.4}, last-pass loss {:.4}; 32^3 outputs identical {identical}",
            last.steps, first.train_loss, last.train_loss
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_capability_matrix() {
    let t = Instant::now();
    let out = toy_run();
    let servable = |row: &BTreeMap<String, bool>| -> Vec<String> {
        row.iter()
            .filter(|(_, ok)| **ok)
            .map(|(k, _)| k.clone())
            .collect()
    };
    let all: Vec<String> = ["Cls", "Prog", "Seg(C)", "Seg(CP)"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut sorted_all = all.clone();
    sorted_all.sort();
    let base_ok = servable(&out.capability.base) == vec!["Cls".to_string()];
    let adapted_ok = servable(&out.capability.adapted) == sorted_all && out.registry.len() == 4;

    let mut cfg = toy_config();
    cfg.step3 = None;
    let two = run_sequence(&cfg, 7, None).unwrap();
    let without_step3 = two.registry.route(&RoutingKey::seg_ctpet()).is_err()
        && servable(&two.capability.adapted) == vec!["Cls", "Prog", "Seg(C)"];

    let elapsed = t.elapsed();
    let pass = base_ok && adapted_ok && without_step3;
    report(
        9,
        pass,
        elapsed,
        &format!(
            "before {:?}, after {:?}, without step 3 {:?}",
            servable(&out.capability.base),
            servable(&out.capability.adapted),
            servable(&two.capability.adapted)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_runs_are_deterministic() {
    let t = Instant::now();
    let cfg = toy_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_sequence(&cfg, 11, Some(d.path())).unwrap();
    }
    let files = [
        "report.jsonl",
        "checkpoints/base.bin",
        "checkpoints/step1.bin",
        "checkpoints/step2.bin",
        "checkpoints/step3.bin",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(dirs[0].path().join(f)).unwrap()
                != std::fs::read(dirs[1].path().join(f)).unwrap()
        })
        .collect();
    let elapsed = t.elapsed();
    let pass = differing.is_empty();
    report(
        10,
        pass,
        elapsed,
        &format!(
            "two toy runs, seed 11: {} files compared, differing {differing:?}",
            files.len()
        ),
    );
    assert!(pass);
}
