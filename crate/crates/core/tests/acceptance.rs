//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Positional arguments select criteria by number (`cargo test --test
//! acceptance -- 1 3`); with none, all eight run. Criteria 5 and 6 train
//! fifteen toy models and take the better part of an hour on one core.

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::Rng as _;

use evadapt::datasets::toy::threshold_events;
use evadapt::event_core::{parse_event_stream, voxelize, write_canonical, Event, EventFormat, EventStream, Polarity};
use evadapt::eval::{mean_std, run_ablation, AblationCell, AblationMatrix, AblationTable};
use evadapt::frame_core::{AugmentConfig, Menu};
use evadapt::grid::Grid;
use evadapt::losses::{self, LossInputs, LossWeights, Side, Term, Toggles};
use evadapt::rng::rng_for;
use evadapt::trainer::Trainer;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn t1(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn t2(v: &[f64], rows: usize, cols: usize) -> Tensor {
    Tensor::from_slice(v, (rows, cols), &Device::Cpu).unwrap()
}

fn val(t: evadapt::Result<Tensor>) -> f64 {
    t.unwrap().to_scalar::<f64>().unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- 1

fn loss_oracles() -> Outcome {
    let tol = 1e-6;
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();

    cases.push(("ce uniform K=10", val(losses::cross_entropy_cls(&t2(&[0.0; 10], 1, 10), &[3])), 10f64.ln()));
    cases.push(("ce confident", val(losses::cross_entropy_cls(&t2(&[60.0, 0.0], 1, 2), &[0])), 0.0));
    cases.push(("ce [2,0]", val(losses::cross_entropy_cls(&t2(&[2.0, 0.0], 1, 2), &[0])), (1.0 + (-2f64).exp()).ln()));

    let a = t1(&[0.3, -1.2, 4.0]);
    cases.push(("cycle a=b", val(losses::cycle_feature_loss(&a, &a)), 0.0));
    cases.push(("cycle offset", val(losses::cycle_feature_loss(&(&a + 1.0).unwrap(), &a)), 1.0));
    cases.push(("cycle [1,-1] [0,1]", val(losses::cycle_feature_loss(&t1(&[1.0, -1.0]), &t1(&[0.0, 1.0]))), 1.5));

    let c = t1(&[0.7; 4]);
    let two_ln2 = 2.0 * 2f64.ln();
    cases.push(("disc equal", val(losses::relativistic_avg_disc_loss(&c, &c)), two_ln2));
    cases.push(("gen equal", val(losses::relativistic_avg_gen_loss(&c, &c)), two_ln2));
    cases.push((
        "disc saturated",
        val(losses::relativistic_avg_disc_loss(&t1(&[80.0, 80.0]), &t1(&[-80.0]))),
        0.0,
    ));
    let (r, f) = (t1(&[1.0, 1.0]), t1(&[0.0, 0.0]));
    cases.push((
        "disc [1,1] [0,0]",
        val(losses::relativistic_avg_disc_loss(&r, &f)),
        -(sigmoid(1.0).ln() + (1.0 - sigmoid(-1.0)).ln()),
    ));
    cases.push((
        "gen [1,1] [0,0]",
        val(losses::relativistic_avg_gen_loss(&r, &f)),
        -((1.0 - sigmoid(1.0)).ln() + sigmoid(-1.0).ln()),
    ));
    cases.push(("disc [1,1] [0,0] literal", val(losses::relativistic_avg_disc_loss(&r, &f)), 0.626523));
    cases.push(("gen [1,1] [0,0] literal", val(losses::relativistic_avg_gen_loss(&r, &f)), 2.626523));

    let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
    cases.push(("orth identity", val(losses::orthogonal_regularizer(&[eye], 1.0)), 0.0));
    let ones = Tensor::ones((2, 2), DType::F64, &Device::Cpu).unwrap();
    let beta = 1e-4;
    cases.push(("orth ones", val(losses::orthogonal_regularizer(&[ones], beta)), 8.0 * beta));
    let rot = t2(&[0.6, -0.8, 0.8, 0.6], 2, 2);
    cases.push(("orth orthogonal columns", val(losses::orthogonal_regularizer(&[(rot * 3.0).unwrap()], 1.0)), 0.0));

    let v = t1(&[0.4, -2.0, 1.0]);
    let inv_sqrt2 = 0.5f64.sqrt();
    cases.push(("contrastive parallel", val(losses::contrastive_alignment_loss(&v, &v)), -1.0));
    cases.push((
        "contrastive orthogonal",
        val(losses::contrastive_alignment_loss(&t1(&[1.0, 0.0]), &t1(&[0.0, 2.0]))),
        0.0,
    ));
    cases.push((
        "contrastive [1,0] [1,1]",
        val(losses::contrastive_alignment_loss(&t1(&[1.0, 0.0]), &t1(&[1.0, 1.0]))),
        -inv_sqrt2,
    ));
    cases.push((
        "uncorrelated orthogonal",
        val(losses::uncorrelated_conditioning_loss(&t1(&[1.0, 0.0]), &t1(&[0.0, 2.0]))),
        0.0,
    ));
    cases.push(("uncorrelated equal", val(losses::uncorrelated_conditioning_loss(&v, &v)), 1.0));
    cases.push((
        "uncorrelated [1,1] [1,0]",
        val(losses::uncorrelated_conditioning_loss(&t1(&[1.0, 1.0]), &t1(&[1.0, 0.0]))),
        inv_sqrt2,
    ));

    let frames = Tensor::rand(0f64, 1.0, (2, 3, 6, 6), &Device::Cpu).unwrap();
    let target = losses::pseudo_event_target(&frames, 4).unwrap();
    let d = Tensor::rand(0f64, 1.0, (2, 4, 6, 6), &Device::Cpu).unwrap();
    cases.push(("decoder exact", val(losses::decoder_output_loss(&target, &target, Some((&d, &d)))), 0.0));
    let zero = target.zeros_like().unwrap();
    cases.push((
        "decoder cycle offset",
        val(losses::decoder_output_loss(&target, &target, Some((&(&d + 1.0).unwrap(), &d)))),
        1.0,
    ));
    let flat = Tensor::full(0.4f64, (2, 3, 6, 6), &Device::Cpu).unwrap();
    let flat_target = losses::pseudo_event_target(&flat, 4).unwrap();
    let abs_mean: f64 = d.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|x| x.abs()).sum::<f64>() / (2 * 4 * 36) as f64;
    cases.push(("decoder flat frame", val(losses::decoder_output_loss(&d, &flat_target, None)), abs_mean));
    cases.push(("decoder zero vs zero", val(losses::decoder_output_loss(&zero, &flat_target, None)), 0.0));

    // single-term reduction and summation oracle
    let w = LossWeights {
        w_cls_frame: 0.7,
        ..LossWeights::default()
    };
    let mut only = Toggles::default();
    only.adaptation = false;
    let ce = losses::cross_entropy_cls(&t2(&[0.2, -0.1, 1.0], 1, 3), &[2]).unwrap();
    let mut inp = LossInputs::new();
    inp.insert(Term::ClsFrame, ce.clone());
    let (g, _, _) = losses::total_objective(&inp, &w, &only).unwrap();
    cases.push(("single-term total", g.to_scalar::<f64>().unwrap(), 0.7 * ce.to_scalar::<f64>().unwrap()));

    let mut all = LossInputs::new();
    let mut r = rng_for(11, &[]);
    for term in Term::ALL {
        all.insert(term, Tensor::new(r.gen_range(0.0..2.0f64), &Device::Cpu).unwrap());
    }
    let w = LossWeights {
        lambda1: 0.3,
        lambda4: 2.0,
        w_decoder: 0.5,
        w_gan_event: 0.25,
        ..LossWeights::default()
    };
    let (g, d, report) = losses::total_objective(&all, &w, &Toggles::default()).unwrap();
    let mut by_hand = (0.0, 0.0);
    for term in Term::ALL {
        // the orthogonal term arrives already scaled by beta
        let m = if term == Term::Orth { 1.0 } else { term.weight(&w) };
        let x = all.get(term).unwrap().to_scalar::<f64>().unwrap() * m;
        match term.side() {
            Side::Generator => by_hand.0 += x,
            Side::Discriminator => by_hand.1 += x,
        }
    }
    cases.push(("generator total", g.to_scalar::<f64>().unwrap(), by_hand.0));
    cases.push(("discriminator total", d.to_scalar::<f64>().unwrap(), by_hand.1));
    cases.push(("report recompute", report.recompute(Side::Generator, &w), by_hand.0));

    let mut worst = 0f64;
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        worst = worst.max(err);
        check(err <= tol, format!("{name}: got {got}, want {want}"))?;
    }
    check(
        matches!(losses::cross_entropy_cls(&t2(&[0.0, 0.0], 1, 2), &[2]), Err(evadapt::Error::Argument(_))),
        "out-of-range label accepted",
    )?;
    check(
        matches!(losses::cycle_feature_loss(&t1(&[1.0]), &t1(&[1.0, 2.0])), Err(evadapt::Error::Contract(_))),
        "cycle shape mismatch accepted",
    )?;
    check(
        matches!(losses::relativistic_avg_disc_loss(&t1(&[]), &t1(&[1.0])), Err(evadapt::Error::Argument(_))),
        "empty score batch accepted",
    )?;
    check(
        matches!(
            losses::contrastive_alignment_loss(&t1(&[0.0, 0.0]), &t1(&[1.0, 0.0])),
            Err(evadapt::Error::NumericGuard(_))
        ),
        "zero vector accepted",
    )?;
    Ok(format!("{} oracle values, max abs error {worst:.1e}", cases.len()))
}

// ---------------------------------------------------------------- 2

type LossFn = Box<dyn Fn(&[Tensor]) -> Tensor>;

struct GradCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: LossFn,
}

fn grad_cases() -> Vec<GradCase> {
    let vec_pair = |n: usize| vec![vec![n], vec![n]];
    let mut out = vec![
        GradCase {
            name: "cross_entropy",
            shapes: vec![vec![4, 6]],
            f: Box::new(|x| losses::cross_entropy_cls(&x[0], &[1, 5, 0, 3]).unwrap()),
        },
        GradCase {
            name: "cycle",
            shapes: vec![vec![2, 4, 4], vec![2, 4, 4]],
            f: Box::new(|x| losses::cycle_feature_loss(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "relativistic_disc",
            shapes: vec![vec![7], vec![5]],
            f: Box::new(|x| losses::relativistic_avg_disc_loss(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "relativistic_gen",
            shapes: vec![vec![6], vec![8]],
            f: Box::new(|x| losses::relativistic_avg_gen_loss(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "orthogonal",
            shapes: vec![vec![4, 2, 2], vec![3, 5]],
            f: Box::new(|x| losses::orthogonal_regularizer(x, 0.5).unwrap()),
        },
        GradCase {
            name: "contrastive",
            shapes: vec_pair(32),
            f: Box::new(|x| losses::contrastive_alignment_loss(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "contrastive_batched",
            shapes: vec![vec![3, 8], vec![3, 8]],
            f: Box::new(|x| losses::contrastive_term(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "uncorrelated",
            shapes: vec_pair(16),
            f: Box::new(|x| losses::uncorrelated_conditioning_loss(&x[0], &x[1]).unwrap()),
        },
        GradCase {
            name: "decoder",
            shapes: vec![vec![1, 2, 4, 4], vec![1, 2, 4, 4], vec![1, 2, 4, 4]],
            f: Box::new(|x| {
                let frames = Tensor::full(0.5f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
                let target = losses::pseudo_event_target(&frames, 2).unwrap();
                losses::decoder_output_loss(&x[0], &target, Some((&x[1], &x[2]))).unwrap()
            }),
        },
    ];
    out.push(GradCase {
        name: "softplus",
        shapes: vec![vec![12]],
        f: Box::new(|x| losses::softplus(&x[0]).unwrap().sum_all().unwrap()),
    });
    out
}

fn finite_difference(f: &LossFn, inputs: &[Vec<f64>], shapes: &[Vec<usize>], h: f64) -> Vec<Vec<f64>> {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::from_slice(v, s.as_slice(), &Device::Cpu).unwrap())
            .collect();
        f(&ts).to_scalar::<f64>().unwrap()
    };
    let mut out = Vec::new();
    for (k, v) in inputs.iter().enumerate() {
        let mut g = vec![0.0; v.len()];
        for i in 0..v.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k][i] += h;
            minus[k][i] -= h;
            g[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn gradient_suite() -> Outcome {
    const TRIALS: u64 = 20;
    let mut worst = 0f64;
    let mut count = 0;
    for case in grad_cases() {
        for trial in 0..TRIALS {
            let mut r = rng_for(trial, &[evadapt::rng::hash_str(case.name)]);
            let inputs: Vec<Vec<f64>> = case
                .shapes
                .iter()
                .map(|s| (0..s.iter().product::<usize>()).map(|_| r.gen_range(-2.0..2.0)).collect())
                .collect();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(&case.shapes)
                .map(|(v, s)| Var::from_tensor(&Tensor::from_slice(v, s.as_slice(), &Device::Cpu).unwrap()).unwrap())
                .collect();
            let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
            let grads = (case.f)(&ts).backward().map_err(|e| format!("{}: {e}", case.name))?;
            let numeric = finite_difference(&case.f, &inputs, &case.shapes, 1e-6);
            for (k, var) in vars.iter().enumerate() {
                let analytic = grads
                    .get(var.as_tensor())
                    .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
                    .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
                let diff: f64 = analytic.iter().zip(&numeric[k]).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
                let scale: f64 = numeric[k].iter().map(|n| n * n).sum::<f64>().sqrt().max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
                let rel = if scale < 1e-10 { diff } else { diff / scale };
                worst = worst.max(rel);
                check(rel < 1e-4, format!("{} trial {trial} input {k}: relative error {rel:.2e}", case.name))?;
            }
            count += 1;
        }
    }
    Ok(format!("{count} trials over {} terms, max relative error {worst:.1e}", grad_cases().len()))
}

// ---------------------------------------------------------------- 3

fn runner() -> TestRunner {
    TestRunner::new(PtConfig {
        cases: 256,
        failure_persistence: None,
        ..PtConfig::default()
    })
}

fn prop(name: &str, result: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    result.map_err(|e| format!("{name}: {e}"))
}

fn invariants() -> Outcome {
    let scores = || prop::collection::vec(-5.0f64..5.0, 1..12);
    prop(
        "shift invariance",
        runner().run(&(scores(), scores(), -50.0f64..50.0), |(r, f, c)| {
            let (rt, ft) = (t1(&r), t1(&f));
            let (rs, fs) = ((&rt + c).unwrap(), (&ft + c).unwrap());
            for g in [losses::relativistic_avg_disc_loss, losses::relativistic_avg_gen_loss] {
                let a = val(g(&rt, &ft));
                let b = val(g(&rs, &fs));
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
            Ok(())
        }),
    )?;
    prop(
        "role swap",
        runner().run(&(scores(), scores()), |(r, f)| {
            let (rt, ft) = (t1(&r), t1(&f));
            prop_assert_eq!(
                val(losses::relativistic_avg_gen_loss(&rt, &ft)),
                val(losses::relativistic_avg_disc_loss(&ft, &rt))
            );
            Ok(())
        }),
    )?;
    let nonzero = || {
        prop::collection::vec(-3.0f64..3.0, 2..16).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    };
    prop(
        "cosine scale invariance",
        runner().run(&(nonzero(), nonzero(), 0.01f64..100.0, 0.01f64..100.0), |(u, mut w, a, b)| {
            w.resize(u.len(), 0.5);
            let (ut, wt) = (t1(&u), t1(&w));
            let (us, ws) = ((&ut * a).unwrap(), (&wt * b).unwrap());
            let c1 = val(losses::contrastive_alignment_loss(&ut, &wt));
            let c2 = val(losses::contrastive_alignment_loss(&us, &ws));
            prop_assert!((c1 - c2).abs() <= 1e-9 && (-1.0..=1.0).contains(&c1));
            let u1 = val(losses::uncorrelated_conditioning_loss(&ut, &wt));
            let u2 = val(losses::uncorrelated_conditioning_loss(&us, &ws));
            prop_assert!((u1 - u2).abs() <= 1e-9 && (0.0..=1.0).contains(&u1));
            Ok(())
        }),
    )?;
    let flip = AugmentConfig {
        flip: true,
        flip_prob: 1.0,
        ..AugmentConfig::identity(Menu::Event)
    };
    prop(
        "flip involution",
        runner().run(&(1usize..4, 1usize..9, 1usize..9, any::<u64>(), any::<u64>()), |(c, h, w, s1, s2)| {
            let mut r = rng_for(s1, &[]);
            let data: Vec<f32> = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
            let g = Grid::from_vec(c, h, w, data).unwrap();
            prop_assert_eq!(&g.flip_horizontal().flip_horizontal(), &g);
            let once = evadapt::frame_core::augment::apply(&g, &flip, s2).unwrap();
            let twice = evadapt::frame_core::augment::apply(&once, &flip, s2.wrapping_add(1)).unwrap();
            prop_assert_eq!(&twice, &g);
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(once.get(0, y, x), g.get(0, y, w - 1 - x));
                }
            }
            Ok(())
        }),
    )?;
    prop(
        "voxel mass conservation",
        runner().run(&(stream_strategy(), 1usize..40, 1usize..40, 1usize..6), |(s, h, w, b)| {
            let t = voxelize(&s, h, w, b).unwrap();
            prop_assert_eq!(t.grid().sum(), s.len() as f64);
            prop_assert_eq!(t.shape(), (2 * b, h, w));
            Ok(())
        }),
    )?;
    Ok("5 properties x 256 cases".into())
}

fn stream_strategy() -> impl Strategy<Value = EventStream> {
    (1u32..64, 1u32..64).prop_flat_map(|(w, h)| {
        prop::collection::vec((0u64..1_000_000, 0..w as u16, 0..h as u16, any::<bool>()), 0..300).prop_map(move |raw| {
            let mut evs: Vec<Event> = raw
                .into_iter()
                .map(|(t, x, y, p)| Event::new(t, x, y, if p { Polarity::On } else { Polarity::Off }))
                .collect();
            evs.sort_by_key(|e| e.t);
            EventStream::new(evs, w, h).unwrap()
        })
    })
}

// ---------------------------------------------------------------- 4

fn supervised_degeneracy() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::toy_setup(dir.path(), 2, 100, 10);
    cfg.weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        w_cls_fake: 0.0,
        w_decoder: 0.0,
        w_cyc_cont: 0.0,
        w_cyc_att: 0.0,
        w_gan_cont: 0.0,
        w_gan_event: 0.0,
        beta_orth: 0.0,
        ..cfg.weights.clone()
    };
    cfg.augment.frames = AugmentConfig::identity(Menu::Frame);
    let data = common::load(&cfg);
    let mut t = Trainer::new(&cfg, &data).map_err(|e| e.to_string())?;
    let mut ce = Vec::new();
    for _ in 0..200 {
        let r = t.step().map_err(|e| e.to_string())?;
        check(r.terms.len() == 1, format!("unexpected terms {:?}", r.terms))?;
        ce.push(r.get(Term::ClsFrame).unwrap());
    }
    let tail = ce[190..].iter().sum::<f64>() / 10.0;
    let full = train_set_cross_entropy(&t, &data).map_err(|e| e.to_string())?;
    check(
        full < 0.1,
        format!("training-set cross-entropy after 200 steps is {full:.4} (first batch {:.4}, last-10 batch mean {tail:.4})", ce[0]),
    )?;
    Ok(format!(
        "training-set cross-entropy {full:.4} after 200 steps (first batch {:.4}, last-10 batch mean {tail:.4})",
        ce[0]
    ))
}

/// Mean cross-entropy over every training frame, unaugmented, in evaluation mode.
fn train_set_cross_entropy(t: &Trainer, data: &evadapt::datasets::Dataset) -> evadapt::Result<f64> {
    let nets = &t.state.nets;
    let frames = data.frames(evadapt::datasets::Split::Train);
    let mut total = 0.0;
    nets.evaluating(|| {
        for start in (0..frames.len()).step_by(50) {
            let idx: Vec<usize> = (start..(start + 50).min(frames.len())).collect();
            let grids: Vec<Grid> = idx.iter().map(|&i| frames.get(i).map(|f| f.grid().clone())).collect::<evadapt::Result<_>>()?;
            let refs: Vec<&Grid> = grids.iter().collect();
            let x = evadapt::grid::stack(&refs, nets.dtype(), &Device::Cpu)?;
            let labels: Vec<usize> = idx.iter().map(|&i| frames.label(i)).collect();
            let logits = nets.classify(&nets.encode_frame_content(&x)?)?;
            let ce = losses::cross_entropy_cls(&logits, &labels)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total += ce * idx.len() as f64;
        }
        Ok(total / frames.len() as f64)
    })
}

// ---------------------------------------------------------------- 5, 6

fn toy_benchmark(root: &Path) -> Result<AblationTable, String> {
    let mut cfg = common::toy_setup(root, 5, 100, 20);
    cfg.output.checkpoints = false;
    let matrix = AblationMatrix {
        cells: vec![
            AblationCell::new("source_only", &[("adaptation", false)]),
            AblationCell::new("baseline", &[("contrastive", false), ("uncorrelated", false)]),
            AblationCell::new("contrastive", &[("contrastive", true), ("uncorrelated", false)]),
            AblationCell::new("uncorrelated", &[("contrastive", false), ("uncorrelated", true)]),
            AblationCell::new("both", &[("contrastive", true), ("uncorrelated", true)]),
        ],
        seeds: vec![0, 1, 2],
    };
    let table = run_ablation(&cfg, &matrix, &root.join("ablation")).map_err(|e| e.to_string())?;
    for row in &table.rows {
        if let Some(e) = &row.error {
            return Err(format!("{} seed {}: {e}", row.cell, row.seed));
        }
    }
    Ok(table)
}

fn pct(xs: &[f64]) -> String {
    let mut s = String::new();
    for x in xs {
        let _ = write!(s, "{:.1} ", 100.0 * x);
    }
    s.trim_end().to_string()
}

fn adaptation_effect(table: &AblationTable) -> Outcome {
    let full = table.values("both", true);
    let src = table.values("source_only", true);
    let (fm, _) = mean_std(&full).ok_or("no full-method runs")?;
    let (sm, _) = mean_std(&src).ok_or("no source-only runs")?;
    let gap = 100.0 * (fm - sm);
    let detail = format!(
        "full [{}] mean {:.1}%, source-only [{}] mean {:.1}%, gap {gap:+.1} pp",
        pct(&full),
        100.0 * fm,
        pct(&src),
        100.0 * sm
    );
    check(gap >= 10.0, detail.clone())?;
    Ok(detail)
}

fn ablation_directionality(table: &AblationTable) -> Outcome {
    let both = table.values("both", true);
    let base = table.values("baseline", true);
    let wins = both.iter().zip(&base).filter(|(b, a)| b > a).count();
    let mean = |c: &str| mean_std(&table.values(c, true)).map(|m| 100.0 * m.0).unwrap_or(f64::NAN);
    let (mb, mc, mu, mf) = (mean("baseline"), mean("contrastive"), mean("uncorrelated"), mean("both"));
    let detail = format!(
        "both beats baseline in {wins}/3 seeds; means baseline {mb:.1}, contrastive {mc:.1}, uncorrelated {mu:.1}, both {mf:.1}"
    );
    check(wins >= 2, detail.clone())?;
    check(mc >= mb - 2.0 && mu >= mb - 2.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn reports_close(a: &losses::LossReport, b: &losses::LossReport) -> Result<f64, String> {
    check(a.terms.len() == b.terms.len(), "term lists differ")?;
    let mut worst = (a.generator_total - b.generator_total)
        .abs()
        .max((a.discriminator_total - b.discriminator_total).abs());
    for ((ta, va), (tb, vb)) in a.terms.iter().zip(&b.terms) {
        check(ta == tb, format!("{ta} vs {tb}"))?;
        worst = worst.max((va - vb).abs());
    }
    check(worst <= 1e-6, format!("reports differ by {worst:.2e}"))?;
    Ok(worst)
}

fn determinism_and_resume() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::toy_setup(dir.path(), 3, 8, 2);
    cfg.train.frame_batch = 4;
    cfg.train.event_batch = 4;
    let data = common::load(&cfg);
    let e = |e: evadapt::Error| e.to_string();
    let mut a = Trainer::new(&cfg, &data).map_err(e)?;
    let mut b = Trainer::new(&cfg, &data).map_err(e)?;
    let mut worst = 0f64;
    for _ in 0..10 {
        worst = worst.max(reports_close(&a.step().map_err(e)?, &b.step().map_err(e)?)?);
    }
    let manifest = a.state.save(&cfg, &dir.path().join("mid")).map_err(e)?;
    let next = a.step().map_err(e)?;
    let mut c = Trainer::resume(&cfg, &data, &manifest).map_err(e)?;
    let resumed = c.step().map_err(e)?;
    let resume_diff = reports_close(&next, &resumed)?;
    Ok(format!("10 replayed steps max diff {worst:.1e}; resumed step diff {resume_diff:.1e}"))
}

// ---------------------------------------------------------------- 8

fn ingestion_round_trip() -> Outcome {
    prop(
        "canonical round trip",
        runner().run(&stream_strategy(), |s| {
            let bytes = write_canonical(&s);
            prop_assert_eq!(bytes.len(), 16 + 16 * s.len());
            let back = parse_event_stream(&bytes, EventFormat::Canonical).unwrap();
            prop_assert_eq!(back.events(), s.events());
            prop_assert_eq!((back.width(), back.height()), (s.width(), s.height()));
            Ok(())
        }),
    )?;
    let theta = 0.25;
    let prev = [0.1, 0.1, 0.1];
    let next = [0.1 + 2.0 * theta, 0.1, 0.1 - 2.0 * theta];
    let evs = threshold_events(&prev, &next, 3, theta, 0, 100);
    let on: Vec<_> = evs.iter().filter(|e| e.x == 0).collect();
    let off: Vec<_> = evs.iter().filter(|e| e.x == 2).collect();
    check(on.len() == 2 && on.iter().all(|e| e.polarity == Polarity::On), format!("rising 2θ step gave {on:?}"))?;
    check(off.len() == 2 && off.iter().all(|e| e.polarity == Polarity::Off), format!("falling 2θ step gave {off:?}"))?;
    check(evs.len() == 4, format!("{} events in total", evs.len()))?;
    Ok("256 random streams reproduced exactly; 2θ steps give 2 events each way".into())
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (tag, msg) = match outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {n} [{tag}] {name} ({secs:.1}s): {msg}");
    outcome.is_ok()
}

/// Criteria whose failure is reported without failing the run.
const SOFT: &[usize] = &[6];
const STRICT_ENV: &str = "EVADAPT_ACCEPTANCE_STRICT";

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if want(n) {
            let t = Instant::now();
            let outcome = f();
            if !report(n, name, t, &outcome) {
                failed.push(n);
            }
        }
    };

    run(1, "loss oracles", &mut loss_oracles);
    run(2, "gradient checks", &mut gradient_suite);
    run(3, "algebraic invariants", &mut invariants);
    run(4, "supervised degeneracy", &mut supervised_degeneracy);
    if want(5) || want(6) {
        let dir = tempfile::tempdir().expect("tempdir");
        let t = Instant::now();
        let table = toy_benchmark(dir.path());
        let elapsed = t.elapsed().as_secs_f64();
        if let Ok(table) = &table {
            println!("toy benchmark test accuracy ({elapsed:.0}s):\n{}", table.summary_tsv());
        }
        run(5, "adaptation effect", &mut || table.as_ref().map_err(Clone::clone).and_then(adaptation_effect));
        run(6, "ablation directionality", &mut || table.as_ref().map_err(Clone::clone).and_then(ablation_directionality));
    }
    run(7, "determinism and resume", &mut determinism_and_resume);
    run(8, "ingestion round trip", &mut ingestion_round_trip);

    if failed.is_empty() {
        return;
    }
    println!("failed criteria: {failed:?}");
    let strict = std::env::var_os(STRICT_ENV).is_some();
    if strict || failed.iter().any(|n| !SOFT.contains(n)) {
        std::process::exit(1);
    }
    println!("only soft criteria failed; set {STRICT_ENV} to make them fatal");
}
