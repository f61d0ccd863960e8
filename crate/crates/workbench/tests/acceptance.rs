// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance run on the synthetic system: 2,000 images, three
//! classes, three tap layers. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use csae_core::aggregator::{
    aggregate_graph, aggregator_loss_graph, AggregatorDims, AggregatorLambdas, AggregatorParams, AggregatorVars,
};
use csae_core::conv::{conv2d, conv_out_extent};
use csae_core::data::{
    fuse_annotation, generate_dataset, generate_sample, ConceptAnnotation, Dataset, TEXTURED_BACKGROUND,
};
use csae_core::diagnostics::{
    auc, dataset_loc_ratio, group_entropy, layer_scores, loc_ratio, score_entropy, JsReport,
};
use csae_core::free::{free_graph, free_loss_graph, FreeLambdas, FreeParams, FreeVars};
use csae_core::intervention::{
    batch_correct, class_edit_rule, finetune_layer, intervene_batch, owning_layer, rank_vulnerability,
    FinetuneConfig, FinetuneEval,
};
use csae_core::model::{accuracy_of, generate_adversarial, train_target, Layer, TargetModel, TargetTrainConfig};
use csae_core::pipeline::{
    dataset_features, gather_rows, mean_baseline_mse, mse, run_pipeline, PipelineConfig, SaeCheckpoint,
    StageConfig,
};
use csae_core::tokenizer::{
    tokenize_graph, tokenizer_loss_graph, TokenizerDims, TokenizerLambdas, TokenizerParams, TokenizerVars,
};
use csae_core::{Parameters, Tape, Tensor, Var};
use csae_workbench::checkpoint::{decode_model, decode_sae, encode_model, encode_sae, load_sae, save_sae};
use csae_workbench::dataset::AnnotationFile;
use csae_workbench::dump::{decode_dump, encode_dump, read_dump, write_dump};
use csae_workbench::provenance::sha256_hex;
use csae_workbench::WorkbenchError;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 7;
const DATA_SIZE: usize = 2000;
const MODEL_SEED: u64 = 0;
const POOL_SEED: u64 = 99;
const POOL_SIZE: usize = 10_000;
const EPSILON: f32 = 0.05;

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

struct Suite {
    results: Vec<(String, bool)>,
    start: Instant,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "[{tag}] {name}: {} ({:.1}s)", o.detail, t.elapsed().as_secs_f64());
        let _ = out.flush();
        self.results.push((name.to_owned(), o.pass));
    }
}

fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "       {text}");
    let _ = out.flush();
}

// ---------------------------------------------------------------- oracles

const PROBES: usize = 100;
const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;

fn random64(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between reverse-mode and central-difference
/// derivatives over random coordinates.
fn worst_gradient_error(inputs: Vec<Tensor<f64>>, seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let mut grads = tape.backward(loss).unwrap();
    let analytic = grads.wrt(&tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let t = rng.random_range(0..inputs.len());
        let i = rng.random_range(0..inputs[t].numel());
        let mut plus = inputs.clone();
        plus[t].data_mut()[i] += FD_STEP;
        let mut minus = inputs.clone();
        minus[t].data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let a = analytic[t].data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
    }
    worst
}

fn tok_vars(v: &[Var]) -> TokenizerVars {
    TokenizerVars {
        w_merge: v[0],
        proj: v[1],
        proj_bias: v[2],
        w_score: v[3],
        b_score: v[4],
        w_seg: v[5],
        b_seg: v[6],
    }
}

fn agg_vars(v: &[Var]) -> AggregatorVars {
    AggregatorVars {
        mlp_w1: v[0],
        mlp_b1: v[1],
        mlp_w2: v[2],
        mlp_b2: v[3],
        decoder: v[4],
        decoder_bias: v[5],
        w_aggr: v[6],
    }
}

fn jitter(params: &mut dyn Parameters<f64>, rng: &mut impl Rng) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn gradient_oracle() -> Outcome {
    let (b, p, c, n) = (2, 9, 4, 3);
    let tok = TokenizerDims {
        concepts: n,
        positions: p,
        channels: c,
        embed: 3,
        mask: p,
    };
    let agg = AggregatorDims {
        concepts: n,
        positions: p,
        channels: c,
        mask: p,
        hidden: 3,
    };
    let mut errors = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut tp = TokenizerParams::<f64>::init(tok, &mut rng);
    jitter(&mut tp, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = tp.tensors().into_iter().cloned().collect();
    inputs.push(random64(&[b, p, c], -1.0, 1.0, &mut rng));
    let ts = random64(&[n, b, 1], 0.0, 1.0, &mut rng);
    let tm = random64(&[n, b, p], 0.0, 1.0, &mut rng);
    let tl = TokenizerLambdas {
        score: 1.0,
        mask: 1.0,
        merge_l1: 0.1,
    };
    errors.push((
        "tokenizer",
        worst_gradient_error(inputs, 201, |tape, v| {
            let pv = tok_vars(v);
            let r = tokenize_graph(tape, v[7], &pv).unwrap();
            let (s, m) = (tape.constant(ts.clone()), tape.constant(tm.clone()));
            tokenizer_loss_graph(tape, &r, s, m, pv.w_merge, &tl).unwrap()
        }),
    ));

    let mut ap = AggregatorParams::<f64>::init(agg, &mut rng);
    jitter(&mut ap, &mut rng);
    let w_merge = random64(&[n, c], -1.0, 1.0, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = ap.tensors().into_iter().cloned().collect();
    inputs.push(random64(&[n, b, 1], 0.05, 0.95, &mut rng));
    inputs.push(random64(&[n, b, p], -1.0, 1.0, &mut rng));
    let h = random64(&[b, p, c], -1.0, 1.0, &mut rng);
    let al = AggregatorLambdas {
        recon: 1.0,
        align: 0.01,
        aggr_l1: 1.0,
    };
    errors.push((
        "aggregator",
        worst_gradient_error(inputs, 202, |tape, v| {
            let pv = agg_vars(v);
            let recon = aggregate_graph(tape, v[7], v[8], &pv).unwrap();
            let hv = tape.constant(h.clone());
            let wm = tape.constant(w_merge.clone());
            aggregator_loss_graph(tape, recon, hv, wm, pv.w_aggr, &al).unwrap()
        }),
    ));

    let mut fp = FreeParams::<f64>::init(tok, 3, &mut rng);
    jitter(&mut fp, &mut rng);
    let inputs: Vec<Tensor<f64>> = fp.tensors().into_iter().cloned().collect();
    let h = random64(&[b, p, c], -1.0, 1.0, &mut rng);
    let concept = random64(&[b, p, c], -0.5, 0.5, &mut rng);
    let fl = FreeLambdas {
        recon: 1.0,
        sparsity: 1.0,
    };
    errors.push((
        "free",
        worst_gradient_error(inputs, 203, |tape, v| {
            let fv = FreeVars {
                tokenizer: tok_vars(&v[..7]),
                aggregator: agg_vars(&v[7..]),
            };
            let hv = tape.constant(h.clone());
            let (r, recon) = free_graph(tape, hv, &fv).unwrap();
            let cv = tape.constant(concept.clone());
            free_loss_graph(tape, &r, recon, cv, hv, &fl).unwrap()
        }),
    ));

    let pass = errors.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("{PROBES} probes per loss, worst relative error {detail} (< {GRAD_TOL:e})"))
}

fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (kernels.shape()[0], kernels.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                acc += kernels.data()[((o * cin + c) * k + ky) * k + kx]
                                    * input.data()[(c * h + y as usize) * w + x as usize];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out).unwrap()
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let (mut cases, mut worst, mut shape_ok) = (0, 0.0f64, true);
    while cases < 50 {
        let (cin, cout) = (rng.random_range(1..5), rng.random_range(1..6));
        let (k, stride, pad) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(0..3));
        let (h, w) = (rng.random_range(1..13), rng.random_range(1..13));
        if conv_out_extent(h, k, stride, pad).is_err() || conv_out_extent(w, k, stride, pad).is_err() {
            continue;
        }
        let input = Tensor::from_fn(&[cin, h, w], |_| rng.random_range(-1.0..1.0));
        let kernels = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-1.0..1.0));
        let fast = conv2d(&input, &kernels, stride, pad).unwrap();
        let slow = naive_conv(&input, &kernels, stride, pad);
        shape_ok &= fast.shape() == slow.shape();
        if fast.shape() == slow.shape() {
            worst = worst.max(fast.max_abs_diff(&slow));
        }
        cases += 1;
    }
    outcome(shape_ok && worst <= 1e-6, format!("{cases} cases, max elementwise difference {worst:.2e} (<= 1e-6)"))
}

fn hyperparameter_fidelity() -> Outcome {
    let c = PipelineConfig::default();
    let stage = |epochs, lr_step, lr_gamma| StageConfig {
        lr: 1e-3,
        lr_step,
        lr_gamma,
        epochs,
        batch_size: 64,
    };
    let checks = [
        (
            "tokenizer lambdas (1, 1, 0.1)",
            c.tokenizer_lambdas
                == TokenizerLambdas {
                    score: 1.0,
                    mask: 1.0,
                    merge_l1: 0.1,
                },
        ),
        (
            "aggregator lambdas (1, 0.01, 1)",
            c.aggregator_lambdas
                == AggregatorLambdas {
                    recon: 1.0,
                    align: 0.01,
                    aggr_l1: 1.0,
                },
        ),
        (
            "free lambdas (1, 1)",
            c.free_lambdas
                == FreeLambdas {
                    recon: 1.0,
                    sparsity: 1.0,
                },
        ),
        ("tokenizer stage 30 epochs", c.tokenizer == stage(30, Some(20), 0.1)),
        ("aggregator stage 50 epochs", c.aggregator == stage(50, Some(30), 0.1)),
        ("free stage 30 epochs", c.free == stage(30, None, 1.0)),
        ("36 free tokens", c.free_tokens == 36),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        outcome(true, "default config matches the reference schedule field for field")
    } else {
        outcome(false, format!("mismatched: {}", failed.join(", ")))
    }
}

fn fusion_rule() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 256,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = (
        prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..=1.0], 1..10),
        prop::collection::vec(0.0f32..=1.0, 16),
    );
    let random = runner.run(&strategy, |(scores, pool)| {
        let d = pool.len();
        let raw = Tensor::from_fn(&[scores.len(), d], |i| pool[(i * 7 + i / d) % d]);
        let ann = ConceptAnnotation::fused(scores.clone(), raw.clone()).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            if s == 0.0 {
                prop_assert!(ann.mask(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(ann.mask(i), &raw.data()[i * d..(i + 1) * d]);
            }
        }
        prop_assert!(fuse_annotation(0.0, &pool).iter().all(|&v| v == 0.0));
        Ok(())
    });
    // generated and imported annotations obey the same rule
    let generated = runner.run(&(any::<u64>(), 0u32..100_000), |(seed, id)| {
        let s = generate_sample(seed, id);
        let data = Dataset {
            vocabulary: csae_core::data::vocabulary(),
            samples: vec![s.clone()],
        };
        let mut file = AnnotationFile::from_dataset(&data);
        for v in file.records[0].masks.values.iter_mut() {
            *v = 1.0;
        }
        let imported = file.into_dataset(vec![s.image.clone()]).unwrap();
        for sample in [&s, &imported.samples[0]] {
            for (i, &si) in sample.scores.iter().enumerate() {
                if si == 0.0 {
                    prop_assert!(sample.pixel_masks.data()[i * 1024..(i + 1) * 1024].iter().all(|&v| v == 0.0));
                }
            }
        }
        Ok(())
    });
    match (random, generated) {
        (Ok(()), Ok(())) => outcome(true, "256 random annotations and 256 generated/imported samples: S_i = 0 implies M_i = 0"),
        (a, b) => outcome(false, format!("{:?} {:?}", a.err(), b.err())),
    }
}

// ---------------------------------------------------------------- pipeline

struct Trained {
    data: Dataset,
    model: TargetModel,
    ckpt: SaeCheckpoint,
    train: Vec<usize>,
    held: Vec<usize>,
}

fn train_all() -> Trained {
    let data = generate_dataset(DATA_SEED, DATA_SIZE);
    let t = Instant::now();
    let (model, _) = train_target(
        &data,
        &TargetTrainConfig {
            seed: MODEL_SEED,
            ..TargetTrainConfig::default()
        },
    )
    .unwrap();
    note(&format!(
        "target model: train accuracy {:.3}, held-out accuracy {:.3} ({:.0}s)",
        model.train_accuracy.unwrap_or(f64::NAN),
        model.val_accuracy.unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    ));
    let t = Instant::now();
    let config = PipelineConfig::default();
    let ckpt = run_pipeline(&data, &model, &config).map_err(|f| f.error).unwrap();
    note(&format!("SAE pipeline, three stages at taps {:?} ({:.0}s)", ckpt.tap_layers(), t.elapsed().as_secs_f64()));
    let (train, held) = data.split(config.train_fraction);
    Trained {
        data,
        model,
        ckpt,
        train,
        held,
    }
}

fn tokenizer_quality(t: &Trained) -> Outcome {
    let images = t.data.batch(&t.held);
    let deepest = *t.ckpt.tap_layers().iter().max().unwrap();
    let mut deepest_min = f64::NAN;
    let (mut absent_ok, mut absent_worst, mut entropy_worst) = (true, 0.0f64, 0.0f64);
    for sae in &t.ckpt.layers {
        let scores = layer_scores(&t.model, sae, &images).unwrap();
        let mut aucs = Vec::new();
        for c in 0..t.ckpt.concepts {
            let positive: Vec<bool> = t.held.iter().map(|&i| t.data.samples[i].scores[c] > 0.5).collect();
            let prevalence = positive.iter().filter(|&&p| p).count() as f64 / positive.len() as f64;
            if prevalence >= 0.05 {
                let s: Vec<f32> = scores.iter().map(|r| r[c]).collect();
                aucs.push((c, auc(&s, &positive).unwrap()));
            }
        }
        let min = aucs.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        if sae.layer == deepest {
            deepest_min = min;
        }
        let absent: Vec<f64> = scores.iter().map(|r| r[TEXTURED_BACKGROUND] as f64).collect();
        let mean = absent.iter().sum::<f64>() / absent.len() as f64;
        let entropy = absent.iter().map(|&p| csae_core::diagnostics::binary_entropy(p)).sum::<f64>() / absent.len() as f64;
        absent_ok &= mean < 0.05 && entropy < 1e-2;
        absent_worst = absent_worst.max(mean);
        entropy_worst = entropy_worst.max(entropy);
        let list = aucs.iter().map(|(c, a)| format!("{c}:{a:.3}")).collect::<Vec<_>>().join(" ");
        note(&format!(
            "layer {}: AUC {list} | never-present concept mean score {mean:.5}, entropy {entropy:.2e}",
            sae.layer
        ));
    }
    outcome(
        deepest_min >= 0.95 && absent_ok,
        format!(
            "min held-out AUC {deepest_min:.4} at tap {deepest} (>= 0.95, concepts with >= 5% prevalence); \
             never-present concept max mean score {absent_worst:.5} (< 0.05), max entropy {entropy_worst:.2e} (< 1e-2)"
        ),
    )
}

fn localization(t: &Trained) -> Outcome {
    let earliest = *t.ckpt.tap_layers().iter().min().unwrap();
    let sae = t.ckpt.layer(earliest).unwrap();
    let ratio = dataset_loc_ratio(&t.model, sae, &t.data, &t.held, false).unwrap().ratio().unwrap();
    for other in &t.ckpt.layers {
        let r = dataset_loc_ratio(&t.model, other, &t.data, &t.held, false).unwrap();
        note(&format!("layer {}: concept-only LocR {:.3}", other.layer, r.ratio().unwrap_or(f64::NAN)));
    }
    // residual scaling on real reconstructions
    let ids: Vec<usize> = t.held.iter().copied().take(16).collect();
    let h = sae.features(&t.model, &t.data.batch(&ids)).unwrap();
    let r = sae.readout(&h).unwrap();
    let recon = sae.concept_recon(&r.s, &r.m).unwrap();
    let mut worst = 0.0f64;
    for (b, &id) in ids.iter().enumerate() {
        let regions = t.data.samples[id].regions(sae.height).unwrap();
        let (hb, rb) = (h.index0(b), recon.index0(b));
        let base = loc_ratio(&hb, &rb, &regions).unwrap();
        for k in [0.25f32, 0.5, 2.0, 3.0, 10.0] {
            let scaled = hb.zip_map(&rb, |a, c| a - k * (a - c)).unwrap();
            let s = loc_ratio(&hb, &scaled, &regions).unwrap();
            worst = worst.max((s - base).abs() / base);
        }
    }
    outcome(
        ratio >= 1.2 && worst <= 1e-4,
        format!("concept-only LocR {ratio:.3} at tap {earliest} (>= 1.2); residual scaling changes LocR by at most {worst:.1e} relative"),
    )
}

fn reconstruction_ordering(t: &Trained) -> Outcome {
    let mut pass = true;
    let mut worst_ratio = 0.0f64;
    for sae in &t.ckpt.layers {
        let stats = sae.stats().unwrap();
        let train = stats.standardize(&dataset_features(&t.model, &t.data, &t.train, sae.layer).unwrap()).unwrap();
        let held = stats.standardize(&dataset_features(&t.model, &t.data, &t.held, sae.layer).unwrap()).unwrap();
        let baseline = mean_baseline_mse(&train, &held).unwrap();
        let (mut concept, mut joint) = (0.0, 0.0);
        let idx: Vec<usize> = (0..t.held.len()).collect();
        for chunk in idx.chunks(128) {
            let h = gather_rows(&held, chunk);
            let r = sae.readout(&h).unwrap();
            concept += mse(&sae.concept_recon(&r.s, &r.m).unwrap(), &h).unwrap() * chunk.len() as f64;
            joint += mse(&sae.reconstruct(&h).unwrap(), &h).unwrap() * chunk.len() as f64;
        }
        concept /= t.held.len() as f64;
        joint /= t.held.len() as f64;
        pass &= joint <= 0.5 * concept && concept < baseline;
        worst_ratio = worst_ratio.max(joint / concept);
        note(&format!(
            "layer {}: mean baseline {baseline:.4}, concept-only {concept:.4}, joint {joint:.4} (ratio {:.3})",
            sae.layer,
            joint / concept
        ));
    }
    outcome(
        pass,
        format!("every tap: joint MSE <= 0.5 x concept MSE (worst ratio {worst_ratio:.3}) and concept MSE < mean baseline"),
    )
}

fn entropy_diagnosis(t: &Trained, adv_images: &Tensor<f32>) -> Outcome {
    let clean = t.data.batch(&t.held);
    let labels: Vec<usize> = t.held.iter().map(|&i| t.data.samples[i].label).collect();
    let preds = t.model.predict_batch_chunked(&clean).unwrap();
    let (mut ordered, mut bounded) = (true, true);
    let mut notes = Vec::new();
    for sae in &t.ckpt.layers {
        let scores = layer_scores(&t.model, sae, &clean).unwrap();
        let adv = layer_scores(&t.model, sae, adv_images).unwrap();
        for s in scores.iter().chain(&adv) {
            let e = score_entropy(s);
            bounded &= (0.0..=std::f64::consts::LN_2).contains(&e);
        }
        let g = group_entropy(sae.layer, &scores, &preds, &labels, Some(&adv), &mut notes).unwrap();
        let (c, i) = (g.correct.unwrap_or(f64::NAN), g.incorrect.unwrap_or(f64::NAN));
        ordered &= i > c;
        note(&format!(
            "layer {}: all {:.4}, correct {c:.4} (n={}), incorrect {i:.4} (n={}), adversarial {:.4}",
            sae.layer,
            g.all,
            g.counts[0],
            g.counts[1],
            g.adversarial.unwrap_or(f64::NAN)
        ));
    }
    outcome(
        ordered && bounded,
        format!(
            "incorrect > correct at every tap: {ordered}; all per-image entropies within [0, ln 2]: {bounded}"
        ),
    )
}

fn intervention(t: &Trained) -> Outcome {
    // no-edit requests against the reconstruction baseline
    let ids: Vec<usize> = t.held.iter().copied().take(64).collect();
    let images = t.data.batch(&ids);
    let empty = vec![BTreeMap::new(); ids.len()];
    let mut bitwise = true;
    for sae in &t.ckpt.layers {
        for r in intervene_batch(&t.model, sae, &images, &empty).unwrap() {
            bitwise &= r.counterfactual_prediction == r.baseline_prediction
                && r.counterfactual_logits.iter().map(|v| v.to_bits()).eq(r.baseline_logits.iter().map(|v| v.to_bits()))
                && r.feature_delta_norm == 0.0
                && r.edited_scores == r.scores;
        }
    }

    // class-conditional edits on a fresh pool of misclassified images
    let pool = generate_dataset(POOL_SEED, POOL_SIZE);
    let all: Vec<usize> = (0..pool.len()).collect();
    let preds = t.model.predict(&pool, &all).unwrap();
    let wrong: Vec<usize> = all.iter().copied().filter(|&i| preds[i] != pool.samples[i].label).collect();
    let imgs: Vec<Tensor<f32>> = wrong.iter().map(|&i| pool.samples[i].image.clone()).collect();
    let labels: Vec<usize> = wrong.iter().map(|&i| pool.samples[i].label).collect();
    let rows = batch_correct(&t.model, &t.ckpt, &imgs, &labels, |l| class_edit_rule(l, t.model.num_classes)).unwrap();
    for r in &rows {
        note(&format!(
            "layer {}: corrected {:.3}, no-edit baseline {:.3} over {} misclassified images",
            r.layer, r.corrected, r.baseline, r.images
        ));
    }
    let best = rows.iter().max_by(|a, b| a.corrected.total_cmp(&b.corrected)).unwrap();
    let margin = best.corrected - best.baseline;
    outcome(
        bitwise && best.corrected >= 0.30 && margin >= 0.15,
        format!(
            "no-edit bitwise: {bitwise}; best tap {} corrects {:.1}% (>= 30%) of {} misclassifications, {:+.1} points over no-edit (>= 15)",
            best.layer,
            100.0 * best.corrected,
            best.images,
            100.0 * margin
        ),
    )
}

/// SHA-256 of each layer's raw parameter bytes.
fn layer_checksums(model: &TargetModel) -> Vec<String> {
    model
        .layers
        .iter()
        .map(|l| {
            let tensors: Vec<&Tensor<f32>> = match l {
                Layer::Conv { kernel, bias } => vec![kernel, bias],
                Layer::Dense { weight, bias } => vec![weight, bias],
                _ => vec![],
            };
            let bytes: Vec<u8> = tensors.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
            sha256_hex(&bytes)
        })
        .collect()
}

fn vulnerability(t: &Trained, js: &JsReport, adv_held: &csae_core::model::AdversarialSet) -> Outcome {
    let clean = t.data.batch(&t.held);
    let labels: Vec<usize> = t.held.iter().map(|&i| t.data.samples[i].label).collect();
    let clean_acc = accuracy_of(&t.model.predict_batch_chunked(&clean).unwrap(), &labels).unwrap();
    let refs: Vec<&Tensor<f32>> = adv_held.images.iter().collect();
    let adv_acc = accuracy_of(&t.model.predict_batch_chunked(&Tensor::stack(&refs).unwrap()).unwrap(), &labels).unwrap();
    let drop = clean_acc - adv_acc;
    let all_positive = js.ranking.iter().all(|r| r.1 > 0.0);
    note(&format!(
        "JS ranking {}",
        js.ranking.iter().map(|(l, d)| format!("{l}:{d:.4}")).collect::<Vec<_>>().join(" > ")
    ));

    let adv_train = generate_adversarial(&t.model, &t.data, &t.train, EPSILON).unwrap();
    let clean_train = t.data.batch(&t.train);
    let eval = FinetuneEval {
        clean: &clean,
        adversarial: adv_held,
        labels: &labels,
        ckpt: None,
    };
    let before = layer_checksums(&t.model);
    let mut gains = Vec::new();
    let mut frozen = true;
    for tap in [js.ranking[0].0, js.ranking.last().unwrap().0] {
        let layer = owning_layer(&t.model, tap).unwrap();
        let (tuned, r) =
            finetune_layer(&t.model, layer, &clean_train, &adv_train, &eval, &FinetuneConfig::default()).unwrap();
        let after = layer_checksums(&tuned);
        frozen &= (0..before.len()).filter(|&l| l != layer).all(|l| before[l] == after[l]);
        frozen &= before[layer] != after[layer];
        let gain = r.adversarial_accuracy_after - r.adversarial_accuracy_before;
        note(&format!(
            "finetune tap {tap} (layer {layer}): adversarial {:.3} -> {:.3}, clean {:.3} -> {:.3}",
            r.adversarial_accuracy_before, r.adversarial_accuracy_after, r.clean_accuracy_before, r.clean_accuracy_after
        ));
        gains.push((tap, gain));
    }
    outcome(
        drop > 0.20 && all_positive && gains[0].1 >= gains[1].1 && frozen,
        format!(
            "FGSM eps {EPSILON} accuracy {clean_acc:.3} -> {adv_acc:.3} (drop {:.1} points > 20); all JS > 0: {all_positive}; \
             gain top-JS tap {} {:+.3} >= bottom-JS tap {} {:+.3}; frozen layers checksum-identical: {frozen}",
            100.0 * drop,
            gains[0].0,
            gains[0].1,
            gains[1].0,
            gains[1].1
        ),
    )
}

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig {
        taps: vec![7],
        ..PipelineConfig::default()
    };
    for s in [&mut c.tokenizer, &mut c.aggregator, &mut c.free] {
        s.epochs = 1;
    }
    c
}

/// Every corruption of `bytes` must come back as an error, not a panic.
fn corruption_errors(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<(), WorkbenchError>) -> (usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cases = 0;
    let mut all_err = true;
    let mut check = |b: &[u8]| {
        cases += 1;
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| decode(b)));
        all_err &= matches!(r, Ok(Err(_)));
    };
    check(&[]);
    for _ in 0..40 {
        let mut b = bytes.to_vec();
        let at = rng.random_range(0..b.len());
        b[at] ^= 1 << rng.random_range(0..8);
        check(&b);
        let cut = rng.random_range(0..bytes.len());
        check(&bytes[..cut]);
    }
    (cases, all_err)
}

fn determinism_and_formats(t: &Trained) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    // same seed, same bytes
    let (again, _) = train_target(
        &t.data,
        &TargetTrainConfig {
            seed: MODEL_SEED,
            ..TargetTrainConfig::default()
        },
    )
    .unwrap();
    let model_same = encode_model(&again, None).unwrap() == encode_model(&t.model, None).unwrap();
    let small_a = run_pipeline(&t.data, &t.model, &small_config()).map_err(|f| f.error).unwrap();
    let small_b = run_pipeline(&t.data, &t.model, &small_config()).map_err(|f| f.error).unwrap();
    let sae_same = encode_sae(&small_a, None).unwrap() == encode_sae(&small_b, None).unwrap();

    // checkpoint round trip through the filesystem
    let path = tmp.path().join("acceptance.ckpt");
    save_sae(&path, &t.ckpt, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (loaded, _) = load_sae(&path).unwrap();
    let ckpt_round = encode_sae(&loaded, None).unwrap() == bytes
        && loaded.fingerprint() == t.ckpt.fingerprint()
        && t.ckpt.layers.iter().zip(&loaded.layers).all(|(a, b)| {
            a.tokenizer.as_ref().unwrap().tensors().iter().zip(b.tokenizer.as_ref().unwrap().tensors()).all(|(x, y)| x.bit_eq(y))
                && a.aggregator.as_ref().unwrap().tensors().iter().zip(b.aggregator.as_ref().unwrap().tensors()).all(|(x, y)| x.bit_eq(y))
                && a.free.as_ref().unwrap().tensors().iter().zip(b.free.as_ref().unwrap().tensors()).all(|(x, y)| x.bit_eq(y))
        });
    let (model_back, _) = decode_model(&encode_model(&t.model, None).unwrap()).unwrap();
    let model_round = model_back == t.model;

    // dump round trip of every trained tensor
    let names: Vec<String> = (0..t.ckpt.layers.len())
        .flat_map(|i| (0..7).map(move |j| format!("layer{i}/tokenizer/{j}")))
        .collect();
    let tensors: Vec<&Tensor<f32>> = t.ckpt.layers.iter().flat_map(|l| l.tokenizer.as_ref().unwrap().tensors()).collect();
    let records: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(tensors.iter().copied()).collect();
    let dump_path = tmp.path().join("tokenizers.dump");
    write_dump(&dump_path, &records).unwrap();
    let back = read_dump(&dump_path).unwrap();
    let dump_round = back.len() == records.len()
        && back.iter().zip(&records).all(|((n, a), (m, b))| n == m && a.bit_eq(b));

    // corrupted inputs fail with named errors
    let dump_bytes = encode_dump(&records).unwrap();
    let (dump_cases, dump_err) = corruption_errors(&dump_bytes, |b| decode_dump(b).map(|_| ()));
    let (ckpt_cases, ckpt_err) = corruption_errors(&bytes, |b| decode_sae(b).map(|_| ()));
    let mut flipped = dump_bytes.clone();
    let last = flipped.len() - 8;
    flipped[last] ^= 0x40;
    let named = match decode_dump(&flipped) {
        Err(WorkbenchError::Checksum(what)) => what.contains(names.last().unwrap().as_str()),
        _ => false,
    };
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let magic_named = matches!(decode_sae(&magic), Err(WorkbenchError::BadMagic { .. }));
    note(&format!(
        "target retrain identical {model_same}, SAE retrain identical {sae_same}, checkpoint {} bytes",
        bytes.len()
    ));
    note(&format!(
        "{dump_cases} corrupted dumps and {ckpt_cases} corrupted checkpoints all rejected: {}",
        dump_err && ckpt_err
    ));
    outcome(
        model_same && sae_same && ckpt_round && model_round && dump_round && dump_err && ckpt_err && named && magic_named,
        format!(
            "same seed bit-identical: {}; round trips bitwise: {}; corruption gives named errors: {}",
            model_same && sae_same,
            ckpt_round && model_round && dump_round,
            dump_err && ckpt_err && named && magic_named
        ),
    )
}

fn main() {
    // `cargo test -- --list` and name filters come through as arguments
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let mut suite = Suite {
        results: Vec::new(),
        start: Instant::now(),
    };
    println!("acceptance suite: {DATA_SIZE} images (seed {DATA_SEED}), target seed {MODEL_SEED}");
    suite.run("gradient oracle", gradient_oracle);
    suite.run("conv oracle", conv_oracle);
    suite.run("hyperparameter fidelity", hyperparameter_fidelity);
    suite.run("fusion rule", fusion_rule);

    let trained = train_all();
    let t = &trained;
    let (js, adv_held) = rank_vulnerability(&t.model, &t.ckpt, &t.data, &t.held, EPSILON).unwrap();
    let refs: Vec<&Tensor<f32>> = adv_held.images.iter().collect();
    let adv_images = Tensor::stack(&refs).unwrap();

    suite.run("tokenizer quality", || tokenizer_quality(t));
    suite.run("localization", || localization(t));
    suite.run("reconstruction ordering", || reconstruction_ordering(t));
    suite.run("entropy diagnosis", || entropy_diagnosis(t, &adv_images));
    suite.run("intervention", || intervention(t));
    suite.run("vulnerability loop", || vulnerability(t, &js, &adv_held));
    suite.run("determinism and formats", || determinism_and_formats(t));

    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        suite.results.len() - failed.len(),
        suite.results.len(),
        suite.start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
