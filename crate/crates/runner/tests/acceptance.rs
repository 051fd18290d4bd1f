//! Exit criteria. Each check prints one line; only criterion 8 is a warning.
//!
//! Run with `cargo test -p hybridlab --test acceptance -- --nocapture` to see
//! the per-criterion lines on success.

mod common;

use std::time::{Duration, Instant};

use common::*;
use hybridlab::config::{ExperimentConfig, ProbeSettings, Suite};
use hybridlab::output::read_results;
use hybridlab::report::positional_gradient;
use hybridlab::results::RunResults;
use hybridlab::run::{run, TIMINGS_FILE};
use hybridlab_core::ablation::*;
use hybridlab_core::config::{HybridLayout, LayerKind, LayoutKind, ModelConfig};
use hybridlab_core::eval::{ppl_ratio, Perplexity};
use hybridlab_core::metrics::{correlate, kl_divergence, layer_components, pearson};
use hybridlab_core::mixers::{attention_forward, delta_forward, heads_of, ssm_forward};
use hybridlab_core::model::forward;
use hybridlab_core::params::{LayerParams, MixerParams, ParamFamily, Parameters};
use hybridlab_core::reference;
use hybridlab_core::stats::{bootstrap_drop_ci, bootstrap_drop_ci_scores, redundancy_ratio};
use hybridlab_core::tensor::Tensor;
use hybridlab_core::train::{grad_check, SampleSpec, TrainConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let used = start.elapsed();
    ensure(used <= budget, || format!("{what} took {used:.1?}, budget {budget:?}"))
}

fn micro_layouts() -> Vec<HybridLayout> {
    use LayerKind::*;
    vec![
        HybridLayout::sequential(vec![LinearAttention, SoftmaxAttention, LinearAttention, SoftmaxAttention]),
        HybridLayout::parallel(4),
    ]
}

fn logits(p: &Parameters<f32>, cfg: &ModelConfig, t: &[u32], cond: Option<&AblationCondition>) -> Vec<u32> {
    forward(p, cfg, t, false, cond).unwrap().0.data.iter().map(|v| v.to_bits()).collect()
}

fn micro_tokens(cfg: &ModelConfig, n: u32, salt: u32) -> Vec<u32> {
    (0..n).map(|i| (i * 7 + salt) % cfg.vocab_size as u32).collect()
}

fn c1_ablation_oracles() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for layout in micro_layouts() {
        let cfg = ModelConfig::micro(layout.clone());
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let t = micro_tokens(&cfg, 24, 3);
        for l in 0..4 {
            if layout.kind != LayoutKind::Parallel {
                let cond = AblationCondition::skip_layers("skip", [l], Source::LayerSweep);
                let (rp, rc) = reference::without_layer(&p, &cfg, l);
                ensure(logits(&p, &cfg, &t, Some(&cond)) == logits(&rp, &rc, &t, None), || {
                    format!("skip of layer {l} differs from the rebuilt model ({:?})", layout.kind)
                })?;
                checked += 1;
            }
            for kind in layer_components(&cfg, l) {
                let id = ComponentId::new(l, kind);
                let cond = AblationCondition::zero("zero", [id], Source::LayerSweep);
                let zp = reference::with_zeroed_component(&p, id);
                ensure(logits(&p, &cfg, &t, Some(&cond)) == logits(&zp, &cfg, &t, None), || {
                    format!("zeroing {id:?} differs from the zero-function model")
                })?;
                checked += 1;
            }
        }
    }
    within_budget(start, Duration::from_secs(10), "oracle comparison")?;
    Ok(format!("{checked} conditions bit-exact"))
}

fn c2_reversibility() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for layout in micro_layouts() {
        let cfg = ModelConfig::micro(layout.clone());
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let t = micro_tokens(&cfg, 24, 5);
        let never = logits(&p, &cfg, &t, None);
        let mut pool = enumerate_group_conditions(&layout);
        pool.extend(enumerate_layer_sweep(&layout));
        for g in enumerate_group_conditions(&layout) {
            pool.extend(enumerate_random_controls(&layout, &g, 3, 1).unwrap());
        }
        for _ in 0..20 {
            let cond = pool.choose(&mut rng).unwrap();
            let _ = logits(&p, &cfg, &t, Some(cond));
            ensure(logits(&p, &cfg, &t, None) == never, || format!("baseline changed after {}", cond.name))?;
        }
    }
    within_budget(start, Duration::from_secs(30), "reversibility")?;
    Ok("baseline bit-identical after 20 random conditions per layout".into())
}

fn c3_mixer_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for trial in 0..100 {
        let input = |rng: &mut ChaCha8Rng, width: usize| {
            let len = rng.random_range(1..=64);
            Tensor::<f32>::from_vec(&[len, width], (0..len * width).map(|_| rng.sample(StandardNormal)).collect())
        };
        for (slot, layout) in [HybridLayout::three_to_one(1), HybridLayout::parallel(1)].into_iter().enumerate() {
            let cfg = ModelConfig {
                max_seq_len: 64,
                init_seed: trial,
                ..ModelConfig::micro(layout)
            };
            let mut p = Parameters::<f32>::init(&cfg).unwrap();
            for (_, t) in p.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v += 0.3 * rng.sample::<f32, _>(StandardNormal));
            }
            let xn = input(&mut rng, cfg.d_model);
            match (&p.layers[0], slot) {
                (LayerParams::Single { mixer: MixerParams::Linear(d), .. }, 0) => {
                    let (out, _) = delta_forward(d, &xn, heads_of(&cfg), false);
                    let want = reference::linear_attention_component(d, &xn, cfg.n_heads, cfg.key_dim);
                    worst[0] = worst[0].max(reference::relative_error(&out, &want));
                }
                (LayerParams::Parallel { attn, ssm, .. }, 1) => {
                    let (out, _) = ssm_forward(ssm, &xn, cfg.n_heads, false);
                    worst[1] = worst[1].max(reference::relative_error(&out, &reference::ssm_component(ssm, &xn, cfg.n_heads)));
                    let (out, _) = attention_forward(attn, &xn, heads_of(&cfg), false);
                    let want = reference::attention_component(attn, &xn, cfg.n_heads);
                    worst[2] = worst[2].max(reference::relative_error(&out, &want));
                }
                _ => unreachable!(),
            }
        }
    }
    let [lin, ssm, attn] = worst;
    ensure(worst.iter().all(|&e| e < 1e-5), || {
        format!("relative errors linear {lin:.2e}, ssm {ssm:.2e}, attention {attn:.2e} exceed 1e-5")
    })?;
    within_budget(start, Duration::from_secs(60), "mixer oracles")?;
    Ok(format!("worst relative error linear {lin:.1e}, ssm {ssm:.1e}, attention {attn:.1e}"))
}

fn c4_gradients() -> Outcome {
    let start = Instant::now();
    let mut families = std::collections::BTreeSet::new();
    let mut worst: f64 = 0.0;
    for layout in [HybridLayout::three_to_one(1), HybridLayout::parallel(2)] {
        let cfg = ModelConfig::micro(layout);
        let p = Parameters::<f64>::init(&cfg).unwrap();
        let tokens = micro_tokens(&cfg, 13, 2);
        let spec = SampleSpec {
            per_tensor: 4,
            ..SampleSpec::default()
        };
        let rep = grad_check(&p, &cfg, &tokens, spec).unwrap();
        ensure(rep.max_rel_error < 1e-4, || {
            format!("relative error {:.2e} at {} ({:?})", rep.max_rel_error, rep.worst_path, cfg.layout.kind)
        })?;
        worst = worst.max(rep.max_rel_error);
        families.extend(rep.per_family.keys().copied());
    }
    for fam in [
        ParamFamily::Embedding,
        ParamFamily::Unembedding,
        ParamFamily::Norm,
        ParamFamily::SoftmaxAttention,
        ParamFamily::LinearAttention,
        ParamFamily::Ssm,
        ParamFamily::Mlp,
    ] {
        ensure(families.contains(&fam), || format!("{fam:?} never sampled"))?;
    }
    within_budget(start, Duration::from_secs(300), "gradient check")?;
    Ok(format!("max relative error {worst:.1e} over {} families", families.len()))
}

fn c5_statistics_oracles() -> Outcome {
    let start = Instant::now();
    let cases: [(&[f64], &[f64]); 4] = [
        (&[1.0, 1.0, 0.0, 1.0], &[0.0, 1.0, 0.0, 0.0]),
        (&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0]),
        (&[0.5, 0.9, 0.25, 0.75], &[0.1, 0.3, 0.8, 0.2]),
        (&[1.0, 1.0], &[0.0, 1.0]),
    ];
    let mut worst: f64 = 0.0;
    for (b, a) in cases {
        let (lo, hi) = reference::exhaustive_drop_ci(b, a, 0.95);
        let ci = bootstrap_drop_ci_scores(b, a, 20_000, 5).unwrap();
        worst = worst.max((ci.lo - lo).abs()).max((ci.hi - hi).abs());
    }
    ensure(worst <= 0.02, || format!("bootstrap bounds off by {worst:.3} from enumeration"))?;

    let all_wrong = bootstrap_drop_ci(&[true; 10], &[false; 10], 1000, 1).unwrap();
    ensure((all_wrong.lo, all_wrong.hi) == (-1.0, -1.0), || format!("all-lost CI {all_wrong:?}"))?;
    let same = [true, false, true, true, false];
    let unchanged = bootstrap_drop_ci(&same, &same, 1000, 1).unwrap();
    ensure((unchanged.lo, unchanged.hi) == (0.0, 0.0), || format!("unchanged CI {unchanged:?}"))?;

    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    ensure((r - 0.5).abs() < 1e-12, || format!("pearson {r}"))?;
    let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]);
    ensure((kl - 2f64.ln()).abs() < 1e-9, || format!("KL {kl}"))?;
    within_budget(start, Duration::from_secs(60), "statistics oracles")?;
    Ok(format!("bootstrap within {worst:.3} of enumeration, r = {r}, KL = {kl:.12}"))
}

fn round_sig(v: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits - 1 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

fn c6_reported_arithmetic() -> Outcome {
    // (loss, reported perplexity, significant figures printed up to 3), baseline first
    let rows = [
        [(2.03, 7.6, 2), (12.50, 268_337.0, 3), (6.44, 625.0, 3)],
        [(1.73, 5.6, 2), (5.69, 295.0, 3), (2.88, 17.7, 3)],
    ];
    let reported_ratios = [[35_307.0, 82.0], [53.0, 3.2]];
    let mut lines = Vec::new();
    for (model, ratios) in rows.iter().zip(reported_ratios) {
        let ppl: Vec<f64> = model.iter().map(|&(loss, _, _)| Perplexity::from_loss(loss, 1).perplexity).collect();
        for (&(loss, reported, digits), &got) in model.iter().zip(&ppl) {
            let sig = |v: f64| round_sig(v, digits);
            // a loss printed to two decimals pins exp(loss) only to exp(loss ± 0.005)
            let (lo, hi) = (sig((loss - 0.005f64).exp()), sig((loss + 0.005f64).exp()));
            let want = sig(reported);
            ensure(sig(got) == want || (lo <= want && want <= hi), || {
                format!("exp({loss}) = {got:.4} does not reproduce {reported}")
            })?;
            lines.push(format!("{}", sig(got)));
        }
        for (k, want) in ratios.into_iter().enumerate() {
            let got = ppl_ratio(ppl[k + 1], ppl[0]).unwrap();
            let from_reported = ppl_ratio(model[k + 1].1, model[0].1).unwrap();
            ensure((got / want - 1.0).abs() <= 0.02 && (from_reported / want - 1.0).abs() <= 0.02, || {
                format!("ratio {got:.1} (reported inputs {from_reported:.1}) vs {want}")
            })?;
            lines.push(format!("x{from_reported:.1}"));
        }
    }
    for (targeted, random, want) in [(268_337.0, 1_748_920.0, 6.5), (625.0, 41_154.0, 66.0)] {
        let r = redundancy_ratio(targeted, random).unwrap().ratio;
        ensure((r / want - 1.0).abs() <= 0.02, || format!("redundancy {r:.2} vs {want}"))?;
        lines.push(format!("redundancy {r:.2}"));
    }
    Ok(lines.join(" "))
}

fn trained_config(model: ModelConfig, model_id: &str, out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        model_id: model_id.into(),
        model,
        train: Some(TrainConfig {
            steps: 400,
            batch_size: 8,
            seq_len: 128,
            learning_rate: 3e-3,
            warmup_steps: 40,
            grad_clip_norm: 1.0,
            optimizer_seed: 0,
            data_seed: 1,
            weight_decay: 0.01,
            min_lr_fraction: 0.1,
            checkpoint_every: 0,
        }),
        checkpoint_path: None,
        corpus_path: corpus_path(),
        suites: vec![Suite::Group, Suite::Perplexity, Suite::LayerSweep],
        random_control_trials: 1,
        perplexity_control_trials: 1,
        random_removal_counts: vec![],
        global_seed: 7,
        output_dir: out.to_path_buf(),
        eval_tokens: 32_768,
        probes: ProbeSettings::default(),
        n_resamples: 1000,
    }
}

fn train_default_hybrids(dir: &std::path::Path) -> (Vec<RunResults>, Duration, Duration) {
    let mut runs = Vec::new();
    let (mut train, mut eval) = (Duration::ZERO, Duration::ZERO);
    for (id, model) in [("sequential", ModelConfig::default_sequential()), ("parallel", ModelConfig::default_parallel())] {
        let out = dir.join(id);
        run(&trained_config(model, id, &out)).unwrap();
        let timings: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(TIMINGS_FILE)).unwrap()).unwrap();
        let secs = |k: &str| Duration::from_secs_f64(timings[k].as_f64().unwrap_or(0.0));
        train += secs("<train>");
        eval += secs("<evaluate>");
        runs.push(read_results(&out).unwrap());
    }
    (runs, train, eval)
}

fn c7_neither_component_bypassed(runs: &[RunResults], train: Duration, eval: Duration) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for r in runs {
        let base = r.baseline().result.perplexity.unwrap();
        let frac = base / r.unigram_perplexity;
        lines.push(format!("{} ppl {base:.2} ({frac:.3} of unigram)", r.model_id));
        if frac > 0.6 {
            failures.push(format!("{} baseline {frac:.3} of unigram perplexity", r.model_id));
        }
        for c in r.by_source(Source::Group) {
            let ratio = c.result.ppl_ratio.unwrap();
            lines.push(format!("{}/{} x{ratio:.2}", r.model_id, c.condition.name));
            if ratio < 2.0 {
                failures.push(format!("{}/{} only x{ratio:.2}", r.model_id, c.condition.name));
            }
        }
    }
    if train > Duration::from_secs(30 * 60) {
        failures.push(format!("training took {train:.0?}"));
    }
    if eval > Duration::from_secs(5 * 60) {
        failures.push(format!("evaluation took {eval:.0?}"));
    }
    let detail = format!("{} (train {train:.0?}, eval {eval:.0?})", lines.join(", "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

fn c8_positional_gradient(runs: &[RunResults]) -> Outcome {
    let mut lines = Vec::new();
    let mut holds = true;
    for r in runs {
        let g = positional_gradient(r).ok_or_else(|| format!("{}: no sweep perplexities", r.model_id))?;
        holds &= g.holds;
        lines.push(format!(
            "{} {}: early +{:.3}, late +{:.3}",
            r.model_id,
            g.kind.label(),
            g.early_mean_increase,
            g.late_mean_increase
        ));
    }
    if holds {
        Ok(lines.join(", "))
    } else {
        Err(lines.join(", "))
    }
}

fn c9_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let mut cfg = tiny_config(HybridLayout::parallel(3), ALL_SUITES.to_vec(), &out);
        cfg.random_removal_counts = vec![1, 2];
        run(&cfg).unwrap();
        let mut s = snapshot(&out);
        s.remove(TIMINGS_FILE);
        snaps.push(s);
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    ensure(a.keys().eq(b.keys()), || "file sets differ".into())?;
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure(differing.is_empty(), || format!("differs: {differing:?}"))?;
    let outputs = a.keys().filter(|k| [".csv", ".json", ".svg"].iter().any(|e| k.ends_with(e))).count();
    within_budget(start, Duration::from_secs(45 * 60), "two end-to-end runs")?;
    Ok(format!("{outputs} CSV/JSON/SVG files byte-identical"))
}

fn c10_statistical_sanity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut covered = 0;
    for rep in 0..200 {
        let base: Vec<bool> = (0..100).map(|_| rng.random_bool(0.6)).collect();
        let abl: Vec<bool> = (0..100).map(|_| rng.random_bool(0.6)).collect();
        let ci = bootstrap_drop_ci(&base, &abl, 1000, rep).unwrap();
        covered += (ci.lo <= 0.0 && 0.0 <= ci.hi) as usize;
    }
    ensure(covered >= 180, || format!("coverage {covered}/200"))?;
    let mut small = 0;
    for trial in 0..200 {
        let x: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        small += (correlate("null", &x, &y, 2000, trial).unwrap().p_value < 0.05) as usize;
    }
    let frac = small as f64 / 200.0;
    ensure((0.01..=0.10).contains(&frac), || format!("p < 0.05 fraction {frac}"))?;
    within_budget(start, Duration::from_secs(300), "statistical sanity")?;
    Ok(format!("coverage {covered}/200, p < 0.05 fraction {frac:.3}"))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let (runs, train, eval) = train_default_hybrids(dir.path());
    let outcomes: Vec<(u8, &str, Outcome, bool)> = vec![
        (1, "ablation oracles", c1_ablation_oracles(), true),
        (2, "reversibility", c2_reversibility(), true),
        (3, "mixer oracles", c3_mixer_oracles(), true),
        (4, "gradient check", c4_gradients(), true),
        (5, "statistics oracles", c5_statistics_oracles(), true),
        (6, "reported arithmetic", c6_reported_arithmetic(), true),
        (7, "neither component bypassed", c7_neither_component_bypassed(&runs, train, eval), true),
        (8, "positional gradient", c8_positional_gradient(&runs), false),
        (9, "determinism", c9_determinism(), true),
        (10, "statistical sanity", c10_statistical_sanity(), true),
    ];
    let mut failed = Vec::new();
    for (n, name, outcome, gated) in &outcomes {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(why) if !gated => println!("criterion {n:>2} WARN {name}: {why}"),
            Err(why) => {
                println!("criterion {n:>2} FAIL {name}: {why}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
