//! End-to-end acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line each, and fails if any criterion failed.
//!
//! The trend criteria train full-size models (2000 train / 400 test) for three
//! master seeds; expect about an hour on one core.

use std::path::Path;
use std::time::Instant;

use mrvpc_core::data::{gen_instance, WorldSpec};
use mrvpc_core::metrics::{cider_corpus, meteor_lite, r4};
use mrvpc_core::rng::stream;
use mrvpc_core::timetok::{time_to_token, token_to_time};
use mrvpc_core::train::{drop_am, make_augmented};
use mrvpc_harness::checkpoint;
use mrvpc_harness::config::RunConfig;
use mrvpc_harness::experiment::{
    distill, load_data, provenance, run_ablation, run_drop_sweep, run_gradcheck, run_pipeline, sweep_label,
    train_dropam_at, Bench, PIPELINE_FILES,
};
use mrvpc_harness::report::{lookup, Row};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    results: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &'static str, pass: bool, detail: String) {
        println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push(Outcome { id, name, pass, detail });
    }
}

fn acceptance_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.train.epochs = 10;
    cfg.train.lr = 1e-3;
    cfg.validate().unwrap();
    cfg
}

fn gradient_integrity(s: &mut Suite) {
    let cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let (report, n_params) = run_gradcheck(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report.max_rel_error;
    s.record(
        1,
        "gradient integrity",
        worst < 1e-4 && secs < 60.0,
        format!("max rel error {worst:.3e} over {n_params} parameters in {secs:.1}s"),
    );
}

fn dropam_statistics(s: &mut Suite) {
    let inst = gen_instance(&WorldSpec::default(), 3).unwrap();
    let mut rng = stream(1, "acceptance-dropam", 0);
    let n = 100_000;
    let (mut a, mut e, mut both) = (0u32, 0u32, 0u32);
    for _ in 0..n {
        let out = drop_am(&inst, 0.5, 0.5, false, &mut rng);
        let (da, de) = (out.asr.is_none(), out.events.is_none());
        a += da as u32;
        e += de as u32;
        both += (da && de) as u32;
    }
    let rate = |k: u32| k as f64 / n as f64;
    let (ra, re, rb) = (rate(a), rate(e), rate(both));
    s.record(
        2,
        "drop rates",
        (ra - 0.5).abs() <= 0.006 && (re - 0.5).abs() <= 0.006 && (rb - 0.25).abs() <= 0.006,
        format!("asr {ra:.4}, events {re:.4}, both {rb:.4}"),
    );
}

fn distill_structure(s: &mut Suite, cfg: &RunConfig, dir: &Path) {
    let data = load_data(cfg).unwrap();
    let teacher = checkpoint::load(&dir.join("vanilla.ckpt")).unwrap().model().unwrap();
    let kd = distill(cfg, &data, &teacher).unwrap();
    let aligned = kd.items.iter().zip(&data.train).all(|(d, src)| {
        let bits = |t: &mrvpc_core::nn::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        d.source_id == src.id
            && d.instance.video.shape() == src.video.shape()
            && bits(&d.instance.video) == bits(&src.video)
            && d.instance.asr == src.asr
            && d.instance.events == src.events
    });
    let aug = make_augmented(&data.train, &kd).unwrap();
    let n = data.train.len();
    s.record(
        3,
        "distillation structure",
        kd.len() == n && aligned && aug.len() == 2 * n,
        format!(
            "|D_kd| {} of {n}, inputs identical {aligned}, |D_aug| {}, {} empty teacher captions",
            kd.len(),
            aug.len(),
            kd.empty_count()
        ),
    );
}

fn tokenization_bound(s: &mut Suite) {
    let n = 100;
    let mut rng = stream(1, "acceptance-timetok", 0);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let t: f64 = rng.random();
        let (bin, _) = time_to_token(t, n).unwrap();
        worst = worst.max((token_to_time(bin, n).unwrap() - t).abs());
    }
    let (last, _) = time_to_token(1.0, n).unwrap();
    s.record(
        4,
        "time tokenization",
        worst <= 0.5 / n as f64 + 1e-12 && last == 99,
        format!("max round-trip error {worst:.6}, t=1 -> bin {last}"),
    );
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn ngrams(t: &[String], n: usize) -> Vec<&[String]> {
    if t.len() < n {
        return Vec::new();
    }
    t.windows(n).collect()
}

/// Dense TF-IDF vectors built by scanning every document for every key.
fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<String>]) -> Vec<f64> {
    let docs = refs.len() as f64;
    cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            if c.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for n in 1..=4 {
                let (cg, rg) = (ngrams(c, n), ngrams(r, n));
                let mut keys: Vec<&[String]> = cg.iter().chain(&rg).copied().collect();
                keys.sort();
                keys.dedup();
                let weight = |g: &[String]| {
                    let df = refs.iter().filter(|d| ngrams(d, n).contains(&g)).count();
                    docs.ln() - (df.max(1) as f64).ln()
                };
                let vc: Vec<f64> = keys.iter().map(|k| cg.iter().filter(|g| *g == k).count() as f64 * weight(k)).collect();
                let vr: Vec<f64> = keys.iter().map(|k| rg.iter().filter(|g| *g == k).count() as f64 * weight(k)).collect();
                let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let (nc, nr) = (norm(&vc), norm(&vr));
                let sim = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
                let delta = c.len() as f64 - r.len() as f64;
                total += sim * (-delta * delta / (2.0 * 36.0)).exp();
            }
            10.0 * total / 4.0
        })
        .collect()
}

fn metric_oracles(s: &mut Suite) {
    let words = ["slice", "the", "bread", "add", "salt", ".", "mix", "bowl", "and"];
    let mut worst = 0.0f64;
    for corpus in 0..20 {
        let mut rng = stream(1, "acceptance-cider", corpus);
        let size = rng.random_range(2..=16);
        let sentence = |rng: &mut mrvpc_core::rng::Rng| -> Vec<String> {
            let len = rng.random_range(0..=18);
            (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
        };
        let refs: Vec<Vec<String>> = (0..size).map(|_| sentence(&mut rng)).collect();
        let cands: Vec<Vec<String>> = refs
            .iter()
            .map(|r| if rng.random_bool(0.25) { r.clone() } else { sentence(&mut rng) })
            .collect();
        let (mean, per) = cider_corpus(&cands, &refs).unwrap();
        let want = cider_oracle(&cands, &refs);
        for (a, b) in per.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((mean - want.iter().sum::<f64>() / want.len() as f64).abs());
    }
    let hand = [
        r4(&toks("a b c d e f g")) == 0.0,
        r4(&toks("a b c d a b c d")) == 0.2,
        r4(&toks("x x x x x")) == 0.5,
        meteor_lite(&toks("w x y z"), &toks("w x y z")) == 0.9921875,
        meteor_lite(&toks("a b"), &toks("c d")) == 0.0,
        meteor_lite(&toks("q"), &toks("q")) == 0.5,
    ];
    let hand_ok = hand.iter().filter(|&&ok| ok).count();
    s.record(
        5,
        "metric oracles",
        worst <= 1e-9 && hand_ok == hand.len(),
        format!("CIDEr max deviation {worst:.2e} over 20 corpora, {hand_ok}/{} hand cases", hand.len()),
    );
}

fn cider(rows: &[Row], scenario: &str, model: &str) -> f64 {
    lookup(rows, scenario, model, "cider").unwrap_or_else(|| panic!("no cider row for {scenario}/{model}"))
}

fn trend_ok(eval: &[Row]) -> (bool, String) {
    let vc = cider(eval, "complete", "vanilla");
    let vv = cider(eval, "video_only", "vanilla");
    let mc = cider(eval, "complete", "mrvpc");
    let mv = cider(eval, "video_only", "mrvpc");
    let ok = vv <= 0.5 * vc && mv >= 0.8 * mc && mv >= 1.5 * vv;
    (ok, format!("vanilla {vc:.2}/{vv:.2}, mrvpc {mc:.2}/{mv:.2}"))
}

fn curve_ok(curve: &[Row], percents: &[f64]) -> (bool, String) {
    let series = |model: &str| -> Vec<f64> {
        percents
            .iter()
            .map(|q| cider(curve, &mrvpc_harness::experiment::curve_label(*q), model))
            .collect()
    };
    let v = series("vanilla");
    let m = series("mrvpc");
    let range = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let monotone = v.windows(2).all(|w| w[1] <= w[0] + 0.02 * range);
    let (dv, dm) = (v[0] - v[v.len() - 1], m[0] - m[m.len() - 1]);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    (
        monotone && dm < dv,
        format!("vanilla [{}] drop {dv:.2}, mrvpc [{}] drop {dm:.2}", fmt(&v), fmt(&m)),
    )
}

#[test]
fn acceptance_criteria() {
    let mut s = Suite::default();
    gradient_integrity(&mut s);
    dropam_statistics(&mut s);
    tokenization_bound(&mut s);
    metric_oracles(&mut s);

    let root = tempfile::tempdir().unwrap();
    let mut trend_pass = 0;
    let mut trend_details = Vec::new();
    let mut first = None;
    for seed in SEEDS {
        let cfg = acceptance_config(seed);
        let dir = root.path().join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).unwrap();
        let out = run_pipeline(&cfg, &dir).unwrap();
        let (ok, detail) = trend_ok(&out.eval);
        println!("  seed {seed}: pipeline {:.0}s, {detail}", out.elapsed.as_secs_f64());
        trend_pass += ok as usize;
        trend_details.push(format!("seed {seed} {}", if ok { "ok" } else { "miss" }));
        if first.is_none() {
            first = Some((cfg, out));
        }
    }
    let (cfg, out) = first.unwrap();

    distill_structure(&mut s, &cfg, &out.dir);

    let (teacher_initial, teacher_final) = (out.teacher_log.initial_loss.unwrap(), *out.teacher_log.epoch_loss.last().unwrap());
    println!("  teacher loss {teacher_initial:.3} -> {teacher_final:.3}");
    assert!(teacher_final < 0.25 * teacher_initial, "teacher did not train");

    s.record(
        6,
        "missing-modality trend",
        trend_pass * 2 > SEEDS.len(),
        format!("{trend_pass}/{} seeds ({})", SEEDS.len(), trend_details.join(", ")),
    );

    let (ok, detail) = curve_ok(&out.curve, &cfg.curve_percents);
    s.record(7, "ASR-missing curve", ok, detail);

    let consistency = |model: &str| lookup(&out.eval, "video_only", model, "consistency").unwrap();
    let (cv, cm) = (consistency("vanilla"), consistency("mrvpc"));
    s.record(8, "prediction consistency", cm > cv, format!("vanilla {cv:.4}, mrvpc {cm:.4}"));

    let data = load_data(&cfg).unwrap();
    let prov = provenance(&cfg);
    let dropam = train_dropam_at(&cfg, &data, 0.5, 0.5).unwrap().model;
    let teacher = checkpoint::load(&out.dir.join("vanilla.ckpt")).unwrap().model().unwrap();
    let student = checkpoint::load(&out.dir.join("mrvpc.ckpt")).unwrap().model().unwrap();
    let mut bench = Bench::new(&cfg, &data.vocab, &data.test);
    let grid = run_ablation(
        &mut bench,
        &prov,
        &[("vanilla", &teacher), ("dropam", &dropam), ("mrvpc", &student)],
    )
    .unwrap();
    for model in ["vanilla", "dropam", "mrvpc"] {
        let cells: Vec<String> = ["V+E+A", "V+E", "V+A", "V"]
            .iter()
            .map(|v| format!("{v} {:.2}", cider(&grid, v, model)))
            .collect();
        println!("  ablation {model}: {}", cells.join(", "));
    }

    let sweep = run_drop_sweep(&cfg, &data, &prov, &[(0.1, 0.1), (0.5, 0.5)], &[((0.5, 0.5), &dropam)]).unwrap();
    let avg = |p: f64| lookup(&sweep, "avg", &sweep_label(p, p), "meteor").unwrap();
    let (low, mid) = (avg(0.1), avg(0.5));
    s.record(9, "drop-rate sweep", mid >= low, format!("avg METEOR-lite {mid:.4} at 0.5 vs {low:.4} at 0.1"));

    let rerun = root.path().join("rerun");
    std::fs::create_dir_all(&rerun).unwrap();
    run_pipeline(&cfg, &rerun).unwrap();
    let differing: Vec<&str> = PIPELINE_FILES
        .iter()
        .copied()
        .filter(|f| std::fs::read(out.dir.join(f)).unwrap() != std::fs::read(rerun.join(f)).unwrap())
        .collect();
    let secs = out.elapsed.as_secs_f64();
    s.record(
        10,
        "reproducibility and budget",
        differing.is_empty() && secs < 1800.0,
        format!("pipeline {secs:.0}s, {} files, differing {differing:?}", PIPELINE_FILES.len()),
    );

    s.results.sort_by_key(|r| r.id);
    println!("\nsummary");
    for r in &s.results {
        println!("{} {:>2} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.id, r.name, r.detail);
    }
    let failed: Vec<usize> = s.results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    assert_eq!(s.results.len(), 10);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
