//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs on synthetic data only.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tps::bench::{bongard_trial, generate, loglog_slope, time_adapt, write_synth, SynthSpec};
use tps::engine::bongard_adapt;
use tps::grad::{tps_grad, tps_loss, tps_loss_with, Selection};
use tps::gradcheck::{random_instance, run_suite, DEFAULT_STEP, DEFAULT_THRESHOLD};
use tps::io::manifest::Manifest;
use tps::io::predictions::{read_predictions, PredictionRecord};
use tps::io::tpse::{decode, encode};
use tps::optim::{self, OptimState};
use tps::transforms::{init_params, ParamInit};
use tps::{adapt_all, EngineConfig, Mat, OptimConfig, TransformKind};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

/// TPS minus zero-shot accuracy (percentage points) on the default synthetic
/// benchmark, frozen from the reference run.
const FROZEN_GAP_PP: f64 = 0.0;
const GAP_TOLERANCE_PP: f64 = 2.0;
/// Least-squares log-log slope allowed for time vs. label-set size.
const MAX_SLOPE: f64 = 1.15;
const MAX_MS_PER_SAMPLE: f64 = 250.0;

fn tps_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tps")).args(args).output().expect("spawn tps")
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = tps_bin(args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = run_suite(200, 0, DEFAULT_STEP).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let kinds: std::collections::BTreeSet<String> = report.trials.iter().map(|t| t.kind.to_string()).collect();
    let detail = format!(
        "{} trials, {} kinds, max rel. err {:.2e}, {secs:.2} s",
        report.trials.len(),
        kinds.len(),
        report.max_rel_error
    );
    if report.max_rel_error < DEFAULT_THRESHOLD && secs < 30.0 && kinds.len() == TransformKind::ALL.len() {
        Ok(detail)
    } else {
        Err(format!("{detail}; worst {:?}", report.worst()))
    }
}

fn zero_step_identity(dir: &Path) -> Outcome {
    let manifest = write_synth(&SynthSpec::default(), &dir.join("zero")).map_err(e)?;
    let mut total = 0;
    for kind in TransformKind::ALL.iter().filter(|k| k.identity_at_init()) {
        let out = dir.join(format!("zero-{kind}.jsonl"));
        run_ok(&["adapt", "--manifest", p(&manifest), "--steps", "0", "--transform", kind.name(), "--out", p(&out)])?;
        let recs = read_predictions(&out).map_err(e)?;
        let bad = recs.iter().filter(|r| r.predicted_class != r.zero_shot_class).count();
        if bad > 0 || recs.len() != 500 {
            return Err(format!("{kind}: {bad} of {} predictions differ from zero-shot", recs.len()));
        }
        total += recs.len();
    }
    Ok(format!("{total} predictions over 4 identity-initialized transforms, all equal to zero-shot"))
}

fn descent() -> Outcome {
    let mut ok = 0;
    for i in 0..1000u64 {
        let kind = TransformKind::ALL[(i % 5) as usize];
        let inst = random_instance(kind, 0xd5c0_0000 + i).map_err(e)?;
        let g = tps_grad(&inst.prototypes, &inst.params, &inst.views, inst.logit_scale, inst.k).map_err(e)?;
        let sel = g.loss_report.selected_view_indices.clone();
        let mut params = inst.params.clone();
        let mut state = OptimState::new(&params);
        optim::step(&mut params, &g.grads, &mut state, &OptimConfig::sgd(1e-4)).map_err(e)?;
        let post = tps_loss_with(&inst.prototypes, &params, &inst.views, inst.logit_scale, Selection::Pinned(&sel)).map_err(e)?;
        ok += usize::from(post.loss <= g.loss_report.loss);
    }
    let detail = format!("{ok}/1000 episodes non-increasing (SGD lr 1e-4, pinned selection)");
    if ok >= 990 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_kind(data: &tps::bench::SynthData, kind: TransformKind) -> Result<tps::Summary, String> {
    let cfg = EngineConfig {
        transform: kind,
        ..EngineConfig::default()
    };
    adapt_all(&data.prototypes, &data.batches, &cfg, 0).map(|(_, s)| s).map_err(e)
}

fn directional(data: &tps::bench::SynthData) -> Outcome {
    let s = run_kind(data, TransformKind::PerClassShift)?;
    let (acc, zs) = (s.accuracy.unwrap_or(0.0), s.zero_shot_accuracy.unwrap_or(0.0));
    let (pre, post) = (s.mean_pre_entropy.unwrap_or(0.0), s.mean_post_entropy.unwrap_or(0.0));
    let gap = 100.0 * (acc - zs);
    let detail = format!(
        "{} samples: TPS {:.2}% vs zero-shot {:.2}% (gap {gap:+.2} pp, frozen {FROZEN_GAP_PP:+.2} ± {GAP_TOLERANCE_PP}), entropy {pre:.3e} -> {post:.3e}",
        s.samples,
        100.0 * acc,
        100.0 * zs
    );
    // informational: a noisier variant where zero-shot is not saturated
    let harder = generate(&SynthSpec {
        view_noise_sigma: 0.3,
        ..SynthSpec::default()
    })
    .map_err(e)?;
    let h = run_kind(&harder, TransformKind::PerClassShift)?;
    let detail = format!(
        "{detail}; [info σ=0.3: TPS {:.2}% vs zero-shot {:.2}%]",
        100.0 * h.accuracy.unwrap_or(0.0),
        100.0 * h.zero_shot_accuracy.unwrap_or(0.0)
    );
    if acc >= zs && post < pre && (gap - FROZEN_GAP_PP).abs() <= GAP_TOLERANCE_PP && s.samples == 500 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn variants(data: &tps::bench::SynthData) -> Outcome {
    let per = run_kind(data, TransformKind::PerClassShift)?;
    let shared = run_kind(data, TransformKind::SharedShift)?;
    let film = run_kind(data, TransformKind::Film)?;
    let (a_per, a_shared) = (per.accuracy.unwrap_or(0.0), shared.accuracy.unwrap_or(0.0));
    let film_ok = film.samples == 500
        && film.fallbacks == 0
        && film.mean_post_entropy.is_some_and(f64::is_finite)
        && film.mean_pre_entropy.is_some_and(f64::is_finite);
    let detail = format!(
        "per-class {:.2}% vs shared {:.2}%; FiLM completed {} samples with {} fallbacks, accuracy {:.2}% (reported only)",
        100.0 * a_per,
        100.0 * a_shared,
        film.samples,
        film.fallbacks,
        100.0 * film.accuracy.unwrap_or(0.0)
    );
    if a_per >= a_shared - 0.01 && film_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Two orthonormal prototypes; a view at angle θ from the first one has
/// entropy strictly increasing in how close θ is to 45°, so the expected
/// selection follows from the angles alone. Repeated angles give exact ties.
fn selection_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let protos = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).map_err(e)?;
    let params = init_params(TransformKind::PerClassShift, 2, 2, ParamInit::default(), 0).map_err(e)?;
    let mut cases = 0;
    for _ in 0..200 {
        let distinct: Vec<f64> = (0..rng.random_range(1..6)).map(|i| 2.0 + 8.0 * i as f64).collect();
        let n = rng.random_range(1..=12);
        let degrees: Vec<f64> = (0..n).map(|_| *distinct.choose(&mut rng).expect("non-empty")).collect();
        let views = Mat::from_rows(&degrees.iter().map(|d: &f64| [d.to_radians().cos(), d.to_radians().sin()]).collect::<Vec<_>>())
            .map_err(e)?;
        let k = rng.random_range(1..=n);
        // smaller angle = more confident = lower entropy; ties by index
        let mut expected: Vec<usize> = (0..n).collect();
        expected.sort_by(|&a, &b| degrees[a].total_cmp(&degrees[b]).then(a.cmp(&b)));
        expected.truncate(k);
        let scale = [1.0, 10.0][rng.random_range(0..2)];
        let got = tps_loss(&protos, &params, &views, scale, k).map_err(e)?.selected_view_indices;
        if got != expected {
            return Err(format!("angles {degrees:?}, k {k}: selected {got:?}, expected {expected:?}"));
        }
        cases += 1;
    }
    Ok(format!("{cases} constructed batches with ties, selection exact"))
}

fn shuffled_manifest(src: &Path, dst: &Path, seed: u64) -> Result<(), String> {
    let mut m: Manifest = serde_json::from_str(&fs::read_to_string(src).map_err(e)?).map_err(e)?;
    m.samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    m.save(dst).map_err(e)
}

fn determinism(dir: &Path) -> Outcome {
    let spec = SynthSpec {
        classes: 10,
        samples_per_class: 10,
        view_noise_sigma: 0.3,
        ..SynthSpec::default()
    };
    let base = dir.join("det");
    let manifest = write_synth(&spec, &base).map_err(e)?;
    let shuffled = base.join("shuffled.json");
    shuffled_manifest(&manifest, &shuffled, 3)?;
    let mut checked = Vec::new();
    for kind in ["shift", "film"] {
        let run = |m: &Path, name: &str, workers: &str| -> Result<PathBuf, String> {
            let out = dir.join(format!("{kind}-{name}.jsonl"));
            run_ok(&[
                "adapt", "--manifest", p(m), "--transform", kind, "--steps", "3", "--seed", "42", "--workers", workers, "--out", p(&out),
            ])?;
            Ok(out)
        };
        let a = run(&manifest, "a", "1")?;
        let b = run(&manifest, "b", "1")?;
        let c = run(&manifest, "c", "4")?;
        let d = run(&shuffled, "d", "3")?;
        let bytes = |x: &Path| fs::read(x).map_err(e);
        if bytes(&a)? != bytes(&b)? {
            return Err(format!("{kind}: repeated run with the same seed differs"));
        }
        if bytes(&a)? != bytes(&c)? {
            return Err(format!("{kind}: 1 vs 4 workers differ"));
        }
        let sorted = |x: &Path| -> Result<Vec<PredictionRecord>, String> {
            let mut v = read_predictions(x).map_err(e)?;
            v.sort_by(|l, r| l.sample_id.cmp(&r.sample_id));
            Ok(v)
        };
        if sorted(&a)? != sorted(&d)? {
            return Err(format!("{kind}: shuffled input order changed predictions"));
        }
        checked.push(kind);
    }
    Ok(format!("{checked:?}: bitwise-identical reruns, 1 vs 4 workers identical, shuffled order identical per sample"))
}

fn exit_code(args: &[&str]) -> Option<i32> {
    tps_bin(args).status.code()
}

fn format_conformance(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(0..9), rng.random_range(0..9));
        let vals: Vec<f64> = (0..r * c).map(|_| rng.random_range(-4.0f32..4.0) as f64).collect();
        let m = Mat::new(r, c, vals).map_err(e)?;
        let back = decode(&encode(&m).map_err(e)?, Path::new("mem")).map_err(e)?;
        if back != m {
            return Err(format!("{r}x{c} round trip not exact"));
        }
    }
    let bytes = encode(&Mat::zeros(2, 3)).map_err(e)?;
    let mut expected = b"TPSE".to_vec();
    expected.extend_from_slice(&[1, 0, 0, 0]);
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&3u64.to_le_bytes());
    expected.extend_from_slice(&[0u8; 24]);
    if bytes != expected {
        return Err(format!("zero matrix encodes as {bytes:?}"));
    }

    let manifest = write_synth(
        &SynthSpec {
            classes: 3,
            dim: 6,
            samples_per_class: 2,
            n_views: 4,
            ..SynthSpec::default()
        },
        &dir.join("fmt"),
    )
    .map_err(e)?;
    let good = encode(&Mat::from_rows(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]).map_err(e)?)
        .map_err(e)?;
    let corruptions: Vec<(&str, Vec<u8>)> = vec![
        ("magic", [b"XXXX".as_slice(), &good[4..]].concat()),
        ("version", [&good[..4], &[2, 0], &good[6..]].concat()),
        ("dtype", [&good[..6], &[1], &good[7..]].concat()),
        ("flags", [&good[..7], &[1], &good[8..]].concat()),
        ("short header", good[..20].to_vec()),
        ("short payload", good[..good.len() - 4].to_vec()),
        ("trailing bytes", [good.as_slice(), &[0]].concat()),
    ];
    let out = dir.join("fmt.jsonl");
    for (name, bytes) in &corruptions {
        let path = dir.join("fmt").join("corrupt.tpse");
        fs::write(&path, bytes).map_err(e)?;
        let code = exit_code(&["adapt", "--manifest", p(&manifest), "--prototypes", p(&path), "--out", p(&out)]);
        if code != Some(3) {
            return Err(format!("{name}: exit code {code:?}, expected 3"));
        }
    }
    let path = dir.join("fmt").join("corrupt.tpse");
    fs::write(&path, &good).map_err(e)?;
    run_ok(&["adapt", "--manifest", p(&manifest), "--prototypes", p(&path), "--out", p(&out)])?;
    Ok(format!(
        "50 exact round trips, 48-byte zero matrix matches, {} malformed files exit 3",
        corruptions.len()
    ))
}

fn efficiency() -> Outcome {
    let results = time_adapt(&[10, 100, 1000], 512, 64, 5, &EngineConfig::default()).map_err(e)?;
    let slope = loglog_slope(&results).unwrap_or(f64::NAN);
    let times: Vec<String> = results.iter().map(|r| format!("C={} {:.1} ms", r.classes, r.mean_ms_per_sample)).collect();
    let worst = results.iter().map(|r| r.mean_ms_per_sample).fold(0.0, f64::max);
    let detail = format!(
        "{}; log-log slope {slope:.3} (encoder excluded; the ~65 ms/batch full-pipeline figure is not comparable)",
        times.join(", ")
    );
    if worst < MAX_MS_PER_SAMPLE && slope <= MAX_SLOPE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bongard() -> Outcome {
    let cfg = EngineConfig::default();
    let (mut correct, mut fallbacks) = (0, 0);
    for t in 0..200u64 {
        let (support, truth) = bongard_trial(64, 0.5, t).map_err(e)?;
        let out = bongard_adapt(&support, &cfg, t).map_err(e)?;
        correct += usize::from(out.prediction == truth);
        fallbacks += usize::from(out.fallback);
    }
    let detail = format!("{correct}/200 queries correct after 64 steps, {fallbacks} fallbacks");
    if correct >= 190 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = generate(&SynthSpec::default()).expect("default synthetic benchmark");
    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("zero-step identity", Box::new(|| zero_step_identity(dir.path()))),
        ("descent property", Box::new(descent)),
        ("directional synthetic benchmark", Box::new(|| directional(&data))),
        ("variant behavior", Box::new(|| variants(&data))),
        ("selection rule", Box::new(selection_rule)),
        ("determinism and independence", Box::new(|| determinism(dir.path()))),
        ("format conformance", Box::new(|| format_conformance(dir.path()))),
        ("efficiency shape", Box::new(efficiency)),
        ("bongard synthetic", Box::new(bongard)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
