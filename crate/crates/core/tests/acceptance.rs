//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

use std::time::Instant;

use essential::blocks::MrModule;
use essential::config::RunConfig;
use essential::data::features::{decode_features, encode_features};
use essential::data::synth::{gen_split, SynthSpec};
use essential::data::Split;
use essential::driver::{
    ablation_arms, aia, analyze_run, baseline_config, bwf, distance_analysis, evaluate, results_csv, run_benchmark,
    write_run, Preset, RunOutcome,
};
use essential::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOL};
use essential::memory::format::{decode_memory, encode_memory};
use essential::memory::{mib_rounded, MemoryBudget};
use essential::rng::{stream_at, Stream};
use essential::{Error, ParamSet, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.cfg");
const SEEDS: [u64; 3] = [0, 1, 2];
const GRAD_TOL: f64 = DEFAULT_TOL;
const GRAD_STEP: f64 = DEFAULT_STEP;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn desk(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::parse(DESK).expect("desk config parses")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn memory_accounting() -> Verdict {
    // (label, classes, N_s, l, tasks, expected MiB)
    let cases: [(&str, u64, u64, u64, u64, f64); 13] = [
        ("TCD UCF-101 10x5", 101, 10, 1, 6, 3.1),
        ("TCD UCF-101 5x10", 101, 10, 1, 11, 3.2),
        ("TCD UCF-101 2x25", 101, 10, 1, 26, 3.6),
        ("TCD HMDB51 5x5", 51, 10, 1, 6, 1.6),
        ("TCD HMDB51 1x25", 51, 10, 1, 26, 2.1),
        ("TCD SSV2 10x9", 174, 4, 4, 10, 8.4),
        ("TCD SSV2 5x18", 174, 4, 4, 19, 8.6),
        ("vCLIMB UCF-101 10 tasks", 101, 16, 2, 10, 9.7),
        ("vCLIMB UCF-101 20 tasks", 101, 16, 2, 20, 9.9),
        ("vCLIMB ActivityNet 10 tasks", 200, 32, 2, 10, 37.7),
        ("vCLIMB ActivityNet 20 tasks", 200, 32, 2, 20, 37.9),
        ("vCLIMB Kinetics-400 10 tasks", 400, 32, 2, 10, 75.2),
        ("vCLIMB Kinetics-400 20 tasks", 400, 32, 2, 20, 75.5),
    ];
    let mut misses = Vec::new();
    for (label, classes, n, l, tasks, want) in cases {
        let u = MemoryBudget {
            classes,
            n_per_class: n,
            l,
            d: 768,
            tasks,
            prompt_len: 8,
        }
        .usage();
        let got = mib_rounded(u.total());
        if got != want {
            misses.push(format!("{label}: {} B -> {got} MiB, table {want}", u.total()));
        }
    }
    if misses.is_empty() {
        verdict(true, "13/13 table entries reproduced")
    } else {
        verdict(false, format!("{}/13 reproduced; {}", 13 - misses.len(), misses.join("; ")))
    }
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    match run_suite(GRAD_STEP, None) {
        Ok(entries) => {
            let worst = entries.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max);
            let failing: Vec<&str> =
                entries.iter().filter(|e| !e.report.passes(GRAD_TOL)).map(|e| e.name.as_str()).collect();
            let needed = ["mhca", "ffn", "layer_norm", "temporal_encoder", "classifier", "mr_module", "composite_loss"];
            let covered = needed.iter().all(|n| entries.iter().any(|e| e.name == *n));
            verdict(
                failing.is_empty() && covered && t.elapsed().as_secs() < 120,
                format!(
                    "{} checks, max rel err {worst:.2e} (tol {GRAD_TOL:e}), failing {failing:?}, {:.1}s",
                    entries.len(),
                    t.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => verdict(false, format!("suite error: {e}")),
    }
}

fn residual_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::new();
    let d = 32;
    let mr = MrModule::init(&mut ps, "mr", d, 4, &mut rng).expect("init");
    ps.replace("mr.attn.wv.w", Tensor::zeros(&[d, d])).unwrap();
    ps.replace("mr.ffn.down.w", Tensor::zeros(&[4 * d, d])).unwrap();
    ps.replace("mr.ffn.down.b", Tensor::zeros(&[d])).unwrap();
    let prompt = Tensor::normal(&[8, d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = tape.constant(prompt.clone());
    let s = tape.constant(Tensor::normal(&[2, d], 1.0, &mut rng));
    let out = mr.forward(&mut tape, &ps, p, s).expect("forward");
    let same = tape
        .value(out)
        .data()
        .iter()
        .zip(prompt.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(same, if same { "output equals prompt bitwise" } else { "output differs from prompt" })
}

fn retrieval_ordering(full: &[RunOutcome]) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for out in full {
        let mut rng = stream_at(out.config.seed, Stream::Sampling, 1 << 16);
        for t in &out.tasks {
            match distance_analysis(&out.model, &out.semantic, &t.test.clips, t.id, out.config.sparse_len, &mut rng) {
                Ok(r) => {
                    ok &= r.ordering_holds();
                    lines.push(format!(
                        "s{}t{} {:.2}<{:.2},{:.2}",
                        out.config.seed, t.id, r.d_retrieved, r.d_sparse, r.d_random
                    ));
                }
                Err(e) => {
                    ok = false;
                    lines.push(format!("s{}t{} error {e}", out.config.seed, t.id));
                }
            }
        }
    }
    verdict(ok, format!("ret<sparse,rand: {}", lines.join(" ")))
}

fn run_seeds(make: impl Fn(u64) -> RunConfig) -> Result<Vec<RunOutcome>, Error> {
    SEEDS.iter().map(|&s| run_benchmark(&make(s))).collect()
}

fn aias(outs: &[RunOutcome]) -> Vec<f64> {
    outs.iter().map(|o| o.metrics.final_aia()).collect()
}

fn ablation_directions(full: &[RunOutcome]) -> Verdict {
    let t = Instant::now();
    let base = match run_seeds(|s| baseline_config(&desk(s))) {
        Ok(v) => aias(&v),
        Err(e) => return verdict(false, format!("baseline run failed: {e}")),
    };
    let none = match run_seeds(|s| RunConfig {
        alpha: 0.0,
        beta: 0.0,
        ..desk(s)
    }) {
        Ok(v) => aias(&v),
        Err(e) => return verdict(false, format!("no-loss run failed: {e}")),
    };
    let f = aias(full);
    let (mf, mb, mn) = (mean(&f), mean(&base), mean(&none));
    verdict(
        mf > mb && mf > mn,
        format!(
            "AIA full {mf:.4} {f:.3?} > baseline {mb:.4} {base:.3?}; both losses {mf:.4} > none {mn:.4} {none:.3?}; {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn robustness() -> Verdict {
    let arm = |l: usize, baseline: bool| {
        run_seeds(|s| {
            let c = RunConfig {
                sparse_len: l,
                ..desk(s)
            };
            if baseline {
                baseline_config(&c)
            } else {
                c
            }
        })
        .map(|v| mean(&aias(&v)))
    };
    let t = Instant::now();
    let r = (|| -> Result<_, Error> { Ok((arm(1, false)?, arm(8, false)?, arm(1, true)?, arm(8, true)?)) })();
    match r {
        Ok((f1, f8, b1, b8)) => {
            let (df, db) = (f8 - f1, b8 - b1);
            verdict(
                df < db,
                format!(
                    "drop l=8->1: full {df:.4} ({f8:.4}->{f1:.4}) < baseline {db:.4} ({b8:.4}->{b1:.4}); {:.0}s",
                    t.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => verdict(false, format!("run failed: {e}")),
    }
}

fn inference_independence(out: &RunOutcome) -> Verdict {
    let mut stripped = out.model.clone();
    let removed = stripped.params.remove_prefix("mr.") + stripped.params.remove_prefix("prompt.");
    let mut same = removed > 0;
    let mut clips = 0;
    for t in &out.tasks {
        for c in &t.test.clips {
            let a = out.model.predict(&c.features);
            let b = stripped.predict(&c.features);
            same &= match (a, b) {
                (Ok(a), Ok(b)) => a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                _ => false,
            };
            clips += 1;
        }
        same &= matches!(
            (evaluate(&out.model, &t.test.clips), evaluate(&stripped, &t.test.clips)),
            (Ok(a), Ok(b)) if a.to_bits() == b.to_bits()
        );
    }
    verdict(same, format!("{clips} clips, {removed} retrieval/prompt tensors removed, logits bitwise equal: {same}"))
}

fn metric_oracles() -> Verdict {
    let a = aia(&[0.8, 0.7, 0.6]);
    let b = bwf(&[vec![0.9], vec![0.9, 0.8], vec![0.9, 0.8, 0.7]]);
    let ok = matches!(a, Ok(x) if x == 0.7) && matches!(b, Ok(x) if x == 0.0);
    verdict(ok, format!("AIA {a:?}, BWF {b:?}"))
}

fn determinism() -> Verdict {
    let cfg = RunConfig {
        epochs_incremental: 5,
        epochs_rehearsal: 5,
        ..desk(7)
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for d in &dirs {
        let out = match run_benchmark(&cfg) {
            Ok(o) => o,
            Err(e) => return verdict(false, format!("run failed: {e}")),
        };
        if let Err(e) = write_run(d.path(), &out) {
            return verdict(false, format!("write failed: {e}"));
        }
        let read = |n: &str| std::fs::read(d.path().join(n)).unwrap_or_default();
        files.push([read("results.csv"), read("manifest.txt"), read("memory.bin"), read("model.bin")]);
        let _ = results_csv(&out.metrics, &out.usage);
    }
    let analyses: Vec<String> = dirs.iter().map(|d| format!("{:?}", analyze_run(d.path()).ok())).collect();
    let arms = |p| ablation_arms(p, &cfg).into_iter().map(|(n, c)| (n, c.to_config_string())).collect::<Vec<_>>();
    let ok = files[0] == files[1] && analyses[0] == analyses[1] && arms(Preset::Losses) == arms(Preset::Losses);
    verdict(ok, format!("results, manifest, memory, model and analysis identical across two runs: {ok}"))
}

fn persistence() -> Verdict {
    let out = match run_benchmark(&RunConfig {
        epochs_incremental: 2,
        epochs_rehearsal: 2,
        ..desk(3)
    }) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let mem = encode_memory(&out.episodic, &out.semantic).unwrap();
    let mem_ok = decode_memory(&mem)
        .and_then(|(e, s)| encode_memory(&e, &s))
        .is_ok_and(|again| again == mem);
    let ds = gen_split(&SynthSpec::default(), &[0, 5, 9], Split::Test).unwrap();
    let feat = encode_features(&ds).unwrap();
    let feat_ok = decode_features(&feat, Split::Test)
        .and_then(|d| encode_features(&d))
        .is_ok_and(|again| again == feat);
    let mut format_errors = 0;
    let mut probes = 0;
    for bytes in [&mem, &feat] {
        for cut in (0..bytes.len()).step_by(7) {
            probes += 2;
            format_errors += usize::from(matches!(decode_memory(&bytes[..cut]), Err(Error::Format { .. })));
            format_errors += usize::from(matches!(decode_features(&bytes[..cut], Split::Test), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        probes += 2;
        format_errors += usize::from(matches!(decode_memory(&bad), Err(Error::Format { .. })));
        format_errors += usize::from(matches!(decode_features(&bad, Split::Test), Err(Error::Format { .. })));
    }
    let ok = mem_ok && feat_ok && format_errors == probes;
    verdict(
        ok,
        format!("memory round trip {mem_ok}, features round trip {feat_ok}, {format_errors}/{probes} corruptions rejected as format errors"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    results.push((1, "memory accounting", memory_accounting()));
    results.push((2, "gradient correctness", gradient_correctness()));
    results.push((3, "residual identity", residual_identity()));

    let full = run_seeds(desk);
    match &full {
        Ok(full) => {
            results.push((4, "retrieval ordering", retrieval_ordering(full)));
            results.push((5, "ablation directions", ablation_directions(full)));
        }
        Err(e) => {
            results.push((4, "retrieval ordering", verdict(false, format!("run failed: {e}"))));
            results.push((5, "ablation directions", verdict(false, format!("run failed: {e}"))));
        }
    }
    results.push((6, "robustness", robustness()));
    match &full {
        Ok(full) => results.push((7, "inference independence", inference_independence(&full[0]))),
        Err(e) => results.push((7, "inference independence", verdict(false, format!("run failed: {e}")))),
    }
    results.push((8, "metric oracles", metric_oracles()));
    results.push((9, "determinism", determinism()));
    results.push((10, "persistence", persistence()));

    let mut failed = 0;
    for (n, name, v) in &results {
        println!("criterion {n:>2} {:<24} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
