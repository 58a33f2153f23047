//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criteria 5–8 and 10 share a three-seed sweep on the
//! default benchmark.

mod common;

use std::path::Path;
use std::time::Instant;

use phymass::geometry::lift_points;
use phymass::heads::{compose_mass, DensityActivationConfig, V_FLOOR};
use phymass::metrics::{aggregate, alde, ape, combine_strata, mnre, q_hit, ade, EvalPair, Stratify};
use phymass::pipeline::train::{read_predictions, report, write_predictions};
use phymass::pipeline::*;
use phymass::rng::SplitMix64;
use phymass::semantics::MaterialVocab;
use phymass::synthbench::{
    generate_dataset, render_depth, GeneratorConfig, RenderConfig, Shape, ShapeSpec, Split,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// (m, m̂, ALDE, APE, MnRE, q hit, ADE), reference values evaluated in
// 40-digit arithmetic on the exact binary inputs.
#[allow(clippy::excessive_precision, clippy::approx_constant)]
const METRIC_FIXTURE: [(f64, f64, f64, f64, f64, bool, f64); 22] = [
    (1.0, 2.0, 0.69314718055994531, 1.0, 0.5, false, 1.0),
    (2.0, 1.0, 0.69314718055994531, 0.5, 0.5, false, 1.0),
    (1.0, 1.0, 0.0, 0.0, 1.0, true, 0.0),
    (3.0, 5.999, 0.6929805000028463, 0.99966666666666656, 0.50008334722453745, true, 2.9989999999999997),
    (0.5, 0.25, 0.69314718055994531, 0.5, 0.5, false, 0.25),
    (10.0, 19.99, 0.69264705551826293, 0.99899999999999984, 0.5002501250625313, true, 9.9899999999999984),
    (10.0, 20.01, 0.69364705560159644, 1.0010000000000002, 0.4997501249375312, false, 10.010000000000002),
    (0.136, 0.2, 0.38566248081198465, 0.47058823529411762, 0.68000000000000001, true, 0.064000000000000001),
    (2.44, 1.3, 0.62963377483761939, 0.46721311475409833, 0.53278688524590167, true, 1.1399999999999999),
    (39.0, 12.0, 1.1786549963416461, 0.69230769230769231, 0.30769230769230769, false, 27.0),
    (7.25, 7.5, 0.033901551675681348, 0.034482758620689655, 0.96666666666666667, true, 0.25),
    (0.01, 0.05, 1.6094379124341004, 4.0000000000000002, 0.19999999999999999, false, 0.040000000000000003),
    (100.0, 60.0, 0.51082562376599068, 0.4, 0.6, true, 40.0),
    (4.0, 8.0, 0.69314718055994531, 1.0, 0.5, false, 4.0),
    (1.5, 2.5, 0.51082562376599068, 0.66666666666666667, 0.6, true, 1.0),
    (0.8, 0.41, 0.66845456796957392, 0.48750000000000006, 0.51249999999999994, true, 0.39000000000000007),
    (12.0, 11.0, 0.087011376989629766, 0.083333333333333333, 0.91666666666666667, true, 1.0),
    (0.3, 0.9, 1.0986122886681098, 2.0000000000000002, 0.33333333333333331, false, 0.60000000000000003),
    (5.0, 2.6, 0.65392646740666398, 0.47999999999999998, 0.52000000000000002, true, 2.3999999999999999),
    (250.0, 400.0, 0.47000362924573555, 0.6, 0.625, true, 150.0),
    (0.002, 0.0011, 0.59783700075562041, 0.44999999999999998, 0.55000000000000002, true, 0.00089999999999999998),
    (64.0, 128.0000001, 0.69314718134119526, 1.0000000015624999, 0.49999999960937502, false, 64.000000099999994),
];
// Means over the fixture: ALDE, APE, MnRE, Q, ADE.
#[allow(clippy::excessive_precision)]
const METRIC_MEANS: [f64; 5] = [
    0.63544535497145586,
    0.81053447587298931,
    0.56112406620176595,
    13.0 / 22.0,
    14.415177277272727,
];

fn c01_metrics() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut q_wrong = 0;
    let mut pairs = Vec::new();
    for (i, &(m, p, a, e, r, q, d)) in METRIC_FIXTURE.iter().enumerate() {
        for (got, want) in [
            (alde(m, p).unwrap(), a),
            (ape(m, p).unwrap(), e),
            (mnre(m, p).unwrap(), r),
            (ade(m, p).unwrap(), d),
        ] {
            worst = worst.max((got - want).abs());
        }
        q_wrong += usize::from(q_hit(m, p).unwrap() != q);
        pairs.push(EvalPair {
            id: i.to_string(),
            mass: m,
            predicted: p,
            category: String::new(),
            seen: true,
        });
    }
    let rep = aggregate(&pairs, Stratify::None).unwrap();
    for (got, want) in [rep.alde, rep.ape, rep.mnre, rep.q_rate, rep.ade].into_iter().zip(METRIC_MEANS) {
        worst = worst.max((got - want).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-9 && q_wrong == 0 && secs < 1.0,
        format!(
            "{} pairs, max abs error {worst:.1e} (limit 1e-9), q mismatches {q_wrong}, {secs:.3}s",
            pairs.len()
        ),
    )
}

fn c02_gradients() -> Outcome {
    let t = Instant::now();
    let results = common::gradcheck::all();
    let secs = t.elapsed().as_secs_f64();
    let (name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    ensure(
        worst < common::gradcheck::TOL && secs < 30.0,
        format!(
            "{} components x 100 cases, worst relative error {worst:.2e} ({name}), {secs:.2}s",
            results.len()
        ),
    )
}

fn c03_scale_invariance() -> Outcome {
    let vocab = MaterialVocab::default();
    let mut g = GeneratorConfig {
        n_train: 10,
        n_test: 10,
        ..Default::default()
    };
    g.render.resolution = 32;
    let ds = generate_dataset(&g, &vocab, 11).unwrap();
    let data = prepare_dataset(&ds, 64, 11).unwrap();
    let model = MassModel::new(
        &ModelConfig {
            n_points: 64,
            ..Default::default()
        },
        vocab.len(),
    )
    .unwrap();
    let bounds = DensityActivationConfig::default();
    let preds: Vec<_> = data.iter().map(|s| model.predict(s).unwrap()).collect();
    let mut rng = SplitMix64::new(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let p = &preds[i % preds.len()];
        // α keeps both factors inside their admissible ranges.
        let lo = (V_FLOOR / p.volume).max(p.density / bounds.rho_max);
        let hi = p.density / bounds.rho_min;
        let alpha = (rng.random_range(lo.ln()..=hi.ln())).exp();
        let m = compose_mass(alpha * p.volume, p.density / alpha, &bounds).unwrap().mass;
        worst = worst.max((m - p.mass).abs() / p.mass);
    }
    ensure(
        worst <= 1e-12,
        format!("1000 rescalings, max relative mass change {worst:.1e} (limit 1e-12)"),
    )
}

fn c04_geometry_oracle() -> Outcome {
    let render = RenderConfig {
        resolution: 128,
        ..Default::default()
    };
    let px = render.pixel_scale();
    let mut rng = SplitMix64::new(4);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let (w, h, d) = (
            rng.random_range(0.05..0.45),
            rng.random_range(0.05..0.45),
            rng.random_range(0.05..0.45),
        );
        let spec = ShapeSpec::new(Shape::Box { w, h, d }, 1.0).unwrap();
        let depth = render_depth(&spec, &render).unwrap();
        let b = lift_points(&depth, &render.camera()).unwrap().bounds();
        // Pixel centres span one footprint less than the face; the front
        // face sits half the box depth in front of the centre plane.
        let got = [
            b[0].1 - b[0].0 + px,
            b[1].1 - b[1].0 + px,
            2.0 * (render.center_depth - b[2].0),
        ];
        for (k, (g, t)) in got.iter().zip([w, h, d]).enumerate() {
            worst[k] = worst[k].max((g - t).abs() / px);
        }
    }
    ensure(
        worst.iter().all(|&e| e <= 1.0),
        format!(
            "50 boxes at 128x128, worst error in pixel footprints x {:.2} y {:.2} depth {:.2} (limit 1)",
            worst[0], worst[1], worst[2]
        ),
    )
}

struct SeedRun {
    seed: u64,
    floor: f64,
    image: f64,
    density: f64,
    volume: f64,
    full: Fitted<MassModel>,
    direct: f64,
    data: Vec<PreparedSample>,
}

struct Sweep {
    runs: Vec<SeedRun>,
    secs: f64,
}

fn sweep() -> Sweep {
    let t = Instant::now();
    let vocab = MaterialVocab::default();
    let runs = (0..3)
        .map(|seed| {
            let ds = generate_dataset(&GeneratorConfig::default(), &vocab, seed).unwrap();
            let mc = ModelConfig {
                seed,
                ..Default::default()
            };
            let tc = TrainConfig {
                shuffle_seed: seed,
                ..Default::default()
            };
            let data = prepare_dataset(&ds, mc.n_points, seed).unwrap();
            let alde_for = |cues: &str| {
                let cfg = ModelConfig {
                    cues: cues.parse().unwrap(),
                    ..mc.clone()
                };
                run_model(cues, &data, &vocab, &cfg, &tc).unwrap()
            };
            let run = SeedRun {
                seed,
                floor: density_floor_oracle(&data).unwrap(),
                image: alde_for("image").record.test_alde(),
                density: alde_for("density").record.test_alde(),
                volume: alde_for("volume").record.test_alde(),
                full: alde_for("image,density,volume"),
                direct: run_baseline_direct(&data, &mc, &tc).unwrap().record.test_alde(),
                data,
            };
            println!(
                "  seed {seed}: full {:.3} direct {:.3} image {:.3} density {:.3} geometry {:.3} floor {:.3}",
                run.full.record.test_alde(),
                run.direct,
                run.image,
                run.density,
                run.volume,
                run.floor
            );
            run
        })
        .collect();
    Sweep {
        runs,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn per_seed(s: &Sweep, f: impl Fn(&SeedRun) -> (bool, String)) -> (bool, String) {
    let parts: Vec<(bool, String)> = s.runs.iter().map(f).collect();
    let ok = parts.iter().all(|p| p.0);
    let text = parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join("; ");
    (ok, text)
}

fn c05_full_beats_direct(s: &Sweep) -> Outcome {
    let (ok, text) = per_seed(s, |r| {
        let full = r.full.record.test_alde();
        (full < r.direct, format!("seed {} {full:.3} < {:.3}", r.seed, r.direct))
    });
    ensure(
        ok && s.secs < 300.0,
        format!(
            "full vs direct test ALDE: {text} (reference 0.519 vs 0.843); sweep {:.0}s (limit 300s)",
            s.secs
        ),
    )
}

fn c06_cue_ordering(s: &Sweep) -> Outcome {
    let (ok, text) = per_seed(s, |r| {
        let full = r.full.record.test_alde();
        let single = r.image.min(r.density).min(r.volume);
        (
            r.volume < r.density && full <= single,
            format!(
                "seed {} geometry {:.3} < density {:.3}, full {full:.3} <= best single {single:.3}",
                r.seed, r.volume, r.density
            ),
        )
    });
    ensure(ok, format!("{text} (reference geometry 0.641, density 1.062)"))
}

fn c07_density_floor(s: &Sweep) -> Outcome {
    let (ok, text) = per_seed(s, |r| {
        let gap = (r.density - r.floor).abs();
        (
            gap <= 0.10,
            format!("seed {} |{:.3} - {:.3}| = {gap:.3}", r.seed, r.density, r.floor),
        )
    });
    ensure(ok, format!("density-only vs floor: {text} (limit 0.10)"))
}

fn c08_gate_simplex(s: &Sweep) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    let mut n = 0;
    let mut sum = [0.0; 3];
    for r in &s.runs {
        for row in &r.full.test_predictions {
            let w = row.gate_weights().expect("gated model reports weights");
            negative += w.iter().filter(|&&x| x < 0.0).count();
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            for k in 0..3 {
                sum[k] += w[k];
            }
            n += 1;
        }
    }
    let mean = sum.map(|v| v / n as f64);
    ensure(
        negative == 0 && worst <= 1e-9 && n > 0,
        format!(
            "{n} test instances, max |sum - 1| {worst:.1e}, negative weights {negative}; \
             mean gate weights image={:.2} geometry={:.2} text={:.2} (reference 0.13 / 0.49 / 0.36)",
            mean[0], mean[1], mean[2]
        ),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// File contents with the wall-clock field of run records removed.
fn comparable(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    if path.file_name().is_some_and(|n| n == "run.json") {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_secs");
        return serde_json::to_vec(&v).unwrap();
    }
    bytes
}

fn cli_session(root: &Path) {
    let p = |s: &str| root.join(s).display().to_string();
    let set = [
        "n_train=200", "n_test=100", "resolution=32", "n_points=128", "feature_dim=16",
        "point_widths=16", "head_hidden=16", "epochs=2",
    ];
    let run = |args: &[String]| {
        let mut full = vec!["phymass".to_string()];
        full.extend(args.iter().cloned());
        for s in set {
            full.extend(["--set".to_string(), s.to_string()]);
        }
        full.extend(["--seed".to_string(), "7".to_string()]);
        phymass::cli::run(full).unwrap();
    };
    let a = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    run(&a(&["gen", "--out", &p("data")]));
    run(&a(&["train", "--data", &p("data"), "--out", &p("train")]));
    run(&a(&["eval", "--data", &p("data"), "--out", &p("eval"), "--checkpoint", &p("train/model.phmc")]));
    run(&a(&["ablate", "--data", &p("data"), "--out", &p("ablate")]));
    run(&a(&["baseline", "--kind", "direct", "--data", &p("data"), "--out", &p("direct")]));
    run(&a(&["baseline", "--kind", "rule-based", "--data", &p("data"), "--out", &p("rule")]));
    phymass::cli::run(["phymass", "report", "--predictions", &p("train/predictions.csv"), "--out", &p("report.csv")])
        .unwrap();
}

fn c09_reproducibility(s: &Sweep) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (first, work) = (tmp.path().join("first"), tmp.path().join("work"));
    cli_session(&work);
    std::fs::rename(&work, &first).unwrap();
    cli_session(&work);
    let (fa, fb) = (files_under(&first), files_under(&work));
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| !fb.contains(f) || comparable(&first.join(f)) != comparable(&work.join(f)))
        .map(|f| f.display().to_string())
        .collect();

    let r = &s.runs[0];
    let vocab = MaterialVocab::default();
    let path = tmp.path().join("full.phmc");
    let saved = SavedModel::Factored(r.full.model.clone());
    saved.save(&path, &r.full.model.config, vocab.len()).unwrap();
    let (loaded, _) = SavedModel::load(&path).unwrap();
    let test = [Split::TestSeen, Split::TestUnseen];
    let before = predict_all(&saved, &r.data, &test).unwrap();
    let after = predict_all(&loaded, &r.data, &test).unwrap();
    let mismatched = before
        .iter()
        .zip(&after)
        .filter(|(x, y)| x.predicted.to_bits() != y.predicted.to_bits() || x != y)
        .count();
    ensure(
        differing.is_empty() && fa.len() == fb.len() && mismatched == 0 && before.len() == 500,
        format!(
            "repeated CLI session: {} files, differing {:?}; checkpoint round trip: {} test predictions, {mismatched} not bit-identical",
            fa.len(),
            differing,
            before.len()
        ),
    )
}

fn c10_stratified_totals(s: &Sweep) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for r in &s.runs {
        // Recompute from the persisted predictions, not the in-memory rows.
        let path = tmp.path().join(format!("p{}.csv", r.seed));
        write_predictions(&path, &r.full.test_predictions).unwrap();
        let rows = read_predictions(&path).unwrap();
        let rep = report(&rows, Stratify::SeenUnseen).unwrap();
        counts_ok &= rep.strata.len() == 2 && rep.strata.iter().map(|x| x.count).sum::<usize>() == rep.count;
        let comb = combine_strata(&rep.strata).unwrap();
        for (a, b) in [
            (rep.alde, comb.alde),
            (rep.ape, comb.ape),
            (rep.mnre, comb.mnre),
            (rep.q_rate, comb.q_rate),
            (rep.ade, comb.ade),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    let rep = s.runs[0].full.record.test_report().unwrap();
    ensure(
        counts_ok && worst <= 1e-12,
        format!(
            "Total vs count-weighted Seen/Unseen, max abs difference {worst:.1e} (limit 1e-12); seed 0: Seen {:.3} ({}) Unseen {:.3} ({}) Total {:.3} ({})",
            rep.strata[0].alde, rep.strata[0].count, rep.strata[1].alde, rep.strata[1].count, rep.alde, rep.count
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut verdict = |id: &str, title: &str, f: &dyn Fn() -> Outcome| {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("PASS {id} {title}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {title}: {d}");
            }
        }
    };
    verdict("c01", "metric oracle", &c01_metrics);
    verdict("c02", "gradient integrity", &c02_gradients);
    verdict("c03", "scale-ambiguity invariance", &c03_scale_invariance);
    verdict("c04", "geometry oracle", &c04_geometry_oracle);

    println!("training sweep over seeds 0-2 (default benchmark)");
    let s = sweep();
    verdict("c05", "full model beats direct regression", &|| c05_full_beats_direct(&s));
    verdict("c06", "cue ablation ordering", &|| c06_cue_ordering(&s));
    verdict("c07", "density-floor oracle", &|| c07_density_floor(&s));
    verdict("c08", "gate simplex", &|| c08_gate_simplex(&s));
    verdict("c09", "reproducibility and persistence", &|| c09_reproducibility(&s));
    verdict("c10", "stratified reporting", &|| c10_stratified_totals(&s));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
