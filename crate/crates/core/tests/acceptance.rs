#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Acceptance suite. Runs each criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use motion_reid::experiment::{
    pooled_delay_trend, run_ablation, run_delay, run_duration, run_identification, Design,
    ExperimentConfig, ForestOverride, Panel,
};
use motion_reid::features::{featurize_session, FeatureParams, PresetName};
use motion_reid::forest::{PredictionMatrix, PredictionRow};
use motion_reid::metrics::{
    accuracy, multiclass_auc, multiclass_auc_over, n_class_accuracy, n_class_accuracy_oracle,
    SubsetConvention, TiePolicy,
};
use motion_reid::seed;
use motion_reid::synth::CohortSpec;
use motion_reid::trace::{EulerAngles, Pose, SessionKey};
use nalgebra::Vector3;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Test-side oracles

/// 50 seeded prediction matrices over 6 classes, every class with 2..=4
/// test rows, continuous scores (tie-free almost surely).
fn metric_matrices() -> Vec<PredictionMatrix> {
    (0..50u64)
        .map(|m| {
            let mut rng = seed::rng(0xACCE, &[m]);
            let classes: Vec<String> = (0..6).map(|c| format!("C{c}")).collect();
            let mut rows = Vec::new();
            for c in 0..6 {
                for r in 0..rng.gen_range(2..=4) {
                    let mut probs: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
                    // Shift some mass onto the true class so accuracy is not trivial.
                    probs[c] += rng.gen::<f64>() * 0.8;
                    let s: f64 = probs.iter().sum();
                    probs.iter_mut().for_each(|p| *p /= s);
                    let session = SessionKey {
                        dataset: 1,
                        week: r + 1,
                        section: "S".into(),
                        participant: classes[c].clone(),
                    };
                    rows.push(PredictionRow {
                        session,
                        true_class: c,
                        probs,
                    });
                }
            }
            PredictionMatrix { classes, rows }
        })
        .collect()
}

/// Pairwise separability by explicit double loop over (row in A, row in B).
fn oracle_auc_over(pred: &PredictionMatrix, classes: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0.0;
    for &a in classes {
        for &b in classes {
            if a == b {
                continue;
            }
            let mut wins = 0.0;
            let mut count = 0.0;
            for ra in pred.rows.iter().filter(|r| r.true_class == a) {
                for rb in pred.rows.iter().filter(|r| r.true_class == b) {
                    let (x, y) = (ra.probs[a], rb.probs[a]);
                    wins += if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    };
                    count += 1.0;
                }
            }
            sum += wins / count;
            pairs += 1.0;
        }
    }
    sum / pairs
}

/// Every N-subset of all classes, enumerated as a bitmask; a subset counts as
/// a success when no member scores strictly above the true class.
fn oracle_n_class(pred: &PredictionMatrix, n: usize) -> f64 {
    let c = pred.classes.len();
    let mut total = 0.0;
    for r in &pred.rows {
        let own = r.probs[r.true_class];
        let (mut hits, mut subsets) = (0u64, 0u64);
        for mask in 0u32..(1 << c) {
            if mask.count_ones() as usize != n {
                continue;
            }
            subsets += 1;
            if (0..c)
                .filter(|k| mask >> k & 1 == 1)
                .all(|k| r.probs[k] <= own)
            {
                hits += 1;
            }
        }
        total += hits as f64 / subsets as f64;
    }
    total / pred.rows.len() as f64
}

fn subsets_of(c: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << c))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..c).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Criteria

fn c1_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst_auc: f64 = 0.0;
    let mut worst_n: f64 = 0.0;
    for pred in metric_matrices() {
        let all: Vec<usize> = (0..6).collect();
        let got = multiclass_auc(&pred, TiePolicy::Half).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((got - oracle_auc_over(&pred, &all)).abs());
        for n in 2..=5 {
            let want = oracle_n_class(&pred, n);
            let closed = n_class_accuracy(&pred, n).map_err(|e| e.to_string())?;
            let enumerated = n_class_accuracy_oracle(&pred, n, SubsetConvention::Paper, None)
                .map_err(|e| e.to_string())?;
            worst_n = worst_n
                .max((closed - want).abs())
                .max((enumerated - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_auc <= 1e-12 && worst_n <= 1e-12 && secs < 10.0,
        format!("max |auc - oracle| = {worst_auc:.1e}, max |acc@N - oracle| = {worst_n:.1e}, {secs:.2}s"),
    )
}

fn c2_subset_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for pred in metric_matrices() {
        let full = multiclass_auc(&pred, TiePolicy::Half).map_err(|e| e.to_string())?;
        for k in 2..=5 {
            let subs = subsets_of(6, k);
            let mut sum = 0.0;
            for s in &subs {
                sum += multiclass_auc_over(&pred, s, TiePolicy::Half).map_err(|e| e.to_string())?;
            }
            worst = worst.max((sum / subs.len() as f64 - full).abs());
        }
    }
    check(
        worst <= 1e-12,
        format!("max |auc - mean subset auc| = {worst:.1e} over k = 2..5"),
    )
}

fn c3_boundary_identity() -> Outcome {
    let mut mismatches = 0;
    let matrices = metric_matrices();
    for pred in &matrices {
        let a = accuracy(pred).map_err(|e| e.to_string())?;
        let n = n_class_accuracy(pred, pred.classes.len()).map_err(|e| e.to_string())?;
        if a != n {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!(
            "{mismatches} of {} matrices with acc@|C| != accuracy",
            matrices.len()
        ),
    )
}

fn c4_bsc_invariance() -> Outcome {
    let spec = CohortSpec {
        n_participants: 20,
        weeks: 1,
        minutes: 1.5,
        seed: 4,
        ..Default::default()
    };
    let transform = Pose::new(
        Vector3::new(3.2, 0.0, -1.7),
        EulerAngles::new(137.0, 0.0, 0.0),
    );
    let params = FeatureParams::default();
    let mut worst_invariant: f64 = 0.0;
    let mut m1_unchanged = 0;
    for p in 0..spec.n_participants {
        let original = spec.generate_session(p, 1);
        let moved = original.transformed(&transform);
        for preset in PresetName::ALL {
            let fp = preset.preset();
            let a = featurize_session(&original, &fp, &params).map_err(|e| e.to_string())?;
            let b = featurize_session(&moved, &fp, &params).map_err(|e| e.to_string())?;
            if a.nrows() != b.nrows() || a.nrows() == 0 {
                return Err(format!(
                    "row count changed under transform ({} vs {})",
                    a.nrows(),
                    b.nrows()
                ));
            }
            let diff = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            match preset {
                PresetName::M1 => {
                    if !(diff > 1e-3) {
                        m1_unchanged += 1;
                    }
                }
                PresetName::M2 => {}
                _ => worst_invariant = worst_invariant.max(diff),
            }
        }
    }
    check(
        worst_invariant <= 1e-9 && m1_unchanged == 0,
        format!(
            "max M3-M6 change {worst_invariant:.1e}; sessions with M1 unchanged: {m1_unchanged}/20"
        ),
    )
}

fn default_cohort() -> CohortSpec {
    CohortSpec {
        n_participants: 30,
        weeks: 8,
        minutes: 10.0,
        seed: 1,
        ..Default::default()
    }
}

fn c5_within_beats_between(cache: &Path) -> Outcome {
    let start = Instant::now();
    let mut c = ExperimentConfig::new(Design::Identification, 1);
    c.synthetic = Some(default_cohort());
    c.cache_dir = Some(cache.to_path_buf());
    let o = run_identification(&c).map_err(|e| e.to_string())?;
    let (b, w) = (o.between.multiclass_auc, o.within.multiclass_auc);
    let secs = start.elapsed().as_secs_f64();
    check(
        w - b >= 0.03 && secs < 900.0,
        format!(
            "between {:.2}%, within {:.2}%, gap {:.2} pts, {secs:.0}s",
            b * 100.0,
            w * 100.0,
            (w - b) * 100.0
        ),
    )
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn c6_delay_decay() -> Outcome {
    let mut runs = Vec::new();
    for s in SEEDS {
        let mut c = ExperimentConfig::new(Design::Delay, s);
        c.synthetic = Some(CohortSpec {
            seed: s,
            ..default_cohort()
        });
        c.preset = PresetName::M3;
        let o = run_delay(&c).map_err(|e| e.to_string())?;
        if o.cells.len() != 56 {
            return Err(format!(
                "seed {s}: {} delay cells, expected 56",
                o.cells.len()
            ));
        }
        runs.push(o);
    }
    let drift = default_cohort().weekly_drift;
    let (cells, t) = pooled_delay_trend(&runs, 1000, 1).ok_or("no pooled trend")?;
    check(
        drift > 0.0 && t.rho < 0.0 && t.p_negative < 0.05,
        format!(
            "weekly_drift {drift}, {} pooled cells, rho {:.3}, one-sided p {:.4}",
            cells.len(),
            t.rho,
            t.p_negative
        ),
    )
}

fn c7_duration_trends() -> Outcome {
    // (panel, sessions, minutes) -> per-seed means
    let mut acc: BTreeMap<(Panel, usize, u64), Vec<f64>> = BTreeMap::new();
    for s in SEEDS {
        let mut c = ExperimentConfig::new(Design::Duration, s);
        c.synthetic = Some(CohortSpec {
            seed: s,
            ..default_cohort()
        });
        c.preset = PresetName::M3;
        c.duration.repetitions = 5;
        let o = run_duration(&c).map_err(|e| e.to_string())?;
        for cell in &o.cells {
            let mean = cell
                .mean
                .ok_or_else(|| format!("seed {s}: empty cell {cell:?}"))?;
            acc.entry((cell.panel, cell.n_sessions, cell.minutes.to_bits()))
                .or_default()
                .push(mean);
        }
    }
    let avg = |p: Panel, n: usize, m: f64| {
        let v = &acc[&(p, n, m.to_bits())];
        v.iter().sum::<f64>() / v.len() as f64
    };
    let minutes = [1.0, 3.0, 10.0, 30.0];
    let mut failures = Vec::new();
    let mut between = Vec::new();
    for m in minutes {
        let (two, four) = (avg(Panel::Between, 2, m), avg(Panel::Between, 4, m));
        between.push(format!("{m}m {:.1}>{:.1}", four * 100.0, two * 100.0));
        if !(four > two) {
            failures.push(format!(
                "between {m} min: 4 sessions {four:.4} <= 2 sessions {two:.4}"
            ));
        }
    }
    for n in [1, 2, 4, 7] {
        for w in minutes.windows(2) {
            let (lo, hi) = (avg(Panel::Within, n, w[0]), avg(Panel::Within, n, w[1]));
            if hi < lo - 0.005 {
                failures.push(format!(
                    "within {n} sessions: {} min {hi:.4} < {} min {lo:.4}",
                    w[1], w[0]
                ));
            }
        }
    }
    let detail = format!(
        "between 4 vs 2 sessions: {}; within monotone violations: {}",
        between.join(", "),
        failures.len()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn c8_ablation_order(cache: &Path) -> Outcome {
    let mut c = ExperimentConfig::new(Design::Ablation, 1);
    c.synthetic = Some(default_cohort());
    c.cache_dir = Some(cache.to_path_buf());
    c.forest_override = ForestOverride {
        trees_per_draw: Some(20),
        draws: Some(3),
        ..Default::default()
    };
    let o = run_ablation(&c).map_err(|e| e.to_string())?;
    let auc = |p| o.auc(p).unwrap_or(f64::NAN);
    let (m1, m2, m5) = (
        auc(PresetName::M1),
        auc(PresetName::M2),
        auc(PresetName::M5),
    );
    let all: Vec<String> = o
        .rows
        .iter()
        .map(|r| format!("{} {:.1}", r.preset, r.report.multiclass_auc * 100.0))
        .collect();
    check(
        default_cohort().spawn_randomization && m5 > m2 && m2 > m1,
        format!("spawn randomization on; {}", all.join(", ")),
    )
}

fn outputs_equal(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n != "timings.json")
        .collect();
    names.sort();
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for design in [
        Design::Identification,
        Design::Duration,
        Design::Delay,
        Design::Ablation,
    ] {
        let mut c = ExperimentConfig::new(design, 11);
        c.synthetic = Some(CohortSpec {
            n_participants: 5,
            minutes: 9.0,
            seed: 11,
            ..Default::default()
        });
        c.preset = PresetName::M3;
        c.ablation_presets = vec![PresetName::M1, PresetName::M3];
        c.duration.repetitions = 2;
        c.duration.minutes = vec![1.0, 3.0];
        c.permutations = 200;
        c.forest_override = ForestOverride {
            trees_per_draw: Some(4),
            draws: Some(2),
            ..Default::default()
        };
        c.n_values = vec![2, 5];
        let dirs: Vec<_> = (0..2)
            .map(|i| tmp.path().join(format!("{}-{i}", design.name())))
            .collect();
        for d in &dirs {
            c.out = Some(d.clone());
            motion_reid::experiment::run(&c).map_err(|e| format!("{}: {e}", design.name()))?;
        }
        files +=
            outputs_equal(&dirs[0], &dirs[1]).map_err(|e| format!("{}: {e}", design.name()))?;
    }
    Ok(format!(
        "{files} report files byte-identical across reruns of all four designs"
    ))
}

fn c10_feature_counts() -> Outcome {
    let want = [
        (PresetName::M1, 90),
        (PresetName::M2, 60),
        (PresetName::M3, 45),
        (PresetName::M4, 180),
        (PresetName::M5, 360),
        (PresetName::M6, 840),
    ];
    let session = CohortSpec {
        n_participants: 1,
        weeks: 1,
        minutes: 1.0,
        ..Default::default()
    }
    .generate_session(0, 1);
    let mut got = Vec::new();
    let mut ok = true;
    for (p, n) in want {
        let preset = p.preset();
        let m = featurize_session(&session, &preset, &FeatureParams::default())
            .map_err(|e| e.to_string())?;
        ok &= preset.feature_count() == n && m.ncols() == n && preset.column_names().len() == n;
        got.push(format!("{p}={}", m.ncols()));
    }
    check(ok, got.join(" "))
}

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let cache = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        (1, "metric oracle equivalence", Box::new(c1_metric_oracles)),
        (2, "subset invariance", Box::new(c2_subset_invariance)),
        (3, "boundary identity", Box::new(c3_boundary_identity)),
        (4, "body-space invariance", Box::new(c4_bsc_invariance)),
        (
            5,
            "within > between",
            Box::new(|| c5_within_beats_between(cache.path())),
        ),
        (6, "delay decay", Box::new(c6_delay_decay)),
        (7, "duration trends", Box::new(c7_duration_trends)),
        (
            8,
            "ablation order",
            Box::new(|| c8_ablation_order(cache.path())),
        ),
        (9, "determinism", Box::new(c9_determinism)),
        (10, "feature counts", Box::new(c10_feature_counts)),
    ];
    let mut failed = 0;
    for (id, name, f) in &criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
