//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use notelab_core::concentration::{
    fit_power_law, gini_values, lr_test_vs_exponential, sample_discrete_power_law,
};
use notelab_core::counterfactual::{run_ladder, LadderOptions};
use notelab_core::ingest::{join_political, AnnotatedRating};
use notelab_core::model::{
    NoteClassification, NoteId, NoteStatus, Party, RaterId, RatingEvent, RatingLevel,
};
use notelab_core::polarization::{ashman_d, em_restarts, fit_gmm2, leaning_per_rater};
use notelab_core::scorer::{
    gradient, objective, residuals, score_corpus, Params, RatingMatrix, ScorerConfig,
};
use notelab_core::selectivity::{fit_saturation, fit_saturation_xy, saturation, selectivity_points, shuffle_null};
use notelab_core::synth::{generate, plant_pivotal_rater, two_bloc, SynthConfig, TwoBlocConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s as f64,
        format!("runtime {:.1}s exceeds {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn pairwise_gini(x: &[u64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<u64>() as f64 / n;
    let mut s = 0.0;
    for a in x {
        for b in x {
            s += (*a as f64 - *b as f64).abs();
        }
    }
    s / (2.0 * n * n * mean)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=500);
        let hi = *[3u64, 50, 10_000].get(rng.random_range(0..3)).unwrap();
        let x: Vec<u64> = (0..n).map(|_| rng.random_range(1..=hi)).collect();
        let g = gini_values(&x).map_err(|e| e.to_string())?.gini;
        worst = worst.max((g - pairwise_gini(&x)).abs());
    }
    check(worst <= 1e-9, format!("max |sorted - pairwise| = {worst:e}"))?;
    let g4 = gini_values(&[1, 2, 3, 4]).unwrap().gini;
    check(g4 == 0.25, format!("G([1,2,3,4]) = {g4}"))?;
    within(t.elapsed(), 10)?;
    Ok(format!("max deviation {worst:.1e}, G([1,2,3,4]) = 0.25"))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let body = LogNormal::new(4.5, 1.0).unwrap();
    let n = 100_000;
    let n_tail = 30_000;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n_tail {
        values.push(sample_discrete_power_law(&mut rng, 3.0, 1000));
    }
    while values.len() < n {
        let v: f64 = body.sample(&mut rng);
        let v = v.round();
        if (1.0..1000.0).contains(&v) {
            values.push(v as u64);
        }
    }
    let fit = fit_power_law(&values).map_err(|e| e.to_string())?;
    let lr = lr_test_vs_exponential(&values, &fit).map_err(|e| e.to_string())?;
    check((2.9..=3.1).contains(&fit.alpha), format!("alpha = {}", fit.alpha))?;
    check(
        (500..=2000).contains(&fit.x_min),
        format!("x_min = {} not within a factor 2 of 1000", fit.x_min),
    )?;
    check(lr.r > 0.0 && lr.p_value < 0.01, format!("R = {}, p = {}", lr.r, lr.p_value))?;
    within(t.elapsed(), 60)?;
    Ok(format!(
        "alpha {:.3}, x_min {}, R {:.1}, p {:.1e}",
        fit.alpha, fit.x_min, lr.r, lr.p_value
    ))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let r: Vec<f64> = (2..=400).map(|v| v as f64).collect();
    let y: Vec<f64> = r.iter().map(|&v| saturation(100.0, 50.0, v)).collect();
    let fit = fit_saturation_xy(&r, &y).map_err(|e| e.to_string())?;
    let rel = ((fit.n_asy - 100.0) / 100.0).abs().max(((fit.tau - 50.0) / 50.0).abs());
    check(rel <= 1e-6, format!("noiseless fit off by {rel:e}"))?;

    let mut wins = 0;
    for seed in 0..100u64 {
        let cfg = SynthConfig {
            n_raters: 500,
            n_notes: 5000,
            n_authors: 100,
            activity_alpha: 2.0,
            activity_xmin: 5,
            selectivity_zipf_s: 0.5,
            author_pool_size: 40,
            seed,
            ..SynthConfig::default()
        };
        let sc = generate(&cfg).map_err(|e| e.to_string())?;
        let ann = join_political(&sc.corpus.ratings, &sc.corpus.notes, sc.corpus.annotations.as_ref().unwrap())
            .map_err(|e| e.to_string())?
            .annotated;
        let obs = fit_saturation(&selectivity_points(&ann)).map_err(|e| e.to_string())?;
        let null = fit_saturation(&selectivity_points(&shuffle_null(&ann, seed))).map_err(|e| e.to_string())?;
        if obs.tau + obs.ci95_tau < null.tau - null.ci95_tau
            && obs.n_asy + obs.ci95_n_asy < null.n_asy - null.ci95_n_asy
        {
            wins += 1;
        }
    }
    check(wins >= 95, format!("null dominance in {wins}/100 runs"))?;
    within(t.elapsed(), 60)?;
    Ok(format!("noiseless rel error {rel:.1e}, null dominance {wins}/100"))
}

/// +1 for a rating that favors Republicans, -1 for one that favors Democrats.
fn naive_direction(a: &AnnotatedRating) -> i64 {
    let agrees = a.rating.level != RatingLevel::NotHelpful;
    let supports_tweet = match a.note_classification {
        NoteClassification::Misleading => !agrees,
        NoteClassification::NotMisleading => agrees,
    };
    let toward_rep = match a.party {
        Party::Republican => 1,
        Party::Democrat => -1,
    };
    if supports_tweet {
        toward_rep
    } else {
        -toward_rep
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut events = Vec::new();
    for u in 0..10_000 {
        let n = rng.random_range(1..=40);
        for k in 0..n {
            events.push(AnnotatedRating {
                rating: RatingEvent {
                    note_id: NoteId::new(format!("n{k}")),
                    rater_id: RaterId::new(format!("u{u:05}")),
                    created_at: 0,
                    level: RatingLevel::ALL[rng.random_range(0..3)],
                },
                note_classification: NoteClassification::ALL[rng.random_range(0..2)],
                tweet_author_id: "a".into(),
                party: Party::ALL[rng.random_range(0..2)],
            });
        }
    }
    let got = leaning_per_rater(&events, 1);
    let mut oracle: BTreeMap<&RaterId, (i64, u64)> = BTreeMap::new();
    for e in &events {
        let o = oracle.entry(&e.rating.rater_id).or_default();
        o.0 += naive_direction(e);
        o.1 += 1;
    }
    check(got.len() == oracle.len(), "rater count differs from oracle")?;
    for (id, (s, n)) in &oracle {
        let v = &got[*id];
        let expected = *s as f64 / *n as f64;
        check(v.l == expected && v.n_ratings == *n, format!("{id}: {} vs {expected}", v.l))?;
        check((-1.0..=1.0).contains(&v.l), format!("{id}: L out of bounds"))?;
    }
    let swapped: Vec<AnnotatedRating> = events
        .iter()
        .cloned()
        .map(|mut e| {
            e.party = e.party.other();
            e
        })
        .collect();
    let mirrored = leaning_per_rater(&swapped, 1);
    for (id, v) in &got {
        check(mirrored[id].l == -v.l, format!("{id}: swap not antisymmetric"))?;
    }
    Ok(format!("{} raters match the recount oracle exactly", oracle.len()))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Normal::new(-0.7, 0.25).unwrap();
    let b = Normal::new(0.7, 0.25).unwrap();
    let x: Vec<f64> = (0..5000)
        .map(|_| if rng.random::<bool>() { a.sample(&mut rng) } else { b.sample(&mut rng) })
        .collect();
    let g = fit_gmm2(&x, 5).map_err(|e| e.to_string())?;
    let d = ashman_d(&g);
    check((d - 5.6).abs() <= 0.3, format!("D = {d}"))?;
    let mut iters = 0;
    for run in em_restarts(&x, 5) {
        for w in run.ll_trace.windows(2) {
            iters += 1;
            check(w[1] >= w[0] - 1e-9 * w[0].abs(), "EM log-likelihood decreased")?;
        }
    }
    let single = Normal::new(0.0, 0.5).unwrap();
    let y: Vec<f64> = (0..5000).map(|_| single.sample(&mut rng)).collect();
    let d1 = ashman_d(&fit_gmm2(&y, 5).map_err(|e| e.to_string())?);
    check(d1 < 2.0, format!("single Gaussian D = {d1}"))?;
    within(t.elapsed(), 30)?;
    Ok(format!("D = {d:.3}, control D = {d1:.3}, {iters} monotone EM steps"))
}

fn params_flat(p: &Params) -> Vec<f64> {
    let mut v = vec![p.mu];
    v.extend(&p.rater_intercept);
    v.extend(&p.note_intercept);
    v.extend(&p.rater_factor);
    v.extend(&p.note_factor);
    v
}

fn params_from(p: &Params, v: &[f64]) -> Params {
    let mut q = p.clone();
    let mut it = v.iter().copied();
    q.mu = it.next().unwrap();
    for x in q
        .rater_intercept
        .iter_mut()
        .chain(q.note_intercept.iter_mut())
        .chain(q.rater_factor.iter_mut())
        .chain(q.note_factor.iter_mut())
    {
        *x = it.next().unwrap();
    }
    q
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let cfg = ScorerConfig::default();
    let (mut correct, mut total) = (0usize, 0usize);
    for seed in 0..20u64 {
        let (ratings, bridging) = two_bloc(&TwoBlocConfig {
            n_raters: 2000,
            n_notes: 200,
            frac_bridging: 0.2,
            noise: 0.05,
            seed,
            ..TwoBlocConfig::default()
        });
        let a = score_corpus(&ratings, &[], &cfg).map_err(|e| e.to_string())?;
        for (id, s) in &a.notes {
            total += 1;
            correct += ((s.status == NoteStatus::Crh) == bridging.contains(id)) as usize;
        }
    }
    let acc = correct as f64 / total as f64;
    check(acc >= 0.95, format!("accuracy {acc}"))?;

    // finite-difference check of the analytic gradient
    let (ratings, _) = two_bloc(&TwoBlocConfig {
        n_raters: 12,
        n_notes: 8,
        density: 0.7,
        seed: 6,
        ..TwoBlocConfig::default()
    });
    let m = RatingMatrix::build(&ratings);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p0 = Params::init(&m, cfg.factor_dim, 1);
    let v: Vec<f64> = params_flat(&p0).iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    let p = params_from(&p0, &v);
    let g = params_flat(&gradient(&m, &p, &residuals(&m, &p), &cfg).grad);
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        let h = 1e-5;
        let (mut plus, mut minus) = (v.clone(), v.clone());
        plus[i] += h;
        minus[i] -= h;
        let fd = (objective(&m, &params_from(&p, &plus), &cfg) - objective(&m, &params_from(&p, &minus), &cfg))
            / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3));
    }
    check(worst < 1e-5, format!("gradient relative error {worst:e}"))?;
    within(t.elapsed(), 300)?;
    Ok(format!("accuracy {:.4} over 20 seeds, gradient rel error {worst:.1e}", acc))
}

fn criterion_7(dir: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = ScorerConfig::default();
    let sc = generate(&SynthConfig {
        n_raters: 2000,
        n_notes: 500,
        activity_alpha: 2.0,
        activity_xmin: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let planted = plant_pivotal_rater(&sc, 10, &cfg).map_err(|e| e.to_string())?;
    let plant = planted.truth.pivotal.clone().ok_or("no plant recorded")?;
    let report = run_ladder(
        &planted.corpus.ratings,
        &planted.corpus.status,
        &[0, 1, 10],
        &cfg,
        LadderOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let k0 = report.scenario(0).ok_or("no k = 0 row")?;
    check(
        k0.per_status.iter().all(|s| s.jaccard == 1.0),
        "k = 0 Jaccard is not exactly 1",
    )?;
    let k1 = report.scenario(1).ok_or("no k = 1 row")?;
    check(k1.removed_raters == vec![plant.rater_id.clone()], "k = 1 did not remove the super-rater")?;
    let lost: BTreeSet<&NoteId> = k1.lost_crh.iter().collect();
    let want: BTreeSet<&NoteId> = plant.notes.iter().collect();
    check(lost == want && want.len() == 10, format!("k = 1 lost {} CRH notes, planted {}", lost.len(), want.len()))?;

    let path = dir.join("heatmap.csv");
    report
        .write_heatmap_csv(std::fs::File::create(&path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut rows = 0;
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| e.to_string())?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let k: usize = rec[0].parse().unwrap();
        let status = &rec[1];
        let n: usize = rec[2].parse().unwrap();
        let gained: usize = rec[4].parse().unwrap();
        let lost: usize = rec[5].parse().unwrap();
        let sc = report.scenario(k).unwrap();
        let st = sc.per_status.iter().find(|s| s.status.short() == status).unwrap();
        let baseline = k0.per_status.iter().find(|s| s.status.short() == status).unwrap().n_notes;
        let retained = n - gained;
        check(retained + lost == baseline, format!("k={k} {status}: retained + lost != baseline"))?;
        check(st.retained == retained, format!("k={k} {status}: retained mismatch"))?;
        let union = n + lost;
        let j = if union == 0 { 1.0 } else { retained as f64 / union as f64 };
        check(
            format!("{j:.12}") == rec[3],
            format!("k={k} {status}: Jaccard {} vs recomputed {j:.12}", &rec[3]),
        )?;
        rows += 1;
    }
    within(t.elapsed(), 600)?;
    Ok(format!(
        "k=0 Jaccard 1.0, k=1 flips exactly the {} planted notes, {rows} heatmap rows reconcile",
        want.len()
    ))
}

fn criterion_8(dir: &Path) -> Outcome {
    let t = Instant::now();
    let bin = env!("CARGO_BIN_EXE_notelab");
    let config = dir.join("synth.toml");
    let cfg = SynthConfig { seed: 8, ..SynthConfig::default() };
    std::fs::write(&config, toml::to_string(&cfg).unwrap()).map_err(|e| e.to_string())?;
    let data = dir.join("corpus");
    let out = dir.join("report");
    for args in [
        vec!["synth", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        vec!["reproduce", "--cache", data.to_str().unwrap(), "--seed", "8", "--out", out.to_str().unwrap()],
    ] {
        let status = Command::new(bin).args(&args).status().map_err(|e| e.to_string())?;
        check(status.success(), format!("{} exited with {status}", args[0]))?;
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("paper_report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let g = report["concentration"]["G"].as_f64().ok_or("missing G")?;
    let rho = report["polarization"]["decile_spearman"].as_f64().ok_or("missing Spearman")?;
    let ladder = report["ladder"].as_array().ok_or("missing ladder")?;
    let crh: Vec<(u64, f64)> = ladder
        .iter()
        .map(|r| (r["k"].as_u64().unwrap(), r["jaccard"]["CRH"].as_f64().unwrap()))
        .collect();
    check(g > 0.7, format!("G = {g}"))?;
    check(rho > 0.7, format!("decile Spearman = {rho}"))?;
    check(crh.len() >= 3, "ladder too short")?;
    check(
        crh.windows(2).all(|w| w[1].1 < w[0].1),
        format!("CRH Jaccard not strictly decreasing: {crh:?}"),
    )?;
    within(t.elapsed(), 900)?;
    let js: Vec<String> = crh.iter().map(|(k, j)| format!("{k}:{j:.3}")).collect();
    Ok(format!("G {g:.3}, decile Spearman {rho:.3}, CRH Jaccard {}", js.join(" ")))
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 Gini oracle equivalence", Box::new(criterion_1)),
        ("2 power-law recovery", Box::new(criterion_2)),
        ("3 saturation fit and null dominance", Box::new(criterion_3)),
        ("4 leaning correctness", Box::new(criterion_4)),
        ("5 GMM / Ashman recovery", Box::new(criterion_5)),
        ("6 bridging scorer behavior", Box::new(criterion_6)),
        ("7 counterfactual determinism and sensitivity", Box::new(|| criterion_7(tmp.path()))),
        ("8 pipeline qualitative reproduction", Box::new(|| criterion_8(tmp.path()))),
    ];
    let mut failed = HashSet::new();
    for (name, f) in &criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                println!("criterion {name}: FAIL ({why}) [{secs:.1}s]");
                failed.insert(*name);
            }
        }
    }
    println!("criterion 9 full public dataset: SKIPPED (requires the full public release)");
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
