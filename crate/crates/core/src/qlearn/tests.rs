use super::*;
use crate::cohort::{StageTwo, TwoStageRecord};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn formulas(f1: &str, f2: &str) -> QFormulas {
    QFormulas {
        stage1: f1.parse().unwrap(),
        stage2: f2.parse().unwrap(),
    }
}

fn stage2_effect(x2: f64, b2: f64) -> f64 {
    -0.7 + 0.5 * x2 - 0.9 * b2
}

fn linear_cohort(n: usize, seed: u64, censor: Option<(f64, f64)>) -> Cohort {
    linear_cohort_with_entry(n, seed, censor, 0.6, 0.3)
}

/// Linear two-stage cohort; `censor` caps follow-up at U(lo, hi).
fn linear_cohort_with_entry(n: usize, seed: u64, censor: Option<(f64, f64)>, p_entry: f64, noise: f64) -> Cohort {
    let mut rng = RngStream::new(seed, 9);
    let records = (0..n)
        .map(|i| {
            let x1 = 0.1 + 1.19 * rng.uniform();
            let b1 = f64::from(u8::from(rng.bernoulli(0.5)));
            let z1 = 10.0 + 3.0 * rng.standard_normal();
            let x2 = 0.9 + 1.1 * rng.uniform();
            let b2 = f64::from(u8::from(rng.bernoulli(0.5)));
            let z2 = 20.0 + 4.0 * rng.standard_normal();
            let a1 = Action::from(rng.bernoulli(0.5));
            let a2 = Action::from(rng.bernoulli(0.5));
            let entrant = rng.bernoulli(p_entry);
            let c = censor.map_or(f64::INFINITY, |(lo, hi)| lo + (hi - lo) * rng.uniform());
            let a1f = f64::from(a1);
            let t1 = (6.0 + 0.7 * x1 + 0.6 * b1 + a1f * (0.1 - 0.2 * x1 + 0.6 * b1) + 0.3 * rng.standard_normal()).exp();
            let lt2 = 4.0 + 0.3 * x2 + b2 + 0.3 * x1 + f64::from(a2) * stage2_effect(x2, b2);
            let t2 = (lt2 + noise * rng.standard_normal()).exp();
            if entrant {
                let entry = 0.3 * t1;
                TwoStageRecord {
                    id: i.to_string(),
                    o1: vec![x1, b1, z1],
                    a1,
                    time1: entry,
                    delta1: true,
                    stage2: Some(StageTwo {
                        o2: vec![x2, b2, z2],
                        a2,
                        time2: t2.min(c),
                        delta2: t2 < c,
                    }),
                }
            } else {
                TwoStageRecord {
                    id: i.to_string(),
                    o1: vec![x1, b1, z1],
                    a1,
                    time1: t1.min(c),
                    delta1: t1 < c,
                    stage2: None,
                }
            }
        })
        .collect();
    Cohort::new(names(&["x1", "b1", "z1"]), names(&["x2", "b2", "z2"]), records).unwrap()
}

#[test]
fn preset_design_widths() {
    let n = |s: &str| s.parse::<ModelFormula>().unwrap().n_columns();
    assert_eq!(n(presets::Q1T), 7);
    assert_eq!(n(presets::Q1F), 7);
    assert_eq!(n(presets::Q2T), 10);
    assert_eq!(n(presets::Q2F), 9);
    assert_eq!(n(presets::QLIN1), 5);
    assert_eq!(n(presets::QLIN2), 8);
    assert_eq!(n(presets::QINT1), 11);
    assert_eq!(n(presets::QINT2), 17);
}

#[test]
fn stage2_rule_recovered_without_censoring() {
    let cohort = linear_cohort_with_entry(5000, 1, None, 1.0, 0.1);
    let res = qlearn_two_stage(&cohort, &formulas(presets::Q1T, presets::Q2T), None).unwrap();
    let mut agree = 0;
    for (k, &i) in res.entrant_rows.iter().enumerate() {
        let o2 = &cohort.records()[i].stage2.as_ref().unwrap().o2;
        let truth = Action::from(stage2_effect(o2[0], o2[1]) > 0.0);
        if truth == res.stage2.train.a_opt[k] {
            agree += 1;
        } else {
            assert!(stage2_effect(o2[0], o2[1]).abs() < 0.05);
        }
    }
    assert!(agree as f64 >= 0.99 * res.entrant_rows.len() as f64, "{agree}/{}", res.entrant_rows.len());
    // Treatment-effect coefficients carry the right signs.
    let beta = &res.stage2.fit.beta;
    let cols = &res.stage2.column_names;
    let at = |name: &str| beta[cols.iter().position(|c| c == name).unwrap()];
    assert!(at("a2") < 0.0 && at("a2*x2") > 0.0 && at("a2*b2") < 0.0);
}

#[test]
fn plug_in_rule() {
    let cohort = linear_cohort(400, 2, Some((50.0, 400.0)));
    let res = qlearn_two_stage(&cohort, &formulas(presets::Q1T, presets::Q2T), None).unwrap();
    let mut kept = 0;
    for (k, &i) in res.entrant_rows.iter().enumerate() {
        let r = &cohort.records()[i];
        let s2 = r.stage2.as_ref().unwrap();
        assert!(res.stage1_event[i]);
        if s2.a2 == res.stage2.train.a_opt[k] && s2.delta2 {
            kept += 1;
            assert_eq!(res.stage1_time[i], r.time1 + s2.time2);
        } else {
            let pred = res.stage2.train.optimal_value(k);
            assert!((res.stage1_time[i] - (r.time1 + pred.exp())).abs() < 1e-9 * res.stage1_time[i]);
        }
    }
    assert!(kept > 0);
    for (i, r) in cohort.records().iter().enumerate().filter(|(_, r)| !r.is_entrant()) {
        assert_eq!((res.stage1_time[i], res.stage1_event[i]), (r.time1, r.delta1));
    }
}

#[test]
fn point_pipeline_is_deterministic() {
    let cohort = linear_cohort(300, 3, Some((50.0, 400.0)));
    let f = formulas(presets::Q1F, presets::Q2F);
    let a = qlearn_two_stage(&cohort, &f, None).unwrap();
    let b = qlearn_two_stage(&cohort, &f, None).unwrap();
    assert_eq!(a.stage1.fit, b.stage1.fit);
    assert_eq!(a.stage2.fit, b.stage2.fit);
    assert_eq!(a.stage1.train, b.stage1.train);
}

#[test]
fn newdata_predictions() {
    let cohort = linear_cohort(300, 4, None);
    let new: Vec<NewSubject> = cohort
        .records()
        .iter()
        .filter(|r| r.is_entrant())
        .take(5)
        .map(|r| NewSubject {
            id: r.id.clone(),
            o1: r.o1.clone(),
            a1: r.a1,
            time1: r.time1,
            o2: r.stage2.as_ref().unwrap().o2.clone(),
        })
        .collect();
    let res = qlearn_two_stage(&cohort, &formulas(presets::Q1T, presets::Q2T), Some(&new)).unwrap();
    let n2 = res.new_stage2.unwrap();
    for k in 0..5 {
        assert_eq!(n2.a_opt[k], res.stage2.train.a_opt[k]);
        assert!((n2.by_action[1][k] - res.stage2.train.by_action[1][k]).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_smoke() {
    let cohort = linear_cohort(200, 5, Some((50.0, 400.0)));
    let s = bootstrap_qlearn(&cohort, &formulas(presets::Q1T, presets::Q2T), 2, None, 1).unwrap();
    assert_eq!(s.coefficients.len(), 7 + 1 + 10 + 1);
    assert!(s.coefficients.iter().all(|c| c.interval.se.is_finite()));
    assert_eq!(s.subjects.len(), 200 * 3);
    assert!(bootstrap_qlearn(&cohort, &formulas(presets::Q1T, presets::Q2T), 1, None, 1).is_err());
}

#[test]
fn bootstrap_mean_concentrates() {
    let cohort = linear_cohort(2000, 6, Some((100.0, 800.0)));
    let b = 40;
    let s = bootstrap_qlearn(&cohort, &formulas(presets::QLIN1, presets::QLIN2), b, None, 2).unwrap();
    let mut stat = 0.0;
    for c in &s.coefficients {
        let i = &c.interval;
        stat += ((i.boot_mean - i.estimate) / (i.se / (b as f64).sqrt())).powi(2);
    }
    // Mean of squared standardized differences should be near 1.
    let avg = stat / s.coefficients.len() as f64;
    assert!(avg < 9.0, "{avg}");
}

#[test]
fn tiny_cohort_exhausts_redraws() {
    let cohort = linear_cohort(3, 7, None);
    let err = bootstrap_qlearn(&cohort, &formulas(presets::Q1T, presets::Q2T), 2, None, 3).unwrap_err();
    assert!(matches!(
        err,
        QlearnError::BootstrapExhausted {
            attempts: ATTEMPTS_PER_REPLICATE,
            ..
        }
    ));
}
