use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfupdate::arma::ArmaModel;
use hfupdate::sim::rep_rng;

fn hfupdate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfupdate")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Positive AR(1) daily data: `periods` whole periods plus `extra` days.
fn daily(seed: u64, n: usize) -> Vec<f64> {
    let model = ArmaModel::new(vec![0.6], vec![], 4.0, 1.0).unwrap();
    model.simulate(n, 100, &mut rep_rng(seed, 0)).into_iter().map(|x| x.max(0.5)).collect()
}

fn write_bottom_table(path: &Path, series: &[(&str, &[f64])]) {
    let mut text = String::from("series_id,level,index,value\n");
    for (id, values) in series {
        for (i, v) in values.iter().enumerate() {
            writeln!(text, "{id},1,{},{v}", i + 1).unwrap();
        }
    }
    std::fs::write(path, text).unwrap();
}

fn write_new_obs(path: &Path, series: &[(&str, &[f64])]) {
    let mut text = String::from("series_id,index,value\n");
    for (id, values) in series {
        for (i, v) in values.iter().enumerate() {
            writeln!(text, "{id},{},{v}", i + 1).unwrap();
        }
    }
    std::fs::write(path, text).unwrap();
}

#[derive(Debug, serde::Deserialize)]
struct ForecastRow {
    series_id: String,
    level: usize,
    slot: usize,
    kind: String,
    value: f64,
    method: String,
    z: usize,
}

fn read_forecasts(path: &Path) -> Vec<ForecastRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(Result::unwrap).collect()
}

#[derive(Debug, serde::Deserialize)]
struct RrmseRow {
    series_id: String,
    method: String,
    z: usize,
    level: String,
    rrmse: f64,
    flag: String,
}

fn read_rrmse(path: &Path) -> Vec<RrmseRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(Result::unwrap).collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Groups forecast rows per `(series, method, z)` into `level -> slot values`.
fn hierarchies(rows: &[ForecastRow]) -> BTreeMap<(String, String, usize), BTreeMap<usize, Vec<f64>>> {
    let mut out: BTreeMap<_, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
    for r in rows {
        out.entry((r.series_id.clone(), r.method.clone(), r.z)).or_default().entry(r.level).or_default().push((r.slot, r.value));
    }
    out.into_iter()
        .map(|(key, levels)| {
            let levels = levels
                .into_iter()
                .map(|(k, mut v)| {
                    v.sort_by_key(|&(s, _)| s);
                    (k, v.into_iter().map(|(_, x)| x).collect())
                })
                .collect();
            (key, levels)
        })
        .collect()
}

#[test]
fn daily_weekly_update_and_evaluate() {
    let ws = Workspace::new();
    let m = 28;
    let a = daily(1, 60 * m + m);
    let b = daily(2, 60 * m + m);
    let (a_hist, a_next) = a.split_at(60 * m);
    let (b_hist, b_next) = b.split_at(60 * m);
    write_bottom_table(&ws.path("data.csv"), &[("a", a_hist), ("b", b_hist)]);
    write_new_obs(&ws.path("new.csv"), &[("a", &a_next[..10]), ("b", &b_next[..3])]);
    let out = ws.path("upd");
    let o = hfupdate(&[
        "update",
        "--scheme",
        "28,7,1",
        "--data",
        path_str(&ws.path("data.csv")),
        "--new-obs",
        path_str(&ws.path("new.csv")),
        "--z",
        "0,3",
        "--transform",
        "log1p",
        "--max-p",
        "1",
        "--max-q",
        "1",
        // Long-horizon forecasts settle on the mean, which leaves the
        // 33-node sample covariance numerically singular.
        "--pinv-fallback",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let rows = read_forecasts(&out.join("forecasts.csv"));
    // 2 series x 2 z values x (base + 3 methods) x 33 nodes.
    assert_eq!(rows.len(), 2 * 2 * 4 * 33);
    assert!(rows.iter().filter(|r| r.z == 0).all(|r| r.kind == "forecast"));
    for r in rows.iter().filter(|r| r.kind == "observed") {
        assert_eq!((r.z, r.level), (3, 1));
        let next = if r.series_id == "a" { a_next } else { b_next };
        assert_eq!(r.value, next[r.slot - 1]);
    }
    for ((id, method, z), levels) in hierarchies(&rows) {
        let bottom = &levels[&1];
        for (&k, values) in &levels {
            for (u, v) in values.iter().enumerate() {
                let sum: f64 = bottom[u * k..(u + 1) * k].iter().sum();
                if method != "base" {
                    assert!((v - sum).abs() < 1e-8 * sum.abs().max(1.0), "{id} {method} z={z} level {k} slot {}", u + 1);
                }
            }
        }
    }

    // Evaluate against the realised period.
    let mut actuals = String::from("series_id,level,index,value\n");
    for (id, next) in [("a", a_next), ("b", b_next)] {
        for (i, v) in next.iter().enumerate() {
            writeln!(actuals, "{id},1,{},{v}", i + 1).unwrap();
        }
    }
    std::fs::write(ws.path("actuals.csv"), actuals).unwrap();
    let eval = ws.path("eval");
    let o = hfupdate(&[
        "evaluate",
        "--scheme",
        "28,7,1",
        "--predictions",
        path_str(&out.join("forecasts.csv")),
        "--actuals",
        path_str(&ws.path("actuals.csv")),
        "--out",
        path_str(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = read_rrmse(&eval.join("rrmse.csv"));
    // 2 series x 8 prediction sets x (3 levels + overall).
    assert_eq!(scores.len(), 2 * 8 * 4);
    for r in scores.iter().filter(|r| r.method == "base" && r.z == 0) {
        assert_eq!(r.rrmse, 1.0, "{r:?}");
    }
    assert!(scores.iter().all(|r| r.rrmse.is_finite() && r.flag.is_empty()));
    // Observed days are exact, so updated bottom-up daily errors only cover the rest.
    assert!(scores.iter().any(|r| r.series_id == "a" && r.z == 3 && r.level == "1"));
}

#[test]
fn incoherent_upper_level_is_reported() {
    let ws = Workspace::new();
    let bottom: Vec<f64> = (1..=16).map(f64::from).collect();
    let mut text = String::from("series_id,level,index,value\n");
    for (i, v) in bottom.iter().enumerate() {
        writeln!(text, "shop,1,{},{v}", i + 1).unwrap();
    }
    for (u, v) in [10.0, 26.0, 43.0, 58.0].iter().enumerate() {
        writeln!(text, "shop,4,{},{v}", u + 1).unwrap();
    }
    std::fs::write(ws.path("data.csv"), text).unwrap();
    write_new_obs(&ws.path("new.csv"), &[]);
    let o = hfupdate(&[
        "update",
        "--scheme",
        "4,1",
        "--data",
        path_str(&ws.path("data.csv")),
        "--new-obs",
        path_str(&ws.path("new.csv")),
        "--out",
        path_str(&ws.path("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("\"shop\", level 4, index 3"), "{err}");
}

fn write_predictions(path: &Path, sets: &[(&str, &[f64])]) {
    // Scheme 2,1: level 2 slot 1, level 1 slots 1 and 2.
    let mut text = String::from("series_id,level,slot,kind,value,method,z\n");
    for (method, v) in sets {
        writeln!(text, "s,2,1,forecast,{},{method},0", v[0]).unwrap();
        writeln!(text, "s,1,1,forecast,{},{method},0", v[1]).unwrap();
        writeln!(text, "s,1,2,forecast,{},{method},0", v[2]).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

fn write_actuals(path: &Path, bottom: [f64; 2]) {
    std::fs::write(path, format!("series_id,level,index,value\ns,1,1,{}\ns,1,2,{}\n", bottom[0], bottom[1])).unwrap();
}

fn evaluate(ws: &Workspace, extra: &[&str]) -> Output {
    let mut args = vec![
        "evaluate",
        "--scheme",
        "2,1",
        "--predictions",
        path_str(&ws.dir.path().join("pred.csv")).to_owned().leak(),
        "--actuals",
        path_str(&ws.dir.path().join("act.csv")).to_owned().leak(),
        "--out",
        path_str(&ws.dir.path().join("eval")).to_owned().leak(),
    ];
    args.extend_from_slice(extra);
    hfupdate(&args)
}

#[test]
fn predictions_equal_to_base_score_one() {
    let ws = Workspace::new();
    write_predictions(&ws.path("pred.csv"), &[("base", &[5.0, 1.0, 3.0]), ("mint_full", &[5.0, 1.0, 3.0])]);
    write_actuals(&ws.path("act.csv"), [2.0, 2.5]);
    let o = evaluate(&ws, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rrmse(&ws.path("eval").join("rrmse.csv"));
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.rrmse == 1.0), "{rows:?}");
}

#[test]
fn zero_denominator_is_flagged_without_failing() {
    let ws = Workspace::new();
    write_predictions(&ws.path("pred.csv"), &[("base", &[4.0, 1.0, 3.0]), ("bottom_up", &[5.0, 2.0, 3.0])]);
    write_actuals(&ws.path("act.csv"), [1.0, 3.0]);
    let o = evaluate(&ws, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_rrmse(&ws.path("eval").join("rrmse.csv"));
    let bu: Vec<_> = rows.iter().filter(|r| r.method == "bottom_up").collect();
    assert!(bu.iter().all(|r| r.flag.contains("zero_denominator")), "{bu:?}");
    assert!(bu.iter().filter(|r| r.level != "overall").all(|r| r.rrmse == f64::INFINITY));
    let base: Vec<_> = rows.iter().filter(|r| r.method == "base").collect();
    assert!(base.iter().filter(|r| r.level != "overall").all(|r| r.rrmse.is_nan()));
}

#[test]
fn nonneg_clips_and_stays_coherent() {
    let ws = Workspace::new();
    write_predictions(&ws.path("pred.csv"), &[("base", &[1.0, -2.0, 2.0]), ("bottom_up", &[1.0, -1.0, 2.0])]);
    write_actuals(&ws.path("act.csv"), [0.5, 1.0]);
    let o = evaluate(&ws, &["--nonneg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(ws.path("eval").join("predictions_nonneg.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut bu = BTreeMap::new();
    let mut base = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let key = (rec[1].parse::<usize>().unwrap(), rec[2].parse::<usize>().unwrap());
        let v: f64 = rec[3].parse().unwrap();
        match &rec[4] {
            "bottom_up" => bu.insert(key, v),
            "base" => base.insert(key, v),
            other => panic!("unexpected method {other}"),
        };
    }
    assert_eq!(bu[&(2, 1)], 2.0);
    assert_eq!(bu[&(1, 1)], 0.0);
    assert_eq!(bu[&(1, 2)], 2.0);
    // Base forecasts are left alone.
    assert_eq!(base[&(1, 1)], -2.0);
}

#[test]
fn usage_errors_exit_one() {
    let ws = Workspace::new();
    let out = ws.path("o");
    assert_eq!(hfupdate(&["update", "--out", path_str(&out)]).status.code(), Some(1));
    assert_eq!(hfupdate(&["simulate", "--out", path_str(&out), "--scheme", "4,3"]).status.code(), Some(1));
    assert_eq!(hfupdate(&["simulate", "--out", path_str(&out), "--p", "7"]).status.code(), Some(1));
    assert_eq!(hfupdate(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hfupdate(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_reads_config_file() {
    let ws = Workspace::new();
    std::fs::write(ws.path("sim.conf"), "# small run\nscheme = 4,1\nreps = 2\nn_top = 30\nseed = 5\n").unwrap();
    let out = ws.path("sim");
    let o = hfupdate(&["simulate", "--config", path_str(&ws.path("sim.conf")), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["config"]["reps"], 2);
    assert_eq!(meta["config"]["n_top"], 30);
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("rep,method,z,level,train_rrmse,test_rrmse,flag\n"));
    // 2 reps x (base + 3 methods) x 4 z values x 2 levels.
    assert_eq!(results.lines().count(), 1 + 2 * 4 * 4 * 2);
}

#[test]
fn singular_covariance_exits_three_with_hint() {
    let ws = Workspace::new();
    let m = 28;
    let a = daily(1, 60 * m);
    write_bottom_table(&ws.path("data.csv"), &[("a", &a)]);
    write_new_obs(&ws.path("new.csv"), &[]);
    let o = hfupdate(&[
        "update",
        "--scheme",
        "28,7,1",
        "--data",
        path_str(&ws.path("data.csv")),
        "--new-obs",
        path_str(&ws.path("new.csv")),
        "--methods",
        "mint_full",
        "--transform",
        "log1p",
        "--max-p",
        "1",
        "--max-q",
        "1",
        "--out",
        path_str(&ws.path("out")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("--pinv-fallback"));
}
