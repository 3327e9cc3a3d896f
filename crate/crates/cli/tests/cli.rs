use std::path::PathBuf;
use std::process::{Command, Output};

fn data(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(file)
}

fn mdnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdnf")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fit_bn_writes_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let net = data("tiny.bn");
    let o = mdnf(&[
        "fit-bn", "--net", net.to_str().unwrap(), "--evidence", "B=1", "--algo", "vif", "--flows", "4", "--iters", "2000",
        "--seed", "7", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("iteration,internal_objective,tau_t,external_elbo,kl_exact,wallclock_ms")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2000);
    assert!(rows.iter().all(|r| r.len() == 6 && r[5].is_empty()));
    // external columns are filled at evaluation points only
    assert!(!rows[0][3].is_empty() && !rows[100][4].is_empty());
    assert!(rows[1][3].is_empty() && rows[1][4].is_empty());
}

#[test]
fn seed_fixes_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let net = data("tiny.bn");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = mdnf(&[
            "fit-bn", "--net", net.to_str().unwrap(), "--evidence", "B=1", "--flows", "3", "--iters", "300", "--seed", seed,
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.csv", "3"), run("b.csv", "3"));
    assert_ne!(run("a.csv", "3"), run("c.csv", "4"));
}

#[test]
fn timing_fills_wallclock() {
    let net = data("tiny.bn");
    let o = mdnf(&["fit-bn", "--net", net.to_str().unwrap(), "--evidence", "B=1", "--iters", "5", "--timing"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let last = text.lines().last().unwrap();
    assert!(!last.rsplit(',').next().unwrap().is_empty());
}

#[test]
fn evidence_out_of_range_is_a_usage_error() {
    let net = data("tiny.bn");
    let o = mdnf(&["fit-bn", "--net", net.to_str().unwrap(), "--evidence", "B=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("index out of range"));
}

#[test]
fn unknown_flag_and_subcommand_exit_one() {
    assert_eq!(mdnf(&["fit-bn", "--bogus"]).status.code(), Some(1));
    assert_eq!(mdnf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mdnf(&[]).status.code(), Some(1));
    assert_eq!(mdnf(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_network_file_is_a_usage_error() {
    let o = mdnf(&["fit-bn", "--net", "/nonexistent/x.bn"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let net = data("tiny.bn");
    std::fs::write(
        &cfg,
        format!("net = {:?}\nevidence = [\"B=1\"]\niters = 50\nseed = 2\n", net.to_str().unwrap()),
    )
    .unwrap();
    let o = mdnf(&["fit-bn", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 51);
    let o = mdnf(&["fit-bn", "--config", cfg.to_str().unwrap(), "--iters", "20"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 21);

    std::fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(mdnf(&["fit-bn", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn saved_mixture_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mix = dir.path().join("q.mdnf");
    let net = data("tiny.bn");
    let net = net.to_str().unwrap();
    let o = mdnf(&[
        "fit-bn", "--net", net, "--evidence", "B=1", "--flows", "2", "--iters", "500", "--save-mixture", mix.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mdnf(&["eval", "--net", net, "--evidence", "B=1", "--mixture", mix.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kl_exact,support_violation,exact_elbo,log_evidence"));
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .filter_map(|v| v.parse().ok())
        .collect();
    assert!(row[0] >= 0.0 && row[0] < 0.1);
    assert!((row[1] - (row[2] - row[0])).abs() < 1e-9);

    let o = mdnf(&["eval", "--net", net, "--mixture", mix.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "two latent nodes do not match a one-node mixture");
}

#[test]
fn grid_subcommands_write_csv() {
    let net = data("tiny.bn");
    let net = net.to_str().unwrap();
    let common = ["--net", net, "--evidence", "B=1", "--iters", "50", "--runs", "2", "--workers", "2"];

    let mut args = vec!["sweep-temp", "--taus", "1,10"];
    args.extend(common);
    let o = mdnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("method,tau,tau_p,seed,kl,elbo,final_objective,error"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);

    let mut args = vec!["sweep-temp", "--algo", "gs", "--taus", "1", "--tau-ps", "0.5,1"];
    args.extend(common);
    let o = mdnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 2 * 2);

    let mut args = vec!["algo-compare", "--algos", "vif,bvif", "--bs", "1,2"];
    args.extend(common);
    let o = mdnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 2 * 2 * 2);

    let mut args = vec!["base-sweep", "--alphas", "0.01,100", "--flows", "2"];
    args.extend(common);
    let o = mdnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("alpha,seed,kl,elbo,final_objective,error"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}

#[test]
fn partial_flows_reports_every_run() {
    let o = mdnf(&["partial-flows", "--k", "5", "--runs", "4", "--iters", "500", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("k,flows,layers,run,shuffle,solved_at"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(mdnf(&["partial-flows", "--k", "6"]).status.code(), Some(1));
}

#[test]
fn fit_gmm_reads_csv_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.csv");
    let mut text = String::from("x,y\n");
    for i in 0..30 {
        let c = if i % 2 == 0 { -4.0 } else { 4.0 };
        text.push_str(&format!("{},{}\n", c + (i as f64) * 0.01, c - (i as f64) * 0.02));
    }
    std::fs::write(&path, text).unwrap();
    let o = mdnf(&[
        "fit-gmm", "--data", path.to_str().unwrap(), "--clusters", "2", "--em-steps", "3", "--iters", "20", "--flows", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("e_step,components,seed,elbo,reference_elbo,relative_gap,agreement,reference_agreement,error"));
    assert_eq!(text.lines().count(), 2);

    std::fs::write(&path, "1,2\n3\n").unwrap();
    assert_eq!(mdnf(&["fit-gmm", "--data", path.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn variance_reports_each_sample_count() {
    let net = data("tiny.bn");
    let o = mdnf(&[
        "variance", "--net", net.to_str().unwrap(), "--evidence", "B=1", "--flows", "3", "--iters", "100", "--eval-samples",
        "1,50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("samples,repetitions,mean,std,relative"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn runtime_failures_exit_two() {
    let net = data("tiny.bn");
    let net = net.to_str().unwrap();
    let o = mdnf(&["fit-bn", "--net", net, "--evidence", "B=1", "--iters", "5", "--out", "/nonexistent/dir/run.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mdnf(&["fit-bn", "--net", net, "--evidence", "B=1", "--iters", "5", "--algo", "gs", "--save-mixture", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2), "gs has no mixture to save");
}

#[test]
fn bad_hyperparameters_are_usage_errors() {
    let net = data("tiny.bn");
    let net = net.to_str().unwrap();
    for bad in [["--lr", "NaN"], ["--tau", "0"], ["--flows", "0"], ["--gamma", "-1"]] {
        let mut args = vec!["fit-bn", "--net", net, "--evidence", "B=1", "--iters", "5"];
        args.extend(bad);
        assert_eq!(mdnf(&args).status.code(), Some(1), "{bad:?}");
    }
}
