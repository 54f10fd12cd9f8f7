use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use qnncert_core::data::Dataset;
use qnncert_core::ibp::{propagate, IntervalTensor};
use qnncert_core::io::config::RunConfig;
use qnncert_core::io::idx::load_idx;
use qnncert_core::io::model::{load_model, save_model};
use qnncert_core::io::{read_file, write_file};
use qnncert_core::network::{classify, forward, QNetwork};
use qnncert_core::random::{random_instance, random_point_in, random_region, TinyNetSpec};
use qnncert_core::synth::{
    brute_force_verify, closed_radius, construct_robust_qnn, OracleVerdict, PointDataset1D,
};
use qnncert_core::train::{Checkpoint, MetricsRow, Phase, Trainer};
use qnncert_core::verify::{certify_dataset, verify as verify_one, DatasetReport, Method, Verdict, VerifyConfig};
use qnncert_core::{QnnError, Result};

use crate::{
    ConstructArgs, DataArgs, EvalArgs, SelftestArgs, TrainArgs, VerifyArgs, EXIT_CHECK_FAILED, EXIT_OK,
    EXIT_UNDECIDED, EXIT_VULNERABLE,
};

/// Loads IDX data for `net`: pixels map to the model's input format and the
/// samples are viewed with the model's input shape.
fn load_for(net: &QNetwork, args: &DataArgs) -> Result<Dataset> {
    let data = load_idx(&args.images, &args.labels, net.input_format())?;
    let data = match args.limit {
        Some(n) => data.take(n),
        None => data,
    };
    let data = data.reshape(net.input_shape().to_vec())?;
    if let Some(&label) = data.labels.iter().find(|l| **l >= net.class_count()) {
        return Err(QnnError::InvalidLabel {
            label,
            classes: net.class_count(),
        });
    }
    Ok(data)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn append(path: &Path, text: &str, fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<u8> {
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_dataset()?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let text = String::from_utf8(read_file(p)?)
                .map_err(|e| QnnError::ModelFormat(format!("{}: {e}", p.display())))?;
            Trainer::resume(&data, Checkpoint::from_json(&text)?)?
        }
        None => Trainer::new(&data, cfg.arch(&data)?, cfg.train.clone())?,
    };
    if args.checkpoint_every == Some(0) {
        return Err(QnnError::Config("checkpoint_every: must be at least 1".into()));
    }
    let out = &cfg.output;
    let save_checkpoint = |t: &Trainer| -> Result<()> {
        match &out.checkpoint {
            Some(p) => write_file(p, t.checkpoint().to_json()?.as_bytes()),
            None => Ok(()),
        }
    };
    if args.resume.is_none() {
        append(&out.metrics, &format!("{}\n", MetricsRow::CSV_HEADER), true)?;
    }
    let log_every = trainer.config().log_every;
    let mut steps = 0u64;
    let mut last: Option<MetricsRow> = None;
    while args.max_steps.is_none_or(|m| steps < m) {
        let Some(row) = trainer.advance()? else { break };
        steps += 1;
        if row.step % log_every == 0 || trainer.phase() != row.phase {
            append(&out.metrics, &format!("{}\n", row.csv_line()), false)?;
            if !args.quiet {
                eprintln!(
                    "step {} {:?} loss {:.4} eps {:.3} clean_acc {:.3}{}",
                    row.step,
                    row.phase,
                    row.loss,
                    row.eps,
                    row.clean_acc,
                    row.certified_frac
                        .map(|c| format!(" certified {c:.3}"))
                        .unwrap_or_default()
                );
            }
        }
        if args
            .checkpoint_every
            .is_some_and(|n| trainer.global_step() % n == 0)
        {
            save_checkpoint(&trainer)?;
        }
        last = Some(row);
    }
    save_checkpoint(&trainer)?;
    let mut summary = json!({
        "steps_run": steps,
        "global_step": trainer.global_step(),
        "phase": format!("{:?}", trainer.phase()).to_lowercase(),
        "last_loss": last.as_ref().map(|r| r.loss),
    });
    if trainer.phase() == Phase::Done {
        let (net, saturated) = trainer.export()?;
        save_model(&net, &out.model)?;
        summary["model"] = json!(out.model.display().to_string());
        summary["saturated_parameters"] = json!(saturated);
    }
    print_json(&summary);
    Ok(EXIT_OK)
}

pub fn verify(args: &VerifyArgs) -> Result<u8> {
    if !(args.timeout.is_finite() && args.timeout >= 0.0) {
        return Err(QnnError::Config("timeout: must be a nonnegative number of seconds".into()));
    }
    let net = load_model(&args.model)?;
    let data = load_for(&net, &args.data)?;
    let cfg = VerifyConfig {
        timeout: (args.timeout > 0.0).then(|| Duration::from_secs_f64(args.timeout)),
        max_regions: args.max_regions,
        workers: args.workers,
        deterministic: args.deterministic,
        elide_last: !args.no_elide,
        seed: args.seed,
        ..VerifyConfig::default()
    };
    let method = if args.baseline { Method::Baseline } else { Method::Complete };
    let report = certify_dataset(&net, &data, args.eps, &cfg, method)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    match &args.report {
        Some(p) => write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    eprintln!(
        "eps {}: certified robust accuracy {:.4} ({} robust, {} vulnerable, {} undecided of {})",
        report.eps,
        report.certified_robust_accuracy,
        report.robust_count,
        report.vulnerable_count,
        report.undecided_count,
        report.total
    );
    Ok(verdict_exit_code(&report))
}

pub fn verdict_exit_code(report: &DatasetReport) -> u8 {
    if report.undecided_count > 0 {
        EXIT_UNDECIDED
    } else if report.vulnerable_count > 0 {
        EXIT_VULNERABLE
    } else {
        EXIT_OK
    }
}

pub fn eval(args: &EvalArgs) -> Result<u8> {
    let net = load_model(&args.model)?;
    let data = load_for(&net, &args.data)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        if classify(&net, &data.sample(i))? == data.labels[i] {
            correct += 1;
        }
    }
    let accuracy = if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 };
    print_json(&json!({ "total": data.len(), "correct": correct, "accuracy": accuracy }));
    Ok(EXIT_OK)
}

fn parse_points(spec: &str) -> Result<Vec<(i64, usize)>> {
    let text = if Path::new(spec).is_file() {
        String::from_utf8(read_file(Path::new(spec))?)
            .map_err(|e| QnnError::Config(format!("points: {e}")))?
    } else {
        spec.to_string()
    };
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let bad = || QnnError::Config(format!("points: expected x:label, got {t:?}"));
            let (x, y) = t.split_once(':').ok_or_else(bad)?;
            Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn construct(args: &ConstructArgs) -> Result<u8> {
    let ds = PointDataset1D::new(parse_points(&args.points)?, args.bits)?;
    let net = construct_robust_qnn(&ds, args.eps, args.classes)?;
    save_model(&net, &args.out)?;
    let radius = closed_radius(args.eps);
    let cfg = VerifyConfig {
        timeout: None,
        deterministic: true,
        ..VerifyConfig::default()
    };
    let mut robust = 0;
    let mut fitted = 0;
    for &(x, y) in &ds.points {
        let input = ds.input(x);
        fitted += (classify(&net, &input)? == y) as usize;
        let oracle = brute_force_verify(&net, &input, radius, u128::MAX)?;
        let search = verify_one(&net, &input, radius, &cfg)?;
        if oracle == OracleVerdict::Robust && search.verdict == Verdict::Robust {
            robust += 1;
        }
    }
    let n = ds.len();
    println!(
        "wrote {} ({} hidden neurons for {n} points, eps {})",
        args.out.display(),
        net.hidden_neurons(),
        args.eps
    );
    if args.eps == 0 {
        println!("exact fit at {fitted}/{n} points");
    }
    println!("ROBUST at {robust}/{n} points");
    if robust == n && fitted == n {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "{}",
            json!({ "error": "check_failed", "message": format!("robust at {robust}/{n}, fitted {fitted}/{n}") })
        );
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Exhaustive ball size bound of the self-test instances.
const SELFTEST_BALL: u64 = 100_000;

pub fn selftest(args: &SelftestArgs) -> Result<u8> {
    let spec = TinyNetSpec::default();
    let cfg = VerifyConfig {
        timeout: None,
        deterministic: true,
        ..VerifyConfig::default()
    };
    let (mut mismatches, mut bad_witnesses, mut ibp_violations, mut point_mismatches) = (0, 0, 0, 0);
    let (mut robust, mut vulnerable) = (0, 0);
    for i in 0..args.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(i));
        let (net, x, eps) = random_instance(&mut rng, &spec, SELFTEST_BALL);
        let got = verify_one(&net, &x, eps, &cfg)?;
        let oracle = brute_force_verify(&net, &x, eps, SELFTEST_BALL as u128)?;
        match (&got.verdict, &oracle) {
            (Verdict::Robust, OracleVerdict::Robust) => robust += 1,
            (Verdict::Vulnerable { witness }, OracleVerdict::Vulnerable { .. }) => {
                vulnerable += 1;
                let in_ball = witness.raw.iter().zip(&x.raw).all(|(a, b)| (a - b).abs() <= eps as i64);
                if !in_ball || classify(&net, witness)? == got.reference_class {
                    bad_witnesses += 1;
                }
            }
            _ => mismatches += 1,
        }
        let region = random_region(&mut rng, &net);
        let bounds = propagate(&net, &region)?;
        for _ in 0..10 {
            let p = random_point_in(&mut rng, &region);
            if !bounds.contains(&forward(&net, &p)?) {
                ibp_violations += 1;
            }
        }
        let point = propagate(&net, &IntervalTensor::point(&x))?;
        let y = forward(&net, &x)?;
        if point.lower != y || point.upper != y {
            point_mismatches += 1;
        }
    }
    let ok = mismatches + bad_witnesses + ibp_violations + point_mismatches == 0;
    print_json(&json!({
        "instances": args.instances,
        "robust": robust,
        "vulnerable": vulnerable,
        "verdict_mismatches": mismatches,
        "invalid_witnesses": bad_witnesses,
        "ibp_violations": ibp_violations,
        "point_mismatches": point_mismatches,
        "passed": ok,
    }));
    if ok {
        Ok(EXIT_OK)
    } else {
        eprintln!("{}", json!({ "error": "check_failed", "message": "selftest found disagreements" }));
        Ok(EXIT_CHECK_FAILED)
    }
}
