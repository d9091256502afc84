use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use optgym::agent::{checkpoint, TrainLogEntry};
use optgym::dataset::{generate_dataset, read_jsonl, write_jsonl};
use optgym::env::TrajectoryRecord;
use optgym::eval::{evaluate as eval_policy, write_curves_csv, write_rows_csv};
use optgym::interp::{interpret, random_inputs};
use optgym::search::search;
use optgym::transform::apply_schedule;
use optgym::{analytic_cost, Backend, Env, LinalgOp, Schedule};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn read_ops(path: &Path) -> Result<Vec<LinalgOp>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Reads one op from a file holding either a single JSON object or JSON
/// lines, in which case `index` picks the line.
pub fn read_op(path: &Path, index: usize) -> Result<LinalgOp, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let op = match serde_json::from_str::<LinalgOp>(text.trim()) {
        Ok(op) if index == 0 => op,
        _ => {
            let ops = read_jsonl(text.as_bytes()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let n = ops.len();
            ops.into_iter()
                .nth(index)
                .ok_or_else(|| CliError::Input(format!("{}: no op at index {index} ({n} ops)", path.display())))?
        }
    };
    op.validate().map_err(CliError::Input)?;
    Ok(op)
}

pub fn generate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let dir = out.unwrap_or(&cfg.paths.data_dir);
    create_dir(dir)?;
    let d = &cfg.dataset;
    let max_loops = cfg.limits.max_loops;
    let train = generate_dataset(cfg.seed, &d.train_counts, &d.ranges, max_loops);
    // distinct stream so the validation ops differ from the training ops
    let val = generate_dataset(cfg.seed.wrapping_add(1), &d.validation_counts, &d.ranges, max_loops);
    for (name, ops) in [("train.jsonl", &train), ("validation.jsonl", &val)] {
        let path = dir.join(name);
        write_jsonl(create(&path)?, ops).map_err(|e| CliError::io(&path, e))?;
    }
    println!("wrote {} train and {} validation ops to {}", train.len(), val.len(), dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, checkpoint_every: usize, log_every: usize) -> Result<(), CliError> {
    let data = data.map_or_else(|| cfg.paths.train_set(), Path::to_path_buf);
    let ops = read_ops(&data)?;
    let dir = &cfg.paths.run_dir;
    create_dir(dir)?;
    cfg.save(&dir.join("config.json"))?;

    let log_path = dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let tc = cfg.train_config();
    let total = tc.ppo.iterations;
    let out = optgym::agent::train(&ops, &tc, |e: &TrainLogEntry, params| {
        serde_json::to_writer(&mut log, e).map_err(std::io::Error::from)?;
        log.write_all(b"\n")?;
        log.flush()?;
        if checkpoint_every > 0 && e.iteration % checkpoint_every == 0 {
            checkpoint::save(params, &dir.join(format!("ckpt_{:06}.ckpt", e.iteration)))?;
        }
        if log_every > 0 && (e.iteration % log_every == 0 || e.iteration == total) {
            eprintln!(
                "iteration {}/{total}: speedup {:.3} reward {:.3} entropy {:.3}",
                e.iteration, e.mean_speedup, e.mean_reward, e.entropy
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    checkpoint::save(&out.params, &cfg.paths.checkpoint())?;

    // wall-clock times stay out of the log so identical runs give identical logs
    let timing = dir.join("timing.csv");
    let mut t = create(&timing)?;
    let mut body = String::from("iteration,seconds\n");
    for (i, s) in out.iteration_seconds.iter().enumerate() {
        body += &format!("{},{s}\n", i + 1);
    }
    t.write_all(body.as_bytes()).map_err(|e| CliError::io(&timing, e))?;
    println!("trained {total} iterations; checkpoint at {}", cfg.paths.checkpoint().display());
    Ok(())
}

#[derive(Serialize)]
struct ScheduleLine<'a> {
    op_id: usize,
    rl: &'a Schedule,
    baseline: &'a Schedule,
}

pub fn evaluate(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    curve_len: usize,
) -> Result<(), CliError> {
    let ckpt = ckpt.map_or_else(|| cfg.paths.checkpoint(), Path::to_path_buf);
    let params = checkpoint::load(&ckpt)?;
    let data = data.map_or_else(|| cfg.paths.validation_set(), Path::to_path_buf);
    let ops = read_ops(&data)?;
    let report = eval_policy(&params, &ops, &cfg.cost, &cfg.search, curve_len, cfg.seed)?;

    let dir = &cfg.paths.report_dir;
    create_dir(dir)?;
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());
    write_rows_csv(&report.rows, create(&dir.join("rows.csv"))?).map_err(csv_err)?;
    write_curves_csv(&report.curves, create(&dir.join("curves.csv"))?).map_err(csv_err)?;
    write_json(&dir.join("summary.json"), &report.summary)?;

    let path = dir.join("schedules.jsonl");
    let mut w = create(&path)?;
    let mut traj = create(&dir.join("trajectories.jsonl"))?;
    let mut env = Env::new(params.limits, cfg.reward_mode, Backend::Analytic(cfg.cost));
    for (op_id, (op, (rl, baseline))) in ops
        .iter()
        .zip(report.rl_schedules.iter().zip(&report.baseline_schedules))
        .enumerate()
    {
        let line = ScheduleLine { op_id, rl, baseline };
        writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(|e| CliError::io(&path, e))?;
        env.reset(op.clone())?;
        for (step, action) in rl.actions.iter().enumerate() {
            let r = env.step(action)?;
            let rec = TrajectoryRecord {
                op_id,
                step,
                action: action.clone(),
                reward: r.reward,
                cost: r.info.cost,
                done: r.done,
            };
            writeln!(traj, "{}", serde_json::to_string(&rec).expect("serializable"))
                .map_err(|e| CliError::io(dir, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    traj.flush().map_err(|e| CliError::io(dir, e))?;
    print_json(&report.summary);
    Ok(())
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    schedule: &'a Schedule,
    best_cost: f64,
    base_cost: f64,
    speedup: f64,
    evaluated: usize,
}

pub fn autoschedule(cfg: &RunConfig, op: &LinalgOp, out: Option<&Path>, trace: Option<&Path>) -> Result<(), CliError> {
    let r = search(op, &cfg.search, &cfg.cost);
    if let Some(p) = out {
        write_json(p, &r.best)?;
    }
    if let Some(p) = trace {
        r.trace.write_csv(create(p)?).map_err(|e| CliError::Output(e.to_string()))?;
    }
    print_json(&SearchSummary {
        schedule: &r.best,
        best_cost: r.best_cost,
        base_cost: r.base_cost,
        speedup: r.speedup,
        evaluated: r.trace.len(),
    });
    Ok(())
}

#[derive(Serialize)]
struct ApplyReport<'a> {
    op: &'a LinalgOp,
    base_cost: f64,
    /// `None` when the measured backend timed out.
    cost: Option<f64>,
    speedup: Option<f64>,
    verify: Option<&'static str>,
}

pub fn apply(cfg: &RunConfig, op: &LinalgOp, schedule: &Path, verify: bool, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(schedule).map_err(|e| CliError::io(schedule, e))?;
    let schedule: Schedule =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", schedule.display())))?;
    schedule.validate()?;
    let result = apply_schedule(op, &schedule, cfg.limits.max_loops)?;

    let backend = cfg.backend();
    let base = match backend {
        Backend::Analytic(c) => analytic_cost(op, &c),
        Backend::Measured(_) => backend.evaluate(op, None)?,
    };
    let after = backend.evaluate(&result, Some(base.total))?;
    let cost = (!after.timed_out).then_some(after.total);

    let verdict = if verify {
        let inputs = random_inputs(op, cfg.seed, true);
        let want = interpret(op, &inputs, &cfg.measure.limits)?;
        let got = interpret(&result, &inputs, &cfg.measure.limits)?;
        Some(if want == got { "pass" } else { "fail" })
    } else {
        None
    };
    let report = ApplyReport {
        op: &result,
        base_cost: base.total,
        cost,
        speedup: cost.map(|c| base.total / c),
        verify: verdict,
    };
    match out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report),
    }
    if verdict == Some("fail") {
        return Err(CliError::Verify("transformed op disagrees with the original".into()));
    }
    Ok(())
}
