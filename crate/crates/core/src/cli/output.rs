//! CSV tables and the JSON run report.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::exp_solver::ExpSolution;
use crate::grid::{MarkovStoppingRule, ValueField};

use super::config::SCHEMA_VERSION;

/// JSON has no infinities; they are written as the strings `"inf"` and
/// `"-inf"`, like in the CSV tables.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

/// `t,state,value,h_star` rows, state-major.
pub fn write_value_csv(
    out: impl Write,
    states: &[String],
    value: &ValueField,
    rule: Option<&MarkovStoppingRule>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "state", "value", "h_star"])?;
    let grid = value.grid();
    for (i, name) in states.iter().enumerate() {
        for (k, t) in grid.nodes().enumerate() {
            let h = rule.map_or(String::new(), |r| r.wait_at(i, k).to_string());
            w.write_record([t.to_string(), name.clone(), value.at(i, k).to_string(), h])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `W,state,f_star` rows.
pub fn write_exp_csv(out: impl Write, states: &[String], sol: &ExpSolution) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["W", "state", "f_star"])?;
    for (i, name) in states.iter().enumerate() {
        w.write_record([sol.w[i].to_string(), name.clone(), sol.wait(i).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_file(dir: &Path, name: &str, f: impl FnOnce(std::fs::File) -> csv::Result<()>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join(name))?;
    f(file).map_err(std::io::Error::other)
}

/// The report envelope shared by all commands.
pub fn report(command: &str, config: Value, result: Value, diagnostics: Value, error: Option<Value>) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "schema": SCHEMA_VERSION,
        "config": config,
        "result": result,
        "diagnostics": diagnostics,
        "error": error,
    })
}
