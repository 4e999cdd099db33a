//! JSON run configuration.
//!
//! Every field is read through its JSON pointer so errors name the exact
//! location. Defaults are resolved here and echoed back in each report.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::exp_solver::ExpOptions;
use crate::grid::TimeGrid;
use crate::grid_solver::{default_grid, SolverOptions};
use crate::house::{build_house_model, HouseError};
use crate::model::{validate_model, CtmcModel, ModelError, RawModel, StoppingProblem};
use crate::risk_compare::XRange;
use crate::simulator::{McOptions, Sampler};
use crate::utility::{UtilityError, UtilityFamily, UtilitySpec};

pub const SCHEMA_VERSION: u64 = 1;

const TOP_LEVEL: &[&str] = &[
    "schema",
    "states",
    "Q",
    "g",
    "c",
    "alpha",
    "utility",
    "t0",
    "grid",
    "solver",
    "exp",
    "ola",
    "simulation",
    "compare",
    "threads",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    House(#[from] HouseError),
}

fn schema(pointer: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Generator(RawModel),
    House { alpha: Vec<f64>, c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Optimal,
    Immediate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub i0: usize,
    pub mc: McOptions,
    pub n_list: Vec<usize>,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub utility_w: UtilitySpec,
    pub x_range: XRange,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub source: ModelSource,
    pub model: CtmcModel,
    pub utility: UtilitySpec,
    pub t0: f64,
    pub grid: TimeGrid,
    pub solver: SolverOptions,
    /// Jump horizon for `solve-finite`.
    pub horizon: Option<usize>,
    pub exp: ExpOptions,
    pub ola_t: f64,
    pub ola_dtheta: f64,
    pub simulation: SimulationConfig,
    pub compare: Option<CompareConfig>,
    pub threads: usize,
}

impl Config {
    pub fn problem(&self) -> Result<StoppingProblem, ModelError> {
        StoppingProblem::with_offset(self.model.clone(), self.utility, self.t0)
    }

    /// Offer intensities when the model is a house model.
    pub fn house_alpha(&self) -> Option<&[f64]> {
        match &self.source {
            ModelSource::House { alpha, .. } => Some(alpha),
            ModelSource::Generator(_) => None,
        }
    }

    /// Every resolved parameter, in the config file's own layout.
    pub fn echo(&self) -> Value {
        let mut out = Map::new();
        out.insert("schema".into(), json!(SCHEMA_VERSION));
        match &self.source {
            ModelSource::Generator(raw) => {
                out.insert("states".into(), json!(raw.states));
                out.insert("Q".into(), json!(raw.q));
                out.insert("g".into(), json!(raw.g));
                out.insert("c".into(), json!(raw.c));
            }
            ModelSource::House { alpha, c } => {
                out.insert("alpha".into(), json!(alpha));
                out.insert("c".into(), json!(c));
            }
        }
        out.insert("utility".into(), utility_json(&self.utility));
        out.insert("t0".into(), json!(self.t0));
        out.insert("grid".into(), json!({"t_max": self.grid.t_max(), "dt": self.grid.dt()}));
        out.insert(
            "solver".into(),
            json!({
                "tol": self.solver.tol,
                "max_iter": self.solver.max_iter,
                "refine": self.solver.refine,
                "horizon": self.horizon,
            }),
        );
        out.insert("exp".into(), json!({"tol": self.exp.tol, "max_iter": self.exp.max_iter}));
        out.insert("ola".into(), json!({"t": self.ola_t, "dtheta": self.ola_dtheta}));
        let sim = &self.simulation;
        out.insert(
            "simulation".into(),
            json!({
                "i0": sim.i0,
                "n_paths": sim.mc.n_paths,
                "seed": sim.mc.seed,
                "max_jumps": sim.mc.max_jumps,
                "n_list": sim.n_list,
                "policy": match sim.policy { Policy::Optimal => "optimal", Policy::Immediate => "immediate" },
                "sampler": match sim.mc.sampler {
                    Sampler::Direct => "direct",
                    Sampler::Uniformized { .. } => "uniformized",
                },
                "rng": "chacha8",
            }),
        );
        if let Some(cmp) = &self.compare {
            out.insert(
                "compare".into(),
                json!({
                    "utility_w": utility_json(&cmp.utility_w),
                    "x_range": {"lo": cmp.x_range.lo, "hi": cmp.x_range.hi, "step": cmp.x_range.step},
                }),
            );
        }
        out.insert("threads".into(), json!(self.threads));
        Value::Object(out)
    }
}

pub fn utility_json(u: &UtilitySpec) -> Value {
    match u.family() {
        UtilityFamily::Exponential { gamma } => json!({"family": "exponential", "gamma": gamma}),
        UtilityFamily::Logarithmic => json!({"family": "log", "d": u.shift()}),
        UtilityFamily::Power { p } => json!({"family": "power", "p": p, "d": u.shift()}),
        UtilityFamily::Linear => json!({"family": "linear"}),
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

pub fn load_config(path: &std::path::Path, overrides: Overrides) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| schema("", format!("invalid JSON: {e}")))?;
    parse_config(&value, overrides)
}

pub fn parse_config(root: &Value, overrides: Overrides) -> Result<Config, ConfigError> {
    let obj = root.as_object().ok_or_else(|| schema("", "expected an object"))?;
    if let Some(key) = obj.keys().find(|k| !TOP_LEVEL.contains(&k.as_str())) {
        return Err(schema(&format!("/{key}"), "unknown key"));
    }
    let version = opt_u64(root, "/schema")?.unwrap_or(SCHEMA_VERSION);
    if version != SCHEMA_VERSION {
        return Err(schema("/schema", format!("unsupported schema version {version}")));
    }

    let c = req_f64(root, "/c")?;
    let (source, model) = if root.pointer("/alpha").is_some() {
        for key in ["/Q", "/g", "/states"] {
            if root.pointer(key).is_some() {
                return Err(schema(key, "not allowed together with /alpha"));
            }
        }
        let alpha = f64_array(root, "/alpha")?;
        let house = build_house_model(&alpha, c)?;
        (ModelSource::House { alpha, c }, house.model().clone())
    } else {
        let q = matrix(root, "/Q")?;
        let g = f64_array(root, "/g")?;
        let states = match root.pointer("/states") {
            None => (0..q.len()).map(|i| i.to_string()).collect(),
            Some(v) => {
                let arr = v.as_array().ok_or_else(|| schema("/states", "expected an array of strings"))?;
                arr.iter()
                    .enumerate()
                    .map(|(k, s)| {
                        s.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| schema(&format!("/states/{k}"), "expected a string"))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let raw = RawModel { states, q, g, c };
        let model = validate_model(raw.clone())?;
        (ModelSource::Generator(raw), model)
    };

    let utility = parse_utility(root, "/utility")?.ok_or_else(|| schema("/utility", "missing"))?;
    let t0 = opt_f64(root, "/t0")?.unwrap_or(0.0);
    let problem = StoppingProblem::with_offset(model.clone(), utility, t0)?;

    let grid = match (opt_f64(root, "/grid/t_max")?, opt_f64(root, "/grid/dt")?) {
        (None, None) => default_grid(&problem),
        (t_max, dt) => {
            let t_max = t_max.unwrap_or_else(|| default_grid(&problem).t_max());
            let dt = dt.unwrap_or(t_max / 2000.0);
            TimeGrid::new(t_max, dt).map_err(|e| schema("/grid", e.to_string()))?
        }
    };

    let defaults = SolverOptions::default();
    let solver = SolverOptions {
        refine: opt_bool(root, "/solver/refine")?.unwrap_or(defaults.refine),
        tol: positive(root, "/solver/tol")?.unwrap_or(defaults.tol),
        max_iter: opt_u64(root, "/solver/max_iter")?.map_or(defaults.max_iter, |v| v as usize),
    };
    let horizon = opt_u64(root, "/solver/horizon")?.map(|v| v as usize);

    let exp_defaults = ExpOptions::default();
    let exp = ExpOptions {
        tol: positive(root, "/exp/tol")?.unwrap_or(exp_defaults.tol),
        max_iter: opt_u64(root, "/exp/max_iter")?.map_or(exp_defaults.max_iter, |v| v as usize),
    };

    let ola_t = opt_f64(root, "/ola/t")?.unwrap_or(0.0);
    let ola_dtheta = positive(root, "/ola/dtheta")?.unwrap_or(1e-3);

    let simulation = simulation(root, &model, overrides)?;

    let compare = match root.pointer("/compare") {
        None => None,
        Some(_) => {
            let utility_w = parse_utility(root, "/compare/utility_w")?
                .ok_or_else(|| schema("/compare/utility_w", "missing"))?;
            let lo = req_f64(root, "/compare/x_range/lo")?;
            let hi = req_f64(root, "/compare/x_range/hi")?;
            let step = positive(root, "/compare/x_range/step")?.unwrap_or(1e-2);
            let x_range = XRange::new(lo, hi, step).map_err(|e| schema("/compare/x_range", e.to_string()))?;
            Some(CompareConfig { utility_w, x_range })
        }
    };

    let threads = match overrides.threads {
        Some(t) => t,
        None => opt_u64(root, "/threads")?.map_or_else(
            || std::thread::available_parallelism().map_or(1, |n| n.get()),
            |v| v as usize,
        ),
    };
    if threads == 0 {
        return Err(schema("/threads", "must be at least 1"));
    }

    Ok(Config {
        source,
        model,
        utility,
        t0,
        grid,
        solver,
        horizon,
        exp,
        ola_t,
        ola_dtheta,
        simulation,
        compare,
        threads,
    })
}

fn simulation(root: &Value, model: &CtmcModel, overrides: Overrides) -> Result<SimulationConfig, ConfigError> {
    let i0 = match root.pointer("/simulation/i0") {
        None => 0,
        Some(Value::String(name)) => model
            .states()
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| schema("/simulation/i0", format!("unknown state {name:?}")))?,
        Some(v) => {
            let i = v.as_u64().ok_or_else(|| schema("/simulation/i0", "expected a state index or name"))? as usize;
            if i >= model.len() {
                return Err(schema("/simulation/i0", format!("state index {i} out of range")));
            }
            i
        }
    };
    let defaults = McOptions::default();
    let n_paths = opt_u64(root, "/simulation/n_paths")?.map_or(defaults.n_paths, |v| v as usize);
    if n_paths < 2 {
        return Err(schema("/simulation/n_paths", "must be at least 2"));
    }
    let seed = match overrides.seed {
        Some(s) => s,
        None => opt_u64(root, "/simulation/seed")?.unwrap_or(defaults.seed),
    };
    let max_jumps = opt_u64(root, "/simulation/max_jumps")?.map_or(defaults.max_jumps, |v| v as usize);
    let n_list = match root.pointer("/simulation/n_list") {
        None => vec![1, 2, 4, 8, 16, 32],
        Some(v) => {
            let arr = v.as_array().ok_or_else(|| schema("/simulation/n_list", "expected an array"))?;
            let list = arr
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    x.as_u64()
                        .map(|n| n as usize)
                        .ok_or_else(|| schema(&format!("/simulation/n_list/{k}"), "expected a nonnegative integer"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if list.is_empty() || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(schema("/simulation/n_list", "must be nonempty and strictly increasing"));
            }
            list
        }
    };
    let policy = match opt_str(root, "/simulation/policy")? {
        None | Some("optimal") => Policy::Optimal,
        Some("immediate") => Policy::Immediate,
        Some(other) => return Err(schema("/simulation/policy", format!("unknown policy {other:?}"))),
    };
    let sampler = match opt_str(root, "/simulation/sampler")? {
        None | Some("direct") => Sampler::Direct,
        Some("uniformized") => Sampler::uniformized(model),
        Some(other) => return Err(schema("/simulation/sampler", format!("unknown sampler {other:?}"))),
    };
    Ok(SimulationConfig {
        i0,
        mc: McOptions {
            n_paths,
            seed,
            max_jumps,
            sampler,
        },
        n_list,
        policy,
    })
}

fn parse_utility(root: &Value, ptr: &str) -> Result<Option<UtilitySpec>, ConfigError> {
    if root.pointer(ptr).is_none() {
        return Ok(None);
    }
    let family_ptr = format!("{ptr}/family");
    let family = opt_str(root, &family_ptr)?.ok_or_else(|| schema(&family_ptr, "missing"))?;
    let d = || opt_f64(root, &format!("{ptr}/d")).map(|d| d.unwrap_or(0.0));
    let bad = |e: UtilityError| schema(ptr, e.to_string());
    let spec = match family {
        "exponential" => UtilitySpec::exponential(req_f64(root, &format!("{ptr}/gamma"))?).map_err(bad)?,
        "log" => UtilitySpec::logarithmic(d()?).map_err(bad)?,
        "power" => UtilitySpec::power(req_f64(root, &format!("{ptr}/p"))?, d()?).map_err(bad)?,
        "linear" => UtilitySpec::linear(),
        other => return Err(schema(&family_ptr, format!("unknown family {other:?}"))),
    };
    Ok(Some(spec))
}

fn req_f64(root: &Value, ptr: &str) -> Result<f64, ConfigError> {
    opt_f64(root, ptr)?.ok_or_else(|| schema(ptr, "missing"))
}

fn opt_f64(root: &Value, ptr: &str) -> Result<Option<f64>, ConfigError> {
    match root.pointer(ptr).filter(|v| !v.is_null()) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| schema(ptr, "expected a number")),
    }
}

fn positive(root: &Value, ptr: &str) -> Result<Option<f64>, ConfigError> {
    match opt_f64(root, ptr)? {
        Some(x) if !(x > 0.0) => Err(schema(ptr, "must be positive")),
        other => Ok(other),
    }
}

fn opt_u64(root: &Value, ptr: &str) -> Result<Option<u64>, ConfigError> {
    match root.pointer(ptr).filter(|v| !v.is_null()) {
        None => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| schema(ptr, "expected a nonnegative integer")),
    }
}

fn opt_bool(root: &Value, ptr: &str) -> Result<Option<bool>, ConfigError> {
    match root.pointer(ptr).filter(|v| !v.is_null()) {
        None => Ok(None),
        Some(v) => v.as_bool().map(Some).ok_or_else(|| schema(ptr, "expected a boolean")),
    }
}

fn opt_str<'a>(root: &'a Value, ptr: &str) -> Result<Option<&'a str>, ConfigError> {
    match root.pointer(ptr).filter(|v| !v.is_null()) {
        None => Ok(None),
        Some(v) => v.as_str().map(Some).ok_or_else(|| schema(ptr, "expected a string")),
    }
}

fn f64_array(root: &Value, ptr: &str) -> Result<Vec<f64>, ConfigError> {
    let arr = root
        .pointer(ptr)
        .ok_or_else(|| schema(ptr, "missing"))?
        .as_array()
        .ok_or_else(|| schema(ptr, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(k, v)| v.as_f64().ok_or_else(|| schema(&format!("{ptr}/{k}"), "expected a number")))
        .collect()
}

fn matrix(root: &Value, ptr: &str) -> Result<Vec<Vec<f64>>, ConfigError> {
    let rows = root
        .pointer(ptr)
        .ok_or_else(|| schema(ptr, "missing"))?
        .as_array()
        .ok_or_else(|| schema(ptr, "expected an array of rows"))?;
    (0..rows.len()).map(|i| f64_array(root, &format!("{ptr}/{i}"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> Value {
        json!({
            "schema": 1,
            "states": ["low", "high"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "g": [10.0, ((10.0_f64).exp() + 99.0) / 10.0],
            "c": 1.0,
            "utility": {"family": "log"},
            "grid": {"t_max": 10.0, "dt": 0.005},
        })
    }

    #[test]
    fn worked_example_model_parses() {
        let cfg = parse_config(&paper(), Overrides::default()).unwrap();
        assert_eq!(cfg.model.rewards()[0], 10.0);
        assert_eq!(cfg.grid.steps(), 2000);
        assert_eq!(cfg.utility, UtilitySpec::logarithmic(0.0).unwrap());
        assert_eq!(cfg.simulation.mc.n_paths, 100_000);
    }

    #[test]
    fn missing_cost_points_at_c() {
        let mut v = paper();
        v.as_object_mut().unwrap().remove("c");
        match parse_config(&v, Overrides::default()).unwrap_err() {
            ConfigError::Schema { pointer, .. } => assert_eq!(pointer, "/c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn row_sum_defect_is_a_validation_error() {
        let mut v = paper();
        v["Q"][0][0] = json!(-0.5);
        match parse_config(&v, Overrides::default()).unwrap_err() {
            ConfigError::Model(e) => assert_eq!(e.violations()[0].code(), "ROW_SUM_NONZERO"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_matrix_entry_has_full_pointer() {
        let mut v = paper();
        v["Q"][1][0] = json!("x");
        match parse_config(&v, Overrides::default()).unwrap_err() {
            ConfigError::Schema { pointer, .. } => assert_eq!(pointer, "/Q/1/0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win() {
        let cfg = parse_config(
            &paper(),
            Overrides {
                seed: Some(42),
                threads: Some(3),
            },
        )
        .unwrap();
        assert_eq!(cfg.simulation.mc.seed, 42);
        assert_eq!(cfg.threads, 3);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse_config(&paper(), Overrides { seed: Some(5), threads: Some(2) }).unwrap();
        let again = parse_config(&cfg.echo(), Overrides::default()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn house_config() {
        let v = json!({"alpha": [1, 1, 1, 1, 1], "c": 0.2, "utility": {"family": "log"}});
        let cfg = parse_config(&v, Overrides::default()).unwrap();
        assert_eq!(cfg.house_alpha(), Some(&[1.0; 5][..]));
        assert_eq!(cfg.grid.t_max(), 25.0);
        assert_eq!(cfg.model.states()[4], "5");
    }
}
