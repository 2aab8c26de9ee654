use serde::Serialize;
use serde_json::{Map, Value};

use super::model::Method;
use super::run::Hyper;
use super::task::{DeltaKind, TaskSpec};
use crate::error::{DotaError, Result};
use crate::mpo::MpoShape;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EVAL_BATCH_SIZE: usize = 256;
pub const DEFAULT_EVAL_EVERY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapesConfig {
    #[serde(rename = "in")]
    pub in_factors: Vec<usize>,
    #[serde(rename = "out")]
    pub out_factors: Vec<usize>,
}

/// Ablation experiment description, read from JSON.
///
/// Required: `dims`, `shapes`, `R`, `N`, `steps`, `lr`, `seeds`, `methods`,
/// `r_delta`, `delta_scale`. Optional: `batch_size`, `eval_batch_size`,
/// `eval_every`, `lora_rank` (defaults to `R`), `rank_sweep`, `delta_kind`
/// (`"aligned"` or `"random"`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dims: [usize; 2],
    pub shapes: ShapesConfig,
    #[serde(rename = "R")]
    pub rank: usize,
    #[serde(rename = "N")]
    pub num_cores: usize,
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub r_delta: usize,
    pub delta_scale: f64,
    pub delta_kind: DeltaKind,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub eval_every: usize,
    pub lora_rank: usize,
    pub rank_sweep: Vec<usize>,
}

const KNOWN: [&str; 16] = [
    "dims",
    "shapes",
    "R",
    "N",
    "steps",
    "lr",
    "seeds",
    "methods",
    "r_delta",
    "delta_scale",
    "delta_kind",
    "batch_size",
    "eval_batch_size",
    "eval_every",
    "lora_rank",
    "rank_sweep",
];

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    errors: Vec<String>,
}

impl Fields<'_> {
    fn get(&mut self, key: &str, required: bool) -> Option<Value> {
        let v = self.obj.get(key).cloned();
        if v.is_none() && required {
            self.errors.push(format!("{key}: missing"));
        }
        v
    }

    fn uint(&mut self, key: &str, required: bool, min: u64) -> Option<u64> {
        let v = self.get(key, required)?;
        match v.as_u64() {
            Some(n) if n >= min => Some(n),
            _ => {
                self.errors.push(format!("{key}: expected an integer >= {min}, got {v}"));
                None
            }
        }
    }

    fn float(&mut self, key: &str, positive: bool) -> Option<f64> {
        let v = self.get(key, true)?;
        match v.as_f64() {
            Some(x) if x.is_finite() && (x > 0.0 || (!positive && x >= 0.0)) => Some(x),
            _ => {
                let want = if positive { "> 0" } else { ">= 0" };
                self.errors.push(format!("{key}: expected a finite number {want}, got {v}"));
                None
            }
        }
    }

    fn uint_list(&mut self, key: &str, required: bool, min: u64) -> Option<Vec<u64>> {
        let v = self.get(key, required)?;
        let parsed = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| x.as_u64().filter(|&n| n >= min))
                .collect::<Option<Vec<u64>>>()
        });
        if parsed.is_none() {
            self.errors
                .push(format!("{key}: expected a list of integers >= {min}, got {v}"));
        }
        parsed
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. All problems are reported at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| DotaError::Config(vec!["config must be a JSON object".into()]))?;
        let mut f = Fields {
            obj,
            errors: Vec::new(),
        };
        for key in obj.keys() {
            if !KNOWN.contains(&key.as_str()) {
                f.errors.push(format!("{key}: unknown field"));
            }
        }

        let dims = f.uint_list("dims", true, 1).and_then(|d| match d.as_slice() {
            &[r, c] => Some([r as usize, c as usize]),
            _ => None,
        });
        if f.obj.contains_key("dims") && dims.is_none() && !f.errors.iter().any(|e| e.starts_with("dims")) {
            f.errors.push("dims: expected exactly two entries [rows, cols]".into());
        }

        let shapes = match f.get("shapes", true) {
            Some(Value::Object(s)) => {
                let mut sub = Fields {
                    obj: &s,
                    errors: Vec::new(),
                };
                let i = sub.uint_list("in", true, 1);
                let o = sub.uint_list("out", true, 1);
                f.errors
                    .extend(sub.errors.into_iter().map(|e| format!("shapes.{e}")));
                i.zip(o).map(|(i, o)| ShapesConfig {
                    in_factors: i.into_iter().map(|v| v as usize).collect(),
                    out_factors: o.into_iter().map(|v| v as usize).collect(),
                })
            }
            Some(v) => {
                f.errors
                    .push(format!("shapes: expected {{\"in\": [...], \"out\": [...]}}, got {v}"));
                None
            }
            None => None,
        };

        let rank = f.uint("R", true, 1);
        let num_cores = f.uint("N", true, 1);
        let steps = f.uint("steps", true, 0);
        let lr = f.float("lr", true);
        let seeds = f.uint_list("seeds", true, 0);
        if matches!(&seeds, Some(s) if s.is_empty()) {
            f.errors.push("seeds: at least one seed is required".into());
        }
        let methods = match f.get("methods", true) {
            Some(v) => {
                let parsed: Option<Vec<Method>> = v.as_array().map(|a| {
                    a.iter()
                        .filter_map(|m| match m.as_str().map(str::parse::<Method>) {
                            Some(Ok(m)) => Some(m),
                            _ => {
                                f.errors.push(format!(
                                    "methods: unknown method {m} (expected dota, dota-random, lora or full-ft)"
                                ));
                                None
                            }
                        })
                        .collect()
                });
                match parsed {
                    Some(m) if m.is_empty() => {
                        f.errors.push("methods: at least one method is required".into());
                        None
                    }
                    Some(m) => Some(m),
                    None => {
                        f.errors.push(format!("methods: expected a list of strings, got {v}"));
                        None
                    }
                }
            }
            None => None,
        };
        let r_delta = f.uint("r_delta", true, 1);
        let delta_scale = f.float("delta_scale", false);
        let batch_size = f.uint("batch_size", false, 1).unwrap_or(DEFAULT_BATCH_SIZE as u64);
        let eval_batch_size = f
            .uint("eval_batch_size", false, 1)
            .unwrap_or(DEFAULT_EVAL_BATCH_SIZE as u64);
        let eval_every = f.uint("eval_every", false, 1).unwrap_or(DEFAULT_EVAL_EVERY as u64);
        let lora_rank = f.uint("lora_rank", false, 1);
        let rank_sweep = f.uint_list("rank_sweep", false, 1).unwrap_or_default();
        let delta_kind = match f.get("delta_kind", false) {
            None => DeltaKind::default(),
            Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|_| {
                f.errors
                    .push(format!("delta_kind: expected \"aligned\" or \"random\", got {v}"));
                DeltaKind::default()
            }),
        };

        // cross-field checks
        if let Some(s) = &shapes {
            if s.in_factors.len() != s.out_factors.len() {
                f.errors.push("shapes: in and out must have the same length".into());
            }
            if let Some(n) = num_cores {
                if s.in_factors.len() as u64 != n {
                    f.errors.push(format!(
                        "N: {n} does not match the {} factors in shapes",
                        s.in_factors.len()
                    ));
                }
            }
            if let Some([r, c]) = dims {
                let (pi, po) = (
                    s.in_factors.iter().product::<usize>(),
                    s.out_factors.iter().product::<usize>(),
                );
                if pi != r || po != c {
                    f.errors.push(format!(
                        "shapes: factors multiply to {pi}x{po} but dims are {r}x{c}"
                    ));
                }
            }
        }

        if !f.errors.is_empty() {
            return Err(DotaError::Config(f.errors));
        }
        let rank = rank.unwrap() as usize;
        Ok(Self {
            dims: dims.unwrap(),
            shapes: shapes.unwrap(),
            rank,
            num_cores: num_cores.unwrap() as usize,
            steps: steps.unwrap() as usize,
            lr: lr.unwrap(),
            seeds: seeds.unwrap(),
            methods: methods.unwrap(),
            r_delta: r_delta.unwrap() as usize,
            delta_scale: delta_scale.unwrap(),
            delta_kind,
            batch_size: batch_size as usize,
            eval_batch_size: eval_batch_size as usize,
            eval_every: eval_every as usize,
            lora_rank: lora_rank.map_or(rank, |r| r as usize),
            rank_sweep: rank_sweep.into_iter().map(|r| r as usize).collect(),
        })
    }

    pub fn mpo_shape(&self) -> Result<MpoShape> {
        MpoShape::new(self.shapes.in_factors.clone(), self.shapes.out_factors.clone())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        Ok(TaskSpec {
            shape: self.mpo_shape()?,
            r_delta: self.r_delta,
            delta_scale: self.delta_scale,
            delta_kind: self.delta_kind,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
        })
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            steps: self.steps,
            lr: self.lr,
            eval_every: self.eval_every,
            rank: self.rank,
            lora_rank: self.lora_rank,
        }
    }
}
