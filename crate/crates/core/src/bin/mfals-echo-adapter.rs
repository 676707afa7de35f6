//! Reference adapter speaking the line-delimited JSON protocol. Evaluates one
//! of the analytic benchmarks named on the command line.

use std::io::{self, BufRead, Write};

use mfals::models::{borehole, four_branch, rastrigin_limit, BOREHOLE_INPUTS};
use serde_json::{json, Map, Value};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "four_branch".into());
    let inputs: Vec<String> = match name.as_str() {
        "four_branch" | "rastrigin" => vec!["x1".into(), "x2".into()],
        "borehole" => BOREHOLE_INPUTS.iter().map(|s| s.to_string()).collect(),
        other => {
            eprintln!("unknown function {other:?}");
            std::process::exit(2);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{}", json!({"ready": true, "inputs": inputs})).unwrap();
    out.flush().unwrap();
    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let request: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("bad request: {e}");
                std::process::exit(3);
            }
        };
        let id = request.get("id").cloned().unwrap_or(Value::Null);
        let empty = Map::new();
        let params = request.get("params").and_then(Value::as_object).unwrap_or(&empty);
        let values: Option<Vec<f64>> = inputs.iter().map(|n| params.get(n).and_then(Value::as_f64)).collect();
        let reply = match values {
            None => json!({"id": id, "error": format!("missing inputs; expected {inputs:?}")}),
            Some(x) => {
                let result = match name.as_str() {
                    "four_branch" => Ok(four_branch(&x)),
                    "rastrigin" => Ok(rastrigin_limit(&x)),
                    _ => borehole(&x).map_err(|e| e.to_string()),
                };
                match result {
                    Ok(v) => json!({"id": id, "value": v}),
                    Err(msg) => json!({"id": id, "error": msg}),
                }
            }
        };
        writeln!(out, "{reply}").unwrap();
        out.flush().unwrap();
    }
}
