#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moeforge"));
    c.env_remove("MOEFORGE_SEED");
    c
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn read_json(path: impl AsRef<Path>) -> Value {
    let text = std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()));
    serde_json::from_str(&text).unwrap()
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"))
}

/// Schema violations of `instance`, empty when valid.
pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let schema = read_json(schema_path(name));
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    v.iter_errors(instance).map(|e| format!("{}: {e}", e.instance_path())).collect()
}

/// Report bytes with the wall-clock field removed.
pub fn without_wall_clock(path: impl AsRef<Path>) -> String {
    let mut v = read_json(path);
    v.as_object_mut().expect("report object").remove("wall_clock_seconds");
    serde_json::to_string(&v).unwrap()
}
