//! Drive the experiment runner from a JSON config, as the `jumpmix` binary
//! does, and list what it wrote.

use jumpmix::cli::{execute, Command, ExperimentConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("jumpmix-cli-example-{}", std::process::id()));
    let json = String::from(
        r#"{
            "system": { "kind": "preset", "name": "cubic" },
            "seed": 42,
            "replicas": 200,
            "horizon": 6.0,
            "grid_points": 13,
            "output": "unused"
        }"#,
    );
    let cfg: ExperimentConfig = serde_json::from_str(&json)?;

    for cmd in [Command::Couple, Command::Mixing, Command::Check] {
        let mut c = cfg.clone();
        c.output = dir.join(cmd.name());
        let out = execute(cmd, c)?;
        let mut files: Vec<String> = std::fs::read_dir(&out)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()?;
        files.sort();
        println!("{}: {}", cmd.name(), files.join(", "));
    }
    let report = std::fs::read_to_string(dir.join("mixing").join("mixing_report.json"))?;
    let v: serde_json::Value = serde_json::from_str(&report)?;
    println!(
        "tail rate {}, TV rate {}, coupling inequality holds: {}",
        v["report"]["rate"], v["tv_fit"]["rate"], v["coupling_inequality_holds"]
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
