//! CLI round trip: gen-synth -> train -> eval -> export-prompts, driving the
//! built binary directly.

use std::path::Path;
use std::process::Command;

fn semiseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semiseg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn semiseg");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_dataset_spec(path: &Path) {
    let spec = serde_json::json!({
        "n_cases": 6,
        "shape": [16, 16, 16],
        "radii_range": [3.0, 5.0],
        "center_jitter": 1.5,
        "contrast": 1.0,
        "noise_sigma": 0.3,
        "master_seed": 9,
        "m_labeled": 1,
        "n_test": 2,
        "split_seed": 4
    });
    std::fs::write(path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("dataset.json");
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");
    write_dataset_spec(&spec_path);

    let out = run_ok(semiseg()
        .arg("gen-synth")
        .arg("--spec")
        .arg(&spec_path)
        .arg("--out")
        .arg(&data_dir));
    assert!(out.contains("wrote 6 cases"), "{out}");
    assert!(data_dir.join("manifest.json").exists());
    assert!(data_dir.join("case000_img.nii.gz").exists());
    assert!(data_dir.join("case000_mask.nii.gz").exists());

    let config = format!(
        r#"
[dataset]
data_dir = "{}"
m_labeled = 1
n_test = 2
split_seed = 4

[framework]
base = "mt"
oracle_mode = "semisam"

[backbone]
base_width = 4
depth = 2

[training]
t_max = 8
patch = [16, 16, 16]
batch_labeled = 1
batch_unlabeled = 1
eval_every = 8
seed = 3
student_dropout = false

[oracle]
backend = "synthetic"

[output]
dir = "{}"
"#,
        data_dir.display(),
        run_dir.display()
    );
    let config_path = dir.path().join("exp.toml");
    std::fs::write(&config_path, config).unwrap();

    let out = run_ok(semiseg().arg("train").arg("--config").arg(&config_path));
    assert!(out.contains("finished 8 iterations"), "{out}");
    let ckpt = run_dir.join("checkpoint_final.json");
    assert!(ckpt.exists());
    assert!(run_dir.join("train_log.csv").exists());
    assert!(run_dir.join("eval_t8.csv").exists());

    let eval_dir = dir.path().join("eval");
    let out = run_ok(semiseg()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data_dir)
        .arg("--out")
        .arg(&eval_dir));
    assert!(out.contains("case_id,dice_pct"), "{out}");
    assert!(eval_dir.join("eval.json").exists());

    let prompts_path = dir.path().join("prompts.json");
    run_ok(semiseg()
        .arg("export-prompts")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data_dir)
        .arg("--out")
        .arg(&prompts_path)
        .arg("--k-positive")
        .arg("2"));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&prompts_path).unwrap()).unwrap();
    assert_eq!(dump["version"], 1);
    assert_eq!(dump["cases"].as_array().unwrap().len(), 6);
}

#[test]
fn train_rejects_bad_config_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "[training]\nwarp_speed = 9\n").unwrap();
    let out = semiseg()
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warp_speed") || stderr.contains("unknown field"), "{stderr}");
}
