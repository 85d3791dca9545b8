use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn trimlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "trimlab-cli-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn run_then_report_produces_the_record_files() {
    let dir = tempdir("run");
    let out = dir.join("runs");
    let config = dir.join("exp.toml");
    fs::write(
        &config,
        format!(
            "tasks = [\"audio-class\"]\n\
             strategies = [\"trim\"]\n\
             criteria = [\"magnitude\"]\n\
             iterations = 1\n\
             repetitions = 1\n\
             dataset_size = 48\n\
             out_dir = \"{}\"\n\
             [train]\n\
             epochs = 2\n\
             batch_size = 8\n",
            out.display()
        ),
    )
    .unwrap();

    let run = trimlab(&["run", "--config", config.to_str().unwrap()]);
    assert!(run.status.success(), "stderr: {}", text(&run.stderr));
    assert!(text(&run.stdout).contains("completed 1 runs"), "{}", text(&run.stdout));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("task,strategy,criterion,scope,seed,iteration,"));
    assert_eq!(curves.lines().count(), 1 + 2, "header + iterations 0 and 1");

    // Reports can be rebuilt after deleting the derived files.
    fs::remove_file(out.join("table.csv")).unwrap();
    fs::remove_file(out.join("summary.txt")).unwrap();
    let report = trimlab(&["report", "--out", out.to_str().unwrap()]);
    assert!(report.status.success(), "stderr: {}", text(&report.stderr));
    assert!(out.join("table.csv").is_file());
    assert!(out.join("summary.txt").is_file());

    // The final model of the completed run is inspectable.
    let model = fs::read_dir(out.join("records"))
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.extension().is_some_and(|x| x == "model"))
        .expect("run saved a checkpoint");
    let inspect = trimlab(&["inspect", model.to_str().unwrap()]);
    assert!(inspect.status.success(), "stderr: {}", text(&inspect.stderr));
    let shown = text(&inspect.stdout);
    for field in ["parameters", "disk bytes", "flops", "memory bytes"] {
        assert!(shown.contains(field), "missing {field} in: {shown}");
    }

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_runs_the_oracle_suite() {
    let out = trimlab(&["verify", "--rounds", "1", "--seed", "11"]);
    assert!(out.status.success(), "stderr: {}", text(&out.stderr));
    let shown = text(&out.stdout);
    assert!(shown.contains("gradients:"), "{shown}");
    assert!(shown.contains("trim vs zero-mask"), "{shown}");
    assert!(shown.contains("all checks passed"), "{shown}");
}

#[test]
fn bad_selections_fail_before_any_work_happens() {
    let bogus_task = trimlab(&["run", "--task", "speech-8k"]);
    assert!(!bogus_task.status.success());
    assert!(text(&bogus_task.stderr).contains("speech-8k"));

    let bogus_pair = trimlab(&["run", "--strategy", "mask", "--criterion", "batchnorm"]);
    assert!(!bogus_pair.status.success());

    let bogus_verb = trimlab(&["trim-everything"]);
    assert!(!bogus_verb.status.success());

    let missing_config = trimlab(&["run", "--config", "/nonexistent/exp.toml"]);
    assert!(!missing_config.status.success());
    assert!(text(&missing_config.stderr).contains("exp.toml"));
}

#[test]
fn inspect_rejects_garbage_files() {
    let dir = tempdir("garbage");
    let path = dir.join("not-a-model.bin");
    fs::write(&path, b"certainly not a checkpoint").unwrap();
    let out = trimlab(&["inspect", path.to_str().unwrap()]);
    assert!(!out.status.success());
    fs::remove_dir_all(&dir).unwrap();
}
