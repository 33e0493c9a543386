use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 3

[data]
n_slides = 4
patches_per_slide = 16
train_per_slide = 8

[pretrain]
steps = 4
batch = 8
per_slide = 2

[finetune]
steps = 4
batch = 8
";

fn sassl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sassl"))
        .args(args)
        .env_remove("SASSL_OUT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(sassl(&["train"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").display().to_string();

    let cfg = write_config(dir.path(), "a.toml", "[pretrain]\nbatchsize = 4\n");
    let o = sassl(&["synth", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "b.toml", "[pretrain]\nbatch = 0\n");
    let o = sassl(&["synth", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pretrain.batch"), "{}", stderr(&o));

    let missing = dir.path().join("nope.toml").display().to_string();
    let o = sassl(&["synth", "--config", &missing, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = sassl(&["synth", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_index_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("absent.csv");
    let text = SMALL.replacen(
        "[data]\n",
        &format!("[data]\nindex = \"{}\"\n", index.display()),
        1,
    );
    let cfg = write_config(dir.path(), "d.toml", &text);
    let out = dir.path().join("run").display().to_string();
    let o = sassl(&["pretrain", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.toml", SMALL);
    let out = dir.path().join("run");
    let o = sassl(&[
        "synth",
        "--config",
        &cfg,
        "--seed",
        "9",
        "--out",
        &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 9"), "{saved}");
    assert!(out.join("data/index.csv").exists());
}

#[test]
fn report_names_the_run_without_a_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f.toml", SMALL);
    let runs: Vec<String> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let d = dir.path().join(r);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("config.toml"), SMALL).unwrap();
            d.display().to_string()
        })
        .collect();
    let out = dir.path().join("report").display().to_string();
    let o = sassl(&[
        "report", "--config", &cfg, "--out", &out, &runs[0], &runs[1],
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("r1"), "{}", stderr(&o));
}

#[test]
fn report_compares_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for sassl_on in [false, true] {
        let name = format!("run_{sassl_on}");
        let text = SMALL.replace("[pretrain]\n", &format!("[pretrain]\nsassl = {sassl_on}\n"));
        let cfg = write_config(dir.path(), &format!("{name}.toml"), &text);
        let out = dir.path().join(&name).display().to_string();
        for cmd in ["pretrain", "probe"] {
            let o = sassl(&[cmd, "--config", &cfg, "--out", &out]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        runs.push(out);
    }
    let cfg = write_config(dir.path(), "report.toml", SMALL);
    let out = dir.path().join("report");
    let o = sassl(&[
        "report",
        "--config",
        &cfg,
        "--out",
        &out.display().to_string(),
        &runs[0],
        &runs[1],
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(out.join("report.md").exists());
}
