use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use impervia::checkpoint;
use impervia::config::Config;
use impervia::core::denoiser::Denoiser;
use impervia::igrd;
use impervia::manifest::RunManifest;

const TINY: &str = "synth_side=32
input_side=16
depth=1
base_channels=4
gn_groups=2
embed_dim=8
spade_hidden=2
train_steps=4
batch_size=2
ddim_steps=4
seeds=2
clusters=2
scales=1,2,4,8
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.cfg");
        fs::write(&cfg, TINY).unwrap();
        Self { _dir: dir, root, cfg }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_impervia"))
            .arg("--config")
            .arg(&self.cfg)
            .args(args)
            .current_dir(&self.root)
            .env_remove("IMPERVIA_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn synth(&self) -> String {
        let data = self.path("data").to_string_lossy().into_owned();
        self.ok(&["--seed", "2", "--out", &data, "synth"]);
        data
    }
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    let out = ws.run(&["sample", "--data", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["train", "--data", "x", "--depth", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config: "));
}

#[test]
fn runtime_errors_exit_with_one() {
    let ws = Workspace::new();
    let out = ws.run(&["likelihood", "--data", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    fs::write(&ws.cfg, "dept=3\n").unwrap();
    let out = ws.run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_output_directory_follows_command() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    assert!(ws.path("synth/run.manifest").is_file());
    assert!(ws.path("synth/lulc_2001.igrd").is_file());
}

#[test]
fn synth_grids_round_trip_bytes() {
    let ws = Workspace::new();
    ws.synth();
    for name in ["lulc_2011.igrd", "imperv_2019.igrd"] {
        let bytes = fs::read(ws.path("data").join(name)).unwrap();
        let grid = igrd::decode(&bytes).unwrap();
        assert_eq!(igrd::encode(&grid).unwrap(), bytes, "{name}");
    }
}

#[test]
fn manifest_records_and_verifies_outputs() {
    let ws = Workspace::new();
    let data = ws.synth();
    let out = s(&ws.path("lik"));
    ws.ok(&["--out", &out, "likelihood", "--data", &data]);
    let m = RunManifest::read(ws.path("lik/run.manifest")).unwrap();
    assert_eq!(m.command, "likelihood");
    assert!(!m.inputs.is_empty());
    assert!(!m.outputs.is_empty());
    m.verify(ws.path("lik")).unwrap();

    let (name, _) = m.outputs.iter().next().unwrap();
    let victim = ws.path("lik").join(name);
    let mut bytes = fs::read(&victim).unwrap();
    bytes.push(0);
    fs::write(&victim, bytes).unwrap();
    assert!(m.verify(ws.path("lik")).is_err());
}

#[test]
fn zero_training_steps_keep_initial_weights() {
    let ws = Workspace::new();
    let data = ws.synth();
    let out = s(&ws.path("train0"));
    ws.ok(&["--seed", "11", "--out", &out, "train", "--data", &data, "--steps", "0"]);
    let cfg = Config::load(Some(&ws.cfg), &[("seed".into(), "11".into())]).unwrap();
    let settings = cfg.settings().unwrap();
    let init = Denoiser::new(settings.model, 11).unwrap();
    let want = checkpoint::encode(&init, init.params()).unwrap();
    assert_eq!(fs::read(ws.path("train0/checkpoint.idnp")).unwrap(), want);
}

#[test]
fn sampling_twice_with_one_seed_is_identical() {
    let ws = Workspace::new();
    let data = ws.synth();
    let train = s(&ws.path("train"));
    ws.ok(&["--out", &train, "train", "--data", &data]);
    let ckpt = s(&ws.path("train/checkpoint.idnp"));
    for run in ["a", "b"] {
        let out = s(&ws.path(run));
        ws.ok(&["--seed", "7", "--out", &out, "sample", "--data", &data, "--checkpoint", &ckpt, "--target", "2019"]);
    }
    for k in 0..2 {
        let name = format!("forecast_2019_seed{k}.igrd");
        assert_eq!(fs::read(ws.path("a").join(&name)).unwrap(), fs::read(ws.path("b").join(&name)).unwrap());
    }
    let a = RunManifest::read(ws.path("a/run.manifest")).unwrap();
    let b = RunManifest::read(ws.path("b/run.manifest")).unwrap();
    assert!(a.same_run(&b));

    let other = s(&ws.path("c"));
    ws.ok(&["--seed", "8", "--out", &other, "sample", "--data", &data, "--checkpoint", &ckpt, "--target", "2019"]);
    assert_ne!(
        fs::read(ws.path("a/forecast_2019_seed0.igrd")).unwrap(),
        fs::read(ws.path("c/forecast_2019_seed0.igrd")).unwrap()
    );
}

#[test]
fn checkpoint_from_other_architecture_is_refused() {
    let ws = Workspace::new();
    let data = ws.synth();
    let train = s(&ws.path("train"));
    ws.ok(&["--out", &train, "train", "--data", &data, "--steps", "1"]);
    let ckpt = s(&ws.path("train/checkpoint.idnp"));
    let out = ws.run(&["sample", "--data", &data, "--checkpoint", &ckpt, "--target", "2019", "--base-channels", "6"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn evaluate_fixture_reports_null_resolution() {
    let ws = Workspace::new();
    let out = s(&ws.path("ev"));
    let stdout = ws.ok(&["--out", &out, "evaluate", "--fixture", "vegas"]);
    assert!(stdout.contains("null resolution: 0.19 km"), "{stdout}");
    let curves = fs::read_to_string(ws.path("ev/curves.csv")).unwrap();
    assert!(curves.starts_with("resolution_km,model_mae,null_mae"));
}

#[test]
fn end_to_end_pipeline_runs() {
    let ws = Workspace::new();
    let data = ws.synth();
    for (dir, args) in [
        ("cluster", vec!["cluster", "--data", data.as_str()]),
        ("ca", vec!["ca-forecast", "--data", data.as_str(), "--from", "2011", "--to", "2019"]),
    ] {
        let out = s(&ws.path(dir));
        let mut full = vec!["--out", out.as_str()];
        full.extend(args);
        ws.ok(&full);
    }
    let weights = s(&ws.path("cluster/weights.csv"));
    let train = s(&ws.path("train"));
    ws.ok(&["--out", &train, "train", "--data", &data, "--weights", &weights]);
    let sample = s(&ws.path("sample"));
    let ckpt = s(&ws.path("train/checkpoint.idnp"));
    ws.ok(&["--out", &sample, "sample", "--data", &data, "--checkpoint", &ckpt, "--target", "2019"]);
    let ev = s(&ws.path("ev"));
    let mean = s(&ws.path("sample/forecast_2019_mean.igrd"));
    let truth = s(&ws.path("data/imperv_2019.igrd"));
    let past = s(&ws.path("data/imperv_2008.igrd"));
    let stdout = ws.ok(&["--out", &ev, "evaluate", "--forecast", &mean, "--truth", &truth, "--past", &past]);
    assert!(stdout.contains("null resolution"), "{stdout}");
    let plot = s(&ws.path("plot"));
    let curves = s(&ws.path("ev/curves.csv"));
    ws.ok(&["--out", &plot, "plot", "--curves", &curves]);
    assert!(fs::read_to_string(ws.path("plot/mae.svg")).unwrap().starts_with("<svg"));
}
