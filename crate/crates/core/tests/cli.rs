use std::path::Path;
use std::process::{Command, Output};

use metakernel::cost::flops_of_arch;
use metakernel::harness::cli::to_unit_range;
use metakernel::harness::config::{RunConfig, OUT_DIR_ENV};
use metakernel::harness::data::{generate_dataset, Split, SyntheticTaskConfig};
use metakernel::harness::export::{check_flops, read_arch, KernelDistribution};
use metakernel::harness::idx::load_idx;

fn metakernel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metakernel"))
        .args(args)
        .env_remove(OUT_DIR_ENV)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 3
[net]
height = 12
width = 12
num_classes = 3
stem_channels = 3
blocks = [{ out_channels = 3, stride = 1 }, { out_channels = 4, stride = 2 }]
[search.optim]
epochs = 2
batch_size = 16
[train]
epochs = 1
batch_size = 16
[data]
source = "synthetic"
height = 12
width = 12
num_classes = 3
scale_mode = "small_structure"
train_samples = 48
test_samples = 24
"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_2() {
    let o = metakernel(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no command"));

    let o = metakernel(&["search", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));

    assert_eq!(metakernel(&["search", "--bogus"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sead = 1\n").unwrap();
    let o = metakernel(&["search", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config error"));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = metakernel(&["export-arch", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selfcheck_passes() {
    let o = metakernel(&["selfcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS additivity"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn print_config_shows_effective_settings() {
    let o = metakernel(&["--print-config"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(RunConfig::from_toml(&stdout(&o)).unwrap(), RunConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = metakernel(&["--print-config", "search", "--config", &cfg, "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0));
    let printed = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(printed, RunConfig::from_toml(TINY).unwrap().with_seed(11));
}

#[test]
fn search_export_and_distribution_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = metakernel(&["search", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.toml", "checkpoint.json", "log.jsonl", "arch.json", "kernel_dist.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let cfg = RunConfig::from_toml(TINY).unwrap();
    let model = cfg.net.cost_model().unwrap();
    let arch = read_arch(&out.join("arch.json")).unwrap();
    assert_eq!(check_flops(&arch, &model).unwrap(), flops_of_arch(&arch.choices, &model).unwrap());

    let exported = out.join("exported.json");
    let ckpt = out.join("checkpoint.json");
    let o = metakernel(&["export-arch", "--checkpoint", ckpt.to_str().unwrap(), "--output", exported.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_arch(&exported).unwrap(), arch);

    let o = metakernel(&["kernel-dist", "--arch", exported.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), std::fs::read_to_string(out.join("kernel_dist.csv")).unwrap());
    let dist = KernelDistribution::from_csv(&stdout(&o)).unwrap();
    let widths: Vec<usize> = cfg.net.layout().iter().map(|l| l.dw_channels).collect();
    assert_eq!(dist.rows.iter().map(|r| r.iter().sum()).collect::<Vec<usize>>(), widths);

    // train the derived architecture, then evaluate the saved model
    let trained = dir.path().join("trained");
    let o = metakernel(&[
        "train",
        "--config",
        &cfg_path,
        "--arch",
        exported.to_str().unwrap(),
        "--out",
        trained.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
    let model_path = trained.join("model.json");
    let o = metakernel(&["eval", "--config", &cfg_path, "--model", model_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
}

#[test]
fn gen_data_writes_loadable_idx() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("data");
    let o = metakernel(&["gen-data", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let cfg = RunConfig::from_toml(TINY).unwrap();
    let metakernel::harness::config::DataConfig::Synthetic(syn) = &cfg.data else { unreachable!() };
    for (split, stem) in [(Split::Train, "train"), (Split::Test, "test")] {
        let loaded = load_idx(
            &out.join(format!("{stem}-images.idx")),
            &out.join(format!("{stem}-labels.idx")),
            3,
        )
        .unwrap();
        let direct = generate_dataset(syn, split).unwrap();
        assert_eq!(loaded.labels, direct.labels);
        assert_eq!(loaded.images.shape(), direct.images.shape());
        for (a, b) in loaded.images.data().iter().zip(direct.images.data()) {
            let want = to_unit_range(*b).clamp(0.0, 1.0);
            assert!((a - want).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn environment_overrides_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_metakernel"))
        .args(["gen-data", "--config", &cfg_path])
        .env(OUT_DIR_ENV, &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(target.join("train-images.idx").is_file());
}

#[test]
fn same_seed_same_search() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = metakernel(&["search", "--config", &cfg_path, "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (
            std::fs::read(out.join("log.jsonl")).unwrap(),
            std::fs::read(out.join("arch.json")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn synthetic_defaults_match_the_network() {
    let cfg = RunConfig::default();
    let metakernel::harness::config::DataConfig::Synthetic(syn) = &cfg.data else { unreachable!() };
    assert_eq!(syn, &SyntheticTaskConfig::default());
    assert_eq!((syn.height, syn.width, syn.num_classes), (cfg.net.height, cfg.net.width, cfg.net.num_classes));
}
