use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small synthetic problem
mode = meta
total_iterations = 6
batch_size = 8
block_widths = 8,6
metric_interval = 3
synth_meta_categories = 2
synth_subclasses_per_meta = 2
synth_input_dim = 8
synth_train_per_class = 10
synth_test_per_class = 5
";

fn metaisda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaisda"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.cfg");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn zero_iterations_write_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace("total_iterations = 6", "total_iterations = 0"),
    );
    let out = dir.path().join("res");
    let o = metaisda(&["run", &cfg, "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics_seed0.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "iteration,train_loss,meta_loss,test_acc,mean_cov,meta_grad_norm_sq,running_min_grad,scatter_ratio"
    );
    assert!(lines[1].starts_with("0,"));
    assert!(out.join("summary.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = metaisda(&["run", &cfg, "--out", &s(out), "--seeds", "0,4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "metrics_seed0.csv",
        "metrics_seed4.csv",
        "summary.json",
        "classifier_seed4.params",
        "covnet_seed4.params",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.join("metrics_seed0.csv")).unwrap();
    let its: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(its, ["0", "3", "6"]);
}

#[test]
fn config_errors_exit_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = meta\nlambda0 = lots\n");
    let o = metaisda(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    assert_eq!(metaisda(&["run", &cfg]).status.code(), Some(2));

    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        metaisda(&["run", &cfg, "--mode", "sideways"]).status.code(),
        Some(2)
    );
    let o = metaisda(&["sweep", &cfg, "no_such_param", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{TINY}lr_f = 1e300\nmode = ce_baseline\n"),
    );
    let o = metaisda(&["run", &cfg, "--out", &s(&dir.path().join("r"))]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn sweep_writes_one_directory_and_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sw");
    let o = metaisda(&["sweep", &cfg, "lambda0", "0,1.5,3", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["0", "1.5", "3"] {
        assert!(out
            .join(format!("lambda0_{v}"))
            .join("metrics_seed0.csv")
            .exists());
    }
    let table = fs::read_to_string(out.join("sweep_lambda0.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "value,mean_test_acc,stddev_test_acc,wall_clock_secs"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("\"1.5\","));
}

#[test]
fn compare_writes_three_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("cmp");
    let o = metaisda(&["compare", &cfg, "--out", &s(&out), "--seeds", "1,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "# seeds: 1,2");
    assert_eq!(lines[1], "method,seed_1,seed_2,mean,stddev");
    let methods: Vec<&str> = lines[2..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(methods, ["ce_baseline", "classwise_isda", "meta"]);
    for m in methods {
        assert!(out.join(m).join("metrics_seed2.csv").exists());
    }
}

#[test]
fn idx_dataset_round_trip_through_cli() {
    use metaisda::datakit::{gen_synthetic, write_idx, SynthConfig};
    use metaisda::numkit::RngState;
    let dir = tempfile::tempdir().unwrap();
    let sc = SynthConfig {
        meta_categories: 1,
        subclasses_per_meta: 3,
        input_dim: 4,
        train_per_class: 6,
        test_per_class: 4,
        ..SynthConfig::default()
    };
    let (mut train, mut test) = gen_synthetic(&sc, &mut RngState::new(0)).unwrap();
    for ds in [&mut train, &mut test] {
        ds.inputs
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (0.5 + 0.1 * *v).clamp(0.0, 1.0));
    }
    let d = dir.path();
    write_idx(&train, 2, 2, &d.join("tr-img"), &d.join("tr-lbl")).unwrap();
    write_idx(&test, 2, 2, &d.join("te-img"), &d.join("te-lbl")).unwrap();
    let cfg = write_config(
        d,
        "dataset = idx\nidx_train_images = tr-img\nidx_train_labels = tr-lbl\n\
         idx_test_images = te-img\nidx_test_labels = te-lbl\n\
         total_iterations = 4\nbatch_size = 6\nblock_widths = 5\n",
    );
    let o = metaisda(&["run", &cfg, "--out", &s(&d.join("idx-out"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("idx-out").join("metrics_seed0.csv").exists());
}
