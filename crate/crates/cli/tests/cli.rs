use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atrium(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrium"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

const SMALL_DATA: [&str; 8] = [
    "--set",
    "dataset.train_cases=2",
    "--set",
    "dataset.test_cases=1",
    "--set",
    "dataset.phantom.dims=[32,32,32]",
    "--set",
    "unet.levels=2",
];

const SMALL_NET: [&str; 8] = [
    "--set",
    "unet.base_channels=4",
    "--set",
    "unet.crop=[16,16,16]",
    "--set",
    "train.iterations=4",
    "--set",
    "rrs.iterations=2",
];

#[test]
fn gen_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let mut args = vec!["gen", "--seed", "7", "--out", d.to_str().unwrap()];
        args.extend(SMALL_DATA);
        ok(atrium(&args));
    }
    let fa = sorted_files(&a);
    assert!(fa.iter().any(|(n, _)| n == "manifest.json"));
    assert!(fa.iter().any(|(n, _)| n == "resolved_config.json"));
    assert_eq!(fa, sorted_files(&b));
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(atrium(&["gradcheck"]));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let worst: f64 = stdout
        .lines()
        .last()
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn unknown_override_fails_naming_the_key() {
    let out = atrium(&["gen", "--set", "dataset.trian_cases=3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.trian_cases"), "{err}");
}

#[test]
fn invalid_value_fails_naming_the_key() {
    let out = atrium(&["train", "--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let pred = dir.path().join("pred");
    let data_set = format!("paths.data={}", data.display());
    let common = |cmd: &str, out: &Path| -> Vec<String> {
        let mut v: Vec<String> = vec![
            cmd.into(),
            "--out".into(),
            out.display().to_string(),
            "--set".into(),
            data_set.clone(),
        ];
        v.extend(SMALL_DATA.iter().chain(&SMALL_NET).map(|s| s.to_string()));
        v
    };
    let call = |args: Vec<String>| ok(atrium(&args.iter().map(String::as_str).collect::<Vec<_>>()));

    call(common("gen", &data));
    call(common("train", &run));
    assert!(run.join("level0.ckpt.json").exists());
    assert!(run.join("level0.log.csv").exists());
    call(common("refine", &run));
    assert!(run.join("level2.ckpt.json").exists());

    let image = data.join("case002_image.hdr");
    let mut args = common("predict", &pred);
    args.push(image.display().to_string());
    args.extend([
        "--set".into(),
        format!(
            "paths.checkpoints=[\"{}\",\"{}\"]",
            run.join("level0.ckpt.json").display(),
            run.join("level1.ckpt.json").display()
        ),
    ]);
    call(args);
    for suffix in ["prob", "tm", "pred"] {
        assert!(pred.join(format!("case002_{suffix}.hdr")).exists(), "{suffix}");
    }

    let mut args = common("eval", &pred);
    args.extend(["--pred".into(), pred.display().to_string()]);
    let table = call(args);
    assert!(
        table.starts_with("case_id,dice,conform,jaccard,adb_mm,hdb_mm,degenerate"),
        "{table}"
    );
    assert!(table.contains("case002,"));
    assert!(pred.join("metrics.json").exists());

    let mut args = common("roi", &run);
    args.push(image.display().to_string());
    let roi: Vec<usize> = call(args).split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(roi.len(), 6);
    assert!((0..3).all(|a| roi[a] < roi[a + 3] && roi[a + 3] <= 32));
}
