use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moesl_core::fitting::PlantedCurve;
use moesl_core::intrinsic_dim::{read_embeddings, EmbeddingFormat};
use moesl_core::numeric::logspace;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn moesl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesl"))
        .args(args)
        .env_remove("MOESL_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn summary(csv: &str, key: &str) -> f64 {
    let prefix = format!("# {key}=");
    csv.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} in\n{csv}"))
        .parse()
        .unwrap()
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let plane = data("plane_r20.bin");
    let cases: Vec<Vec<&str>> = vec![
        vec!["exponents"],
        vec!["optimal-k", "--sweep", "30"],
        vec!["lipschitz", "--trials", "20000"],
        vec!["lipschitz", "--stability", "--trials", "8"],
        vec![
            "id-estimate",
            plane.to_str().unwrap(),
            "--size",
            "300",
            "--subsamples",
            "3",
        ],
    ];
    for (i, args) in cases.iter().enumerate() {
        let mut files = Vec::new();
        for run in 0..2 {
            let path = dir.path().join(format!("{i}_{run}.csv"));
            let mut full = args.clone();
            full.extend(["--seed", "7", "--out", path.to_str().unwrap()]);
            let out = moesl(&full);
            assert!(out.status.success(), "{args:?}: {}", stderr(&out));
            assert!(out.stdout.is_empty());
            files.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(files[0], files[1], "{args:?}");
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let plane = data("plane_r20.bin");
    let args = [
        "id-estimate",
        plane.to_str().unwrap(),
        "--size",
        "300",
        "--subsamples",
        "4",
    ];
    let single = Command::new(env!("CARGO_BIN_EXE_moesl"))
        .args(args)
        .env("MOESL_THREADS", "1")
        .output()
        .unwrap();
    assert!(single.status.success());
    assert_eq!(single.stdout, moesl(&args).stdout);

    let bad = Command::new(env!("CARGO_BIN_EXE_moesl"))
        .args(["exponents"])
        .env("MOESL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn provenance_line_tracks_parameters() {
    let a = stdout(&moesl(&["exponents", "--d", "8", "--beta", "1"]));
    let b = stdout(&moesl(&[
        "exponents",
        "--d",
        "8",
        "--beta",
        "1",
        "--seed",
        "1",
    ]));
    let first = |s: &str| s.lines().next().unwrap().to_string();
    assert!(first(&a).starts_with("# moesl exponents config_sha256="));
    assert_eq!(
        first(&a).len(),
        "# moesl exponents config_sha256=".len() + 64
    );
    assert_ne!(first(&a), first(&b));
    // d = 2 beta gives alpha_N = 1 and alpha_D = 1/2
    let row = stdout(&moesl(&["exponents", "--d", "4", "--beta", "2"]));
    assert_eq!(
        row.lines().nth(2).unwrap(),
        "4,2,1,0.5,0.3333333333333333,0.5"
    );
}

#[test]
fn binary_and_csv_embeddings_give_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let bin = data("plane_r20.bin");
    let set = read_embeddings(&bin, EmbeddingFormat::Binary).unwrap();
    let mut text = String::new();
    for i in 0..set.len() {
        let row: Vec<String> = set.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let csv = dir.path().join("plane.csv");
    std::fs::write(&csv, text).unwrap();
    let common = ["--size", "400", "--subsamples", "3"];
    let run = |path: &Path, fmt: &str| {
        let mut args = vec!["id-estimate", path.to_str().unwrap(), "--format", fmt];
        args.extend(common);
        let out = moesl(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        out.stdout
    };
    let reference = run(&bin, "bin");
    assert_eq!(reference, run(&csv, "csv"));
    assert_eq!(reference, run(&bin, "auto"));
    assert_eq!(reference, run(&csv, "auto"));
}

#[test]
fn bundled_plane_has_dimension_two() {
    let out = stdout(&moesl(&[
        "id-estimate",
        data("plane_r20.bin").to_str().unwrap(),
    ]));
    let median = summary(&out, "median");
    assert!((median - 2.0).abs() < 0.3, "{median}");
    assert_eq!(summary(&out, "ambient_dim"), 20.0);
}

#[test]
fn truncated_binary_is_a_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(data("plane_r20.bin")).unwrap();
    bytes.truncate(bytes.len() - 3);
    let path = dir.path().join("cut.bin");
    std::fs::write(&path, bytes).unwrap();
    let p = path.to_str().unwrap();

    let explicit = moesl(&["id-estimate", p, "--format", "bin"]);
    assert_eq!(explicit.status.code(), Some(1));
    assert!(
        stderr(&explicit).contains("length mismatch"),
        "{}",
        stderr(&explicit)
    );

    let auto = moesl(&["id-estimate", p]);
    assert_eq!(auto.status.code(), Some(1));
    let msg = stderr(&auto);
    assert!(
        msg.contains("length mismatch") && msg.contains("--format"),
        "{msg}"
    );
}

#[test]
fn budget_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "ambient_dim": 16, "seq_len": 4, "emb_dim": 8, "heads": 2, "blocks": 1,
  "experts": 4, "ffn_depth": 2, "ffn_width": 8,
  "weight_bound": 1.0, "output_bound": 1.0, "input_bound": 1.0
}"#,
    )
    .unwrap();
    let out = moesl(&["budget", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("missing field `k`"),
        "{}",
        stderr(&out)
    );
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn minimal_budget_config_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"ambient_dim": 16, "seq_len": 4, "emb_dim": 8, "heads": 2, "blocks": 1,
            "experts": 4, "k": 2, "ffn_depth": 2, "ffn_width": 8,
            "weight_bound": 1.0, "output_bound": 1.0, "input_bound": 1.0}"#,
    )
    .unwrap();
    let out = stdout(&moesl(&["budget", path.to_str().unwrap()]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    // 4·8² attention + 2 experts of (2·8·8 + 8 + 8)
    let cells: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&cells[..6], &["0", "1", "8", "256", "144", "544"]);
}

#[test]
fn fit_recovers_planted_curves_and_pairs_axes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, exponent: f64| {
        let curve = PlantedCurve {
            exponent,
            prefactor: 2.0,
            floor: 0.5,
            xs: logspace(1e3, 1e7, 12),
            noise: 0.0,
        }
        .sample(0)
        .unwrap();
        let mut text = String::from("x,loss\n");
        for (x, l) in curve.points() {
            text.push_str(&format!("{x},{l}\n"));
        }
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let model = write("model.csv", 0.3);
    let data = write("data.csv", 0.25);
    let out = moesl(&[
        "fit",
        model.to_str().unwrap(),
        "--companion",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(2)
        .take(2)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows[0][0], "model");
    assert_eq!(rows[1][0], "data");
    let a_n: f64 = rows[0][1].parse().unwrap();
    let a_d: f64 = rows[1][1].parse().unwrap();
    assert!(
        (a_n - 0.3).abs() < 3e-4 && (a_d - 0.25).abs() < 2.5e-4,
        "{a_n} {a_d}"
    );
    let pred = summary(&text, "alpha_D_pred");
    assert!((pred - a_n / (1.0 + a_n)).abs() < 1e-12);
    assert!((summary(&text, "r_D") - (a_d - pred)).abs() < 1e-12);
}

#[test]
fn fit_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single.csv");
    std::fs::write(&single, "x\n1\n2\n3\n4\n").unwrap();
    let out = moesl(&["fit", single.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("x,loss"), "{}", stderr(&out));

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "x,loss\n1,2\n2,1.5\n").unwrap();
    assert_eq!(
        moesl(&["fit", short.to_str().unwrap()]).status.code(),
        Some(1)
    );

    let missing = moesl(&["fit", dir.path().join("nope.csv").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn fit_per_expert_matches_the_subcommand() {
    let path = data("per_expert_exponents.csv");
    let via_fit = stdout(&moesl(&["fit", path.to_str().unwrap(), "--per-expert"]));
    let direct = stdout(&moesl(&["per-expert", path.to_str().unwrap()]));
    let bundled = stdout(&moesl(&["per-expert"]));
    let body = |s: &str| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&via_fit), body(&direct));
    assert_eq!(body(&direct), body(&bundled));
}

#[test]
fn routing_example_counts() {
    let out = stdout(&moesl(&[
        "routing", "--M", "8", "--k", "2", "--blocks", "1", "--tokens", "2",
    ]));
    let cells: Vec<String> = out
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .map(String::from)
        .collect();
    assert_eq!(cells[4], "784");
    let bound: f64 = cells[6].parse().unwrap();
    assert!((bound - 9.545).abs() < 5e-4);
    assert_eq!(cells[7], "784");
}

#[test]
fn contract_violations_exit_nonzero_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.csv");
    let out = moesl(&[
        "optimal-k",
        "--sweep",
        "10",
        "--min-agreement",
        "1.5",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(moesl_cli::EXIT_VIOLATION));
    assert!(stderr(&out).contains("contract violation"));
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .contains("agreement_rate"));

    let tight = moesl(&["compute-optimal", "--sweep", "5", "--tolerance", "0"]);
    assert_eq!(tight.status.code(), Some(moesl_cli::EXIT_VIOLATION));
}

#[test]
fn usage_errors() {
    assert_eq!(
        moesl(&["exponents", "--d", "1,2", "--beta", "1,2,3"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(moesl(&["exponents", "--d", "0.5"]).status.code(), Some(1));
    // clap rejects missing single-run arguments itself
    assert!(!moesl(&["optimal-k", "--n", "1e6"]).status.success());
    assert!(!moesl(&["approx-rate", "--target", "cosh"]).status.success());
}

#[test]
fn stability_accepts_a_model_file() {
    use moesl_core::moe_forward::{small_config, write_model, MoEModel};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = MoEModel::random(&small_config(), 3).unwrap();
    write_model(&model, std::fs::File::create(&path).unwrap()).unwrap();
    let from_file = moesl(&[
        "lipschitz",
        "--stability",
        "--model",
        path.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    let seeded = moesl(&["lipschitz", "--stability", "--seed", "3"]);
    let body = |o: &Output| stdout(o).lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&from_file), body(&seeded));
}
