use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use hicontrast::fine_grid::StepRecord;
use hicontrast::harness::{Config, ConvergenceRow, DiagnosticRow};
use hicontrast::io::{
    read_csv, read_environment, read_field, read_mode_basis, read_state, BandRow, CsvRow, ModeRow,
};
use hicontrast::projection::NormGapRow;

const SMALL: &str = r#"
[environment]
lattice_size = 4
p = 0.2
seed = 3
volume_cap = 2

[discretization]
sub_resolution = 4
coarse_grid = 16
modes = 4

[convergence]
eps_list = [0.25, 0.125]
t = 0.01
tau_fine = 0.005
tau_limit = 0.005

[diagnostics]
eps_list = [0.25, 0.125]
"#;

fn hicontrast(config: &Path, out: &Path, command: &str) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_hicontrast"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg(command)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    status.code().unwrap()
}

fn check_csv<R: CsvRow>(path: &Path, hash: &str) -> Vec<Vec<String>> {
    let (header, file_hash, rows) = read_csv(path).unwrap();
    assert_eq!(header, R::HEADER, "{}", path.display());
    assert!(!rows.is_empty(), "{} is empty", path.display());
    assert_eq!(file_hash.as_deref(), Some(hash));
    let raw = fs::read_to_string(path).unwrap();
    assert!(raw.starts_with("config_hash,"));
    assert!(raw.lines().skip(1).all(|l| l.starts_with(hash)));
    rows
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");
    let hash = Config::from_toml(SMALL).unwrap().hash();

    assert_eq!(hicontrast(&config, &out, "gen-env"), 0);
    let (env, catalog, manifest) = read_environment(&out).unwrap();
    assert_eq!(manifest.seed, 3);
    assert_eq!(env.lattice_size, 4);
    assert_eq!(
        manifest.catalog().unwrap().domains.len(),
        catalog.domains.len()
    );

    assert_eq!(hicontrast(&config, &out, "modes"), 0);
    check_csv::<ModeRow>(&out.join("modes.csv"), &hash);
    for (j, d) in catalog.domains.iter().enumerate() {
        let b = read_mode_basis(&out.join(format!("modes/domain_{j}")), d).unwrap();
        assert_eq!(b.len(), 4);
    }

    assert_eq!(hicontrast(&config, &out, "theta"), 0);
    let theta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("theta.json")).unwrap()).unwrap();
    assert!(theta["theta"].is_array());

    assert_eq!(hicontrast(&config, &out, "solve-fine"), 0);
    for n in [16, 32] {
        let field = read_field(&out.join(format!("fine_n{n}"))).unwrap();
        assert_eq!(field.values.len(), n * n);
        let log = check_csv::<StepRecord>(&out.join(format!("fine_n{n}_log.csv")), &hash);
        assert_eq!(log.len(), 3);
    }

    assert_eq!(hicontrast(&config, &out, "solve-limit"), 0);
    let (state, meta) = read_state(&out.join("limit_state")).unwrap();
    assert_eq!(state.n(), 16);
    assert_eq!(
        meta.blocks.len(),
        state.c.iter().map(Vec::len).sum::<usize>()
    );
    check_csv::<StepRecord>(&out.join("limit_log.csv"), &hash);

    let code = hicontrast(&config, &out, "compare");
    assert!(code == 0 || code == 1);
    let rows = check_csv::<ConvergenceRow>(&out.join("convergence.csv"), &hash);
    assert_eq!(rows.len(), 4);
    check_csv::<NormGapRow>(&out.join("norm_gap.csv"), &hash);

    assert_eq!(hicontrast(&config, &out, "spectrum"), 0);
    let bands = check_csv::<BandRow>(&out.join("bands.csv"), &hash);
    assert_eq!(
        (bands[0][0].as_str(), bands[0][2].as_str()),
        ("0.0", "band")
    );
    assert!(bands.iter().any(|r| r[2] == "point"));

    let code = hicontrast(&config, &out, "diagnostics");
    assert!(code == 0 || code == 1);
    check_csv::<DiagnosticRow>(&out.join("diagnostics.csv"), &hash);

    for command in [
        "gen-env",
        "modes",
        "theta",
        "solve-fine",
        "solve-limit",
        "compare",
        "spectrum",
    ] {
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join(format!("{command}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["config_hash"], hash.as_str());
    }
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(hicontrast(&config, out, "spectrum"), 0);
        assert_eq!(hicontrast(&config, out, "solve-limit"), 0);
    }
    for file in [
        "bands.csv",
        "limit_state.bin",
        "limit_state.json",
        "limit_log.csv",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[environment]\np = -0.5\n").unwrap();
    assert_eq!(hicontrast(&bad, &out, "theta"), 2);
    fs::write(&bad, "[environment]\nunknown_key = 1\n").unwrap();
    assert_eq!(hicontrast(&bad, &out, "theta"), 2);
    assert_eq!(
        hicontrast(&dir.path().join("missing.toml"), &out, "theta"),
        2
    );
}
