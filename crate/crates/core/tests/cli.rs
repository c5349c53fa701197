use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ghostvlad::descriptor::{decode_gvd1, encode_gvd1, Descriptor, ExampleRecord, QualityTag, SourceKind};
use ghostvlad::model::TIMESTAMP_RANGE;

const SMALL: [&str; 12] = [
    "--set",
    "corpus.identities=6",
    "--set",
    "corpus.per_identity=12",
    "--set",
    "corpus.dim=8",
    "--set",
    "model.clusters=2",
    "--set",
    "model.out_dim=6",
    "--set",
    "train.set_size=2",
];

fn ghostvlad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostvlad")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = ghostvlad(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

/// Generates a small corpus and an initialized model; returns their paths.
fn setup(dir: &Path) -> (String, String) {
    let (data, model) = (path(dir, "data.gvd"), path(dir, "init.gvm"));
    ok(&with_small(&["gen", "--out", &data]));
    ok(&with_small(&["init", "--data", &data, "--out", &model]));
    (data, model)
}

fn error_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr.trim_end().to_string()
}

fn embedding(subject: u32, id: u32, v: &[f64]) -> ExampleRecord {
    ExampleRecord {
        descriptor: Descriptor::from_raw(v.to_vec()),
        identity: subject,
        media_id: id,
        source_kind: SourceKind::Still,
        quality_tag: QualityTag::Clean,
    }
}

#[test]
fn eval_emits_the_hand_computed_roc() {
    let dir = tempfile::tempdir().unwrap();
    // genuine scores {0.8, 0.8}; impostor scores {0, 0.6, 0.6, 0.96}
    let records = [
        embedding(0, 10, &[1.0, 0.0]),
        embedding(0, 11, &[0.8, 0.6]),
        embedding(1, 20, &[0.0, 1.0]),
        embedding(1, 21, &[0.6, 0.8]),
    ];
    let file = dir.path().join("emb.gvd");
    fs::write(&file, encode_gvd1(2, &records).unwrap()).unwrap();
    let out = path(dir.path(), "eval");
    ok(&["eval", "--embeddings", file.to_str().unwrap(), "--out-dir", &out]);
    let roc = fs::read_to_string(dir.path().join("eval/roc.csv")).unwrap();
    assert_eq!(roc, "# kind=roc\nx,y\n0,0\n0.25,0\n0.25,1\n0.75,1\n1,1\n");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["genuine_pairs"], 2);
    assert_eq!(summary["impostor_pairs"], 4);
    assert_eq!(summary["gallery"], 1);
    // FAR 0.1 admits no impostor: genuine scores above 0.96 are none
    assert_eq!(summary["tar_at_far"][4]["value"], 0.0);

    // explicit protocol restricting pairs and roles
    let protocol = dir.path().join("protocol.json");
    fs::write(&protocol, r#"{"pairs": [[10, 11], [10, 20]], "gallery": [10, 20], "probes": [11, 21]}"#).unwrap();
    let out = path(dir.path(), "eval2");
    ok(&["eval", "--embeddings", file.to_str().unwrap(), "--protocol", protocol.to_str().unwrap(), "--out-dir", &out]);
    let roc = fs::read_to_string(dir.path().join("eval2/roc.csv")).unwrap();
    assert_eq!(roc, "# kind=roc\nx,y\n0,0\n0,1\n1,1\n");
    let cmc = fs::read_to_string(dir.path().join("eval2/cmc.csv")).unwrap();
    assert_eq!(cmc, "# kind=cmc\nx,y\n1,1\n2,1\n");
}

#[test]
fn zero_epoch_training_copies_the_model_except_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let out = path(dir.path(), "same.gvm");
    let mut args = with_small(&["train", "--data", &data, "--model", &model, "--out", &out]);
    args.extend(["--set", "train.stage2_epochs=0", "--set", "train.stage3_epochs=0"]);
    ok(&args);
    let (a, b) = (fs::read(&model).unwrap(), fs::read(&out).unwrap());
    assert_eq!(a.len(), b.len());
    let strip = |v: &[u8]| [&v[..TIMESTAMP_RANGE.start], &v[TIMESTAMP_RANGE.end..]].concat();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn training_writes_log_and_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let (out, log) = (path(dir.path(), "trained.gvm"), path(dir.path(), "log.csv"));
    let mut args = with_small(&["train", "--data", &data, "--model", &model, "--out", &out, "--log", &log]);
    args.extend(["--set", "train.stage2_epochs=1", "--set", "train.stage3_epochs=2"]);
    ok(&args);
    let log = fs::read_to_string(log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,stage,lr,train_loss,val_tar_far2");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[4].starts_with("3,3,"));
    assert!(ghostvlad::model::read_model(Path::new(&out)).is_ok());
}

#[test]
fn protocol_templates_are_embedded_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let protocol = dir.path().join("templates.jsonl");
    // identity i owns media ids 12*i .. 12*i+11 in the generated corpus
    fs::write(
        &protocol,
        concat!(
            "{\"template_id\":7,\"subject\":0,\"media\":[{\"media_id\":0,\"kind\":\"still\"},{\"media_id\":3,\"kind\":\"still\"}]}\n",
            "\n",
            "{\"template_id\":42,\"subject\":2,\"media\":[{\"media_id\":25,\"kind\":\"still\"}]}\n",
        ),
    )
    .unwrap();
    let out = path(dir.path(), "emb.gvd");
    ok(&["embed", "--data", &data, "--model", &model, "--protocol", protocol.to_str().unwrap(), "--out", &out]);
    let (dim, records) = decode_gvd1(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(dim, 6);
    let keys: Vec<(u32, u32)> = records.iter().map(|r| (r.media_id, r.identity)).collect();
    assert_eq!(keys, vec![(7, 0), (42, 2)]);
    for r in &records {
        let n: f64 = r.descriptor.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    fs::write(&protocol, "{\"template_id\":1,\"subject\":0,\"media\":[{\"media_id\":0,\"kind\":\"video\"}]}\n").unwrap();
    let line = error_line(&ghostvlad(&[
        "embed", "--data", &data, "--model", &model, "--protocol", protocol.to_str().unwrap(), "--out", &out,
    ]));
    assert!(line.starts_with("error kind=FormatError msg=\"format error at line 1"), "{line}");
}

#[test]
fn contributions_cover_every_example() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let out = path(dir.path(), "contrib.csv");
    ok(&with_small(&["contrib", "--data", &data, "--model", &model, "--out", &out]));
    let csv = fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("template_id,example_idx,quality_tag,relative_contribution"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6 * 12);
    assert!(rows.iter().all(|r| r[2] == "clean" || r[2] == "degraded"));
    let values: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    // one template per identity per split, each with a maximal example
    assert_eq!(values.iter().filter(|&&v| v == 1.0).count(), 12);
}

#[test]
fn ablation_reports_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "clusters = [2]\nghosts = [0, 1]\nset_size = [2]\nout_dim = [4, 6]\n").unwrap();
    let out = path(dir.path(), "ablation");
    let mut args = with_small(&["ablate", "--data", &data, "--grid", grid.to_str().unwrap(), "--out-dir", &out]);
    args.extend(["--set", "train.stage2_epochs=1", "--set", "train.stage3_epochs=1", "--set", "split.val_template_size=1"]);
    ok(&args);
    let table = fs::read_to_string(dir.path().join("ablation/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("clusters,ghosts,set_size,out_dim,final_loss,tar_far_1e-5"));
    assert_eq!(&lines[1..].iter().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect::<Vec<_>>(), &[
        "2,0,2,4", "2,0,2,6", "2,1,2,4", "2,1,2,6"
    ]);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let config: PathBuf = dir.path().join("exp.toml");
    fs::write(&config, "[corpus]\nidentities = 4\nper_identity = 5\ndim = 6\n").unwrap();
    let data = path(dir.path(), "d.jsonl");
    ok(&["gen", "--config", config.to_str().unwrap(), "--set", "corpus.per_identity=3", "--out", &data]);
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("{\"format\":\"gvd-jsonl\",\"d_f\":6"));
    assert_eq!(text.lines().count(), 1 + 4 * 3);

    fs::write(&config, "[corpus]\nidentitees = 4\n").unwrap();
    let line = error_line(&ghostvlad(&["gen", "--config", config.to_str().unwrap(), "--out", &data]));
    assert!(line.starts_with("error kind=ConfigError msg=\""), "{line}");
}

#[test]
fn failures_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let out = path(dir.path(), "x");

    // a model file is not a dataset
    let line = error_line(&ghostvlad(&["init", "--data", &model, "--out", &out]));
    assert!(line.starts_with("error kind=FormatError msg=\""), "{line}");
    // a dataset is not a model
    let line = error_line(&ghostvlad(&["embed", "--data", &data, "--model", &data, "--out", &out]));
    assert!(line.starts_with("error kind=FormatError msg=\"format error at byte 0"), "{line}");
    let line = error_line(&ghostvlad(&["eval", "--embeddings", &path(dir.path(), "missing"), "--out-dir", &out]));
    assert!(line.starts_with("error kind=IoError"), "{line}");
    let line = error_line(&ghostvlad(&["gen", "--out", &out, "--set", "corpus.identities=1"]));
    assert!(line.starts_with("error kind=InvalidSpec"), "{line}");
    let line = error_line(&ghostvlad(&["frobnicate"]));
    assert!(line.starts_with("error kind=UsageError"), "{line}");
}

#[test]
fn shipped_toy_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml");
    let cfg = ghostvlad::cli::ExperimentConfig::load(Some(&path), &[]).unwrap();
    assert_eq!((cfg.model.clusters, cfg.model.ghosts, cfg.model.out_dim), (4, 1, 16));
    assert_eq!(cfg.train.set_size, 3);
    assert_eq!(cfg.corpus.identities, 30);
}
