//! End-to-end command behavior: exit codes, determinism, validation
//! errors, and the MDS recovery path on hand-built checkpoints.

use std::fs;
use std::path::Path;
use std::process::Command;

use agedapt::data::{save_embeddings, Domain, Example};
use agedapt::model::{AdaptLayerSet, Mode, ModelAssembly, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agedapt"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const SMALL_SYNTH: &str = "\
[data]
kind = \"synthetic\"
n_source = 48
n_target = 48

[train]
variant = \"source_only\"
epochs = 3
pretrain_epochs = 0
";

#[test]
fn generate_is_deterministic_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(&cfg, SMALL_SYNTH);
    for out in ["g1", "g2"] {
        let status = bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let s1 = fs::read(dir.path().join("g1/source.csv")).unwrap();
    let s2 = fs::read(dir.path().join("g2/source.csv")).unwrap();
    assert_eq!(s1, s2);
    let t1 = fs::read(dir.path().join("g1/target.csv")).unwrap();
    let t2 = fs::read(dir.path().join("g2/target.csv")).unwrap();
    assert_eq!(t1, t2);
    let rows = String::from_utf8(s1).unwrap().lines().count();
    assert_eq!(rows, 49); // header + 48
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();

    // 0: success
    let cfg = dir.path().join("ok.toml");
    write(&cfg, SMALL_SYNTH);
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // 2: config validation (unknown key)
    let bad = dir.path().join("bad.toml");
    write(&bad, "[data]\nkind = \"synthetic\"\nwat = 3\n");
    let status = bin().args(["train", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    // 2: config validation (zero examples)
    let zero = dir.path().join("zero.toml");
    write(&zero, "[data]\nkind = \"synthetic\"\nn_source = 0\n");
    let status = bin()
        .args(["generate", "--config"])
        .arg(&zero)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // 3: data failure (missing file, error names the path)
    let missing = dir.path().join("missing.toml");
    write(
        &missing,
        "[data]\nkind = \"files\"\nsource_path = \"no_such.csv\"\ntarget_path = \"no2.csv\"\n",
    );
    let output = bin()
        .args(["train", "--config"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("no_such.csv"));

    // 1: unreadable config path is an I/O failure, distinct from invalid config
    let status = bin()
        .args(["train", "--config", "definitely_not_here.toml"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn train_twice_writes_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(&cfg, SMALL_SYNTH);
    for out in ["r1", "r2"] {
        let status = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["metrics.csv", "metrics.txt", "checkpoint.txt"] {
        let a = fs::read(dir.path().join("r1").join(file)).unwrap();
        let b = fs::read(dir.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn train_from_generated_files_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = dir.path().join("gen.toml");
    write(&gen_cfg, SMALL_SYNTH);
    assert!(bin()
        .args(["generate", "--config"])
        .arg(&gen_cfg)
        .args(["--out"])
        .arg(dir.path())
        .status()
        .unwrap()
        .success());
    let train_cfg = dir.path().join("train.toml");
    write(
        &train_cfg,
        &format!(
            "[data]\nkind = \"files\"\nsource_path = {:?}\ntarget_path = {:?}\n[train]\nvariant = \"source_only\"\nepochs = 2\npretrain_epochs = 0\n",
            dir.path().join("source.csv"),
            dir.path().join("target.csv"),
        ),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&train_cfg)
        .args(["--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("run/metrics.csv").exists());
}

#[test]
fn grid_with_empty_variants_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    write(
        &cfg,
        "[data]\nkind = \"synthetic\"\nn_source = 48\nn_target = 48\n[grid]\nvariants = []\n",
    );
    let status = bin().args(["grid", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn grid_repeated_invocation_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    write(
        &cfg,
        "[data]\nkind = \"synthetic\"\nn_source = 48\nn_target = 48\n\
         [train]\nepochs = 2\npretrain_epochs = 1\n\
         [grid]\nvariants = [\"dann\"]\ngammas = [0.1, 1.0]\nlayer_sets = [\"none\", \"fc1\"]\n",
    );
    for out in ["a", "b"] {
        let status = bin()
            .args(["grid", "--config"])
            .arg(&cfg)
            .args(["--jobs", "2", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a/grid.csv")).unwrap();
    let b = fs::read(dir.path().join("b/grid.csv")).unwrap();
    assert_eq!(a, b);
    // none-row collapses the gamma axis: 1 + 2 rows + header
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

/// Builds a pairwise assembly whose difference output is exactly
/// `a[0] - b[0]`: a ReLU pair computes the positive and negative parts in
/// the trunk, passthrough units carry them to the output.
fn oracle_checkpoint(feature_dim: usize) -> ModelAssembly {
    let mut model = ModelAssembly::build(&ModelConfig {
        feature_dim,
        mode: Mode::Pairwise,
        rank_head: false,
        discriminator_for: None,
        normalization: None,
        seed: 0,
    })
    .unwrap();
    for v in model.trunk.params.values_mut() {
        *v = 0.0;
    }
    for v in model.regression.params.values_mut() {
        *v = 0.0;
    }
    let in_dim = 2 * feature_dim;
    // trunk unit 0: relu(a0 - b0); unit 1: relu(b0 - a0)
    model.trunk.params.layers[0].weights[0] = 1.0;
    model.trunk.params.layers[0].weights[feature_dim] = -1.0;
    model.trunk.params.layers[0].weights[in_dim] = -1.0;
    model.trunk.params.layers[0].weights[in_dim + feature_dim] = 1.0;
    // fc1..fc3 passthrough of units 0 and 1 (nonnegative, so ReLU is exact)
    let widths = [64usize, 32, 16];
    for (layer, &in_w) in model.regression.params.layers[..3].iter_mut().zip(&widths) {
        layer.weights[0] = 1.0;
        layer.weights[in_w + 1] = 1.0;
    }
    // out = fc3[0] - fc3[1]
    model.regression.params.layers[3].weights[0] = 1.0;
    model.regression.params.layers[3].weights[1] = -1.0;
    model
}

fn age_embedding_examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let age = 3.0 + 97.0 * (i as f64) / (n as f64);
            Example {
                id: format!("t{i:03}"),
                domain: Domain::Target,
                features: vec![age, 1.0],
                age: Some(age),
            }
        })
        .collect()
}

#[test]
fn mds_with_oracle_checkpoint_recovers_ages() {
    let dir = tempfile::tempdir().unwrap();
    let model = oracle_checkpoint(2);
    // sanity: the construction computes exact differences
    let (d, _) = model.predict_pair(&[30.0, 1.0], &[12.0, 1.0]).unwrap();
    assert!((d - 18.0).abs() < 1e-12);

    let checkpoint = dir.path().join("oracle.txt");
    model.save_checkpoint(&checkpoint).unwrap();
    let examples = age_embedding_examples(20);
    let data = dir.path().join("items.csv");
    save_embeddings(&data, &examples).unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[data]\nkind = \"synthetic\"\nn_source = 48\nn_target = 48\n",
    );

    let anchors = format!(
        "{}={},{}={}",
        examples[0].id,
        examples[0].age.unwrap(),
        examples[10].id,
        examples[10].age.unwrap()
    );
    let output = bin()
        .args(["mds", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(&checkpoint)
        .args(["--data"])
        .arg(&data)
        .args(["--anchors", &anchors, "--out"])
        .arg(dir.path().join("mds_out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let mae_line = stdout
        .lines()
        .find(|l| l.contains("target MAE excluding anchors"))
        .expect("MAE line printed");
    let mae: f64 = mae_line
        .split_whitespace()
        .find_map(|t| t.parse().ok())
        .unwrap();
    assert!(mae < 0.1, "oracle MDS MAE {mae}");
    assert!(dir.path().join("mds_out/recovered_ages.csv").exists());
}

#[test]
fn mds_surfaces_degenerate_anchor_error() {
    let dir = tempfile::tempdir().unwrap();
    // all-zero model predicts zero differences; the embedding collapses
    let mut model = oracle_checkpoint(2);
    for v in model.trunk.params.values_mut() {
        *v = 0.0;
    }
    let checkpoint = dir.path().join("zero.txt");
    model.save_checkpoint(&checkpoint).unwrap();
    let examples = age_embedding_examples(10);
    let data = dir.path().join("items.csv");
    save_embeddings(&data, &examples).unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[data]\nkind = \"synthetic\"\nn_source = 48\nn_target = 48\n",
    );
    let output = bin()
        .args(["mds", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(&checkpoint)
        .args(["--data"])
        .arg(&data)
        .args(["--anchors", "t000=3,t005=50", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&output.stderr).contains("degenerate anchors"));
}

#[test]
fn mds_rejects_single_mode_checkpoint_and_unknown_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let single = ModelAssembly::build(&ModelConfig {
        feature_dim: 2,
        mode: Mode::Single,
        rank_head: false,
        discriminator_for: None,
        normalization: None,
        seed: 0,
    })
    .unwrap();
    let checkpoint = dir.path().join("single.txt");
    single.save_checkpoint(&checkpoint).unwrap();
    let examples = age_embedding_examples(5);
    let data = dir.path().join("items.csv");
    save_embeddings(&data, &examples).unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[data]\nkind = \"synthetic\"\nn_source = 48\nn_target = 48\n",
    );
    let output = bin()
        .args(["mds", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(&checkpoint)
        .args(["--data"])
        .arg(&data)
        .args(["--anchors", "t000=3,t004=80"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("pairwise"));

    // unknown anchor id on a valid pairwise checkpoint
    let pairwise = oracle_checkpoint(2);
    let ck2 = dir.path().join("pair.txt");
    pairwise.save_checkpoint(&ck2).unwrap();
    let output = bin()
        .args(["mds", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(&ck2)
        .args(["--data"])
        .arg(&data)
        .args(["--anchors", "nope=3,t004=80"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("nope"));
}

#[test]
fn adapt_layer_sets_parse_from_grid_labels() {
    // spot check that the CLI layer labels match the model's contract
    let set = AdaptLayerSet::new(["conv_proxy", "fc1", "fc2", "fc3"]).unwrap();
    assert_eq!(set.label(), "conv_proxy+fc1+fc2+fc3");
}
